"""Fixed-length feature rows from traces, sampled in a window that ends X seconds before an anchor."""
from __future__ import annotations

import io
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .dataset import Dataset, PathRecord
from .sim import SimTrace, wrap_angle
from .util import canonical_json, sha256_text


PAIRS = (("ego", "adv"), ("ego", "ind_adv"), ("adv", "ind_adv"))
VEHICLE_ORDER = ("ego", "adv", "ind_adv")
FEATURE_SCHEMA = tuple(
    [f"{a}_{b}_{q}" for a, b in PAIRS for q in ("distance", "angle")]
    + [f"{v}_{q}_{ax}" for v in VEHICLE_ORDER for q in ("vel", "accel", "ang_vel") for ax in "xyz"]
)
N_FEATURES = len(FEATURE_SCHEMA)
SCHEMA_DIGEST = sha256_text(",".join(FEATURE_SCHEMA))[:16]
REFERENCE_ANCHOR_OFFSET = 1.0
_TIME_TOL = 1e-6


class WindowOutOfRangeError(ValueError):
    pass


class FeatureExtractionError(ValueError):
    def __init__(self, record_id, cause):
        super().__init__(f"{record_id}: {cause}")
        self.record_id = record_id


@dataclass(frozen=True)
class WindowSpec:
    X: float
    Y: float
    R: float

    def __post_init__(self):
        if not (math.isfinite(self.X) and self.X >= 0):
            raise ValueError("X must be a non-negative number of seconds")
        if not self.Y > 0 or not self.R > 0:
            raise ValueError("Y and R must be positive")
        ratio = self.Y / self.R
        if abs(ratio - round(ratio)) > 1e-9:
            raise ValueError(f"Y/R must be an integer, got {ratio}")

    @property
    def n_samples(self) -> int:
        return int(round(self.Y / self.R)) + 1

    @property
    def row_length(self) -> int:
        return N_FEATURES * self.n_samples

    def sample_times(self, anchor: float) -> np.ndarray:
        start = anchor - self.X - self.Y
        return start + self.R * np.arange(self.n_samples)

    def column_names(self) -> list[str]:
        return [f"{name}_{j}" for j in range(self.n_samples) for name in FEATURE_SCHEMA]

    def to_record(self) -> dict:
        return {"X": self.X, "Y": self.Y, "R": self.R}


@dataclass(frozen=True, eq=False)
class FeatureRow:
    values: np.ndarray
    label: int
    record_id: str
    anchor: float


def trace_features(trace: SimTrace) -> np.ndarray:
    """Per-timestep schema values, shape (n, 33)."""
    tracks = {v: trace.track(v) for v in VEHICLE_ORDER}
    cols = []
    for a, b in PAIRS:
        ta, tb = tracks[a], tracks[b]
        d = tb.pos - ta.pos
        cols.append(np.hypot(d[:, 0], d[:, 1]))
        cols.append(wrap_angle(np.arctan2(d[:, 1], d[:, 0]) - ta.heading))
    for v in VEHICLE_ORDER:
        tr = tracks[v]
        for q in (tr.vel, tr.acc, tr.angvel):
            cols.extend(q[:, k] for k in range(3))
    return np.column_stack(cols)


def anchor_time(record: PathRecord, pair_context: float | None = None,
                reference_anchor: float | None = None) -> float:
    if record.kind in ("perturbed", "variant-perturbed"):
        if record.trace.t_collision is None:
            raise ValueError(f"{record.id}: colliding record carries no collision time")
        return float(record.trace.t_collision)
    if pair_context is not None:
        return float(pair_context)
    if record.kind == "vanilla" and record.pair_id is not None:
        raise ValueError(f"{record.id}: paired vanilla record needs its pair's collision time")
    if reference_anchor is not None:
        return float(reference_anchor)
    return record.trace.duration - REFERENCE_ANCHOR_OFFSET


def _sample_indices(trace: SimTrace, spec: WindowSpec, anchor: float) -> np.ndarray:
    dt = trace.timestep
    q = spec.R / dt
    if abs(q - round(q)) > 1e-9:
        raise ValueError(f"R={spec.R} is not a multiple of the simulator timestep {dt}")
    times = spec.sample_times(anchor)
    pos = times / dt
    idx = np.round(pos).astype(int)
    if np.any(np.abs(pos - idx) > _TIME_TOL / dt):
        raise ValueError("window sample times fall between simulator ticks")
    if idx[0] < 0 or idx[-1] > len(trace) - 1:
        raise WindowOutOfRangeError(
            f"window-out-of-range: [{times[0]:.3f}, {times[-1]:.3f}] s outside trace [0, {trace.duration:.3f}] s")
    return idx


def extract(record: PathRecord, spec: WindowSpec, anchor: float) -> FeatureRow:
    idx = _sample_indices(record.trace, spec, anchor)
    values = trace_features(record.trace)[idx].reshape(-1)
    if not np.all(np.isfinite(values)):
        raise ValueError(f"{record.id}: non-finite feature values")
    return FeatureRow(values, record.label, record.id, float(anchor))


@dataclass(eq=False)
class FeatureMatrix:
    X: np.ndarray
    y: np.ndarray
    ids: list[str]
    anchors: np.ndarray
    spec: WindowSpec
    kinds: list[str] = field(default_factory=list)
    source_digest: str | None = None

    def __len__(self):
        return len(self.y)

    @property
    def columns(self) -> list[str]:
        return self.spec.column_names()

    @property
    def schema_digest(self) -> str:
        return sha256_text(SCHEMA_DIGEST + canonical_json(self.spec.to_record()))[:16]

    def digest(self) -> str:
        h = sha256_text(self.to_csv())
        return sha256_text(h + canonical_json(self.ids))

    def take(self, rows) -> "FeatureMatrix":
        rows = np.asarray(rows, dtype=int)
        return FeatureMatrix(self.X[rows], self.y[rows], [self.ids[i] for i in rows], self.anchors[rows],
                             self.spec, [self.kinds[i] for i in rows] if self.kinds else [],
                             self.source_digest)

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write(",".join(self.columns + ["label"]) + "\n")
        for row, label in zip(self.X, self.y):
            buf.write(",".join(repr(float(v)) for v in row) + f",{int(label)}\n")
        return buf.getvalue()

    def save(self, path) -> str:
        path = Path(path)
        path.write_text(self.to_csv())
        meta = {"ids": self.ids, "kinds": self.kinds, "anchors": [float(a) for a in self.anchors],
                "spec": self.spec.to_record(), "schema_digest": self.schema_digest,
                "source_digest": self.source_digest, "digest": self.digest()}
        path.with_suffix(".meta.json").write_text(json.dumps(meta, indent=1))
        return meta["digest"]

    @classmethod
    def load(cls, path) -> "FeatureMatrix":
        path = Path(path)
        meta = json.loads(path.with_suffix(".meta.json").read_text())
        spec = WindowSpec(**meta["spec"])
        lines = path.read_text().splitlines()
        if lines[0].split(",") != spec.column_names() + ["label"]:
            raise ValueError(f"{path}: header does not match the window spec")
        rows = np.array([[float(v) for v in line.split(",")] for line in lines[1:] if line.strip()],
                        dtype=float).reshape(-1, spec.row_length + 1)
        return cls(rows[:, :-1], rows[:, -1].astype(int), meta["ids"], np.asarray(meta["anchors"], float),
                   spec, meta.get("kinds", []), meta.get("source_digest"))


def build_matrix(dataset: Dataset, spec: WindowSpec, skip_out_of_range: bool = False,
                 reference_anchor: float | None = None) -> tuple[FeatureMatrix, list[str]]:
    """One row per record in id order. Returns the matrix and the ids skipped for not fitting."""
    rows, skipped = [], []
    for rec in sorted(dataset.records, key=lambda r: r.id):
        try:
            anchor = anchor_time(rec, dataset.contexts.get(rec.id), reference_anchor)
            rows.append((extract(rec, spec, anchor), rec.kind))
        except WindowOutOfRangeError as exc:
            if skip_out_of_range:
                skipped.append(rec.id)
                continue
            raise FeatureExtractionError(rec.id, exc) from exc
        except ValueError as exc:
            raise FeatureExtractionError(rec.id, exc) from exc
    if rows:
        X = np.stack([r.values for r, _ in rows])
    else:
        X = np.zeros((0, spec.row_length))
    return FeatureMatrix(
        X=X,
        y=np.array([r.label for r, _ in rows], dtype=int),
        ids=[r.record_id for r, _ in rows],
        anchors=np.array([r.anchor for r, _ in rows], dtype=float),
        spec=spec,
        kinds=[k for _, k in rows],
        source_digest=dataset.digest,
    ), skipped


def rows_from_trace(trace: SimTrace, spec: WindowSpec, anchors: Sequence[float]) -> np.ndarray:
    feats = trace_features(trace)
    out = []
    for a in anchors:
        out.append(feats[_sample_indices(trace, spec, a)].reshape(-1))
    return np.stack(out) if out else np.zeros((0, spec.row_length))
