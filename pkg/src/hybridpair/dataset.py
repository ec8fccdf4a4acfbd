"""Labeled path archive: core pairs, variants and rudimentary paths."""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable

import numpy as np

from .ce import CEConfig, PairSearchState, SearchExhaustedError, hybrid_pair_search
from .cost import COMBOS, CostWeights, DatasetStats, PairCandidate, path_scalars, raw_distance
from .distributions import HybridParams, HybridPath, sample_path, smooth
from .sim import ScenarioConfig, SimTrace, simulate_batch
from .util import canonical_json, derive_seed, sha256_text

log = logging.getLogger(__name__)

KINDS = ("vanilla", "perturbed", "variant-vanilla", "variant-perturbed", "rudimentary")
POSITIVE_KINDS = ("perturbed", "variant-perturbed")
COLLIDING_KINDS = POSITIVE_KINDS
CLEAR_KINDS = ("vanilla", "variant-vanilla", "rudimentary")
CORE_KINDS = ("vanilla", "perturbed")

VARIANT_BAND = (2.0, 6.0)
VARIANT_BUDGET = 500
VARIANT_BROADEN = 0.5


class ArchiveInvariantError(ValueError):
    pass


@dataclass(eq=False)
class PathRecord:
    id: str
    kind: str
    path: HybridPath
    trace: SimTrace
    ind_path: HybridPath | None = None
    pair_id: str | None = None
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ArchiveInvariantError(f"{self.id}: unknown kind {self.kind!r}")
        if self.kind in COLLIDING_KINDS and not self.trace.collision:
            raise ArchiveInvariantError(f"{self.id}: {self.kind} record without a collision")
        if self.kind in CLEAR_KINDS and self.trace.collision:
            raise ArchiveInvariantError(f"{self.id}: {self.kind} record with a collision")

    @property
    def label(self) -> int:
        return int(self.kind in POSITIVE_KINDS)

    def meta(self) -> dict:
        return {
            "id": self.id,
            "kind": self.kind,
            "label": self.label,
            "pair_id": self.pair_id,
            "seed": self.provenance.get("seed"),
            "iteration": self.provenance.get("iteration"),
            "params_digest": self.provenance.get("params_digest"),
            "path": self.path.to_record(),
            "ind_path": None if self.ind_path is None else self.ind_path.to_record(),
        }

    def digest(self) -> str:
        return sha256_text(canonical_json(self.meta()) + sha256_text(self.trace.to_text()))


class _Welford:
    def __init__(self):
        self.n, self.mean, self.m2 = 0, 0.0, 0.0

    def push(self, x: float):
        self.n += 1
        delta = x - self.mean
        self.mean += delta / self.n
        self.m2 += delta * (x - self.mean)

    def value(self):
        if self.n < 2:
            return None
        return self.mean, math.sqrt(max(self.m2, 0.0) / (self.n - 1))


class Archive:
    def __init__(self):
        self.records: list[PathRecord] = []
        self.pair_params: dict[str, dict] = {}
        self._by_id: dict[str, PathRecord] = {}
        self._acc = {combo: _Welford() for combo in COMBOS}

    def __len__(self):
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def next_id(self) -> str:
        return f"r{len(self.records):06d}"

    def get(self, rid: str) -> PathRecord:
        return self._by_id[rid]

    def add(self, record: PathRecord) -> PathRecord:
        if record.id in self._by_id:
            raise ArchiveInvariantError(f"duplicate record id {record.id}")
        self.records.append(record)
        self._by_id[record.id] = record
        if record.kind in CORE_KINDS:
            loc, acc = path_scalars(record.path)
            self._acc[(record.kind, "location")].push(loc)
            self._acc[(record.kind, "accel")].push(acc)
        return record

    @property
    def stats(self) -> DatasetStats:
        return DatasetStats({combo: acc.value() for combo, acc in self._acc.items()})

    def recompute_stats(self) -> DatasetStats:
        rows = {k: [path_scalars(r.path) for r in self.records if r.kind == k] for k in CORE_KINDS}
        return DatasetStats.from_scalars(rows["vanilla"], rows["perturbed"])

    def by_kind(self, *kinds: str) -> list[PathRecord]:
        return [r for r in self.records if r.kind in kinds]

    def core_pairs(self) -> list[tuple[PathRecord, PathRecord]]:
        pairs = {}
        for r in self.by_kind(*CORE_KINDS):
            pairs.setdefault(r.pair_id, {})[r.kind] = r
        return [(p["vanilla"], p["perturbed"]) for pid, p in sorted(pairs.items())
                if "vanilla" in p and "perturbed" in p]

    def pair_collision_time(self, pair_id: str | None) -> float | None:
        if pair_id is None:
            return None
        for r in self.records:
            if r.pair_id == pair_id and r.kind == "perturbed":
                return r.trace.t_collision
        return None

    def counts(self) -> dict[str, int]:
        return {k: sum(r.kind == k for r in self.records) for k in KINDS}

    # -- persistence --------------------------------------------------------

    def save(self, directory) -> str:
        d = Path(directory)
        (d / "traces").mkdir(parents=True, exist_ok=True)
        lines = []
        for r in self.records:
            text = r.trace.to_text()
            name = f"traces/{sha256_text(text)[:20]}.csv"
            trace_path = d / name
            if not trace_path.exists():
                trace_path.write_text(text)
            meta = r.meta()
            meta["trace_file"] = name
            lines.append(canonical_json(meta))
        (d / "archive.jsonl").write_text("".join(line + "\n" for line in lines))
        params_lines = []
        for pid in sorted(self.pair_params):
            entry = {"pair_id": pid}
            for role, p in self.pair_params[pid].items():
                entry[role] = None if p is None else p.to_record()
            params_lines.append(canonical_json(entry))
        (d / "params.jsonl").write_text("".join(line + "\n" for line in params_lines))
        return self.digest()

    def digest(self) -> str:
        parts = [r.digest() for r in self.records]
        for pid in sorted(self.pair_params):
            for role in sorted(self.pair_params[pid]):
                p = self.pair_params[pid][role]
                parts.append(f"{pid}:{role}:{None if p is None else p.digest()}")
        return sha256_text("\n".join(parts))

    @classmethod
    def load(cls, directory) -> "Archive":
        d = Path(directory)
        arc = cls()
        for line in (d / "archive.jsonl").read_text().splitlines():
            if not line.strip():
                continue
            meta = json.loads(line)
            trace = SimTrace.load(d / meta["trace_file"])
            rec = PathRecord(
                id=meta["id"], kind=meta["kind"], path=HybridPath.from_record(meta["path"]),
                trace=trace,
                ind_path=None if meta["ind_path"] is None else HybridPath.from_record(meta["ind_path"]),
                pair_id=meta["pair_id"],
                provenance={k: meta[k] for k in ("seed", "iteration", "params_digest") if meta.get(k) is not None},
            )
            if rec.label != meta["label"]:
                raise ArchiveInvariantError(f"{rec.id}: stored label disagrees with kind")
            arc.add(rec)
        params_file = d / "params.jsonl"
        if params_file.exists():
            for line in params_file.read_text().splitlines():
                if not line.strip():
                    continue
                entry = json.loads(line)
                pid = entry.pop("pair_id")
                arc.pair_params[pid] = {role: None if rec is None else HybridParams.from_record(rec)
                                        for role, rec in entry.items()}
        return arc


# -- generation -----------------------------------------------------------------

@dataclass
class GenerationReport:
    requested: int = 0
    produced: int = 0
    draws: int = 0
    failures: list = field(default_factory=list)
    iterations: list = field(default_factory=list)
    pair_distances: list = field(default_factory=list)

    def to_record(self) -> dict:
        return {
            "requested": self.requested,
            "produced": self.produced,
            "draws": self.draws,
            "failures": self.failures,
            "iterations": self.iterations,
            "mean_pair_distance": float(np.mean(self.pair_distances)) if self.pair_distances else None,
        }


def insert_pair(archive: Archive, pair: PairCandidate, state: PairSearchState, seed: int) -> str:
    pair_id = f"p{len(archive.pair_params):04d}"
    prov = {"seed": seed, "iteration": len(state.history), "params_digest": state.digest()}
    archive.add(PathRecord(archive.next_id(), "vanilla", pair.vanilla, pair.vanilla_trace,
                           pair.ind_path, pair_id, dict(prov)))
    archive.add(PathRecord(archive.next_id(), "perturbed", pair.perturbed, pair.perturbed_trace,
                           pair.ind_path, pair_id, dict(prov)))
    archive.pair_params[pair_id] = {"vanilla": state.vanilla_params, "perturbed": state.perturbed_params,
                                    "ind": state.ind_params}
    return pair_id


def generate_core(archive: Archive, count: int, cfg: CEConfig, scenario: ScenarioConfig,
                  weights: CostWeights = CostWeights()) -> GenerationReport:
    """Run ``count`` pair searches; each success is archived before the next search starts."""
    if count < 1:
        raise ValueError("count must be at least 1")
    report = GenerationReport(requested=count)
    for i in range(count):
        seed = derive_seed(cfg.seed, "core", i)
        try:
            pair, state = hybrid_pair_search(replace(cfg, seed=seed), scenario, archive.stats, weights)
        except SearchExhaustedError as exc:
            log.warning("core search %d (seed %d) exhausted after %d iterations; skipped",
                        i, seed, len(exc.history))
            report.failures.append(i)
            continue
        insert_pair(archive, pair, state, seed)
        report.produced += 1
        report.iterations.append(len(state.history))
        report.pair_distances.append(sum(raw_distance(pair.vanilla, pair.perturbed)))
    if report.produced < count:
        log.warning("generated %d of %d requested core pairs", report.produced, count)
    return report


def generate_variants(archive: Archive, scenario: ScenarioConfig, per_pair: int,
                      band: tuple[float, float] = VARIANT_BAND, seed: int = 0,
                      budget: int = VARIANT_BUDGET, broaden: float = VARIANT_BROADEN,
                      min_collision_time: float = 0.0) -> GenerationReport:
    """Resample each core pair's converged distributions, keeping draws inside the distance band.

    The converged distributions are blended with the scenario prior (weight ``broaden``)
    before sampling, otherwise they are too concentrated to ever leave the pair's
    neighborhood. Colliding draws that hit before ``min_collision_time`` are rejected
    so a feature window still fits in front of the collision.
    """
    low, high = band
    report = GenerationReport(requested=2 * per_pair * len(archive.core_pairs()))
    if per_pair <= 0:
        return report
    for van_rec, pert_rec in archive.core_pairs():
        params = archive.pair_params.get(van_rec.pair_id)
        if params is None:
            log.warning("pair %s has no stored distributions; no variants", van_rec.pair_id)
            continue
        ind_path = van_rec.ind_path
        for kind, core, role in (("variant-vanilla", van_rec, "vanilla"),
                                 ("variant-perturbed", pert_rec, "perturbed")):
            want_collision = kind == "variant-perturbed"
            dist = smooth(params[role], scenario.adv_prior, 1.0 - broaden)
            kept, drawn = 0, 0
            batch = 50
            while kept < per_pair and drawn < budget:
                n = min(batch, budget - drawn)
                base = derive_seed(seed, f"variant:{van_rec.pair_id}:{kind}", 0)
                paths = [sample_path(dist, (base, drawn + j)) for j in range(n)]
                inds = None if ind_path is None else [ind_path] * n
                traces = simulate_batch(scenario, paths, inds)
                examined = 0
                for j, (p, tr) in enumerate(zip(paths, traces)):
                    if kept >= per_pair:
                        break
                    examined += 1
                    if tr.off_road or tr.collision != want_collision:
                        continue
                    if want_collision and tr.t_collision < min_collision_time:
                        continue
                    d = sum(raw_distance(p, core.path))
                    if not low <= d < high:
                        continue
                    archive.add(PathRecord(archive.next_id(), kind, p, tr, ind_path, van_rec.pair_id,
                                           {"seed": base, "iteration": drawn + j,
                                            "params_digest": dist.digest()}))
                    kept += 1
                    report.pair_distances.append(d)
                drawn += examined
            report.draws += drawn
            report.produced += kept
            if kept < per_pair:
                log.warning("pair %s: kept %d of %d %s records within %d draws",
                            van_rec.pair_id, kept, per_pair, kind, budget)
    return report


def generate_rudimentary(archive: Archive, count: int, scenario: ScenarioConfig,
                         base_params: HybridParams | None = None, seed: int = 0) -> GenerationReport:
    """Sample un-updated prior paths and keep the collision-free, on-road ones (label 0)."""
    report = GenerationReport(requested=count)
    if count <= 0:
        return report
    base_params = scenario.adv_prior if base_params is None else base_params
    budget = 10 * count
    base = derive_seed(seed, "rudimentary", 0)
    while report.produced < count and report.draws < budget:
        start = report.draws
        n = min(100, budget - start)
        ks = range(start, start + n)
        paths = [sample_path(base_params, (base, k, 0)) for k in ks]
        inds = ([sample_path(scenario.ind_prior, (base, k, 1)) for k in ks]
                if scenario.ind_prior is not None else None)
        traces = simulate_batch(scenario, paths, inds)
        for j, (p, tr) in enumerate(zip(paths, traces)):
            if report.produced >= count:
                break
            report.draws += 1
            if tr.collision or tr.off_road:
                continue
            archive.add(PathRecord(archive.next_id(), "rudimentary", p, tr,
                                   None if inds is None else inds[j], None,
                                   {"seed": base, "iteration": start + j,
                                    "params_digest": base_params.digest()}))
            report.produced += 1
    if report.produced < count:
        log.warning("kept %d of %d rudimentary paths within %d draws", report.produced, count, budget)
    return report


# -- dataset composition ----------------------------------------------------

class InsufficientRecordsError(ValueError):
    pass


@dataclass(eq=False)
class Dataset:
    records: list[PathRecord]
    contexts: dict[str, float | None]
    digest: str

    def __len__(self):
        return len(self.records)

    @property
    def labels(self) -> np.ndarray:
        return np.array([r.label for r in self.records], dtype=int)

    def balance(self) -> dict:
        y = self.labels
        ones, zeros = int(y.sum()), int(len(y) - y.sum())
        return {"zeros": zeros, "ones": ones, "ratio": zeros / ones if ones else math.inf}

    def subset(self, kinds: Iterable[str]) -> "Dataset":
        kinds = set(kinds)
        recs = [r for r in self.records if r.kind in kinds]
        return Dataset(recs, {r.id: self.contexts.get(r.id) for r in recs}, _dataset_digest(recs))


def _dataset_digest(records) -> str:
    return sha256_text("\n".join(f"{r.id}:{r.digest()}" for r in records))


def dataset_from_records(archive: Archive, records: Iterable[PathRecord]) -> Dataset:
    recs = sorted(records, key=lambda r: r.id)
    contexts = {r.id: archive.pair_collision_time(r.pair_id) for r in recs}
    return Dataset(recs, contexts, _dataset_digest(recs))


def compose_dataset(archive: Archive, mix: dict[str, int] | None = None) -> Dataset:
    """Pick the first ``mix[kind]`` records of each kind in id order (``None``: everything)."""
    if mix is None:
        chosen = list(archive.records)
    else:
        unknown = set(mix) - set(KINDS)
        if unknown:
            raise ValueError(f"unknown kinds in mix: {sorted(unknown)}")
        shortfalls, chosen = [], []
        for kind, n in mix.items():
            pool = sorted(archive.by_kind(kind), key=lambda r: r.id)
            if n > len(pool):
                shortfalls.append(f"{kind}: requested {n}, available {len(pool)}")
            chosen.extend(pool[:n])
        if shortfalls:
            raise InsufficientRecordsError("insufficient records: " + "; ".join(shortfalls))
    ds = dataset_from_records(archive, chosen)
    bal = ds.balance()
    if bal["zeros"] == 0 or bal["ones"] == 0:
        log.warning("dataset holds a single class (zeros=%d, ones=%d)", bal["zeros"], bal["ones"])
    return ds


def target_mix(archive: Archive, ones: int, zeros: int) -> dict[str, int]:
    """Per-kind counts hitting a class total: variants first (up to half of each class),
    core pairs kept whole, rudimentary paths fill the remaining zeros."""
    counts = archive.counts()
    vp = min(counts["variant-perturbed"], ones // 2)
    p = ones - vp
    vv = min(counts["variant-vanilla"], vp)
    return {"perturbed": p, "variant-perturbed": vp, "vanilla": p,
            "variant-vanilla": vv, "rudimentary": zeros - p - vv}
