"""Random-forest correctness property: training, metrics, advance-notice sweep, ablations, log monitoring."""
from __future__ import annotations

import io
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .dataset import Dataset
from .features import FeatureMatrix, WindowSpec, build_matrix, rows_from_trace
from .sim import SimTrace
from .util import canonical_json, sha256_text

log = logging.getLogger(__name__)

LEAF = -1


class DegenerateLabelsError(ValueError):
    pass


class SchemaMismatchError(ValueError):
    pass


@dataclass(frozen=True)
class ForestConfig:
    n_trees: int = 100
    max_depth: int | None = None
    min_samples_leaf: int = 2
    max_features: str | int = "sqrt"
    bootstrap: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.n_trees < 1:
            raise ValueError("n_trees must be at least 1")
        if self.max_depth is not None and self.max_depth < 0:
            raise ValueError("max_depth must be non-negative")
        if self.min_samples_leaf < 1:
            raise ValueError("min_samples_leaf must be at least 1")
        if isinstance(self.max_features, str):
            if self.max_features not in ("sqrt", "all"):
                raise ValueError("max_features must be 'sqrt', 'all' or a positive integer")
        elif self.max_features < 1:
            raise ValueError("max_features must be positive")

    def features_per_split(self, n_features: int) -> int:
        if self.max_features == "sqrt":
            return max(1, int(math.sqrt(n_features)))
        if self.max_features == "all":
            return n_features
        return min(int(self.max_features), n_features)

    def to_record(self) -> dict:
        return asdict(self)


# -- CART --------------------------------------------------------------------

@dataclass(eq=False)
class Tree:
    feature: np.ndarray    # LEAF for leaves
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    leaf_class: np.ndarray

    def apply(self, X: np.ndarray) -> np.ndarray:
        node = np.zeros(len(X), dtype=int)
        active = self.feature[node] != LEAF
        while active.any():
            rows = np.flatnonzero(active)
            n = node[rows]
            go_left = X[rows, self.feature[n]] <= self.threshold[n]
            node[rows] = np.where(go_left, self.left[n], self.right[n])
            active = self.feature[node] != LEAF
        return node

    def predict(self, X: np.ndarray) -> np.ndarray:
        return self.leaf_class[self.apply(X)]

    def to_record(self) -> dict:
        return {"feature": self.feature.tolist(), "threshold": [float(v) for v in self.threshold],
                "left": self.left.tolist(), "right": self.right.tolist(),
                "leaf_class": self.leaf_class.tolist()}

    @classmethod
    def from_record(cls, rec: dict) -> "Tree":
        return cls(np.asarray(rec["feature"], dtype=int), np.asarray(rec["threshold"], dtype=float),
                   np.asarray(rec["left"], dtype=int), np.asarray(rec["right"], dtype=int),
                   np.asarray(rec["leaf_class"], dtype=int))


def gini(n1, n):
    p = n1 / n
    return 1.0 - p * p - (1.0 - p) * (1.0 - p)


def best_split(X: np.ndarray, y: np.ndarray, features: Sequence[int], min_leaf: int):
    """Lowest weighted child Gini over midpoint thresholds of ``features``.

    Ties go to the earlier feature in ``features``, then the lower threshold.
    Returns ``(feature, threshold, weighted_child_impurity)`` or ``None``.
    """
    n = len(y)
    if n < 2 * min_leaf:
        return None
    feats = np.asarray(features, dtype=int)
    vals = X[:, feats]
    order = np.argsort(vals, axis=0, kind="stable")
    xs = np.take_along_axis(vals, order, axis=0)
    ys = y[order]
    n_left = np.arange(1, n)[:, None]
    ones_left = np.cumsum(ys, axis=0)[:-1]
    ones_total = ys.sum(axis=0)[None, :]
    n_right = n - n_left
    ones_right = ones_total - ones_left
    imp = (n_left * gini(ones_left, n_left) + n_right * gini(ones_right, n_right)) / n
    valid = (xs[1:] > xs[:-1]) & (n_left >= min_leaf) & (n_right >= min_leaf)
    if not valid.any():
        return None
    imp = np.where(valid, imp, np.inf)
    # feature-major scan so ties resolve to the earlier feature, then lower position
    flat = imp.T.reshape(-1)
    k = int(np.argmin(flat))
    j, i = divmod(k, n - 1)
    thr = 0.5 * (xs[i, j] + xs[i + 1, j])
    if not thr < xs[i + 1, j]:
        thr = xs[i, j]
    return int(feats[j]), float(thr), float(flat[k])


def grow_tree(X: np.ndarray, y: np.ndarray, cfg: ForestConfig, rng: np.random.Generator) -> Tree:
    n_features = X.shape[1]
    k = cfg.features_per_split(n_features)
    feature, threshold, left, right, leaf = [], [], [], [], []

    def new_node():
        feature.append(LEAF)
        threshold.append(0.0)
        left.append(LEAF)
        right.append(LEAF)
        leaf.append(0)
        return len(feature) - 1

    root = new_node()
    stack = [(root, np.arange(len(y)), 0)]
    while stack:
        node, idx, depth = stack.pop()
        yn = y[idx]
        ones = int(yn.sum())
        leaf[node] = int(2 * ones >= len(yn))
        if ones == 0 or ones == len(yn):
            continue
        if cfg.max_depth is not None and depth >= cfg.max_depth:
            continue
        feats = np.arange(n_features) if k == n_features else np.sort(rng.choice(n_features, k, replace=False))
        split = best_split(X[idx], yn, feats, cfg.min_samples_leaf)
        if split is None or split[2] >= gini(ones, len(yn)) - 1e-12:
            continue
        f, thr, _ = split
        mask = X[idx, f] <= thr
        feature[node], threshold[node] = f, thr
        lnode, rnode = new_node(), new_node()
        left[node], right[node] = lnode, rnode
        stack.append((rnode, idx[~mask], depth + 1))
        stack.append((lnode, idx[mask], depth + 1))
    return Tree(np.array(feature, dtype=int), np.array(threshold, dtype=float),
                np.array(left, dtype=int), np.array(right, dtype=int), np.array(leaf, dtype=int))


@dataclass(eq=False)
class ForestModel:
    trees: list[Tree]
    schema_digest: str
    row_length: int
    manifest: dict = field(default_factory=dict)

    def __post_init__(self):
        for t in self.trees:
            if np.any(t.feature >= self.row_length):
                raise ValueError("tree split feature index exceeds the row length")

    def _check(self, X, schema_digest):
        if schema_digest is not None and schema_digest != self.schema_digest:
            raise SchemaMismatchError(f"schema mismatch: model {self.schema_digest}, rows {schema_digest}")
        if X.shape[1] != self.row_length:
            raise SchemaMismatchError(f"schema mismatch: model expects {self.row_length} values per row, "
                                      f"got {X.shape[1]}")

    def scores(self, X, schema_digest: str | None = None) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        self._check(X, schema_digest)
        if len(X) == 0:
            return np.zeros(0)
        votes = np.zeros(len(X))
        for t in self.trees:
            votes += t.predict(X)
        return votes / len(self.trees)

    def predict_rows(self, X, schema_digest: str | None = None) -> tuple[np.ndarray, np.ndarray]:
        s = self.scores(X, schema_digest)
        return label_from_score(s), s

    def to_record(self) -> dict:
        return {"schema_digest": self.schema_digest, "row_length": self.row_length,
                "manifest": self.manifest, "trees": [t.to_record() for t in self.trees]}

    def digest(self) -> str:
        return sha256_text(canonical_json(self.to_record()))

    def save(self, path) -> str:
        Path(path).write_text(json.dumps(self.to_record()))
        return self.digest()

    @classmethod
    def load(cls, path) -> "ForestModel":
        rec = json.loads(Path(path).read_text())
        return cls([Tree.from_record(t) for t in rec["trees"]], rec["schema_digest"], rec["row_length"],
                   rec.get("manifest", {}))


def label_from_score(score):
    # ties count as an alarm: a missed collision costs more than a false alarm
    return (np.asarray(score) >= 0.5).astype(int)


def train(matrix: FeatureMatrix, cfg: ForestConfig) -> ForestModel:
    X, y = np.asarray(matrix.X, dtype=float), np.asarray(matrix.y, dtype=int)
    if len(y) == 0 or y.min() == y.max():
        raise DegenerateLabelsError("degenerate labels: training needs both classes")
    if not np.all(np.isfinite(X)):
        raise ValueError("feature matrix holds non-finite values")
    trees = []
    for i in range(cfg.n_trees):
        rng = np.random.default_rng((cfg.seed, i))
        if cfg.bootstrap:
            rows = rng.integers(0, len(y), len(y))
            Xb, yb = X[rows], y[rows]
        else:
            Xb, yb = X, y
        trees.append(grow_tree(Xb, yb, cfg, rng))
    manifest = {"dataset_digest": matrix.source_digest, "matrix_digest": matrix.digest(),
                "window": matrix.spec.to_record(), "config": cfg.to_record()}
    return ForestModel(trees, matrix.schema_digest, X.shape[1], manifest)


def predict(model: ForestModel, row, schema_digest: str | None = None) -> tuple[int, float]:
    labels, scores = model.predict_rows(np.asarray(row, dtype=float).reshape(1, -1), schema_digest)
    return int(labels[0]), float(scores[0])


# -- metrics ------------------------------------------------------------------

def _ratio(num, den):
    return num / den if den else None


@dataclass(frozen=True)
class EvalReport:
    tp: int
    fp: int
    tn: int
    fn: int

    @classmethod
    def from_predictions(cls, y_true, y_pred) -> "EvalReport":
        y_true, y_pred = np.asarray(y_true, int), np.asarray(y_pred, int)
        return cls(int(np.sum((y_true == 1) & (y_pred == 1))), int(np.sum((y_true == 0) & (y_pred == 1))),
                   int(np.sum((y_true == 0) & (y_pred == 0))), int(np.sum((y_true == 1) & (y_pred == 0))))

    @property
    def n(self) -> int:
        return self.tp + self.fp + self.tn + self.fn

    @property
    def recall(self):
        return _ratio(self.tp, self.tp + self.fn)

    @property
    def precision(self):
        return _ratio(self.tp, self.tp + self.fp)

    @property
    def specificity(self):
        return _ratio(self.tn, self.tn + self.fp)

    @property
    def f1(self):
        p, r = self.precision, self.recall
        if p is None or r is None or p + r == 0:
            return None
        return 2 * p * r / (p + r)

    @property
    def balanced_accuracy(self):
        sens, spec = self.recall, self.specificity
        if sens is None or spec is None:
            return None
        return 0.5 * (sens + spec)

    @property
    def false_negative_rate(self):
        return _ratio(self.fn, self.tp + self.fn)

    @property
    def misclassified(self) -> int:
        return self.fp + self.fn

    @property
    def misclassification_rate(self):
        return _ratio(self.misclassified, self.n)

    METRICS = ("recall", "precision", "f1", "balanced_accuracy", "false_negative_rate",
               "misclassified", "misclassification_rate")

    def to_record(self) -> dict:
        rec = {"tp": self.tp, "fp": self.fp, "tn": self.tn, "fn": self.fn}
        rec.update({m: getattr(self, m) for m in self.METRICS})
        return rec

    @classmethod
    def from_record(cls, rec: dict) -> "EvalReport":
        return cls(rec["tp"], rec["fp"], rec["tn"], rec["fn"])

    def to_csv(self) -> str:
        rec = self.to_record()
        return ",".join(rec) + "\n" + ",".join(_fmt(v) for v in rec.values()) + "\n"


def _fmt(v) -> str:
    if v is None:
        return ""
    return repr(v) if isinstance(v, float) else str(v)


def evaluate(model: ForestModel, matrix: FeatureMatrix) -> EvalReport:
    if len(matrix) == 0:
        raise ValueError("cannot evaluate on an empty matrix")
    labels, _ = model.predict_rows(matrix.X, matrix.schema_digest)
    return EvalReport.from_predictions(matrix.y, labels)


def stratified_split(y, train_fraction: float = 0.7, seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    y = np.asarray(y, int)
    rng = np.random.default_rng(seed)
    train_idx, test_idx = [], []
    for c in (0, 1):
        idx = np.flatnonzero(y == c)
        idx = idx[rng.permutation(len(idx))]
        k = int(round(train_fraction * len(idx)))
        train_idx.extend(idx[:k])
        test_idx.extend(idx[k:])
    return np.sort(np.array(train_idx, dtype=int)), np.sort(np.array(test_idx, dtype=int))


def train_test(matrix: FeatureMatrix, cfg: ForestConfig, split_seed: int = 0,
               train_fraction: float = 0.7) -> tuple[ForestModel, EvalReport]:
    tr, te = stratified_split(matrix.y, train_fraction, split_seed)
    model = train(matrix.take(tr), cfg)
    return model, evaluate(model, matrix.take(te))


# -- experiments ---------------------------------------------------------------

@dataclass(frozen=True)
class SweepRow:
    X: float
    feasible: bool
    n_train: int = 0
    n_test: int = 0
    report: EvalReport | None = None
    note: str = ""


SWEEP_COLUMNS = ("X", "feasible", "n_train", "n_test", "tp", "fp", "tn", "fn") + EvalReport.METRICS + ("note",)


def sweep_table_csv(rows: Sequence[SweepRow]) -> str:
    buf = io.StringIO()
    buf.write(",".join(SWEEP_COLUMNS) + "\n")
    for r in rows:
        rec = r.report.to_record() if r.report else {}
        vals = [repr(float(r.X)), str(r.feasible).lower(), str(r.n_train), str(r.n_test)]
        vals += [_fmt(rec.get(k)) for k in SWEEP_COLUMNS[4:-1]]
        vals.append(r.note)
        buf.write(",".join(vals) + "\n")
    return buf.getvalue()


def notice_sweep(dataset: Dataset, xs: Sequence[float], Y: float, R: float, cfg: ForestConfig,
                 split_seed: int = 0) -> tuple[list[SweepRow], list[str]]:
    """F1 against the gap X between window end and anchor.

    Every X uses the same records: those whose window still fits at the largest X.
    Returns the table and the ids dropped for not fitting.
    """
    if not xs:
        return [], []
    x_max = max(xs)
    _, dropped = build_matrix(dataset, WindowSpec(x_max, Y, R), skip_out_of_range=True)
    if dropped:
        log.warning("%d records have no room for a window at X=%g and are left out of the sweep",
                    len(dropped), x_max)
    drop = set(dropped)
    kept = Dataset([r for r in dataset.records if r.id not in drop],
                   {k: v for k, v in dataset.contexts.items() if k not in drop}, dataset.digest)
    rows = []
    for x in xs:
        spec = WindowSpec(x, Y, R)
        try:
            matrix, _ = build_matrix(kept, spec)
            tr, te = stratified_split(matrix.y, 0.7, split_seed)
            model = train(matrix.take(tr), cfg)
            rows.append(SweepRow(x, True, len(tr), len(te), evaluate(model, matrix.take(te))))
        except (ValueError, DegenerateLabelsError) as exc:
            log.warning("X=%g infeasible: %s", x, exc)
            rows.append(SweepRow(x, False, note=str(exc).replace(",", ";")))
    return rows, dropped


def ablation_eval(dataset: Dataset, train_kinds: Iterable[str], test_kinds: Iterable[str],
                  spec: WindowSpec, cfg: ForestConfig) -> EvalReport:
    train_kinds, test_kinds = set(train_kinds), set(test_kinds)
    if not train_kinds or not test_kinds:
        raise ValueError("train and test kinds must both be non-empty")
    if train_kinds & test_kinds:
        raise ValueError(f"train and test kinds overlap: {sorted(train_kinds & test_kinds)}")
    train_m, _ = build_matrix(dataset.subset(train_kinds), spec)
    test_m, _ = build_matrix(dataset.subset(test_kinds), spec)
    if len(train_m) == 0 or len(test_m) == 0:
        raise ValueError("empty partition: no records of the requested kinds")
    return evaluate(train(train_m, cfg), test_m)


def monitor(model: ForestModel, trace: SimTrace, spec: WindowSpec, stride: float) -> list[tuple[float, int, float]]:
    """Slide the window anchor across a logged trace; one (anchor, label, score) per anchor."""
    if stride <= 0:
        raise ValueError("stride must be positive")
    if len(trace) == 0 or trace.duration < spec.Y:
        log.warning("trace shorter than one window (%.2f s); no predictions", spec.Y)
        return []
    dt = trace.timestep
    anchors = []
    a = spec.X + spec.Y
    k = 0
    while a - spec.X <= trace.duration + 1e-9:
        anchors.append(round(round(a / dt) * dt, 9))
        k += 1
        a = spec.X + spec.Y + k * stride
    if not anchors:
        return []
    X = rows_from_trace(trace, spec, anchors)
    labels, scores = model.predict_rows(X)
    return [(float(t), int(l), float(s)) for t, l, s in zip(anchors, labels, scores)]
