import logging
from fractions import Fraction

import numpy as np
import pytest

from hybridpair.dataset import compose_dataset
from hybridpair.distributions import HybridPath
from hybridpair.features import FeatureMatrix, WindowSpec, build_matrix
from hybridpair.mlcp import (
    LEAF,
    DegenerateLabelsError,
    EvalReport,
    ForestConfig,
    ForestModel,
    SchemaMismatchError,
    Tree,
    ablation_eval,
    evaluate,
    monitor,
    notice_sweep,
    predict,
    stratified_split,
    sweep_table_csv,
    train,
)
from hybridpair.sim import run_scenario


class _FreeSpec:
    """Window stand-in for toy matrices that do not follow the 33-feature schema."""

    def __init__(self, width):
        self.width = width

    def to_record(self):
        return {"width": self.width}

    def column_names(self):
        return [f"f{i}" for i in range(self.width)]


def toy_matrix(X, y):
    X = np.asarray(X, float)
    return FeatureMatrix(X, np.asarray(y, int), [f"t{i:03d}" for i in range(len(y))], np.zeros(len(y)),
                         _FreeSpec(X.shape[1]), source_digest="toy")


# -- CART oracle --------------------------------------------------------------

def exact_gini(ones, n):
    p = Fraction(ones, n)
    return 1 - p * p - (1 - p) * (1 - p)


def oracle_split(X, y, min_leaf):
    n = len(y)
    best = None
    for f in range(X.shape[1]):
        vals = sorted(set(X[:, f]))
        for lo, hi in zip(vals, vals[1:]):
            thr = 0.5 * (lo + hi)
            left = X[:, f] <= thr
            nl, nr = int(left.sum()), int((~left).sum())
            if nl < min_leaf or nr < min_leaf:
                continue
            imp = (nl * exact_gini(int(y[left].sum()), nl) + nr * exact_gini(int(y[~left].sum()), nr)) / n
            if best is None or imp < best[2]:
                best = (f, thr, imp)
    return best


def oracle_tree(X, y, min_leaf, out):
    ones = int(y.sum())
    if ones in (0, len(y)):
        return
    split = oracle_split(X, y, min_leaf)
    if split is None or split[2] >= exact_gini(ones, len(y)):
        return
    f, thr, _ = split
    out.append((f, thr))
    mask = X[:, f] <= thr
    oracle_tree(X[mask], y[mask], min_leaf, out)
    oracle_tree(X[~mask], y[~mask], min_leaf, out)


def preorder_splits(tree, node=0, out=None):
    out = [] if out is None else out
    if tree.feature[node] == LEAF:
        return out
    out.append((int(tree.feature[node]), float(tree.threshold[node])))
    preorder_splits(tree, tree.left[node], out)
    preorder_splits(tree, tree.right[node], out)
    return out


@pytest.mark.parametrize("seed", [0, 1, 2, 3])
def test_single_tree_matches_exhaustive_cart(seed):
    rng = np.random.default_rng(seed)
    X = np.round(rng.normal(size=(20, 4)), 3)
    y = ((X[:, 0] + 0.5 * X[:, 2] + 0.4 * rng.normal(size=20)) > 0).astype(int)
    cfg = ForestConfig(n_trees=1, bootstrap=False, max_features="all", min_samples_leaf=1)
    model = train(toy_matrix(X, y), cfg)
    expected = []
    oracle_tree(X, y, 1, expected)
    got = preorder_splits(model.trees[0])
    assert len(got) == len(expected) > 0
    for (fa, ta), (fb, tb) in zip(got, expected):
        assert fa == fb and ta == pytest.approx(tb, abs=1e-12)


def test_separable_toy_fits_training_set():
    rng = np.random.default_rng(4)
    X = rng.uniform(-1, 1, (60, 2))
    y = (X[:, 0] + X[:, 1] > 0).astype(int)
    model = train(toy_matrix(X, y), ForestConfig(n_trees=15, seed=2, min_samples_leaf=1, bootstrap=False,
                                                 max_features="all"))
    labels, _ = model.predict_rows(X)
    np.testing.assert_array_equal(labels, y)
    assert predict(model, X[0])[0] == y[0]


def test_training_deterministic_and_degenerate(small_run):
    archive, _ = small_run
    matrix, _ = build_matrix(compose_dataset(archive), WindowSpec(1.0, 2.0, 0.2))
    cfg = ForestConfig(n_trees=10, seed=9)
    assert train(matrix, cfg).digest() == train(matrix, cfg).digest()
    assert train(matrix, cfg).digest() != train(matrix, ForestConfig(n_trees=10, seed=10)).digest()
    ones = matrix.take(np.flatnonzero(matrix.y == 1))
    with pytest.raises(DegenerateLabelsError, match="degenerate labels"):
        train(ones, cfg)


def stump(feature, threshold, left_class, right_class):
    return Tree(np.array([feature, LEAF, LEAF]), np.array([threshold, 0.0, 0.0]),
                np.array([1, LEAF, LEAF]), np.array([2, LEAF, LEAF]), np.array([0, left_class, right_class]))


def test_votes_and_tie_rule():
    always_one = stump(0, 0.0, 1, 1)
    always_zero = stump(0, 0.0, 0, 0)
    assert predict(ForestModel([always_one] * 3, "s", 2), [0.3, 0.1]) == (1, 1.0)
    assert predict(ForestModel([always_one, always_zero], "s", 2), [0.3, 0.1]) == (1, 0.5)
    assert predict(ForestModel([always_one, always_zero, always_zero], "s", 2), [0.0, 0.0])[0] == 0


def test_vote_order_invariance():
    rng = np.random.default_rng(1)
    trees = [stump(int(rng.integers(0, 3)), float(rng.normal()), int(rng.integers(0, 2)), int(rng.integers(0, 2)))
             for _ in range(9)]
    X = rng.normal(size=(50, 3))
    a = ForestModel(trees, "s", 3).scores(X)
    b = ForestModel(trees[::-1], "s", 3).scores(X)
    np.testing.assert_array_equal(a, b)


def test_schema_mismatch():
    model = ForestModel([stump(0, 0.0, 0, 1)], "abc", 2)
    with pytest.raises(SchemaMismatchError, match="schema mismatch"):
        model.scores(np.zeros((1, 3)))
    with pytest.raises(SchemaMismatchError):
        model.scores(np.zeros((1, 2)), schema_digest="other")
    with pytest.raises(ValueError):
        ForestModel([stump(5, 0.0, 0, 1)], "abc", 2)


def test_model_round_trip(tmp_path):
    model = ForestModel([stump(1, 0.25, 0, 1), stump(0, -1.5, 1, 0)], "abc", 2, {"k": 1})
    digest = model.save(tmp_path / "m.json")
    back = ForestModel.load(tmp_path / "m.json")
    assert back.digest() == digest


# -- metrics ------------------------------------------------------------------

def test_metric_examples():
    perfect = EvalReport(tp=5, fp=0, tn=7, fn=0)
    assert perfect.recall == perfect.precision == perfect.f1 == 1.0
    silent = EvalReport(tp=0, fp=0, tn=7, fn=5)
    assert silent.recall == 0.0 and silent.precision is None and silent.f1 is None
    table = EvalReport(tp=99, fp=5, tn=895, fn=1)
    assert table.recall == pytest.approx(0.99)
    assert table.precision == pytest.approx(0.952, abs=5e-4)
    assert table.f1 == pytest.approx(0.971, abs=5e-4)
    assert table.false_negative_rate == pytest.approx(0.01)
    assert table.balanced_accuracy == pytest.approx(0.5 * (0.99 + 895 / 900))


def test_report_round_trip():
    rep = EvalReport(tp=3, fp=1, tn=10, fn=2)
    assert EvalReport.from_record(rep.to_record()) == rep
    lines = rep.to_csv().splitlines()
    assert len(lines) == 2 and lines[0].startswith("tp,")


def test_stratified_split():
    y = np.array([1] * 30 + [0] * 70)
    tr, te = stratified_split(y, 0.7, 5)
    assert len(set(tr) & set(te)) == 0 and len(tr) + len(te) == 100
    assert y[tr].sum() == 21 and y[te].sum() == 9
    np.testing.assert_array_equal(tr, stratified_split(y, 0.7, 5)[0])


# -- sweep, ablation, monitor ---------------------------------------------------

def test_sweep_rows_and_determinism(small_run):
    archive, _ = small_run
    ds = compose_dataset(archive)
    cfg = ForestConfig(n_trees=8, seed=1)
    rows, dropped = notice_sweep(ds, [1.0, 2.0, 3.0], 2.0, 0.2, cfg, split_seed=4)
    assert [r.X for r in rows] == [1.0, 2.0, 3.0]
    again, _ = notice_sweep(ds, [1.0, 2.0, 3.0], 2.0, 0.2, cfg, split_seed=4)
    assert sweep_table_csv(rows) == sweep_table_csv(again)
    single, _ = notice_sweep(ds, [1.0], 2.0, 0.2, cfg, split_seed=4)
    matrix, _ = build_matrix(ds, WindowSpec(1.0, 2.0, 0.2))
    tr, te = stratified_split(matrix.y, 0.7, 4)
    direct = evaluate(train(matrix.take(tr), cfg), matrix.take(te))
    assert single[0].report == direct


def test_sweep_reports_infeasible_x(small_run):
    archive, _ = small_run
    ds = compose_dataset(archive, {"perturbed": 3, "vanilla": 3})
    rows, _ = notice_sweep(ds, [1.0, 40.0], 2.0, 0.2, ForestConfig(n_trees=3), 0)
    assert len(rows) == 2
    assert not rows[1].feasible


def test_ablation_guards(small_run):
    archive, _ = small_run
    ds = compose_dataset(archive)
    spec = WindowSpec(1.0, 2.0, 0.2)
    cfg = ForestConfig(n_trees=8, seed=3)
    rep = ablation_eval(ds, {"vanilla", "perturbed"}, {"rudimentary"}, spec, cfg)
    assert rep.tp == rep.fn == 0 and rep.tn + rep.fp == len(archive.by_kind("rudimentary"))
    with pytest.raises(ValueError, match="overlap"):
        ablation_eval(ds, {"vanilla", "perturbed"}, {"vanilla"}, spec, cfg)
    with pytest.raises(ValueError):
        ablation_eval(ds, set(), {"rudimentary"}, spec, cfg)


def test_monitor_windows(small_run, small_cfg):
    archive, _ = small_run
    matrix, _ = build_matrix(compose_dataset(archive), small_cfg.window)
    model = train(matrix, ForestConfig(n_trees=10, seed=0))
    pert = archive.by_kind("perturbed")[0]
    flags = monitor(model, pert.trace, small_cfg.window, 0.5)
    assert flags[0][0] == pytest.approx(3.0)
    assert all(t - small_cfg.window.X <= pert.trace.duration + 1e-9 for t, _, _ in flags)
    assert any(label == 1 for _, label, _ in flags)
    one = monitor(model, pert.trace, small_cfg.window, pert.trace.duration)
    assert len(one) == 1


def test_monitor_constant_trace_gives_constant_scores(small_cfg, small_run, caplog):
    archive, _ = small_run
    matrix, _ = build_matrix(compose_dataset(archive), small_cfg.window)
    model = train(matrix, ForestConfig(n_trees=10, seed=0))
    T = small_cfg.scenario.path_steps
    trace = run_scenario(small_cfg.scenario, HybridPath(np.zeros(T, int), np.zeros(T)),
                         HybridPath(np.zeros(T, int), np.zeros(T)))
    flags = monitor(model, trace, small_cfg.window, 0.5)
    assert len({s for _, _, s in flags}) == 1
    short = run_scenario(small_cfg.scenario, HybridPath(np.zeros(T, int), np.zeros(T)),
                         HybridPath(np.zeros(T, int), np.zeros(T)))
    short.t = short.t[:5]
    with caplog.at_level(logging.WARNING):
        assert monitor(model, short, small_cfg.window, 0.5) == []
    assert "shorter than one window" in caplog.text
