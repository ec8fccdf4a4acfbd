"""The ten acceptance criteria at their stated tolerances, on the shipped reference config."""
import itertools
import time
from dataclasses import replace

import numpy as np
import pytest

from hybridpair import pipeline, shipped_config
from hybridpair.ce import CEConfig, GaussianFamily, SearchExhaustedError, ce_optimize, hybrid_pair_search
from hybridpair.config import load_config
from hybridpair.cost import constraint_report, path_scalars
from hybridpair.dataset import Archive, compose_dataset, generate_core
from hybridpair.distributions import HybridPath, update_categorical, update_gaussian, VAR_FLOOR
from hybridpair.mlcp import EvalReport, ablation_eval, evaluate, sweep_table_csv
from hybridpair.util import derive_seed

CORE = {"vanilla", "perturbed"}


@pytest.fixture(scope="module")
def ref():
    return load_config(shipped_config("reference"))


@pytest.fixture(scope="module")
def ref_archive(ref):
    archive, summary = pipeline.generate(ref)
    return archive


@pytest.fixture(scope="module")
def in_distribution(ref, ref_archive):
    """Held-out evaluation of the reference dataset (criterion 5), reused by criterion 8."""
    matrix = pipeline.extract(ref, ref_archive)
    model, tr, te = pipeline.train_split(ref, matrix)
    return matrix, evaluate(model, matrix.take(te))


def test_c1_update_oracles(criterion):
    start = time.perf_counter()
    worst_cat = 0.0
    n_columns = 0
    # the categorical update is separable over steps, so every possible step column
    # (all move sequences of length <= 8 over M <= 4) is placed into a T = 4 elite
    for m in (2, 3, 4):
        for n in range(1, 9):
            cols = np.array(list(itertools.product(range(m), repeat=n)))
            counts = np.stack([np.bincount(c, minlength=m) for c in cols]) / n
            idx = np.arange(-(-len(cols) // 4) * 4) % len(cols)
            for chunk in idx.reshape(-1, 4):
                elite = [HybridPath(row, np.zeros(4)) for row in cols[chunk].T]
                probs = update_categorical(elite, n_moves=m)
                rel = np.abs(probs - counts[chunk]) / np.maximum(np.abs(counts[chunk]), 1e-300)
                worst_cat = max(worst_cat, float(np.max(np.where(counts[chunk] > 0, rel, probs))))
            n_columns += len(cols)
    worst_gauss = 0.0
    rng = np.random.default_rng(20240601)
    for _ in range(10_000):
        n, T = int(rng.integers(1, 9)), int(rng.integers(1, 5))
        acc = rng.normal(0, 5, (n, T))
        mean, var = update_gaussian([HybridPath(np.zeros(T, int), row) for row in acc])
        for t in range(T):
            col = [float(v) for v in acc[:, t]]
            mu = sum(col) / n
            sigma2 = max(sum((v - mu) ** 2 for v in col) / n, VAR_FLOOR)
            worst_gauss = max(worst_gauss, abs(mean[t] - mu) / max(abs(mu), 1e-12),
                              abs(var[t] - sigma2) / sigma2)
    elapsed = time.perf_counter() - start
    ok = worst_cat <= 1e-10 and worst_gauss <= 1e-10 and elapsed < 10
    criterion(1, ok, f"{n_columns} step columns, categorical rel err {worst_cat:.1e}, "
                     f"gaussian rel err {worst_gauss:.1e} over 10^4 elites, {elapsed:.1f}s (< 10s)")
    assert ok


def test_c2_quadratic_convergence(criterion):
    start = time.perf_counter()
    cfg = CEConfig(seed=2, N=200, rho=0.1, alpha=0.8, d=3, max_iterations=50)
    res = ce_optimize(lambda x: -float(np.sum((x - 3.0) ** 2)), GaussianFamily(np.array([-10.0]), np.array([25.0])), cfg)
    err = abs(float(res.family.mean[0]) - 3.0)
    elapsed = time.perf_counter() - start
    ok = err <= 0.05 and len(res.history) <= 50 and elapsed < 30
    criterion(2, ok, f"mean {res.family.mean[0]:.4f} (|err| {err:.1e} <= 0.05) after {len(res.history)} "
                     f"iterations (<= 50), {elapsed:.1f}s (< 30s)")
    assert ok


def test_c3_pair_postcondition(ref, criterion):
    start = time.perf_counter()
    found, compliant, exhausted = 0, 0, 0
    for i in range(20):
        cfg = replace(ref.ce, seed=derive_seed(ref.seed, "acceptance-search", i), max_iterations=60)
        try:
            pair, _ = hybrid_pair_search(cfg, ref.scenario, None, ref.cost)
        except SearchExhaustedError:
            exhausted += 1
            continue
        found += 1
        rep = constraint_report(pair, ref.cost.pair_threshold)
        compliant += rep["vanilla_clear"] and rep["perturbed_collides"] and rep["raw_distance"] <= 2.0
    elapsed = time.perf_counter() - start
    ok = compliant == found and found >= 18 and elapsed < 15 * 60
    criterion(3, ok, f"{found}/20 searches succeeded within 60 iterations (>= 18), "
                     f"{compliant}/{found} compliant (100% required), {elapsed:.0f}s (< 900s)")
    assert ok


def chi_spread(archive):
    out = {}
    for kind in ("vanilla", "perturbed"):
        chi = np.array([path_scalars(r.path) for r in archive.by_kind(kind)])
        out[(kind, "location")] = float(chi[:, 0].std(ddof=1))
        out[(kind, "accel")] = float(chi[:, 1].std(ddof=1))
    return out


def test_c4_variance_term(ref, criterion):
    start = time.perf_counter()
    cfg = replace(ref.ce, seed=derive_seed(ref.seed, "acceptance-variance"))
    with_v, without_v = Archive(), Archive()
    generate_core(with_v, 20, cfg, ref.scenario, ref.cost)
    generate_core(without_v, 20, cfg, ref.scenario, replace(ref.cost, a4=0.0))
    a, b = chi_spread(with_v), chi_spread(without_v)
    wins = sum(a[k] > b[k] for k in a)
    elapsed = time.perf_counter() - start
    ok = wins >= 3 and elapsed < 30 * 60
    detail = ", ".join(f"{c}/{s} {a[(c, s)]:.3f} vs {b[(c, s)]:.3f}" for c, s in a)
    criterion(4, ok, f"{wins}/4 chi std larger with the variance term (>= 3): {detail}; {elapsed:.0f}s")
    assert ok


def test_c5_table_analogue(ref, in_distribution, criterion):
    matrix, report = in_distribution
    ones, zeros = int(matrix.y.sum()), int(len(matrix.y) - matrix.y.sum())
    ok = report.f1 is not None and report.f1 >= 0.90
    criterion(5, ok, f"held-out F1 {report.f1:.3f} (>= 0.90) on {ones} one / {zeros} zero rows, "
                     f"recall {report.recall:.3f}, precision {report.precision:.3f}, FNR {report.false_negative_rate:.3f}")
    assert ok


def test_c6_advance_notice(ref, ref_archive, criterion):
    start = time.perf_counter()
    rows, dropped = pipeline.sweep(ref, ref_archive, [1.0, 2.0, 3.0, 4.0, 5.0])
    f1 = {r.X: (r.report.f1 if r.feasible and r.report.f1 is not None else float("nan")) for r in rows}
    elapsed = time.perf_counter() - start
    ok = all(r.feasible for r in rows) and f1[5.0] <= f1[1.0] and f1[5.0] >= 0.6 and elapsed < 30 * 60
    table = " ".join(f"X={x:g}:{v:.3f}" for x, v in f1.items())
    criterion(6, ok, f"F1 {table}; X=5 <= X=1 and X=5 >= 0.6; {len(dropped)} records dropped; {elapsed:.0f}s")
    assert ok


def test_c7_rudimentary_ablation(ref, ref_archive, criterion):
    ds = compose_dataset(ref_archive)
    rep = ablation_eval(ds, CORE, {"rudimentary"}, ref.window, ref.forest_config())
    rate = rep.misclassification_rate
    ok = rep.n >= 100 and rate <= 0.02
    criterion(7, ok, f"{rep.misclassified}/{rep.n} rudimentary rows misclassified "
                     f"({rate:.2%}, <= 2%, >= 100 rows)")
    assert ok


def test_c8_variant_ablation(ref, ref_archive, in_distribution, criterion):
    _, base = in_distribution
    ds = compose_dataset(ref_archive)
    rep = ablation_eval(ds, CORE, {"variant-vanilla", "variant-perturbed"}, ref.window, ref.forest_config())
    fnr, base_fnr = rep.false_negative_rate, base.false_negative_rate
    ok = rep.f1 is not None and rep.f1 >= 0.90 and fnr is not None and fnr > base_fnr
    criterion(8, ok, f"variant F1 {rep.f1:.3f} (>= 0.90) on {rep.n} rows; variant FNR {fnr:.3f} "
                     f"vs in-distribution FNR {base_fnr:.3f} (must be strictly greater)")
    assert ok


def run_once(cfg):
    archive, _ = pipeline.generate(cfg)
    matrix = pipeline.extract(cfg, archive)
    model, _, _ = pipeline.train_split(cfg, matrix)
    rows, _ = pipeline.sweep(cfg, archive, [1.0, 2.0])
    return archive.digest(), model.digest(), sweep_table_csv(rows)


def test_c9_determinism(criterion):
    start = time.perf_counter()
    cfg = load_config(shipped_config("small"))
    first, second = run_once(cfg), run_once(load_config(shipped_config("small")))
    elapsed = time.perf_counter() - start
    same = [a == b for a, b in zip(first, second)]
    ok = all(same) and elapsed < 15 * 60
    criterion(9, ok, f"archive {'same' if same[0] else 'DIFFERENT'} ({first[0][:12]}), model "
                     f"{'same' if same[1] else 'DIFFERENT'} ({first[1][:12]}), sweep table "
                     f"{'same' if same[2] else 'DIFFERENT'}; {elapsed:.0f}s")
    assert ok


def test_c10_metric_identities(criterion):
    rng = np.random.default_rng(10)
    counts = rng.integers(0, 50, size=(10_000, 4))
    counts[::7, 0] = 0            # exercise zero-denominator branches
    counts[::11, 1] = 0
    bad = 0
    for tp, fp, tn, fn in counts:
        r = EvalReport(tp=int(tp), fp=int(fp), tn=int(tn), fn=int(fn))
        sens = tp / (tp + fn) if tp + fn else None
        spec = tn / (tn + fp) if tn + fp else None
        if r.precision is not None and r.recall is not None and r.precision + r.recall > 0:
            if abs(r.f1 - 2 * r.precision * r.recall / (r.precision + r.recall)) > 1e-12:
                bad += 1
            if abs(r.f1 - 2 * tp / (2 * tp + fp + fn)) > 1e-12:
                bad += 1
        elif r.f1 is not None:
            bad += 1
        if sens is not None and spec is not None:
            if abs(r.balanced_accuracy - 0.5 * (sens + spec)) > 1e-12:
                bad += 1
        elif r.balanced_accuracy is not None:
            bad += 1
    ok = bad == 0
    criterion(10, ok, f"f1 and balanced-accuracy identities on 10^4 random confusion matrices, "
                      f"{bad} violations")
    assert ok
