"""End-to-end steps driven by a RunConfig: generate, compose, extract, train/evaluate, sweep."""
from __future__ import annotations

import numpy as np

from .config import RunConfig
from .dataset import (Archive, Dataset, compose_dataset, generate_core, generate_rudimentary,
                      generate_variants, target_mix)
from .features import FeatureMatrix, WindowSpec, build_matrix
from .mlcp import ForestModel, EvalReport, evaluate, notice_sweep, stratified_split, train


def generate(cfg: RunConfig, pairs: int | None = None) -> tuple[Archive, dict]:
    g = cfg.generation
    archive = Archive()
    core = generate_core(archive, pairs or g.pairs, cfg.ce_config(), cfg.scenario, cfg.cost)
    variants = generate_variants(archive, cfg.scenario, g.variants_per_pair, tuple(g.variant_band),
                                 seed=cfg.sub_seed("variants"), budget=g.variant_budget,
                                 broaden=g.variant_broaden,
                                 min_collision_time=cfg.window.X + cfg.window.Y)
    rud = generate_rudimentary(archive, g.rudimentary, cfg.scenario, seed=cfg.sub_seed("rudimentary"))
    its = core.iterations
    summary = {
        "counts": archive.counts(),
        "core": core.to_record(),
        "variants": variants.to_record(),
        "rudimentary": rud.to_record(),
        "ce_iterations": {"mean": float(np.mean(its)) if its else None,
                          "max": int(max(its)) if its else None},
        "stats": {f"{c}_{s}": v for (c, s), v in archive.stats.values.items()},
    }
    return archive, summary


def summary_text(summary: dict) -> str:
    lines = ["records per kind:"]
    lines += [f"  {k:<18} {v}" for k, v in summary["counts"].items()]
    core = summary["core"]
    lines.append(f"core pairs: {core['produced']} of {core['requested']} "
                 f"(exhausted searches: {len(core['failures'])})")
    mpd = core["mean_pair_distance"]
    lines.append(f"mean core pair distance: {mpd:.4f}" if mpd is not None else "mean core pair distance: n/a")
    it = summary["ce_iterations"]
    if it["mean"] is not None:
        lines.append(f"CE iterations per pair: mean {it['mean']:.2f}, max {it['max']}")
    lines.append(f"variants kept: {summary['variants']['produced']} from {summary['variants']['draws']} draws")
    lines.append(f"rudimentary kept: {summary['rudimentary']['produced']} from "
                 f"{summary['rudimentary']['draws']} draws")
    return "\n".join(lines) + "\n"


def compose(cfg: RunConfig, archive: Archive) -> Dataset:
    d = cfg.dataset
    if d.ones is not None:
        return compose_dataset(archive, target_mix(archive, d.ones, d.zeros))
    return compose_dataset(archive, d.mix)


def split_seed(cfg: RunConfig) -> int:
    return cfg.sub_seed("split")


def extract(cfg: RunConfig, archive: Archive) -> FeatureMatrix:
    matrix, _ = build_matrix(compose(cfg, archive), cfg.window)
    return matrix


def train_split(cfg: RunConfig, matrix: FeatureMatrix) -> tuple[ForestModel, np.ndarray, np.ndarray]:
    tr, te = stratified_split(matrix.y, 0.7, split_seed(cfg))
    model = train(matrix.take(tr), cfg.forest_config())
    model.manifest["test_ids"] = [matrix.ids[i] for i in te]
    return model, tr, te


def evaluate_split(model: ForestModel, matrix: FeatureMatrix) -> EvalReport:
    test_ids = set(model.manifest.get("test_ids", []))
    rows = [i for i, rid in enumerate(matrix.ids) if rid in test_ids]
    if not rows:
        raise ValueError("no held-out rows for this model in the feature matrix")
    return evaluate(model, matrix.take(rows))


def sweep(cfg: RunConfig, archive: Archive, xs=None):
    xs = cfg.sweep_x if xs is None else xs
    w = cfg.window
    return notice_sweep(compose(cfg, archive), list(xs), w.Y, w.R, cfg.forest_config(), split_seed(cfg))
