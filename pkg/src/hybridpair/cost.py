"""Weighted pair cost: path length, speed sign, pair closeness, archive spread, rigid constraints.

Lower is better; a negative total means the pair meets every rigid constraint.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .distributions import MOVE_DELTAS, HybridPath
from .sim import SimTrace

PAIR_EPS = 0.1
VARIANCE_EPS = 0.1
ACCEL_SCALE = 10.0
SPEED_SCALE = 40.0
STAY = 0

COMBOS = (("vanilla", "location"), ("vanilla", "accel"), ("perturbed", "location"), ("perturbed", "accel"))


@dataclass(frozen=True)
class CostWeights:
    a1: float = 3.0
    a2: float = 2.0
    a3: float = 2.0
    a4: float = 1.0
    pair_threshold: float = 2.0
    penalty: float = 1e9
    shaping: bool = True

    def __post_init__(self):
        for name in ("a1", "a2", "a3", "a4"):
            v = getattr(self, name)
            if not (math.isfinite(v) and v >= 0):
                raise ValueError(f"{name} must be finite and non-negative")
        if not self.pair_threshold > 0:
            raise ValueError("pair_threshold must be positive")
        if not self.penalty > 0:
            raise ValueError("penalty must be positive")


@dataclass(frozen=True)
class DatasetStats:
    """(mean, std) per (class, scalar) combo; ``None`` where fewer than two paths exist."""

    values: dict = field(default_factory=dict)

    def get(self, combo):
        return self.values.get(combo)

    @property
    def empty(self) -> bool:
        return not any(v is not None for v in self.values.values())

    @classmethod
    def from_scalars(cls, vanilla: list[tuple[float, float]], perturbed: list[tuple[float, float]]):
        values = {}
        for cls_name, rows in (("vanilla", vanilla), ("perturbed", perturbed)):
            arr = np.asarray(rows, dtype=float).reshape(-1, 2)
            for j, scalar in enumerate(("location", "accel")):
                if len(arr) >= 2:
                    values[(cls_name, scalar)] = (float(arr[:, j].mean()), float(arr[:, j].std(ddof=1)))
                else:
                    values[(cls_name, scalar)] = None
        return cls(values)


@dataclass(eq=False)
class PairCandidate:
    vanilla: HybridPath
    vanilla_trace: SimTrace
    perturbed: HybridPath
    perturbed_trace: SimTrace
    ind_path: HybridPath | None = None

    def __post_init__(self):
        if self.vanilla.horizon != self.perturbed.horizon:
            raise ValueError("pair paths must share the horizon length")


def grid_positions(path: HybridPath) -> np.ndarray:
    return path.grid_offsets().astype(float)


def categorical_cost(path: HybridPath) -> float:
    return float(np.count_nonzero(path.moves != STAY)) / path.horizon


def gaussian_cost(path: HybridPath, trace: SimTrace) -> float:
    """Mean shortfall of the unclamped integrated speed below zero, scaled by the top speed."""
    return float(np.mean(np.maximum(0.0, -trace.adv_raw_speed)) / SPEED_SCALE)


def raw_distance(a: HybridPath, b: HybridPath) -> tuple[float, float]:
    """(mean per-step grid distance in cells, mean |accel difference| / 10 m/s^2)."""
    if a.horizon != b.horizon:
        raise ValueError("paths must share the horizon length")
    d_loc = float(np.mean(np.linalg.norm(grid_positions(a) - grid_positions(b), axis=1)))
    d_acc = float(np.mean(np.abs(a.accels - b.accels)) / ACCEL_SCALE)
    return d_loc, d_acc


def pair_distance(pair: PairCandidate) -> float:
    d_loc, d_acc = raw_distance(pair.vanilla, pair.perturbed)
    return -1.0 / (PAIR_EPS + d_loc + d_acc)


def path_scalars(path: HybridPath) -> tuple[float, float]:
    lateral = np.cumsum(MOVE_DELTAS[path.moves, 1])
    return float(lateral.mean()), float(path.accels.mean())


def variance_cost(pair: PairCandidate, stats: DatasetStats | None) -> float:
    if stats is None or stats.empty:
        return 0.0
    chi = {"vanilla": path_scalars(pair.vanilla), "perturbed": path_scalars(pair.perturbed)}
    terms = []
    for cls_name, scalar in COMBOS:
        entry = stats.get((cls_name, scalar))
        if entry is None:
            continue
        mu, sigma = entry
        x = chi[cls_name][0 if scalar == "location" else 1]
        terms.append(min(abs(x - (mu + 2 * sigma)), abs(x - (mu - 2 * sigma))) / (sigma + VARIANCE_EPS))
    return float(np.mean(terms)) if terms else 0.0


def constraint_report(pair: PairCandidate, pair_threshold: float = 2.0) -> dict:
    d_loc, d_acc = raw_distance(pair.vanilla, pair.perturbed)
    return {
        "vanilla_clear": not pair.vanilla_trace.collision,
        "perturbed_collides": pair.perturbed_trace.collision,
        "on_road": not (pair.vanilla_trace.off_road or pair.perturbed_trace.off_road),
        "pair_close": d_loc + d_acc <= pair_threshold,
        "raw_distance": d_loc + d_acc,
    }


def rigid_constraints(pair: PairCandidate, pair_threshold: float = 2.0, penalty: float = 1e9,
                      shaping: bool = False) -> float:
    """``penalty`` per violated constraint.

    With ``shaping`` a violated constraint also adds a fraction of one penalty unit
    that shrinks as the sample approaches compliance (perturbed miss distance,
    excess pair distance). The fraction stays below one unit, so samples are
    still ordered by violation count first.
    """
    rep = constraint_report(pair, pair_threshold)
    count = sum(not rep[k] for k in ("vanilla_clear", "perturbed_collides", "on_road", "pair_close"))
    if count == 0:
        return 0.0
    frac = 0.0
    if shaping:
        if not rep["perturbed_collides"]:
            m = pair.perturbed_trace.min_distance
            frac += 0.5 * m / (m + 10.0)
        if not rep["pair_close"]:
            excess = rep["raw_distance"] - pair_threshold
            frac += 0.5 * excess / (excess + 1.0)
    return penalty * (count + frac)


def total_cost(pair: PairCandidate, stats: DatasetStats | None, w: CostWeights = CostWeights()) -> float:
    c = 0.5 * (categorical_cost(pair.vanilla) + categorical_cost(pair.perturbed))
    g = 0.5 * (gaussian_cost(pair.vanilla, pair.vanilla_trace)
               + gaussian_cost(pair.perturbed, pair.perturbed_trace))
    d = pair_distance(pair)
    v = variance_cost(pair, stats)
    r = rigid_constraints(pair, w.pair_threshold, w.penalty, w.shaping)
    return w.a1 * c + w.a2 * g + w.a3 * d + w.a4 * v + r
