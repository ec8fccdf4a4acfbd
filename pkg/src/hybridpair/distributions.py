"""Hybrid categorical x Gaussian path distributions.

A path has one categorical grid move and one Gaussian acceleration per step.
The move alphabet is relative: ``(d_long, d_lat)`` in grid cells, with
positive lateral meaning "to the left".
"""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

MOVES = ("stay", "forward", "forward_left", "forward_right", "left", "right")
MOVE_DELTAS = np.array([(0, 0), (1, 0), (1, 1), (1, -1), (0, 1), (0, -1)], dtype=np.int64)
N_MOVES = len(MOVES)

VAR_FLOOR = 1e-4
PROB_TOL = 1e-9


class EmptyEliteError(ValueError):
    pass


class UnsupportedPathError(ValueError):
    """Path has zero density under the sampling parameters."""


@dataclass(frozen=True, eq=False)
class HybridParams:
    """Per-step move probabilities ``cat`` (T x M) and acceleration mean/var (T,)."""

    cat: np.ndarray
    mean: np.ndarray
    var: np.ndarray

    def __post_init__(self):
        cat = np.array(self.cat, dtype=float)
        mean = np.array(self.mean, dtype=float).reshape(-1)
        var = np.array(self.var, dtype=float).reshape(-1)
        if cat.ndim != 2:
            raise ValueError("cat must be a T x M matrix")
        if not (len(cat) == len(mean) == len(var)):
            raise ValueError("cat, mean and var must share the horizon length")
        if np.any(cat < 0) or np.any(np.abs(cat.sum(axis=1) - 1.0) > PROB_TOL):
            raise ValueError("each categorical row must be a probability vector")
        if not np.all(np.isfinite(mean)):
            raise ValueError("gaussian means must be finite")
        if np.any(var < VAR_FLOOR * (1 - 1e-12)):
            raise ValueError(f"gaussian variances must be >= {VAR_FLOOR}")
        for name, arr in (("cat", cat), ("mean", mean), ("var", var)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @property
    def horizon(self) -> int:
        return self.cat.shape[0]

    @property
    def n_moves(self) -> int:
        return self.cat.shape[1]

    @classmethod
    def uniform(cls, horizon: int, n_moves: int = N_MOVES, mean: float = 0.0, var: float = 1.0):
        return cls(np.full((horizon, n_moves), 1.0 / n_moves),
                   np.full(horizon, mean), np.full(horizon, var))

    @classmethod
    def from_move_probs(cls, probs: Sequence[float], horizon: int, mean: float = 0.0, var: float = 1.0):
        row = np.asarray(probs, dtype=float)
        row = row / row.sum()
        return cls(np.tile(row, (horizon, 1)), np.full(horizon, mean), np.full(horizon, var))

    def to_record(self) -> dict:
        return {
            "horizon": self.horizon,
            "moves": list(MOVES[: self.n_moves]) if self.n_moves <= N_MOVES else self.n_moves,
            "cat": self.cat.tolist(),
            "gauss": np.column_stack([self.mean, self.var]).tolist(),
        }

    @classmethod
    def from_record(cls, rec: dict) -> "HybridParams":
        gauss = np.asarray(rec["gauss"], dtype=float).reshape(-1, 2)
        params = cls(np.asarray(rec["cat"], dtype=float), gauss[:, 0], gauss[:, 1])
        if params.horizon != rec["horizon"]:
            raise ValueError("horizon field does not match matrix shapes")
        return params

    def digest(self) -> str:
        h = hashlib.sha256()
        for arr in (self.cat, self.mean, self.var):
            h.update(np.ascontiguousarray(arr, dtype="<f8").tobytes())
        return h.hexdigest()[:16]


@dataclass(frozen=True, eq=False)
class HybridPath:
    moves: np.ndarray
    accels: np.ndarray

    def __post_init__(self):
        moves = np.array(self.moves, dtype=np.int64).reshape(-1)
        accels = np.array(self.accels, dtype=float).reshape(-1)
        if len(moves) != len(accels):
            raise ValueError("moves and accels must have equal length")
        if np.any(moves < 0):
            raise ValueError("move indices must be non-negative")
        moves.setflags(write=False)
        accels.setflags(write=False)
        object.__setattr__(self, "moves", moves)
        object.__setattr__(self, "accels", accels)

    @property
    def horizon(self) -> int:
        return len(self.moves)

    def grid_offsets(self) -> np.ndarray:
        """Cumulative (long, lat) cell offsets after each step, shape (T, 2)."""
        return np.cumsum(MOVE_DELTAS[self.moves], axis=0)

    def to_record(self) -> dict:
        return {"moves": self.moves.tolist(), "accels": self.accels.tolist()}

    @classmethod
    def from_record(cls, rec: dict) -> "HybridPath":
        return cls(rec["moves"], rec["accels"])

    def __eq__(self, other):
        if not isinstance(other, HybridPath):
            return NotImplemented
        return np.array_equal(self.moves, other.moves) and np.array_equal(self.accels, other.accels)

    __hash__ = None


@dataclass(frozen=True)
class ImportanceWeightConfig:
    mode: str = "unit"
    reference: HybridParams | None = None

    def __post_init__(self):
        if self.mode not in ("unit", "likelihood-ratio"):
            raise ValueError(f"unknown importance weight mode {self.mode!r}")
        if self.mode == "likelihood-ratio" and self.reference is None:
            raise ValueError("likelihood-ratio mode requires reference parameters")


def sample_path(params: HybridParams, seed) -> HybridPath:
    rng = np.random.default_rng(seed)
    u = rng.random(params.horizon)
    cdf = np.cumsum(params.cat, axis=1)
    # index of the first cdf entry exceeding u; clip guards cdf[-1] rounding below 1
    moves = np.minimum((u[:, None] >= cdf).sum(axis=1), params.n_moves - 1)
    # a zero-probability move can only be hit through cdf rounding; step back to a supported one
    zero = params.cat[np.arange(params.horizon), moves] == 0.0
    if np.any(zero):
        for t in np.flatnonzero(zero):
            moves[t] = int(np.flatnonzero(params.cat[t] > 0)[-1])
    accels = params.mean + np.sqrt(params.var) * rng.standard_normal(params.horizon)
    return HybridPath(moves, accels)


def _stack(elite: Sequence[HybridPath], weights) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    if len(elite) == 0:
        raise EmptyEliteError("empty elite set")
    w = np.ones(len(elite)) if weights is None else np.asarray(weights, dtype=float)
    if len(w) != len(elite):
        raise ValueError("one weight per elite path required")
    if np.any(w < 0) or not np.all(np.isfinite(w)) or w.sum() <= 0:
        raise ValueError("weights must be finite, non-negative and not all zero")
    horizons = {p.horizon for p in elite}
    if len(horizons) != 1:
        raise ValueError("elite paths must share the horizon length")
    moves = np.stack([p.moves for p in elite])
    accels = np.stack([p.accels for p in elite])
    return moves, accels, w


def update_categorical(elite: Sequence[HybridPath], weights=None, n_moves: int = N_MOVES) -> np.ndarray:
    """Weighted elite move frequencies per step, shape (T, n_moves)."""
    moves, _, w = _stack(elite, weights)
    if moves.max() >= n_moves:
        raise ValueError("move index outside the alphabet")
    onehot = moves[:, :, None] == np.arange(n_moves)[None, None, :]
    probs = np.tensordot(w, onehot.astype(float), axes=1) / w.sum()
    return probs / probs.sum(axis=1, keepdims=True)


def update_gaussian(elite: Sequence[HybridPath], weights=None, var_floor: float = VAR_FLOOR):
    """Weighted elite mean and second central moment per step, variance floored."""
    _, accels, w = _stack(elite, weights)
    wn = w / w.sum()
    mean = wn @ accels
    var = wn @ (accels - mean) ** 2
    return mean, np.maximum(var, var_floor)


def update_params(elite: Sequence[HybridPath], weights=None, n_moves: int = N_MOVES) -> HybridParams:
    cat = update_categorical(elite, weights, n_moves)
    mean, var = update_gaussian(elite, weights)
    return HybridParams(cat, mean, var)


def smooth(new: HybridParams, old: HybridParams, alpha: float) -> HybridParams:
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must lie in [0, 1], got {alpha}")
    if new.cat.shape != old.cat.shape:
        raise ValueError("parameters differ in horizon or move alphabet")
    if alpha == 1.0:
        return new
    if alpha == 0.0:
        return old
    cat = alpha * new.cat + (1 - alpha) * old.cat
    cat = cat / cat.sum(axis=1, keepdims=True)
    mean = alpha * new.mean + (1 - alpha) * old.mean
    var = np.maximum(alpha * new.var + (1 - alpha) * old.var, VAR_FLOOR)
    return HybridParams(cat, mean, var)


def log_density(path: HybridPath, params: HybridParams) -> float:
    if path.horizon != params.horizon:
        raise ValueError("path and params horizons differ")
    probs = params.cat[np.arange(path.horizon), path.moves]
    if np.any(probs <= 0):
        return -math.inf
    resid = path.accels - params.mean
    gauss = -0.5 * (np.log(2 * np.pi * params.var) + resid ** 2 / params.var)
    return float(np.log(probs).sum() + gauss.sum())


def importance_weight(path: HybridPath, cfg: ImportanceWeightConfig, current: HybridParams) -> float:
    if cfg.mode == "unit":
        return 1.0
    log_cur = log_density(path, current)
    if log_cur == -math.inf:
        raise UnsupportedPathError("path has a zero-probability move under the current parameters")
    w = math.exp(log_density(path, cfg.reference) - log_cur)
    if not math.isfinite(w) or w <= 0.0:
        raise UnsupportedPathError("likelihood ratio is not a finite positive number")
    return w


def params_to_jsonl(params: Iterable[HybridParams]) -> str:
    return "".join(json.dumps(p.to_record()) + "\n" for p in params)


def params_from_jsonl(text: str) -> list[HybridParams]:
    return [HybridParams.from_record(json.loads(line)) for line in text.splitlines() if line.strip()]
