"""Cross-entropy optimization: a generic loop and the vanilla/perturbed pair search."""
from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import dataclass, field
from typing import Any, Callable, Protocol, Sequence

import numpy as np

from .cost import CostWeights, DatasetStats, PairCandidate, constraint_report, total_cost
from .distributions import (
    VAR_FLOOR,
    HybridParams,
    HybridPath,
    ImportanceWeightConfig,
    UnsupportedPathError,
    importance_weight,
    sample_path,
    smooth,
    update_params,
)
from .sim import ScenarioConfig, simulate_batch

log = logging.getLogger(__name__)


class DegenerateObjectiveError(RuntimeError):
    pass


class SearchExhaustedError(RuntimeError):
    def __init__(self, message, history=None, state=None):
        super().__init__(message)
        self.history = history or []
        self.state = state


@dataclass(frozen=True, kw_only=True)
class CEConfig:
    seed: int
    N: int = 100
    rho: float = 0.1
    alpha: float = 0.8
    d: int = 3
    max_iterations: int = 60
    weight_mode: str = "unit"
    gamma_tol: float = 0.0

    def __post_init__(self):
        if self.N < 1:
            raise ValueError("N must be positive")
        if not 0.0 < self.rho <= 1.0:
            raise ValueError(f"rho must lie in (0, 1], got {self.rho}")
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must lie in [0, 1], got {self.alpha}")
        if self.n_elite < 2:
            raise ValueError("ceil(rho * N) must be at least 2")
        if self.d < 1 or self.max_iterations < 1:
            raise ValueError("d and max_iterations must be positive")
        if self.weight_mode not in ("unit", "likelihood-ratio"):
            raise ValueError(f"unknown weight_mode {self.weight_mode!r}")

    @property
    def n_elite(self) -> int:
        return elite_count(self.N, self.rho)


@dataclass(frozen=True)
class IterationReport:
    iteration: int
    gamma: float
    best_score: float
    elite_size: int
    params_digest: str

    def to_record(self) -> dict:
        return {"iteration": self.iteration, "gamma": self.gamma,
                "best_score": self.best_score, "elite_size": self.elite_size}


def history_to_jsonl(history: Sequence[IterationReport]) -> str:
    return "".join(json.dumps(r.to_record()) + "\n" for r in history)


def elite_count(n: int, rho: float) -> int:
    # guard against rho * n landing a hair above an integer
    return max(1, min(n, math.ceil(rho * n - 1e-9)))


def elite_select(scores, rho: float, orientation: str = "min") -> tuple[float, np.ndarray]:
    scores = np.asarray(scores, dtype=float)
    if scores.size == 0:
        raise ValueError("no scores to select from")
    if orientation not in ("min", "max"):
        raise ValueError("orientation must be 'min' or 'max'")
    k = elite_count(len(scores), rho)
    key = scores if orientation == "min" else -scores
    order = np.argsort(key, kind="stable")
    elite = order[:k]
    return float(scores[elite[-1]]), elite


# -- generic families ---------------------------------------------------------

class Family(Protocol):
    def sample(self, seed) -> Any: ...
    def fit(self, elite: Sequence[Any]) -> "Family": ...
    def blend(self, old: "Family", alpha: float) -> "Family": ...
    def digest(self) -> str: ...


@dataclass(frozen=True, eq=False)
class GaussianFamily:
    """Independent normals over a real vector."""

    mean: np.ndarray
    var: np.ndarray

    def sample(self, seed):
        rng = np.random.default_rng(seed)
        return np.asarray(self.mean) + np.sqrt(self.var) * rng.standard_normal(np.shape(self.mean))

    def fit(self, elite):
        x = np.stack(elite)
        return GaussianFamily(x.mean(axis=0), np.maximum(x.var(axis=0), VAR_FLOOR))

    def blend(self, old, alpha):
        return GaussianFamily(alpha * self.mean + (1 - alpha) * old.mean,
                              np.maximum(alpha * self.var + (1 - alpha) * old.var, VAR_FLOOR))

    def digest(self):
        return _digest(self.mean, self.var)


@dataclass(frozen=True, eq=False)
class CategoricalFamily:
    """Independent categoricals, one row of probabilities per component."""

    probs: np.ndarray

    def sample(self, seed):
        rng = np.random.default_rng(seed)
        cdf = np.cumsum(self.probs, axis=1)
        u = rng.random(len(self.probs))
        return np.minimum((u[:, None] >= cdf).sum(axis=1), self.probs.shape[1] - 1)

    def fit(self, elite):
        x = np.stack(elite)
        m = self.probs.shape[1]
        p = (x[:, :, None] == np.arange(m)).mean(axis=0)
        return CategoricalFamily(p)

    def blend(self, old, alpha):
        p = alpha * self.probs + (1 - alpha) * old.probs
        return CategoricalFamily(p / p.sum(axis=1, keepdims=True))

    def digest(self):
        return _digest(self.probs)


@dataclass(frozen=True, eq=False)
class HybridFamily:
    params: HybridParams

    def sample(self, seed):
        return sample_path(self.params, seed)

    def fit(self, elite):
        return HybridFamily(update_params(elite, n_moves=self.params.n_moves))

    def blend(self, old, alpha):
        return HybridFamily(smooth(self.params, old.params, alpha))

    def digest(self):
        return self.params.digest()


def _digest(*arrays) -> str:
    h = hashlib.sha256()
    for a in arrays:
        h.update(np.ascontiguousarray(a, dtype="<f8").tobytes())
    return h.hexdigest()[:16]


@dataclass
class CEResult:
    best: Any
    best_score: float
    history: list[IterationReport]
    family: Any


def ce_optimize(objective: Callable[[Any], float], family, cfg: CEConfig,
                orientation: str = "max") -> CEResult:
    """Sample, score, select the elite quantile, refit, smooth; stop on a flat gamma sequence."""
    history: list[IterationReport] = []
    best, best_score = None, None
    better = (lambda a, b: a > b) if orientation == "max" else (lambda a, b: a < b)
    for t in range(cfg.max_iterations):
        samples = [family.sample((cfg.seed, t, k)) for k in range(cfg.N)]
        scores = np.array([objective(x) for x in samples], dtype=float)
        valid = np.flatnonzero(np.isfinite(scores))
        if valid.size == 0:
            raise DegenerateObjectiveError("degenerate objective: every score in the batch is non-finite")
        gamma, elite_pos = elite_select(scores[valid], cfg.rho, orientation)
        elite_idx = valid[elite_pos]
        top = elite_idx[0]
        if best is None or better(scores[top], best_score):
            best, best_score = samples[top], float(scores[top])
        family = family.fit([samples[i] for i in elite_idx]).blend(family, cfg.alpha)
        history.append(IterationReport(t, gamma, float(scores[top]), len(elite_idx), family.digest()))
        if len(history) > cfg.d:
            recent = [r.gamma for r in history[-(cfg.d + 1):]]
            if max(recent) - min(recent) <= cfg.gamma_tol:
                break
    return CEResult(best, best_score, history, family)


# -- HybridPair search --------------------------------------------------------

ROLE_VANILLA, ROLE_PERTURBED, ROLE_IND = 0, 1, 2


@dataclass
class PairSearchState:
    vanilla_params: HybridParams
    perturbed_params: HybridParams
    ind_params: HybridParams | None
    archive_stats: DatasetStats | None
    history: list[IterationReport] = field(default_factory=list)
    best_score: float = math.inf

    def digest(self) -> str:
        parts = [self.vanilla_params.digest(), self.perturbed_params.digest()]
        if self.ind_params is not None:
            parts.append(self.ind_params.digest())
        return hashlib.sha256("".join(parts).encode()).hexdigest()[:16]


def _elite_weights(paths, elite, cfg: CEConfig, reference, current):
    """Elite members with their importance weights; unsupported paths are dropped."""
    if cfg.weight_mode == "unit":
        return [paths[i] for i in elite], None
    wcfg = ImportanceWeightConfig("likelihood-ratio", reference)
    kept, weights = [], []
    for i in elite:
        try:
            weights.append(importance_weight(paths[i], wcfg, current))
        except UnsupportedPathError:
            continue
        kept.append(paths[i])
    return kept, weights


def _refit(paths, elite, cfg, reference, current):
    kept, weights = _elite_weights(paths, elite, cfg, reference, current)
    if not kept:
        return current
    return smooth(update_params(kept, weights, current.n_moves), current, cfg.alpha)


def hybrid_pair_search(cfg: CEConfig, scenario: ScenarioConfig, stats: DatasetStats | None = None,
                       weights: CostWeights = CostWeights()) -> tuple[PairCandidate, PairSearchState]:
    """Search for a close vanilla (no collision) / perturbed (collision) adversary pair."""
    u_adv, u_ind = scenario.adv_prior, scenario.ind_prior
    state = PairSearchState(u_adv, u_adv, u_ind, stats)
    best: PairCandidate | None = None
    searched = u_ind is not None
    for t in range(cfg.max_iterations):
        van = [sample_path(state.vanilla_params, (cfg.seed, t, k, ROLE_VANILLA)) for k in range(cfg.N)]
        pert = [sample_path(state.perturbed_params, (cfg.seed, t, k, ROLE_PERTURBED)) for k in range(cfg.N)]
        ind = ([sample_path(state.ind_params, (cfg.seed, t, k, ROLE_IND)) for k in range(cfg.N)]
               if searched else [scenario.ind_script] * cfg.N)
        van_tr = simulate_batch(scenario, van, ind)
        pert_tr = simulate_batch(scenario, pert, ind)
        pairs = [PairCandidate(van[k], van_tr[k], pert[k], pert_tr[k], ind[k]) for k in range(cfg.N)]
        scores = np.array([total_cost(p, stats, weights) for p in pairs])
        valid = np.flatnonzero(np.isfinite(scores))
        if valid.size == 0:
            raise DegenerateObjectiveError("degenerate objective: every pair score is non-finite")
        gamma, elite_pos = elite_select(scores[valid], cfg.rho, "min")
        elite = valid[elite_pos]

        for k in elite:
            if scores[k] < state.best_score and _compliant(pairs[k], weights):
                best, state.best_score = pairs[k], float(scores[k])

        state.vanilla_params = _refit(van, elite, cfg, u_adv, state.vanilla_params)
        state.perturbed_params = _refit(pert, elite, cfg, u_adv, state.perturbed_params)
        if searched:
            state.ind_params = _refit(ind, elite, cfg, u_ind, state.ind_params)
        state.history.append(IterationReport(t, gamma, float(scores[elite[0]]), len(elite), state.digest()))
        log.debug("iteration %d gamma %.4g best %.4g", t, gamma, scores[elite[0]])
        if gamma < 0 and best is not None:
            return best, state
    raise SearchExhaustedError(
        f"search-exhausted: no compliant pair after {cfg.max_iterations} iterations",
        history=state.history, state=state)


def _compliant(pair: PairCandidate, weights: CostWeights) -> bool:
    rep = constraint_report(pair, weights.pair_threshold)
    return all(rep[k] for k in ("vanilla_clear", "perturbed_collides", "on_road", "pair_close"))
