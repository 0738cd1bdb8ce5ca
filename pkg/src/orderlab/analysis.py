"""Experiment harness: estimation accuracy against retraining, memorization
heatmaps, generalization curves and timing comparisons."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
from scipy import stats

from .data import Batch, Corpus, batch_similarity
from .errors import InputError, TrainingError
from .estimator import FUT, FUTPP, EstimatorConfig, estimate
from .models import DifferentiableModel
from .numerics import make_rng
from .store import UpdateTermStore
from .trainer import ReferenceTrajectory, retrain_oracle

log = logging.getLogger(__name__)

RANDOM = "random"


@dataclass
class AbsDiffReport:
    method: str
    perms: list[tuple[int, ...]]
    r_true: np.ndarray
    r_hat: np.ndarray

    @property
    def absdiff(self) -> float:
        return absdiff(self.r_hat, self.r_true)

    def to_dict(self) -> dict:
        return {"method": self.method, "absdiff": self.absdiff, "N": len(self.perms),
                "orders": [{"perm": list(p), "r": float(r), "r_hat": float(rh)}
                           for p, r, rh in zip(self.perms, self.r_true, self.r_hat)]}


def absdiff(r_hat: Sequence[float], r_true: Sequence[float]) -> float:
    r_hat, r_true = np.asarray(r_hat, dtype=np.float64), np.asarray(r_true, dtype=np.float64)
    if r_hat.shape != r_true.shape or r_hat.size == 0:
        raise InputError("AbsDiff needs two equally long, non-empty sequences")
    return float(np.mean(np.abs(r_hat - r_true)))


def random_baseline(r_true: Sequence[float], rng: np.random.Generator) -> np.ndarray:
    """Guesses drawn uniformly from [min r, max r] of the true values."""
    r_true = np.asarray(r_true, dtype=np.float64)
    lo, hi = r_true.min(), r_true.max()
    return np.clip(rng.uniform(lo, hi, size=r_true.size), lo, hi)


def sample_permutations(T: int, N: int, rng: np.random.Generator) -> list[tuple[int, ...]]:
    return [tuple(int(i) for i in rng.permutation(T)) for _ in range(N)]


def _oracle_metric(model, corpus, perm, trajectory, dataset):
    _, evals = retrain_oracle(model, corpus, perm, trajectory.config, trajectory.theta(0), dataset, "final")
    return evals[-1].metric


def absdiff_eval(store: UpdateTermStore, trajectory: ReferenceTrajectory, model: DifferentiableModel,
                 corpus: Corpus, N: int = 10, methods: Iterable[str] = (FUT, FUTPP, RANDOM), seed: int = 0,
                 est_config: EstimatorConfig = EstimatorConfig(), perms: Sequence[Sequence[int]] | None = None,
                 map_fn=map) -> dict[str, AbsDiffReport]:
    """Compare estimated and retrained validation metrics over N sampled orders.

    ``map_fn`` lets callers run the oracle retrainings in a worker pool.
    """
    if N < 1:
        raise InputError("N must be >= 1")
    methods = list(methods)
    rng = make_rng(seed, "absdiff", "orders")
    perms = [tuple(p) for p in perms] if perms is not None else sample_permutations(store.T, N, rng)
    val = corpus.validation

    def oracle(perm):
        try:
            return _oracle_metric(model, corpus, perm, trajectory, val)
        except TrainingError:
            return None

    r_true = list(map_fn(oracle, perms))
    for k, r in enumerate(r_true):
        if r is None:
            replacement = tuple(int(i) for i in rng.permutation(store.T))
            log.warning("oracle diverged on %s; resampling once", list(perms[k]))
            perms[k] = replacement
            r_true[k] = _oracle_metric(model, corpus, replacement, trajectory, val)
    r_true = np.array(r_true, dtype=np.float64)

    reports = {}
    for method in methods:
        if method == RANDOM:
            r_hat = random_baseline(r_true, make_rng(seed, "absdiff", "random"))
        elif method in (FUT, FUTPP):
            cfg = EstimatorConfig(method, est_config.c, est_config.clip_bound, est_config.clip_target)
            r_hat = np.array([model.metric(estimate(store, trajectory, p, cfg).final, val) for p in perms])
        else:
            raise InputError(f"unknown method {method!r}")
        reports[method] = AbsDiffReport(method, list(perms), r_true, r_hat)
    return reports


# --- memorization / generalization -----------------------------------------


def pinned_permutations(T: int, batch: int, position: int, N: int, seed: int) -> list[tuple[int, ...]]:
    """N orders with ``batch`` fixed at ``position`` and the others shuffled (Fisher-Yates)."""
    if not (0 <= batch < T and 0 <= position < T):
        raise InputError("batch and position must lie in [0, T)")
    rng = make_rng(seed, "pinned", batch, position)
    others = [b for b in range(T) if b != batch]
    out = []
    for _ in range(N):
        rest = list(others)
        rng.shuffle(rest)
        rest.insert(position, batch)
        out.append(tuple(rest))
    return out


@dataclass
class Heatmap:
    """grid[i, j]: mean metric when batch i is trained at position j."""

    grid: np.ndarray
    N: int
    target: str
    mode: str
    seed: int

    @property
    def T(self) -> int:
        return self.grid.shape[0]


def _pinned_finals(store, trajectory, model, corpus, N, seed, oracle, est_config):
    """Final parameters for every pinned order, keyed by (i, j) -> list of flat vectors."""
    T = store.T if store is not None else corpus.T
    finals = {}
    for i in range(T):
        for j in range(T):
            perms = pinned_permutations(T, i, j, N, seed)
            if oracle:
                finals[(i, j)] = [retrain_oracle(model, corpus, p, trajectory.config, trajectory.theta(0),
                                                 None, "final")[0].thetas[-1] for p in perms]
            else:
                finals[(i, j)] = [estimate(store, trajectory, p, est_config).final for p in perms]
    return finals


def _grid(finals, model, T, dataset_for_row):
    grid = np.empty((T, T))
    for (i, j), params in finals.items():
        ds = dataset_for_row(i)
        grid[i, j] = np.mean([model.metric(p, ds) for p in params])
    return grid


def memorization_heatmap(store: UpdateTermStore | None, trajectory: ReferenceTrajectory, model: DifferentiableModel,
                         corpus: Corpus, N: int = 3, seed: int = 0, oracle: bool = False,
                         est_config: EstimatorConfig = EstimatorConfig(), finals=None) -> Heatmap:
    """Cells are mean R(final params, B_i) with B_i pinned at position j.

    ``oracle=True`` retrains for every pinned order instead of estimating.
    """
    if N < 1:
        raise InputError("N must be >= 1")
    T = corpus.T
    finals = finals or _pinned_finals(store, trajectory, model, corpus, N, seed, oracle, est_config)
    grid = _grid(finals, model, T, lambda i: corpus.train[i])
    return Heatmap(grid, N, "batch", "oracle" if oracle else est_config.mode, seed)


@dataclass
class GeneralizationResult:
    curves: np.ndarray
    similarity: np.ndarray
    tau: float
    high: list[int]
    low: list[int]
    N: int
    mode: str
    group_means: dict = field(default_factory=dict)


def similarity_groups(similarity: Sequence[float]) -> tuple[float, list[int], list[int]]:
    """Split batches at the mean similarity; ties join the high group."""
    sim = np.asarray(similarity, dtype=np.float64)
    tau = float(sim.mean())
    high = [i for i, s in enumerate(sim) if s >= tau or np.isclose(s, tau, rtol=0, atol=1e-12)]
    low = [i for i in range(len(sim)) if i not in high]
    return tau, high, low


def generalization_curves(store: UpdateTermStore | None, trajectory: ReferenceTrajectory, model: DifferentiableModel,
                          corpus: Corpus, test_set: Batch | None = None, N: int = 3, seed: int = 0,
                          oracle: bool = False, est_config: EstimatorConfig = EstimatorConfig(),
                          finals=None) -> GeneralizationResult:
    """Cells are mean R(final params, D) with B_i pinned at position j, plus similarity grouping."""
    D = corpus.test if test_set is None else test_set
    T = corpus.T
    finals = finals or _pinned_finals(store, trajectory, model, corpus, N, seed, oracle, est_config)
    curves = _grid(finals, model, T, lambda i: D)
    if D.tokens is not None:
        sim = np.array([batch_similarity(b, D) for b in corpus.train])
    else:
        sim = np.zeros(T)
    tau, high, low = similarity_groups(sim)
    means = {"high": curves[high].mean(axis=0).tolist() if high else [],
             "low": curves[low].mean(axis=0).tolist() if low else []}
    return GeneralizationResult(curves, sim, tau, high, low, N, "oracle" if oracle else est_config.mode, means)


def pinned_finals(store, trajectory, model, corpus, N=3, seed=0, oracle=False, est_config=EstimatorConfig()):
    """Shared final parameters so heatmap and curves can reuse one sweep."""
    return _pinned_finals(store, trajectory, model, corpus, N, seed, oracle, est_config)


def recency_score(grid: np.ndarray) -> float:
    """Mean over rows of the Spearman correlation between position and cell value."""
    T = grid.shape[1]
    pos = np.arange(T)
    rhos = [stats.spearmanr(pos, row).statistic for row in grid if np.ptp(row) > 0]
    return float(np.mean(rhos)) if rhos else 0.0


def trend_slopes(curves: np.ndarray) -> np.ndarray:
    pos = np.arange(curves.shape[1])
    return np.array([np.polyfit(pos, row, 1)[0] for row in curves])


def pearson(a, b) -> float:
    return float(stats.pearsonr(np.ravel(a), np.ravel(b)).statistic)


# --- timing -----------------------------------------------------------------


def timing_compare(store_build_cost: float, per_order_est_cost: float, per_order_retrain_cost: float,
                   N_values: Sequence[int] = (10, 50, 100, 1000)) -> list[dict]:
    """Amortized per-order estimation cost versus retraining cost for each N."""
    rows = []
    for N in N_values:
        if N < 1:
            raise InputError("N values must be positive")
        amortized = store_build_cost / N + per_order_est_cost
        rows.append({"N": int(N), "amortized_estimate_s": amortized, "retrain_s": per_order_retrain_cost,
                     "speedup": per_order_retrain_cost / amortized if amortized > 0 else float("inf")})
    return rows
