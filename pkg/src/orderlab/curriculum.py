"""Curriculum search over batch orders and classical difficulty-based baselines."""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .data import Batch, Corpus
from .errors import ConfigError, InputError, OrderLabError
from .estimator import EstimatorConfig, estimate
from .models import DifferentiableModel
from .numerics import make_rng
from .store import UpdateTermStore
from .trainer import ReferenceTrajectory, validate_permutation

log = logging.getLogger(__name__)

STRATEGIES = ("RO", "SL", "PPL", "PD")


@dataclass(frozen=True)
class GAConfig:
    population: int = 8
    generations: int = 8
    mutation_prob: float = 0.1
    selection_rate: float = 0.5
    seed: int = 0
    inject_identity: bool = False
    jobs: int = 1

    def __post_init__(self):
        if self.population < 2 or self.population % 2:
            raise ConfigError("population must be an even number >= 2")
        if self.generations < 1:
            raise ConfigError("generations must be >= 1")
        if not 0 <= self.mutation_prob <= 1:
            raise ConfigError("mutation_prob must lie in [0, 1]")
        if self.selection_rate != 0.5:
            raise ConfigError("only the 50% selection rate is supported")


def pmx_crossover(parent_a: Sequence[int], parent_b: Sequence[int], l: int, r: int) -> tuple[int, ...]:
    """Partially matched crossover.

    Positions l..r (1-indexed, inclusive) come from ``parent_b``; the rest come
    from ``parent_a``, with values that collide with the copied segment
    chased through the segment's b -> a mapping.
    """
    a = validate_permutation(parent_a)
    b = validate_permutation(parent_b, len(a))
    T = len(a)
    if not (1 <= l < r <= T):
        raise InputError(f"crossover points must satisfy 1 <= l < r <= {T}, got l={l}, r={r}")
    seg = range(l - 1, r)
    child = list(a)
    mapping = {}
    for p in seg:
        child[p] = b[p]
        mapping[b[p]] = a[p]
    for p in range(T):
        if l - 1 <= p < r:
            continue
        x = a[p]
        while x in mapping:
            x = mapping[x]
        child[p] = x
    return tuple(child)


def swap_mutation(perm: tuple[int, ...], rng: np.random.Generator) -> tuple[int, ...]:
    i, j = rng.choice(len(perm), size=2, replace=False) if len(perm) > 1 else (0, 0)
    out = list(perm)
    out[i], out[j] = out[j], out[i]
    return tuple(out)


@dataclass
class GAResult:
    best_perm: tuple[int, ...]
    best_fitness: float
    history: list[dict] = field(default_factory=list)
    evaluations: int = 0


def genetic_search(fitness: Callable[[tuple[int, ...]], float], T: int, cfg: GAConfig) -> GAResult:
    """Minimise ``fitness`` over permutations of range(T).

    Top half survives each generation, the other half is refilled with PMX
    children of distinct surviving parents, each mutated by a random swap
    with probability ``mutation_prob``. Fitness values are cached per genome,
    so at most N + K*N/2 evaluations are made.
    """
    rng = make_rng(cfg.seed, "ga")
    N = cfg.population
    cache: dict[tuple[int, ...], float] = {}
    counter = {"n": 0}

    def score_all(pop):
        todo = [p for p in dict.fromkeys(pop) if p not in cache]
        if cfg.jobs > 1 and len(todo) > 1:
            with ThreadPoolExecutor(cfg.jobs) as pool:
                vals = list(pool.map(_safe(fitness), todo))
        else:
            vals = [_safe(fitness)(p) for p in todo]
        for p, v in zip(todo, vals):
            cache[p] = v
        counter["n"] += len(todo)
        return [cache[p] for p in pop]

    # distinct genomes where T! allows it, so tiny searches are exhaustive
    distinct = T > 12 or math.factorial(T) >= N
    pop = []
    while len(pop) < N:
        g = tuple(int(i) for i in rng.permutation(T))
        if g not in pop or not distinct:
            pop.append(g)
    if cfg.inject_identity:
        pop[0] = tuple(range(T))
    scores = score_all(pop)
    best_perm, best_fit = _best(pop, scores)
    history = []
    for gen in range(1, cfg.generations + 1):
        ranked = sorted(zip(scores, range(N)), key=lambda sp: (sp[0], sp[1]))
        survivors = [pop[i] for _, i in ranked[: N // 2]]
        children = []
        while len(children) < N - len(survivors):
            if len(survivors) >= 2:
                ia, ib = rng.choice(len(survivors), size=2, replace=False)
            else:
                ia = ib = 0
            if T >= 2:
                l = int(rng.integers(1, T))
                r = int(rng.integers(l + 1, T + 1))
                child = pmx_crossover(survivors[ia], survivors[ib], l, r)
            else:
                child = survivors[ia]
            if rng.random() < cfg.mutation_prob:
                child = swap_mutation(child, rng)
            children.append(child)
        pop = survivors + children
        scores = score_all(pop)
        gen_best, gen_fit = _best(pop, scores)
        if gen_fit < best_fit:
            best_perm, best_fit = gen_best, gen_fit
        finite = [s for s in scores if math.isfinite(s)]
        history.append({
            "generation": gen,
            "best_fitness": best_fit,
            "generation_best": gen_fit,
            "median_fitness": float(np.median(finite)) if finite else math.inf,
            "best_genome": list(best_perm),
            "evaluations": counter["n"],
        })
    return GAResult(best_perm, best_fit, history, counter["n"])


def _best(pop, scores):
    i = min(range(len(pop)), key=lambda k: (scores[k], k))
    return pop[i], scores[i]


def _safe(fitness):
    def wrapped(perm):
        try:
            val = float(fitness(perm))
        except (OrderLabError, FloatingPointError, OverflowError) as exc:
            log.warning("genome %s failed: %s", list(perm), exc)
            return math.inf
        return val if math.isfinite(val) else math.inf
    return wrapped


def ga_search(store: UpdateTermStore, trajectory: ReferenceTrajectory, model: DifferentiableModel,
              val_set: Batch, ga_config: GAConfig = GAConfig(),
              est_config: EstimatorConfig = EstimatorConfig()) -> GAResult:
    """Search for the order whose estimated final parameters score best on ``val_set``."""

    def fitness(perm):
        est = estimate(store, trajectory, perm, est_config)
        return model.metric(est.final, val_set)

    return genetic_search(fitness, store.T, ga_config)


# --- baselines --------------------------------------------------------------


def difficulty_scores(corpus: Corpus, strategy: str, ref_models: dict | None = None, seed: int = 0) -> np.ndarray:
    """Per-batch difficulty rho for one of the RO/SL/PPL/PD strategies.

    ``ref_models`` maps "reference" (PPL) or "strong"/"weak" (PD) to
    (model, params) pairs.
    """
    ref_models = ref_models or {}
    T = corpus.T
    if strategy == "RO":
        return make_rng(seed, "baseline", "RO").uniform(0.0, 1.0, T)
    if strategy == "SL":
        return np.array([b.token_count for b in corpus.train], dtype=np.float64)
    if strategy == "PPL":
        if "reference" not in ref_models:
            raise ConfigError("the PPL baseline needs a trained reference model")
        model, params = ref_models["reference"]
        return np.array([-model.metric(params, b) for b in corpus.train])
    if strategy == "PD":
        if "strong" not in ref_models or "weak" not in ref_models:
            raise ConfigError("the PD baseline needs a strong and a weak trained model")
        (ms, ps), (mw, pw) = ref_models["strong"], ref_models["weak"]
        out = []
        for b in corpus.train:
            rw, rs = mw.metric(pw, b), ms.metric(ps, b)
            out.append((rw - rs) / rw)
        return np.array(out)
    raise ConfigError(f"unknown baseline strategy {strategy!r}; expected one of {STRATEGIES}")


def baseline_order(corpus: Corpus, strategy: str, ref_models: dict | None = None, seed: int = 0,
                   descending: bool = False) -> tuple[int, ...]:
    """Batches sorted easy -> hard (or the reverse), ties broken by batch id."""
    rho = difficulty_scores(corpus, strategy, ref_models, seed)
    key = -rho if descending else rho
    return tuple(int(i) for i in np.lexsort((np.arange(len(rho)), key)))


def order_from_scores(scores: Sequence[float], descending: bool = False) -> tuple[int, ...]:
    rho = np.asarray(scores, dtype=np.float64)
    key = -rho if descending else rho
    return tuple(int(i) for i in np.lexsort((np.arange(len(rho)), key)))
