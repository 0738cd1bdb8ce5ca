"""Retraining-free trajectory estimation under a new batch order.

Starting from gamma_0 = theta_0, each step expands the Adam update term
around the reference checkpoint theta_t:

    delta      = gamma_t - theta_t
    update     = Gamma(theta_t, B) + delta * dGamma(theta_t, B) [+ c * delta**2 * d2Gamma(theta_t, B)]
    gamma_t+1  = gamma_t - lr * update

All products are per coordinate. No model gradient is evaluated here.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .data import Batch
from .errors import ConfigError, DivergenceError, InputError, StoreError
from .models import DifferentiableModel, EvalResult
from .numerics import ParamVector
from .store import UpdateTermStore
from .trainer import ReferenceTrajectory, validate_permutation

FUT = "fut"
FUTPP = "futpp"


@dataclass(frozen=True)
class EstimatorConfig:
    """``clip_target`` is "update" (default), "params" or "none".

    With "update", each coordinate of the estimated update is limited to
    max(clip_bound, |stored base update|) in magnitude, so the correction
    terms can never push a step past the bound while unperturbed steps stay
    exactly as recorded.
    """

    mode: str = FUT
    c: float = 0.5
    clip_bound: float = 1.0
    clip_target: str = "update"

    def __post_init__(self):
        if self.mode not in (FUT, FUTPP):
            raise ConfigError(f"mode must be {FUT!r} or {FUTPP!r}, got {self.mode!r}")
        if not self.clip_bound > 0:
            raise ConfigError("clip_bound must be positive")
        if not self.c >= 0:
            raise ConfigError("c must be non-negative")
        if self.clip_target not in ("update", "params", "none"):
            raise ConfigError(f"unknown clip_target {self.clip_target!r}")


@dataclass(eq=False)
class EstimatedTrajectory:
    layout: tuple
    gammas: np.ndarray
    perm: tuple[int, ...]
    config: EstimatorConfig
    updates: np.ndarray | None = None
    evals: list[EvalResult] = field(default_factory=list)
    eval_steps: list[int] = field(default_factory=list)

    @property
    def T(self) -> int:
        return len(self.perm)

    def gamma(self, t: int) -> ParamVector:
        return ParamVector(self.layout, self.gammas[t])

    @property
    def final(self) -> np.ndarray:
        return self.gammas[-1]


def estimate(store: UpdateTermStore, theta: ReferenceTrajectory, perm: Sequence[int],
             config: EstimatorConfig = EstimatorConfig(), keep_updates: bool = False) -> EstimatedTrajectory:
    perm = validate_permutation(perm, store.T)
    if theta.T != store.T:
        raise StoreError(f"store covers {store.T} steps but trajectory has {theta.T}")
    second = config.mode == FUTPP
    if second and not store.includes_second_order:
        raise StoreError("FUT++ needs a store built with second-order terms")
    G, dG, d2G = store.dense()
    lr = theta.config.lr
    T, D = store.T, store.dim
    gammas = np.empty((T + 1, D))
    gammas[0] = theta.thetas[0]
    updates = np.empty((T, D)) if keep_updates else None
    with np.errstate(over="ignore", invalid="ignore"):
        for t, l in enumerate(perm):
            delta = gammas[t] - theta.thetas[t]
            base = G[t, l]
            update = base + delta * dG[t, l]
            if second:
                update = update + config.c * (delta * delta) * d2G[t, l]
            if config.clip_target == "update":
                bound = np.maximum(config.clip_bound, np.abs(base))
                update = np.clip(update, -bound, bound)
            nxt = gammas[t] - lr * update
            if config.clip_target == "params":
                nxt = np.clip(nxt, -config.clip_bound, config.clip_bound)
            if not np.isfinite(nxt).all():
                raise DivergenceError(f"estimated trajectory became non-finite at step {t}")
            gammas[t + 1] = nxt
            if updates is not None:
                updates[t] = update
    return EstimatedTrajectory(theta.layout, gammas, perm, config, updates)


def estimate_performance(estimated: EstimatedTrajectory, model: DifferentiableModel, dataset: Batch,
                         steps: str | Sequence[int] = "final") -> list[EvalResult]:
    """R(gamma_t, dataset) at the requested steps ("final", "all", or explicit indices)."""
    if isinstance(steps, str):
        if steps == "final":
            idx = [estimated.T]
        elif steps == "all":
            idx = list(range(estimated.T + 1))
        else:
            raise InputError(f"unknown steps selector {steps!r}")
    else:
        idx = [int(s) for s in steps]
        if any(not 0 <= s <= estimated.T for s in idx):
            raise InputError("step index outside trajectory")
    results = [model.evaluate(estimated.gammas[s], dataset) for s in idx]
    estimated.evals, estimated.eval_steps = results, idx
    return results


def identity(T: int) -> tuple[int, ...]:
    return tuple(range(T))


def parse_permutation(text: str, T: int | None = None) -> tuple[int, ...]:
    try:
        values = [int(tok) for tok in text.replace(" ", "").split(",") if tok != ""]
    except ValueError:
        raise InputError(f"cannot parse permutation {text!r}") from None
    return validate_permutation(values, T)
