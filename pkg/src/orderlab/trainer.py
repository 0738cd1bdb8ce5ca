"""Adam training with full trajectory capture, and the retraining oracle."""

from __future__ import annotations

import json
import math
import os
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from ._binio import Reader, Writer
from .data import Batch, Corpus
from .errors import InputError, NumericError, ShapeError, TrainingError
from .models import DifferentiableModel, EvalResult
from .numerics import Layout, ParamVector

DIVERGENCE_LOSS = 1e6


@dataclass(frozen=True)
class AdamConfig:
    lr: float = 5e-3
    beta1: float = 0.9
    beta2: float = 0.95
    eps: float = 1e-8

    def __post_init__(self):
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise InputError("beta1 and beta2 must lie in (0, 1)")
        if not (self.lr > 0 and self.eps > 0):
            raise InputError("lr and eps must be positive")


@dataclass(frozen=True)
class AdamState:
    """Uncorrected moment accumulators after ``t`` completed steps."""

    m: ParamVector
    v: ParamVector
    t: int = 0

    @classmethod
    def fresh(cls, layout: Layout) -> AdamState:
        return cls(ParamVector.zeros(layout), ParamVector.zeros(layout), 0)


def adam_moments(m_raw_prev: np.ndarray, v_raw_prev: np.ndarray, grad: np.ndarray, s: int,
                 cfg: AdamConfig):
    """Raw accumulators at step s (1-based) and the update term m_hat / (sqrt(v_hat) + eps).

    Returns (m_raw, v_raw, m_hat, v_hat, gamma).
    """
    m_raw = cfg.beta1 * m_raw_prev + (1.0 - cfg.beta1) * grad
    v_raw = cfg.beta2 * v_raw_prev + (1.0 - cfg.beta2) * (grad * grad)
    m_hat = m_raw / (1.0 - cfg.beta1**s)
    v_hat = v_raw / (1.0 - cfg.beta2**s)
    gamma = m_hat / (np.sqrt(v_hat) + cfg.eps)
    return m_raw, v_raw, m_hat, v_hat, gamma


def adam_step(params: ParamVector, state: AdamState, grad: ParamVector, config: AdamConfig):
    if state.t < 0:
        raise InputError("Adam step counter must be non-negative")
    if not (params.conformable(grad) and params.conformable(state.m)):
        raise ShapeError("params, grad and state must share a layout")
    if not np.isfinite(grad.data).all():
        raise NumericError(f"non-finite gradient at step {state.t}")
    m_raw, v_raw, _, _, gamma = adam_moments(state.m.data, state.v.data, grad.data, state.t + 1, config)
    new_params = params.with_data(params.data - config.lr * gamma)
    return new_params, AdamState(params.with_data(m_raw), params.with_data(v_raw), state.t + 1)


def validate_permutation(order: Sequence[int], T: int | None = None) -> tuple[int, ...]:
    perm = tuple(int(i) for i in order)
    n = len(perm) if T is None else T
    if len(perm) != n or sorted(perm) != list(range(n)):
        raise InputError(f"not a permutation of 0..{n - 1}: {list(perm)}")
    return perm


@dataclass(eq=False)
class ReferenceTrajectory:
    """Checkpoints theta_0..theta_T along ``order`` with gradients and raw Adam state.

    Row t of ``grads`` is grad L(theta_t, B_{order[t]}); rows of ``m_raw`` and
    ``v_raw`` are the accumulators after step t (i.e. after consuming that
    gradient).
    """

    layout: Layout
    thetas: np.ndarray
    grads: np.ndarray
    m_raw: np.ndarray
    v_raw: np.ndarray
    losses: np.ndarray
    order: tuple[int, ...]
    config: AdamConfig

    @property
    def T(self) -> int:
        return len(self.order)

    def theta(self, t: int) -> ParamVector:
        return ParamVector(self.layout, self.thetas[t])

    def state(self, t: int) -> AdamState:
        """Adam state after ``t`` steps (fresh state for t = 0)."""
        if t == 0:
            return AdamState.fresh(self.layout)
        return AdamState(ParamVector(self.layout, self.m_raw[t - 1]), ParamVector(self.layout, self.v_raw[t - 1]), t)

    def replay(self) -> np.ndarray:
        """Rebuild checkpoints from theta_0 and the stored gradients."""
        out = [self.theta(0)]
        state = AdamState.fresh(self.layout)
        for t in range(self.T):
            p, state = adam_step(out[-1], state, ParamVector(self.layout, self.grads[t]), self.config)
            out.append(p)
        return np.stack([p.data for p in out])


def _train(model: DifferentiableModel, corpus: Corpus, order, config: AdamConfig, theta0: ParamVector,
           eval_set: Batch | None, eval_steps: str):
    order = validate_permutation(order, corpus.T)
    model._check(theta0)
    T, D = corpus.T, theta0.total_dim
    thetas = np.empty((T + 1, D))
    grads = np.empty((T, D))
    m_hist = np.empty((T, D))
    v_hist = np.empty((T, D))
    losses = np.empty(T)
    thetas[0] = theta0.data
    m, v = np.zeros(D), np.zeros(D)
    evals: list[EvalResult] = []
    if eval_set is not None and eval_steps == "all":
        evals.append(model.evaluate(thetas[0], eval_set))
    for t, b in enumerate(order):
        loss, g = model._loss_grad(thetas[t], corpus.train[b], True)
        if not math.isfinite(loss) or loss > DIVERGENCE_LOSS or not np.isfinite(g).all():
            raise TrainingError(f"training diverged at step {t} (batch {b}, loss {loss})")
        m, v, _, _, gamma = adam_moments(m, v, g, t + 1, config)
        thetas[t + 1] = thetas[t] - config.lr * gamma
        grads[t], m_hist[t], v_hist[t], losses[t] = g, m, v, loss
        if eval_set is not None and (eval_steps == "all" or t == T - 1):
            evals.append(model.evaluate(thetas[t + 1], eval_set))
    traj = ReferenceTrajectory(theta0.layout, thetas, grads, m_hist, v_hist, losses, order, config)
    return traj, evals


def train_reference(model: DifferentiableModel, corpus: Corpus, order: Sequence[int], config: AdamConfig,
                    theta0: ParamVector) -> ReferenceTrajectory:
    """One epoch of Adam along ``order`` recording every checkpoint, gradient and moment."""
    traj, _ = _train(model, corpus, order, config, theta0, None, "none")
    return traj


def retrain_oracle(model: DifferentiableModel, corpus: Corpus, order: Sequence[int], config: AdamConfig,
                   theta0: ParamVector, dataset: Batch | None = None, eval_steps: str = "all"):
    """Ground truth: actually train along ``order`` and evaluate on ``dataset`` (validation by default).

    With eval_steps="all" the returned list has T+1 entries (initial params
    included); "final" returns only the last.
    """
    if eval_steps not in ("all", "final"):
        raise InputError("eval_steps must be 'all' or 'final'")
    dataset = corpus.validation if dataset is None else dataset
    return _train(model, corpus, order, config, theta0, dataset, eval_steps)


def inverse_permutation(order: Sequence[int]) -> tuple[int, ...]:
    inv = [0] * len(order)
    for pos, b in enumerate(order):
        inv[b] = pos
    return tuple(inv)


# --- persistence ------------------------------------------------------------

OLT_MAGIC = b"OLT1"


def save_trajectory(traj: ReferenceTrajectory, path: str | os.PathLike, extra: dict | None = None):
    w = Writer(OLT_MAGIC, 1)
    cfg = traj.config
    for val in (cfg.lr, cfg.beta1, cfg.beta2, cfg.eps):
        w.f64(val)
    w.u32(len(traj.layout))
    for name, shape in traj.layout:
        w.text(name)
        w.u8(len(shape))
        for s in shape:
            w.u32(s)
    w.u32(traj.T)
    w.array(np.array(traj.order), "i4")
    w.text(json.dumps(extra or {}, sort_keys=True))
    w.array(traj.thetas[0], "f8")
    for t in range(traj.T):
        w.array(traj.thetas[t + 1], "f8")
        w.array(traj.grads[t], "f8")
        w.array(traj.m_raw[t], "f8")
        w.array(traj.v_raw[t], "f8")
    w.array(traj.losses, "f8")
    w.save(path)


def load_trajectory(path: str | os.PathLike, with_extra: bool = False):
    r = Reader(path, OLT_MAGIC)
    cfg = AdamConfig(*(r.f64() for _ in range(4)))
    layout = []
    for _ in range(r.u32()):
        name = r.text()
        layout.append((name, tuple(r.u32() for _ in range(r.u8()))))
    layout = tuple(layout)
    T = r.u32()
    order = tuple(int(i) for i in r.array("i4"))
    extra = json.loads(r.text())
    thetas, grads, ms, vs = [r.array("f8")], [], [], []
    for _ in range(T):
        thetas.append(r.array("f8"))
        grads.append(r.array("f8"))
        ms.append(r.array("f8"))
        vs.append(r.array("f8"))
    losses = r.array("f8")
    r.done()
    D = thetas[0].size

    def stack(rows):
        return np.stack(rows) if rows else np.zeros((0, D))

    traj = ReferenceTrajectory(layout, np.stack(thetas), stack(grads), stack(ms), stack(vs), losses,
                               validate_permutation(order), cfg)
    return (traj, extra) if with_extra else traj


def adam_config_dict(cfg: AdamConfig) -> dict:
    return asdict(cfg)
