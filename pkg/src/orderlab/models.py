"""Built-in differentiable models with hand-written exact gradients."""

from __future__ import annotations

import math
import weakref
from dataclasses import dataclass

import numpy as np

from .data import LM, REGRESSION, Batch
from .errors import InputError, NumericError, ShapeError
from .numerics import Layout, ParamVector, make_rng


@dataclass(frozen=True)
class EvalResult:
    loss: float
    perplexity: float | None
    token_count: int

    @property
    def metric(self) -> float:
        """R(params, dataset): perplexity for language models, MSE otherwise."""
        return self.perplexity if self.perplexity is not None else self.loss


class DifferentiableModel:
    """Stateless evaluator of L(params, batch) and its gradient.

    Subclasses implement ``_loss_grad(flat, batch, need_grad)`` on the raw
    float64 buffer; the public methods wrap layout checks and ParamVectors.
    """

    mode: str = REGRESSION
    kind: str = ""

    @property
    def param_template(self) -> Layout:
        raise NotImplementedError

    def init_params(self, seed: int) -> ParamVector:
        raise NotImplementedError

    def spec(self) -> dict:
        raise NotImplementedError

    def _loss_grad(self, flat: np.ndarray, batch: Batch, need_grad: bool):
        raise NotImplementedError

    def _check(self, params: ParamVector):
        if params.layout != self.param_template:
            raise ShapeError(f"params layout {params.layout} does not match model {self.param_template}")

    def loss_and_grad(self, params: ParamVector, batch: Batch) -> tuple[float, ParamVector]:
        self._check(params)
        loss, grad = self._loss_grad(params.data, batch, True)
        if not math.isfinite(loss) or not np.isfinite(grad).all():
            raise NumericError(f"non-finite loss or gradient on batch {batch.batch_id}")
        return loss, ParamVector(self.param_template, grad)

    def grad_flat(self, flat: np.ndarray, batch: Batch) -> np.ndarray:
        loss, grad = self._loss_grad(flat, batch, True)
        if not math.isfinite(loss) or not np.isfinite(grad).all():
            raise NumericError(f"non-finite loss or gradient on batch {batch.batch_id}")
        return grad

    def loss(self, params: ParamVector | np.ndarray, batch: Batch) -> float:
        flat = params.data if isinstance(params, ParamVector) else np.asarray(params, dtype=np.float64)
        loss, _ = self._loss_grad(flat, batch, False)
        if not math.isfinite(loss):
            raise NumericError(f"non-finite loss on batch {batch.batch_id}")
        return loss

    def evaluate(self, params: ParamVector | np.ndarray, dataset: Batch) -> EvalResult:
        if dataset.n_samples == 0 or dataset.token_count == 0:
            raise InputError("cannot evaluate on an empty dataset")
        loss = self.loss(params, dataset)
        ppl = math.exp(loss) if self.mode == LM else None
        return EvalResult(loss, ppl, dataset.token_count)

    def metric(self, params, dataset: Batch) -> float:
        return self.evaluate(params, dataset).metric

    def __getstate__(self):
        state = self.__dict__.copy()
        state.pop("_cache", None)
        return state

    def __setstate__(self, state):
        self.__dict__.update(state)
        if hasattr(type(self), "_needs_cache"):
            self._cache = weakref.WeakKeyDictionary()


def _split(flat: np.ndarray, layout: Layout) -> list[np.ndarray]:
    out, pos = [], 0
    for _, shape in layout:
        n = math.prod(shape)
        out.append(flat[pos:pos + n].reshape(shape))
        pos += n
    return out


class QuadraticModel(DifferentiableModel):
    """Separable quadratic L = mean_s 1/2 sum_i a_i (theta_i - c_si)^2.

    Targets c_s are the rows of ``batch.x``. Its gradient is affine in each
    coordinate, so per-coordinate difference quotients recover the diagonal
    Hessian ``a`` exactly.
    """

    kind = "quadratic"

    def __init__(self, dim: int, curvature=None):
        self.dim = int(dim)
        self.curvature = np.ones(dim) if curvature is None else np.asarray(curvature, dtype=np.float64)
        if self.curvature.shape != (self.dim,):
            raise ShapeError("curvature must have one entry per coordinate")

    @property
    def param_template(self) -> Layout:
        return (("theta", (self.dim,)),)

    def init_params(self, seed: int) -> ParamVector:
        return ParamVector(self.param_template, make_rng(seed, "model", "init").standard_normal(self.dim))

    def spec(self):
        return {"kind": self.kind, "dim": self.dim, "curvature": self.curvature.tolist()}

    def _loss_grad(self, flat, batch, need_grad):
        c = batch.x
        diff = flat[None, :] - c
        loss = float(0.5 * np.mean(np.sum(self.curvature * diff**2, axis=1)))
        grad = self.curvature * diff.mean(axis=0) if need_grad else None
        return loss, grad


class MLPRegressor(DifferentiableModel):
    """One tanh hidden layer and a scalar output; hidden=0 gives plain linear regression.

    Loss is the mean squared error over the batch.
    """

    kind = "mlp"

    def __init__(self, dim: int, hidden: int = 16, init_scale: float = 1.0):
        self.dim, self.hidden, self.init_scale = int(dim), int(hidden), float(init_scale)

    @property
    def param_template(self) -> Layout:
        if self.hidden == 0:
            return (("w", (self.dim, 1)), ("b", (1,)))
        return (("W1", (self.dim, self.hidden)), ("b1", (self.hidden,)),
                ("W2", (self.hidden, 1)), ("b2", (1,)))

    def spec(self):
        return {"kind": self.kind, "dim": self.dim, "hidden": self.hidden, "init_scale": self.init_scale}

    def init_params(self, seed: int) -> ParamVector:
        rng = make_rng(seed, "model", "init")
        s = self.init_scale
        if self.hidden == 0:
            return ParamVector.from_layers({"w": s * rng.standard_normal((self.dim, 1)) / math.sqrt(self.dim),
                                            "b": np.zeros(1)})
        return ParamVector.from_layers({
            "W1": s * rng.standard_normal((self.dim, self.hidden)) / math.sqrt(self.dim),
            "b1": np.zeros(self.hidden),
            "W2": s * rng.standard_normal((self.hidden, 1)) / math.sqrt(self.hidden),
            "b2": np.zeros(1),
        })

    def predict(self, flat: np.ndarray, x: np.ndarray) -> np.ndarray:
        parts = _split(flat, self.param_template)
        if self.hidden == 0:
            w, b = parts
            return x @ w[:, 0] + b[0]
        W1, b1, W2, b2 = parts
        return np.tanh(x @ W1 + b1) @ W2[:, 0] + b2[0]

    def _loss_grad(self, flat, batch, need_grad):
        x, y = batch.x, batch.y
        n = x.shape[0]
        parts = _split(flat, self.param_template)
        if self.hidden == 0:
            w, b = parts
            resid = x @ w[:, 0] + b[0] - y
            loss = float(np.mean(resid**2))
            if not need_grad:
                return loss, None
            d = 2.0 * resid / n
            return loss, np.concatenate([x.T @ d, [d.sum()]])
        W1, b1, W2, b2 = parts
        h = np.tanh(x @ W1 + b1)
        resid = h @ W2[:, 0] + b2[0] - y
        loss = float(np.mean(resid**2))
        if not need_grad:
            return loss, None
        d = 2.0 * resid / n
        dW2 = h.T @ d
        dz = np.outer(d, W2[:, 0]) * (1.0 - h**2)
        return loss, np.concatenate([(x.T @ dz).ravel(), dz.sum(axis=0), dW2, [d.sum()]])


class TinyLM(DifferentiableModel):
    """Fixed-window feedforward character model.

    The previous ``context`` tokens (left-padded with id 0) are embedded,
    concatenated, passed through one tanh layer and a softmax over the
    vocabulary. Every token of every sample is a prediction target; the loss
    is mean cross-entropy in nats per token.
    """

    kind = "tiny_lm"
    mode = LM
    _needs_cache = True

    def __init__(self, vocab_size: int, context: int = 4, embed: int = 16, hidden: int = 64,
                 init_scale: float = 1.0):
        self.vocab_size, self.context, self.embed, self.hidden = int(vocab_size), int(context), int(embed), int(hidden)
        self.init_scale = float(init_scale)
        self._cache = weakref.WeakKeyDictionary()

    @property
    def param_template(self) -> Layout:
        V, n, E, H = self.vocab_size, self.context, self.embed, self.hidden
        return (("emb", (V, E)), ("W1", (n * E, H)), ("b1", (H,)), ("W2", (H, V)), ("b2", (V,)))

    def spec(self):
        return {"kind": self.kind, "vocab_size": self.vocab_size, "context": self.context,
                "embed": self.embed, "hidden": self.hidden, "init_scale": self.init_scale}

    def init_params(self, seed: int) -> ParamVector:
        rng = make_rng(seed, "model", "init")
        V, n, E, H = self.vocab_size, self.context, self.embed, self.hidden
        s = self.init_scale
        return ParamVector.from_layers({
            "emb": s * 0.5 * rng.standard_normal((V, E)),
            "W1": s * rng.standard_normal((n * E, H)) / math.sqrt(n * E),
            "b1": np.zeros(H),
            "W2": s * 0.1 * rng.standard_normal((H, V)) / math.sqrt(H),
            "b2": np.zeros(V),
        })

    def windows(self, batch: Batch) -> tuple[np.ndarray, np.ndarray]:
        """(contexts, targets) for every token position of ``batch``."""
        hit = self._cache.get(batch)
        if hit is not None:
            return hit
        if batch.tokens is None:
            raise InputError("language model needs token batches")
        n = self.context
        ctxs, tgts = [], []
        for seq in batch.tokens:
            seq = np.asarray(seq, dtype=np.int64)
            if len(seq) and seq.max() >= self.vocab_size:
                raise InputError(f"token id {seq.max()} outside vocabulary of {self.vocab_size}")
            padded = np.concatenate([np.zeros(n, dtype=np.int64), seq])
            ctxs.append(np.lib.stride_tricks.sliding_window_view(padded, n)[: len(seq)])
            tgts.append(seq)
        out = (np.concatenate(ctxs), np.concatenate(tgts))
        self._cache[batch] = out
        return out

    def _loss_grad(self, flat, batch, need_grad):
        emb, W1, b1, W2, b2 = _split(flat, self.param_template)
        ctx, tgt = self.windows(batch)
        N = len(tgt)
        X = emb[ctx].reshape(N, -1)
        h = np.tanh(X @ W1 + b1)
        logits = h @ W2 + b2
        logits -= logits.max(axis=1, keepdims=True)
        logz = np.log(np.exp(logits).sum(axis=1))
        logp_t = logits[np.arange(N), tgt] - logz
        loss = float(-logp_t.mean())
        if not need_grad:
            return loss, None
        p = np.exp(logits - logz[:, None])
        p[np.arange(N), tgt] -= 1.0
        dlogits = p / N
        dW2 = h.T @ dlogits
        db2 = dlogits.sum(axis=0)
        dz = (dlogits @ W2.T) * (1.0 - h**2)
        dW1 = X.T @ dz
        db1 = dz.sum(axis=0)
        dX = (dz @ W1.T).reshape(N * self.context, self.embed)
        idx = ctx.reshape(-1)
        demb = np.stack([np.bincount(idx, weights=dX[:, e], minlength=self.vocab_size)
                         for e in range(self.embed)], axis=1)
        return loss, np.concatenate([demb.ravel(), dW1.ravel(), db1, dW2.ravel(), db2])


def build_model(spec: dict) -> DifferentiableModel:
    spec = dict(spec)
    kind = spec.pop("kind")
    if kind == "tiny_lm":
        return TinyLM(**spec)
    if kind == "mlp":
        return MLPRegressor(**spec)
    if kind == "quadratic":
        return QuadraticModel(**spec)
    raise InputError(f"unknown model kind {kind!r}")


def loss_and_grad(model: DifferentiableModel, params: ParamVector, batch: Batch):
    return model.loss_and_grad(params, batch)


def evaluate(model: DifferentiableModel, params, dataset: Batch) -> EvalResult:
    return model.evaluate(params, dataset)
