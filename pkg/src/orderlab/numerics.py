"""Flat parameter vectors, guarded elementwise arithmetic and Gaussian projections.

Every quantity the estimator manipulates (parameters, gradients, Adam moments,
update terms and their diagonal derivatives) lives in the same coordinate
system: an ordered table of named layers backed by one contiguous float64
buffer. Elementwise operations act on that buffer directly.
"""

from __future__ import annotations

import math
import zlib
from dataclasses import dataclass
from typing import Iterable, Mapping

import numpy as np
from scipy.linalg import solve_triangular

from .errors import InputError, NumericError, ShapeError

Layout = tuple[tuple[str, tuple[int, ...]], ...]

DEFAULT_DIV_EPS = 1e-8


def layout_size(layout: Layout) -> int:
    return sum(math.prod(shape) for _, shape in layout)


class ParamVector:
    """Ordered named layers over a single read-only float64 buffer."""

    __slots__ = ("layout", "data", "_offsets")

    def __init__(self, layout: Layout, data: np.ndarray):
        layout = tuple((str(name), tuple(int(s) for s in shape)) for name, shape in layout)
        data = np.asarray(data, dtype=np.float64).reshape(-1)
        if data.size != layout_size(layout):
            raise ShapeError(f"buffer of {data.size} values does not fill layout of {layout_size(layout)}")
        if not data.flags.owndata or data.flags.writeable:
            data = data.copy()
        data.flags.writeable = False
        self.layout = layout
        self.data = data
        offsets = {}
        pos = 0
        for name, shape in layout:
            if name in offsets:
                raise ShapeError(f"duplicate layer id {name!r}")
            n = math.prod(shape)
            offsets[name] = (pos, pos + n, shape)
            pos += n
        self._offsets = offsets

    @classmethod
    def from_layers(cls, layers: Mapping[str, np.ndarray] | Iterable[tuple[str, np.ndarray]]) -> ParamVector:
        items = list(layers.items()) if isinstance(layers, Mapping) else list(layers)
        layout = tuple((name, tuple(np.shape(arr))) for name, arr in items)
        if not items:
            return cls(layout, np.zeros(0))
        data = np.concatenate([np.asarray(arr, dtype=np.float64).reshape(-1) for _, arr in items])
        return cls(layout, data)

    @classmethod
    def zeros(cls, layout: Layout) -> ParamVector:
        return cls(layout, np.zeros(layout_size(layout)))

    @property
    def total_dim(self) -> int:
        return self.data.size

    def layer(self, name: str) -> np.ndarray:
        start, stop, shape = self._offsets[name]
        return self.data[start:stop].reshape(shape)

    def layers(self) -> dict[str, np.ndarray]:
        return {name: self.layer(name) for name, _ in self.layout}

    def with_data(self, data: np.ndarray) -> ParamVector:
        return ParamVector(self.layout, data)

    def conformable(self, other: ParamVector) -> bool:
        return self.layout == other.layout

    def copy(self) -> ParamVector:
        return ParamVector(self.layout, self.data.copy())

    def __add__(self, other):
        return elementwise("add", self, other)

    def __sub__(self, other):
        return elementwise("sub", self, other)

    def __mul__(self, other):
        return elementwise("mul", self, other)

    def __eq__(self, other):
        if not isinstance(other, ParamVector):
            return NotImplemented
        return self.layout == other.layout and np.array_equal(self.data, other.data)

    __hash__ = None

    def __repr__(self):
        names = ", ".join(f"{n}{list(s)}" for n, s in self.layout)
        return f"ParamVector({names}; dim={self.total_dim})"


def _operand(a: ParamVector, b) -> np.ndarray | float:
    if isinstance(b, ParamVector):
        if not a.conformable(b):
            raise ShapeError(f"non-conformable operands: {a.layout} vs {b.layout}")
        if np.isnan(b.data).any():
            raise InputError("NaN in second operand")
        return b.data
    b = float(b)
    if math.isnan(b):
        raise InputError("NaN scalar operand")
    return b


def guarded_divide(num: np.ndarray, den: np.ndarray, eps) -> np.ndarray:
    """num / den with |den| < eps replaced by sign(den) * eps (sign(0) taken as +)."""
    den = np.asarray(den, dtype=np.float64)
    eps = np.broadcast_to(np.asarray(eps, dtype=np.float64), den.shape)
    small = np.abs(den) < eps
    safe = np.where(small, np.where(den < 0, -eps, eps), den)
    return np.asarray(num, dtype=np.float64) / safe


def elementwise(op: str, a: ParamVector, b, *, eps_div: float = DEFAULT_DIV_EPS) -> ParamVector:
    """Apply ``op`` coordinate by coordinate.

    ``op`` is one of add, sub, mul, div_guarded, clip. For clip, ``b`` is the
    symmetric bound (scalar or per-coordinate ParamVector).
    """
    if np.isnan(a.data).any():
        raise InputError("NaN in first operand")
    rhs = _operand(a, b)
    x = a.data
    with np.errstate(over="ignore", invalid="ignore"):
        if op == "add":
            out = x + rhs
        elif op == "sub":
            out = x - rhs
        elif op == "mul":
            out = x * rhs
        elif op == "div_guarded":
            if not eps_div > 0:
                raise InputError("div_guarded needs eps_div > 0")
            out = guarded_divide(x, np.broadcast_to(rhs, x.shape), eps_div)
        elif op == "clip":
            bound = np.abs(rhs)
            out = np.clip(x, -bound, bound)
        else:
            raise InputError(f"unknown elementwise op {op!r}")
    if not np.isfinite(out).all():
        raise NumericError(f"{op} produced non-finite values")
    return a.with_data(out)


# --- random projection ------------------------------------------------------


@dataclass(frozen=True)
class ProjectionSpec:
    """A d2 x k Gaussian map with entries N(0, 1/k), regenerated from ``seed``."""

    source_dim: int
    target_dim: int
    seed: int

    def __post_init__(self):
        if not 1 <= self.target_dim <= self.source_dim:
            raise ShapeError(f"need 1 <= k <= d2, got k={self.target_dim}, d2={self.source_dim}")
        if not 0 <= self.seed < 2**64:
            raise InputError("projection seed must fit in 64 bits")

    def matrix(self) -> np.ndarray:
        rng = np.random.Generator(np.random.PCG64(self.seed))
        return rng.standard_normal((self.source_dim, self.target_dim)) / math.sqrt(self.target_dim)


def derive_seed(*parts) -> int:
    """Stable 64-bit seed from a base seed and string/int labels."""
    words = []
    for p in parts:
        if isinstance(p, str):
            words.append(zlib.crc32(p.encode()))
        else:
            words.append(int(p) & 0xFFFFFFFF)
            words.append((int(p) >> 32) & 0xFFFFFFFF)
    ss = np.random.SeedSequence(words)
    return int(ss.generate_state(1, dtype=np.uint64)[0])


def project(M: np.ndarray, spec: ProjectionSpec, A: np.ndarray | None = None) -> np.ndarray:
    """Compress the rows of ``M`` (d1 x d2) to d1 x k. ``A`` overrides the generated map."""
    M = np.atleast_2d(np.asarray(M, dtype=np.float64))
    if M.shape[1] != spec.source_dim:
        raise ShapeError(f"matrix has {M.shape[1]} columns, projection expects {spec.source_dim}")
    if A is None:
        A = spec.matrix()
    return M @ A


def pseudoinverse(spec: ProjectionSpec, A: np.ndarray | None = None) -> np.ndarray:
    """A+ (k x d2) via thin QR; raises if A is numerically rank deficient."""
    if A is None:
        A = spec.matrix()
    Q, R = np.linalg.qr(A, mode="reduced")
    pivots = np.abs(np.diag(R))
    if pivots.min() < 1e-12:
        raise NumericError(f"projection matrix for seed {spec.seed} is rank deficient")
    return solve_triangular(R, Q.T, lower=False)


def recover(Mp: np.ndarray, spec: ProjectionSpec, A: np.ndarray | None = None,
            pinv: np.ndarray | None = None) -> np.ndarray:
    """Least-squares reconstruction Mp @ A+ of a projected matrix."""
    Mp = np.atleast_2d(np.asarray(Mp, dtype=np.float64))
    if Mp.shape[1] != spec.target_dim:
        raise ShapeError(f"compressed matrix has {Mp.shape[1]} columns, projection has k={spec.target_dim}")
    if pinv is None:
        pinv = pseudoinverse(spec, A)
    return Mp @ pinv


def jl_min_dim(n_samples: int, eps: float) -> int:
    """Smallest k guaranteed by the Dasgupta-Gupta form of the JL lemma."""
    if not 0 < eps < 1:
        raise InputError("eps must lie in (0, 1)")
    denom = eps**2 / 2 - eps**3 / 3
    return int(math.ceil(4 * math.log(n_samples) / denom))


def pairwise_sq_dists(X: np.ndarray) -> np.ndarray:
    sq = np.einsum("ij,ij->i", X, X)
    D = sq[:, None] + sq[None, :] - 2 * X @ X.T
    iu = np.triu_indices(X.shape[0], 1)
    return np.maximum(D[iu], 0.0)


def relative_error(approx: np.ndarray, exact: np.ndarray) -> float:
    denom = np.linalg.norm(exact)
    diff = np.linalg.norm(np.asarray(approx) - np.asarray(exact))
    return float(diff / denom) if denom > 0 else float(diff)


def make_rng(seed: int, *labels: str | int) -> np.random.Generator:
    return np.random.default_rng(derive_seed(seed, *labels))

