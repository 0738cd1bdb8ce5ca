"""Update-term storage: Adam update terms and their diagonal derivatives for every
(checkpoint, batch) pair, compressed by per-layer Gaussian projections.

All derivative quantities are per-coordinate (diagonal). Second- and
third-order loss derivatives are difference quotients along the reference
trajectory:

    h_t  = (g(theta_t, B) - g(theta_{t-1}, B)) / (theta_t - theta_{t-1})
    h3_t = (h_t - h_{t-1}) / (theta_t - theta_{t-1})

with the quotients that need a checkpoint before theta_0 set to zero.
"""

from __future__ import annotations

import hashlib
import json
import os
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ._binio import Reader, Writer
from .data import Corpus
from .errors import CorruptionError, NumericError, ShapeError, StoreError
from .models import DifferentiableModel
from .numerics import (Layout, ParamVector, ProjectionSpec, derive_seed, guarded_divide, project,
                       pseudoinverse, recover, relative_error)
from .trainer import AdamConfig, ReferenceTrajectory, adam_moments

K_LADDER = (300, 200, 160, 80, 20, 8)
TERM_KINDS = ("gamma", "dgamma", "d2gamma")
# floor for divisions by sqrt(v_hat); only reached where the gradient history is all zero
SQRT_V_FLOOR = 1e-30


@dataclass(frozen=True)
class StoreOptions:
    compress: bool = True
    k_ladder: tuple[int, ...] = K_LADDER
    second_order: bool = True
    seed: int = 0
    div_eps_rel: float = 1e-8
    moment_derivatives: bool = True
    jobs: int = 1


@dataclass(frozen=True)
class UpdateTerms:
    gamma: ParamVector
    dgamma: ParamVector
    d2gamma: ParamVector | None = None


def choose_k(width: int, ladder=K_LADDER) -> int | None:
    """Largest ladder entry not exceeding half the layer width."""
    fits = [k for k in ladder if k <= width / 2]
    return max(fits) if fits else None


class TermBuilder:
    """Computes update terms for (t, l) pairs, caching every loss gradient it evaluates."""

    def __init__(self, trajectory: ReferenceTrajectory, model: DifferentiableModel, corpus: Corpus,
                 div_eps_rel: float = 1e-8, moment_derivatives: bool = True):
        if trajectory.T != corpus.T:
            raise StoreError(f"trajectory has {trajectory.T} steps but corpus has {corpus.T} batches")
        self.traj = trajectory
        self.model = model
        self.corpus = corpus
        self.cfg: AdamConfig = trajectory.config
        self.div_eps_rel = div_eps_rel
        self.moment_derivatives = moment_derivatives
        self.grad_evals = 0
        self._grads: dict[tuple[int, int], np.ndarray] = {}
        for t, b in enumerate(trajectory.order):
            self._grads[(t, b)] = trajectory.grads[t]
        self._h: dict[tuple[int, int], np.ndarray] = {}
        self._h3: dict[tuple[int, int], np.ndarray] = {}
        self._acc = None

    def grad(self, t: int, l: int) -> np.ndarray:
        key = (t, l)
        g = self._grads.get(key)
        if g is None:
            if not 0 <= t <= self.traj.T:
                raise StoreError(f"no checkpoint {t} in trajectory")
            g = self.model.grad_flat(self.traj.thetas[t], self.corpus.train[l])
            self.grad_evals += 1
            self._grads[key] = g
        return g

    def prefetch(self, pairs, jobs: int = 1):
        todo = [p for p in pairs if p not in self._grads]
        if jobs > 1 and len(todo) > 1:
            with ThreadPoolExecutor(jobs) as pool:
                results = list(pool.map(
                    lambda p: self.model.grad_flat(self.traj.thetas[p[0]], self.corpus.train[p[1]]), todo))
            for p, g in zip(todo, results):
                self._grads[p] = g
            self.grad_evals += len(todo)
        else:
            for p in todo:
                self.grad(*p)

    def _step_eps(self, t: int) -> np.ndarray:
        return self.div_eps_rel * (1.0 + np.abs(self.traj.thetas[t]))

    def hess_diag(self, t: int, l: int) -> np.ndarray:
        key = (t, l)
        if key not in self._h:
            if t == 0:
                self._h[key] = np.zeros(self.traj.thetas.shape[1])
            else:
                dtheta = self.traj.thetas[t] - self.traj.thetas[t - 1]
                self._h[key] = guarded_divide(self.grad(t, l) - self.grad(t - 1, l), dtheta, self._step_eps(t))
        return self._h[key]

    def third_diag(self, t: int, l: int) -> np.ndarray:
        key = (t, l)
        if key not in self._h3:
            if t <= 1:
                self._h3[key] = np.zeros(self.traj.thetas.shape[1])
            else:
                dtheta = self.traj.thetas[t] - self.traj.thetas[t - 1]
                self._h3[key] = guarded_divide(self.hess_diag(t, l) - self.hess_diag(t - 1, l), dtheta,
                                               self._step_eps(t))
        return self._h3[key]

    def accumulators(self):
        """Derivative accumulators of the raw moments along the reference run.

        Row t holds the values after step t; the recursions mirror the raw
        moment recursions with the difference-quotient inputs, starting at zero.
        """
        if self._acc is None:
            T, D = self.traj.T, self.traj.thetas.shape[1]
            b1, b2 = self.cfg.beta1, self.cfg.beta2
            dm, dv, d2m, d2v = (np.zeros((T, D)) for _ in range(4))
            pm = pv = p2m = p2v = np.zeros(D)
            for t, b in enumerate(self.traj.order):
                g = self.traj.grads[t]
                h = self.hess_diag(t, b)
                h3 = self.third_diag(t, b)
                pm = b1 * pm + (1 - b1) * h
                pv = b2 * pv + 2 * (1 - b2) * g * h
                p2m = b1 * p2m + (1 - b1) * h3
                p2v = b2 * p2v + 2 * (1 - b2) * (h * h + g * h3)
                dm[t], dv[t], d2m[t], d2v[t] = pm, pv, p2m, p2v
            self._acc = (dm, dv, d2m, d2v)
        return self._acc

    def terms(self, t: int, l: int, want_second_order: bool = True) -> tuple[np.ndarray, ...]:
        """Flat (gamma, dgamma, d2gamma-or-None) for checkpoint t and batch l."""
        traj, cfg = self.traj, self.cfg
        if not 0 <= t < traj.T or not 0 <= l < traj.T:
            raise StoreError(f"pair ({t}, {l}) outside the {traj.T}x{traj.T} grid")
        D = traj.thetas.shape[1]
        b1, b2, eps = cfg.beta1, cfg.beta2, cfg.eps
        s = t + 1
        a, b = 1 - b1**s, 1 - b2**s
        zero = np.zeros(D)
        if t == 0:
            m_prev = v_prev = dm_prev = dv_prev = d2m_prev = d2v_prev = zero
        else:
            m_prev, v_prev = traj.m_raw[t - 1], traj.v_raw[t - 1]
            if self.moment_derivatives:
                dm, dv, d2m, d2v = self.accumulators()
                dm_prev, dv_prev, d2m_prev, d2v_prev = dm[t - 1], dv[t - 1], d2m[t - 1], d2v[t - 1]
            else:
                dm_prev = dv_prev = d2m_prev = d2v_prev = zero

        g = self.grad(t, l)
        h = self.hess_diag(t, l)
        _, _, m_hat, v_hat, gamma = adam_moments(m_prev, v_prev, g, s, cfg)
        u = np.sqrt(v_hat)
        den = u + eps
        dm_hat = (b1 * dm_prev + (1 - b1) * h) / a
        dv_hat = (b2 * dv_prev + 2 * (1 - b2) * g * h) / b
        du = guarded_divide(dv_hat, 2 * u, SQRT_V_FLOOR)
        dgamma = (dm_hat * den - du * m_hat) / den**2

        d2gamma = None
        if want_second_order:
            h3 = self.third_diag(t, l)
            d2m_hat = (b1 * d2m_prev + (1 - b1) * h3) / a
            d2v_hat = (b2 * d2v_prev + 2 * (1 - b2) * (h * h + g * h3)) / b
            d2u = guarded_divide(d2v_hat, 2 * u, SQRT_V_FLOOR) - guarded_divide(dv_hat**2, 4 * u**3, SQRT_V_FLOOR)
            d2gamma = (d2m_hat * den - d2u * m_hat - 2 * du * dm_hat + 2 * du**2 * m_hat / den) / den**2

        for name, arr in (("gamma", gamma), ("dgamma", dgamma), ("d2gamma", d2gamma)):
            if arr is not None and not np.isfinite(arr).all():
                raise NumericError(f"non-finite {name} at pair (t={t}, l={l})")
        return gamma, dgamma, d2gamma


def compute_terms(trajectory: ReferenceTrajectory, model: DifferentiableModel, corpus: Corpus, t: int, l: int,
                  want_second_order: bool = False, builder: TermBuilder | None = None) -> UpdateTerms:
    builder = builder or TermBuilder(trajectory, model, corpus)
    gamma, dgamma, d2gamma = builder.terms(t, l, want_second_order)
    layout = trajectory.layout
    return UpdateTerms(ParamVector(layout, gamma), ParamVector(layout, dgamma),
                       None if d2gamma is None else ParamVector(layout, d2gamma))


# --- compressed container ---------------------------------------------------


@dataclass
class LayerCodec:
    """How one layer is stored: raw, or rows projected with ``spec``."""

    name: str
    shape: tuple[int, ...]
    offset: int
    spec: ProjectionSpec | None = None
    _pinv: np.ndarray | None = field(default=None, repr=False)
    _A: np.ndarray | None = field(default=None, repr=False)

    @property
    def size(self) -> int:
        return int(np.prod(self.shape))

    @property
    def stored_size(self) -> int:
        return self.size if self.spec is None else self.shape[0] * self.spec.target_dim

    def A(self) -> np.ndarray:
        if self._A is None:
            self._A = self.spec.matrix()
        return self._A

    def pinv(self) -> np.ndarray:
        if self._pinv is None:
            self._pinv = pseudoinverse(self.spec, self.A())
        return self._pinv

    def encode(self, flat: np.ndarray) -> np.ndarray:
        block = flat[self.offset:self.offset + self.size]
        if self.spec is None:
            return block.copy()
        return project(block.reshape(self.shape), self.spec, self.A()).ravel()

    def decode(self, stored: np.ndarray) -> np.ndarray:
        if self.spec is None:
            return stored
        Mp = stored.reshape(self.shape[0], self.spec.target_dim)
        return recover(Mp, self.spec, pinv=self.pinv()).ravel()


def make_codecs(layout: Layout, options: StoreOptions) -> list[LayerCodec]:
    codecs, pos = [], 0
    for name, shape in layout:
        spec = None
        if options.compress and len(shape) == 2:
            k = choose_k(shape[1], options.k_ladder)
            if k is not None:
                spec = ProjectionSpec(shape[1], k, derive_seed(options.seed, "projection", name))
        codecs.append(LayerCodec(name, tuple(shape), pos, spec))
        pos += int(np.prod(shape))
    return codecs


class UpdateTermStore:
    """Compressed terms for the full T x T grid of (checkpoint t, batch l).

    ``gamma`` is kept as the exact reference update for step t (the anchor)
    plus a compressed difference, so the diagonal entries (t, order[t])
    decompress to the reference update exactly.
    """

    def __init__(self, T: int, order, layout: Layout, codecs: list[LayerCodec], anchors: np.ndarray,
                 entries: dict, includes_second_order: bool, meta: dict | None = None):
        self.T = T
        self.order = tuple(order)
        self.layout = layout
        self.codecs = codecs
        self.anchors = anchors
        self.entries = entries  # (t, l) -> {kind: stored float64 vector}
        self.includes_second_order = includes_second_order
        self.meta = meta or {}
        self._dense = None
        self._pending_checks: dict | None = None

    @property
    def dim(self) -> int:
        return sum(c.size for c in self.codecs)

    def _decode(self, stored: np.ndarray) -> np.ndarray:
        out, pos = [], 0
        for c in self.codecs:
            n = c.stored_size
            out.append(c.decode(stored[pos:pos + n]))
            pos += n
        return np.concatenate(out)

    def _stored(self, t: int, l: int, kind: str) -> np.ndarray:
        try:
            entry = self.entries[(t, l)]
        except KeyError:
            raise StoreError(f"store has no entry for pair ({t}, {l})") from None
        if self._pending_checks is not None:
            want = self._pending_checks.pop((t, l), None)
            if want is not None and _entry_checksum(entry) != want:
                raise CorruptionError(f"entry ({t}, {l}) failed its checksum")
        if kind not in entry:
            raise StoreError(f"entry ({t}, {l}) has no {kind}")
        return entry[kind]

    def flat_terms(self, t: int, l: int) -> tuple[np.ndarray, np.ndarray, np.ndarray | None]:
        stored = self._stored(t, l, "gamma")
        gamma = self.anchors[t] + self._decode(stored)
        dgamma = self._decode(self._stored(t, l, "dgamma"))
        d2gamma = self._decode(self._stored(t, l, "d2gamma")) if self.includes_second_order else None
        return gamma, dgamma, d2gamma

    def terms(self, t: int, l: int) -> UpdateTerms:
        g, dg, d2g = self.flat_terms(t, l)
        wrap = lambda x: None if x is None else ParamVector(self.layout, x)  # noqa: E731
        return UpdateTerms(wrap(g), wrap(dg), wrap(d2g))

    def dense(self):
        """All decompressed terms as (T, T, D) arrays indexed [t, l]; cached."""
        if self._dense is None:
            T, D = self.T, self.dim
            G = np.empty((T, T, D))
            dG = np.empty((T, T, D))
            d2G = np.empty((T, T, D)) if self.includes_second_order else None
            for t in range(T):
                for l in range(T):
                    g, dg, d2g = self.flat_terms(t, l)
                    G[t, l], dG[t, l] = g, dg
                    if d2G is not None:
                        d2G[t, l] = d2g
            self._dense = (G, dG, d2G)
        return self._dense

    def complete(self) -> bool:
        return all((t, l) in self.entries for t in range(self.T) for l in range(self.T))

    def stored_bytes(self) -> int:
        return 8 * sum(v.size for e in self.entries.values() for v in e.values()) + self.anchors.nbytes

    def raw_bytes(self) -> int:
        kinds = 3 if self.includes_second_order else 2
        return 8 * self.T * self.T * self.dim * kinds


def build_store(trajectory: ReferenceTrajectory, model: DifferentiableModel, corpus: Corpus,
                options: StoreOptions = StoreOptions()) -> UpdateTermStore:
    """Compute and compress update terms for every (t, l) pair."""
    T = trajectory.T
    builder = TermBuilder(trajectory, model, corpus, options.div_eps_rel, options.moment_derivatives)
    builder.prefetch([(t, l) for t in range(T) for l in range(T)], options.jobs)
    codecs = make_codecs(trajectory.layout, options)
    anchors = np.empty((T, trajectory.thetas.shape[1]))
    entries = {}
    errors = {(c.name, k): 0.0 for c in codecs for k in TERM_KINDS}
    for t in range(T):
        anchors[t] = builder.terms(t, trajectory.order[t], False)[0]
        for l in range(T):
            gamma, dgamma, d2gamma = builder.terms(t, l, options.second_order)
            flats = {"gamma": gamma - anchors[t], "dgamma": dgamma}
            if options.second_order:
                flats["d2gamma"] = d2gamma
            entry = {}
            for kind, flat in flats.items():
                parts = [c.encode(flat) for c in codecs]
                entry[kind] = np.concatenate(parts)
                for c, part in zip(codecs, parts):
                    if c.spec is not None:
                        exact = flat[c.offset:c.offset + c.size]
                        err = relative_error(c.decode(part), exact)
                        errors[(c.name, kind)] = max(errors[(c.name, kind)], err)
            entries[(t, l)] = entry
    meta = {
        "grad_evals": builder.grad_evals,
        "error_bounds": {f"{name}/{kind}": v for (name, kind), v in errors.items()},
        "compress": options.compress,
        "k_ladder": list(options.k_ladder),
        "seed": options.seed,
    }
    return UpdateTermStore(T, trajectory.order, trajectory.layout, codecs, anchors, entries,
                           options.second_order, meta)


# --- persistence ------------------------------------------------------------

OLS_MAGIC = b"OLS1"


def _entry_checksum(entry: dict) -> str:
    h = hashlib.sha256()
    for kind in TERM_KINDS:
        if kind in entry:
            h.update(kind.encode())
            h.update(np.ascontiguousarray(entry[kind], dtype="<f8").tobytes())
    return h.hexdigest()[:16]


def save_store(store: UpdateTermStore, path: str | os.PathLike, extra: dict | None = None):
    blobs, index, pos = [], [], 0
    anchor_bytes = np.ascontiguousarray(store.anchors, dtype="<f8").tobytes()
    blobs.append(anchor_bytes)
    pos += len(anchor_bytes)
    for (t, l) in sorted(store.entries):
        entry = store.entries[(t, l)]
        rec = {"t": t, "l": l, "offset": pos, "kinds": [], "checksum": _entry_checksum(entry)}
        for kind in TERM_KINDS:
            if kind in entry:
                raw = np.ascontiguousarray(entry[kind], dtype="<f8").tobytes()
                rec["kinds"].append([kind, len(raw) // 8])
                blobs.append(raw)
                pos += len(raw)
        index.append(rec)
    manifest = {
        "T": store.T,
        "order": list(store.order),
        "includes_second_order": store.includes_second_order,
        "layers": [{"name": c.name, "shape": list(c.shape),
                    "projection": None if c.spec is None else
                    {"source_dim": c.spec.source_dim, "target_dim": c.spec.target_dim, "seed": str(c.spec.seed)}}
                   for c in store.codecs],
        "anchors_crc32": zlib.crc32(anchor_bytes),
        "entries": index,
        "meta": store.meta,
        "extra": extra or {},
    }
    w = Writer(OLS_MAGIC, 1)
    w.text(json.dumps(manifest, sort_keys=True))
    w.u64(pos)
    for b in blobs:
        w.raw(b)
    w.save(path)


def load_store(path: str | os.PathLike, layout: Layout | None = None, with_extra: bool = False):
    """Read a store file; entries are verified against their checksums when first accessed."""
    r = Reader(Path(path), OLS_MAGIC)
    manifest = json.loads(r.text())
    size = r.u64()
    region = r._take(size)
    r.done()
    codecs, pos = [], 0
    for rec in manifest["layers"]:
        proj = rec["projection"]
        spec = None if proj is None else ProjectionSpec(proj["source_dim"], proj["target_dim"], int(proj["seed"]))
        shape = tuple(rec["shape"])
        codecs.append(LayerCodec(rec["name"], shape, pos, spec))
        pos += int(np.prod(shape))
    store_layout = tuple((c.name, c.shape) for c in codecs)
    if layout is not None and tuple((n, tuple(s)) for n, s in layout) != store_layout:
        raise ShapeError(f"store layout {store_layout} does not match model layout {layout}")
    T, D = manifest["T"], pos
    anchor_bytes = region[:8 * T * D]
    if zlib.crc32(anchor_bytes) != manifest["anchors_crc32"]:
        raise CorruptionError("anchor block failed its checksum")
    anchors = np.frombuffer(anchor_bytes, dtype="<f8").astype(np.float64).reshape(T, D)
    entries, checks = {}, {}
    for rec in manifest["entries"]:
        off = rec["offset"]
        entry = {}
        for kind, n in rec["kinds"]:
            if off + 8 * n > len(region):
                raise CorruptionError(f"entry ({rec['t']}, {rec['l']}) runs past the end of the file")
            entry[kind] = np.frombuffer(region[off:off + 8 * n], dtype="<f8").astype(np.float64)
            off += 8 * n
        key = (rec["t"], rec["l"])
        entries[key] = entry
        checks[key] = rec["checksum"]
    store = UpdateTermStore(T, manifest["order"], store_layout, codecs, anchors, entries,
                            manifest["includes_second_order"], manifest["meta"])
    store._pending_checks = checks
    return (store, manifest["extra"]) if with_extra else store
