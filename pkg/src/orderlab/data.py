"""Corpus ingestion, batch packing and synthetic datasets."""

from __future__ import annotations

import json
import os
import string
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from datasketch import MinHash

from ._binio import Reader, Writer
from .errors import ConfigError, IngestionError, InputError
from .numerics import make_rng

PAD = "<pad>"
LM = "language_model"
REGRESSION = "regression"


@dataclass(frozen=True, eq=False)
class Batch:
    """A training batch or an evaluation set.

    LM mode carries ``tokens`` (one int array per sample); regression mode
    carries a feature matrix ``x`` and targets ``y``. Evaluation sets use
    batch_id -1 (validation) or -2 (test).
    """

    batch_id: int
    tokens: tuple[np.ndarray, ...] | None = None
    x: np.ndarray | None = None
    y: np.ndarray | None = None

    @property
    def mode(self) -> str:
        return LM if self.tokens is not None else REGRESSION

    @property
    def samples(self) -> list:
        if self.tokens is not None:
            return list(self.tokens)
        return list(zip(self.x, self.y))

    @property
    def n_samples(self) -> int:
        return len(self.tokens) if self.tokens is not None else int(self.x.shape[0])

    @property
    def token_count(self) -> int:
        if self.tokens is not None:
            return int(sum(len(t) for t in self.tokens))
        return self.n_samples

    def content_equal(self, other: Batch) -> bool:
        if self.mode != other.mode:
            return False
        if self.tokens is not None:
            return len(self.tokens) == len(other.tokens) and all(
                np.array_equal(a, b) for a, b in zip(self.tokens, other.tokens))
        return np.array_equal(self.x, other.x) and np.array_equal(self.y, other.y)

    def relabel(self, batch_id: int) -> Batch:
        return Batch(batch_id, self.tokens, self.x, self.y)


@dataclass(frozen=True, eq=False)
class Corpus:
    train: tuple[Batch, ...]
    validation: Batch
    test: Batch
    vocab: tuple[str, ...] = ()
    meta: dict = field(default_factory=dict)

    @property
    def T(self) -> int:
        return len(self.train)

    @property
    def mode(self) -> str:
        return self.validation.mode

    @property
    def vocab_size(self) -> int:
        return len(self.vocab)

    def batch(self, batch_id: int) -> Batch:
        return self.train[batch_id]


@dataclass(frozen=True)
class IngestConfig:
    T: int = 8
    min_length: int = 5
    num_permutations: int = 128
    split: tuple[float, float, float] = (0.8, 0.1, 0.1)
    seq_len: int = 64
    tokenizer: str = "char"
    seed: int = 0


# --- preprocessing ----------------------------------------------------------


def filter_short(texts: Iterable[str], min_length: int = 5) -> list[str]:
    return [t for t in texts if len(t) >= min_length]


def minhash_digest(text: str, num_perm: int = 128) -> bytes:
    mh = MinHash(num_perm=num_perm, seed=1)
    for word in set(text.split()):
        mh.update(word.encode("utf-8"))
    return mh.digest().tobytes()


def dedup_texts(texts: Sequence[str], num_perm: int = 128) -> list[str]:
    """Keep the first text for every distinct MinHash signature over word sets."""
    seen = set()
    kept = []
    for text in texts:
        key = minhash_digest(text, num_perm)
        if key not in seen:
            seen.add(key)
            kept.append(text)
    return kept


def split_counts(n: int, ratios: Sequence[float]) -> tuple[int, int, int]:
    if len(ratios) != 3 or any(r < 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
        raise ConfigError(f"split ratios must be three non-negative numbers summing to 1, got {ratios}")
    n_train = int(round(ratios[0] * n))
    n_val = int(round(ratios[1] * n))
    n_val = min(n_val, n - n_train)
    return n_train, n_val, n - n_train - n_val


def build_vocab(texts: Iterable[str]) -> tuple[str, ...]:
    chars = sorted(set("".join(texts)))
    return (PAD, *chars)


def encode(text: str, vocab: Sequence[str]) -> np.ndarray:
    index = {ch: i for i, ch in enumerate(vocab)}
    try:
        return np.array([index[ch] for ch in text], dtype=np.int64)
    except KeyError as exc:
        raise InputError(f"character {exc.args[0]!r} not in vocabulary") from None


def chunk_stream(stream: np.ndarray, seq_len: int) -> list[np.ndarray]:
    n = len(stream) // seq_len
    return [stream[i * seq_len : (i + 1) * seq_len].copy() for i in range(n)]


def _doc_stream(docs: Sequence[str], vocab) -> np.ndarray:
    if not docs:
        return np.zeros(0, dtype=np.int64)
    return encode("\n".join(docs) + "\n", vocab)


def pack_corpus(docs: Sequence[str], cfg: IngestConfig, vocab: Sequence[str] | None = None,
                meta: dict | None = None) -> Corpus:
    """Split documents 80/10/10 (seeded shuffle) and pack training text into T equal batches."""
    if not docs:
        raise IngestionError("corpus is empty after filtering")
    if cfg.T < 1:
        raise ConfigError("T must be >= 1")
    if cfg.tokenizer != "char":
        raise ConfigError(f"unsupported tokenizer {cfg.tokenizer!r}; only 'char' is available")
    rng = make_rng(cfg.seed, "data", "split")
    order = rng.permutation(len(docs))
    docs = [docs[i] for i in order]
    n_train, n_val, _ = split_counts(len(docs), cfg.split)
    train_docs, val_docs, test_docs = docs[:n_train], docs[n_train:n_train + n_val], docs[n_train + n_val:]
    vocab = tuple(vocab) if vocab is not None else build_vocab(docs + ["\n"])

    train_chunks = chunk_stream(_doc_stream(train_docs, vocab), cfg.seq_len)
    if len(train_chunks) < cfg.T:
        raise ConfigError(f"T={cfg.T} exceeds the {len(train_chunks)} training samples available")
    per_batch = len(train_chunks) // cfg.T
    batches = tuple(
        Batch(b, tokens=tuple(train_chunks[b * per_batch : (b + 1) * per_batch])) for b in range(cfg.T))

    def eval_set(ds, batch_id):
        stream = _doc_stream(ds, vocab)
        chunks = chunk_stream(stream, cfg.seq_len)
        if not chunks and len(stream):
            chunks = [stream]
        return Batch(batch_id, tokens=tuple(chunks))

    info = {"n_docs": len(docs), "n_train_docs": n_train, "n_val_docs": n_val,
            "n_test_docs": len(test_docs), "seq_len": cfg.seq_len}
    info.update(meta or {})
    return Corpus(batches, eval_set(val_docs, -1), eval_set(test_docs, -2), vocab, info)


def read_text_files(paths: Iterable[str | os.PathLike]) -> list[str]:
    texts = []
    for p in paths:
        with open(p, encoding="utf-8") as fh:
            texts.extend(line.rstrip("\n") for line in fh)
    return texts


def preprocess_texts(texts: Sequence[str], cfg: IngestConfig) -> list[str]:
    return dedup_texts(filter_short(texts, cfg.min_length), cfg.num_permutations)


def ingest(raw_text_files: Iterable[str | os.PathLike], cfg: IngestConfig = IngestConfig()) -> Corpus:
    texts = read_text_files(raw_text_files)
    kept = preprocess_texts(texts, cfg)
    if not kept:
        raise IngestionError("corpus is empty after filtering")
    return pack_corpus(kept, cfg, meta={"n_raw": len(texts), "n_kept": len(kept)})


# --- synthetic data ---------------------------------------------------------


def synth_text_documents(seed: int, n_docs: int = 400, n_topics: int = 8,
                         words_per_doc: tuple[int, int] = (20, 60)) -> list[str]:
    """Topic-structured pseudo-English; each topic draws words from its own letter pool."""
    rng = make_rng(seed, "data", "synth_text")
    letters = np.array(list(string.ascii_lowercase))
    topics = []
    for _ in range(n_topics):
        pool = rng.choice(letters, size=8, replace=False)
        weights = rng.dirichlet(np.full(len(pool), 0.7))
        words = []
        for _ in range(30):
            length = int(rng.integers(2, 8))
            words.append("".join(rng.choice(pool, size=length, p=weights)))
        topics.append(words)
    docs = []
    for _ in range(n_docs):
        words = topics[int(rng.integers(n_topics))]
        n = int(rng.integers(*words_per_doc))
        picks = rng.integers(len(words), size=n)
        docs.append(" ".join(words[i] for i in picks) + ".")
    return docs


def synth_text(seed: int, n_docs: int = 400, T: int = 8, seq_len: int = 64, n_topics: int = 8) -> Corpus:
    docs = synth_text_documents(seed, n_docs, n_topics)
    cfg = IngestConfig(T=T, seq_len=seq_len, seed=seed)
    return pack_corpus(preprocess_texts(docs, cfg), cfg, meta={"source": "synth_text", "seed": seed})


def hidden_weights(seed: int, dim: int) -> np.ndarray:
    return make_rng(seed, "data", "w_star").standard_normal(dim)


def synth_regression(seed: int, n_samples: int, dim: int, T: int = 8, noise: float = 0.01,
                     split: tuple[float, float, float] = (0.8, 0.1, 0.1)) -> Corpus:
    """y = w* . x + noise * N(0, 1); training rows packed into T equal batches."""
    if n_samples < 2 * T:
        raise ConfigError(f"need at least 2*T={2 * T} samples, got {n_samples}")
    rng = make_rng(seed, "data", "regression")
    w_star = hidden_weights(seed, dim)
    X = rng.standard_normal((n_samples, dim))
    y = X @ w_star + noise * rng.standard_normal(n_samples)
    n_train, n_val, _ = split_counts(n_samples, split)
    per_batch = n_train // T
    if per_batch < 1:
        raise ConfigError(f"T={T} exceeds the {n_train} training samples available")
    batches = tuple(Batch(b, x=X[b * per_batch:(b + 1) * per_batch], y=y[b * per_batch:(b + 1) * per_batch])
                    for b in range(T))
    val = Batch(-1, x=X[n_train:n_train + n_val], y=y[n_train:n_train + n_val])
    test = Batch(-2, x=X[n_train + n_val:], y=y[n_train + n_val:])
    return Corpus(batches, val, test, (), {"source": "synth_regression", "seed": seed, "dim": dim,
                                           "noise": noise, "w_star": w_star.tolist()})


# --- similarity -------------------------------------------------------------


def token_frequencies(batch: Batch, size: int) -> np.ndarray:
    if batch.tokens is None:
        raise InputError("token frequencies need a language-model batch")
    flat = np.concatenate(batch.tokens) if batch.tokens else np.zeros(0, dtype=np.int64)
    return np.bincount(flat, minlength=size).astype(np.float64)


def batch_similarity(a: Batch, b: Batch) -> float:
    """Cosine similarity of the token-frequency vectors of two LM batches."""
    if a.token_count == 0 or b.token_count == 0:
        raise InputError("cannot compare an empty batch")
    size = 1 + max(int(max(t.max() for t in s.tokens if len(t))) for s in (a, b))
    fa, fb = token_frequencies(a, size), token_frequencies(b, size)
    return float(fa @ fb / (np.linalg.norm(fa) * np.linalg.norm(fb)))


# --- persistence ------------------------------------------------------------

OLC_MAGIC = b"OLC1"


def _write_batch(w: Writer, batch: Batch):
    w.u32(batch.batch_id & 0xFFFFFFFF)
    if batch.tokens is not None:
        w.u32(len(batch.tokens))
        for t in batch.tokens:
            w.array(t, "i4")
    else:
        w.u32(batch.n_samples)
        w.u32(batch.x.shape[1])
        w.array(batch.x, "f8")
        w.array(batch.y, "f8")


def _read_batch(r: Reader, mode: str) -> Batch:
    bid = r.u32()
    bid = bid - (1 << 32) if bid >= 1 << 31 else bid
    n = r.u32()
    if mode == LM:
        return Batch(bid, tokens=tuple(r.array("i4").astype(np.int64) for _ in range(n)))
    dim = r.u32()
    x = r.array("f8").reshape(n, dim)
    return Batch(bid, x=x, y=r.array("f8"))


def save_corpus(corpus: Corpus, path: str | os.PathLike):
    w = Writer(OLC_MAGIC, 1)
    w.u8(0 if corpus.mode == LM else 1)
    w.u32(len(corpus.vocab))
    for tok in corpus.vocab:
        w.text(tok)
    w.text(json.dumps(corpus.meta, sort_keys=True))
    w.u32(corpus.T)
    for b in corpus.train:
        _write_batch(w, b)
    _write_batch(w, corpus.validation)
    _write_batch(w, corpus.test)
    w.save(path)


def load_corpus(path: str | os.PathLike) -> Corpus:
    r = Reader(Path(path), OLC_MAGIC)
    mode = LM if r.u8() == 0 else REGRESSION
    vocab = tuple(r.text() for _ in range(r.u32()))
    meta = json.loads(r.text())
    T = r.u32()
    train = tuple(_read_batch(r, mode) for _ in range(T))
    val = _read_batch(r, mode)
    test = _read_batch(r, mode)
    r.done()
    return Corpus(train, val, test, vocab, meta)
