"""Run configuration: a TOML file with strictly validated sections."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import re
from dataclasses import dataclass, field
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .errors import ConfigError
from .numerics import derive_seed


@dataclass(frozen=True)
class ModelSection:
    kind: str = "tiny_lm"
    context: int = 4
    embed: int = 16
    hidden: int = 64
    dim: int = 8
    init_scale: float = 1.0
    # PD baseline only: hidden width of the weak reference model
    weak_hidden: int = 16


@dataclass(frozen=True)
class DataSection:
    source: str = "synth_text"
    paths: tuple[str, ...] = ()
    T: int = 8
    split: tuple[float, float, float] = (0.8, 0.1, 0.1)
    seq_len: int = 64
    min_length: int = 5
    num_permutations: int = 128
    n_docs: int = 400
    n_topics: int = 8
    n_samples: int = 160
    noise: float = 0.01


@dataclass(frozen=True)
class AdamSection:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.95
    eps: float = 1e-8


@dataclass(frozen=True)
class EstimatorSection:
    mode: str = "fut"
    c: float = 0.1
    clip_bound: float = 1.0
    clip_target: str = "update"


@dataclass(frozen=True)
class GASection:
    population: int = 8
    generations: int = 8
    mutation_prob: float = 0.1
    inject_identity: bool = False
    random_orders: int = 10


@dataclass(frozen=True)
class StoreSection:
    compress: bool = False
    k_ladder: tuple[int, ...] = (300, 200, 160, 80, 20, 8)
    second_order: bool = True
    moment_derivatives: bool = False
    div_eps_rel: float = 1e-8


@dataclass(frozen=True)
class AnalysisSection:
    absdiff_n: int = 10
    heatmap_n: int = 3
    timing_orders: int = 50
    timing_retrain_orders: int = 5
    timing_n: tuple[int, ...] = (10, 50, 100, 1000)


SECTIONS = {
    "model": ModelSection,
    "data": DataSection,
    "adam": AdamSection,
    "estimator": EstimatorSection,
    "ga": GASection,
    "store": StoreSection,
    "analysis": AnalysisSection,
}


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    out: str = "runs/default"
    model: ModelSection = field(default_factory=ModelSection)
    data: DataSection = field(default_factory=DataSection)
    adam: AdamSection = field(default_factory=AdamSection)
    estimator: EstimatorSection = field(default_factory=EstimatorSection)
    ga: GASection = field(default_factory=GASection)
    store: StoreSection = field(default_factory=StoreSection)
    analysis: AnalysisSection = field(default_factory=AnalysisSection)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def digest(self) -> str:
        """SHA-256 over the canonical JSON of every setting except the output directory."""
        payload = self.to_dict()
        payload.pop("out")
        return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()[:16]

    def sub_seed(self, label: str) -> int:
        return derive_seed(self.seed, label) % (2**32)

    def with_seed(self, seed: int) -> RunConfig:
        return dataclasses.replace(self, seed=int(seed))


def _locate(text: str, key: str) -> str:
    for lineno, line in enumerate(text.splitlines(), 1):
        m = re.match(rf"\s*(\[?\s*){re.escape(key)}\b", line)
        if m:
            return f"line {lineno}, column {m.end(1) + 1}"
    return "unknown location"


def _coerce(cls, name: str, values: dict, text: str):
    known = {f.name: f for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, val in values.items():
        if key not in known:
            raise ConfigError(f"unknown key {name}.{key} ({_locate(text, key)})")
        default = getattr(cls(), key)
        if isinstance(default, tuple):
            if not isinstance(val, list):
                raise ConfigError(f"{name}.{key} must be a list ({_locate(text, key)})")
            val = tuple(val)
        elif isinstance(default, bool):
            if not isinstance(val, bool):
                raise ConfigError(f"{name}.{key} must be true or false ({_locate(text, key)})")
        elif isinstance(default, float):
            if not isinstance(val, (int, float)) or isinstance(val, bool):
                raise ConfigError(f"{name}.{key} must be a number ({_locate(text, key)})")
            val = float(val)
        elif isinstance(default, int):
            if not isinstance(val, int) or isinstance(val, bool):
                raise ConfigError(f"{name}.{key} must be an integer ({_locate(text, key)})")
        elif isinstance(default, str) and not isinstance(val, str):
            raise ConfigError(f"{name}.{key} must be a string ({_locate(text, key)})")
        kwargs[key] = val
    return cls(**kwargs)


def parse_config(text: str) -> RunConfig:
    try:
        raw = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"config parse error: {exc}") from None
    top = {}
    sections = {}
    for key, val in raw.items():
        if key in SECTIONS:
            if not isinstance(val, dict):
                raise ConfigError(f"[{key}] must be a table ({_locate(text, key)})")
            sections[key] = _coerce(SECTIONS[key], key, val, text)
        elif key in ("seed", "out"):
            top[key] = val
        else:
            raise ConfigError(f"unknown key {key} ({_locate(text, key)})")
    if "seed" in top and (not isinstance(top["seed"], int) or isinstance(top["seed"], bool)):
        raise ConfigError(f"seed must be an integer ({_locate(text, 'seed')})")
    if "out" in top and not isinstance(top["out"], str):
        raise ConfigError(f"out must be a string ({_locate(text, 'out')})")
    cfg = RunConfig(**top, **sections)
    validate(cfg)
    return cfg


def validate(cfg: RunConfig):
    if cfg.model.kind not in ("tiny_lm", "mlp"):
        raise ConfigError(f"model.kind must be 'tiny_lm' or 'mlp', got {cfg.model.kind!r}")
    if cfg.data.source not in ("synth_text", "synth_regression", "files"):
        raise ConfigError(f"data.source must be synth_text, synth_regression or files, got {cfg.data.source!r}")
    if (cfg.model.kind == "mlp") != (cfg.data.source == "synth_regression"):
        raise ConfigError("model.kind 'mlp' pairs with data.source 'synth_regression' and vice versa")
    if cfg.data.source == "files" and not cfg.data.paths:
        raise ConfigError("data.source = 'files' needs data.paths")
    if cfg.data.T < 1:
        raise ConfigError("data.T must be >= 1")


def load_config(path: str | Path) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    cfg = parse_config(text)
    if cfg.data.source == "files":
        base = path.parent
        paths = tuple(str(p if Path(p).is_absolute() else base / p) for p in cfg.data.paths)
        cfg = dataclasses.replace(cfg, data=dataclasses.replace(cfg.data, paths=paths))
    return cfg
