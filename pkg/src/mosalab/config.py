"""Model and training configuration, presets, and the JSON config schema.

Model config JSON::

    {
      "name": "tiny",                 # optional
      "layers": 6, "hidden": 512, "head_dim": 64,
      "vocab": 8000, "seq_len": 1024,
      "heads": [{"kind": "dense", "count": 9},
                {"kind": "mosa", "count": 13, "rho": 2}],
      "ff_mult": 4, "include_first": true, "tie_embeddings": false,
      "rope_base": 10000.0, "routing_decay": 0.999
    }

Head kinds: ``dense``, ``local`` (needs ``window``), ``fixed``, ``routing``
and ``mosa`` (need ``rho``). A ``"preset": "<name>"`` key starts from a
built-in preset and overrides the remaining keys.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, replace
from pathlib import Path

HEAD_KINDS = ("dense", "local", "fixed", "routing", "mosa")
DEFAULT_LOCAL_WINDOW = 256


class ConfigError(ValueError):
    """Invalid configuration; ``field`` names the offending key."""

    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field


@dataclass(frozen=True)
class HeadGroup:
    kind: str
    count: int
    rho: int | None = None
    window: int | None = None

    def validate(self, where: str = "heads") -> None:
        if self.kind not in HEAD_KINDS:
            raise ConfigError(f"{where}.kind", f"unknown head kind {self.kind!r}")
        if not isinstance(self.count, int) or self.count < 0:
            raise ConfigError(f"{where}.count", f"must be a non-negative integer, got {self.count!r}")
        if self.kind in ("fixed", "routing", "mosa"):
            if not isinstance(self.rho, int) or self.rho < 1:
                raise ConfigError(f"{where}.rho", f"{self.kind} heads need an integer rho >= 1")
        if self.kind == "local" and (not isinstance(self.window, int) or self.window < 1):
            raise ConfigError(f"{where}.window", "local heads need an integer window >= 1")


@dataclass(frozen=True)
class ModelConfig:
    layers: int
    hidden: int
    head_dim: int
    vocab: int
    seq_len: int
    heads: tuple[HeadGroup, ...]
    name: str = "custom"
    ff_mult: int = 4
    include_first: bool = True
    tie_embeddings: bool = False
    rope_base: float = 10000.0
    routing_decay: float = 0.999

    def validate(self) -> "ModelConfig":
        for key in ("layers", "hidden", "head_dim", "vocab", "seq_len", "ff_mult"):
            v = getattr(self, key)
            lo = 0 if key == "layers" else 1
            if not isinstance(v, int) or isinstance(v, bool) or v < lo:
                raise ConfigError(key, f"must be an integer >= {lo}, got {v!r}")
        if self.head_dim % 2:
            raise ConfigError("head_dim", "must be even for rotary encodings")
        for i, g in enumerate(self.heads):
            g.validate(f"heads[{i}]")
            if g.kind == "routing" and self.seq_len % g.rho:
                raise ConfigError(f"heads[{i}].rho", f"routing rho must divide seq_len={self.seq_len}")
            if g.kind in ("fixed", "routing", "mosa") and g.rho > self.seq_len:
                raise ConfigError(f"heads[{i}].rho", "rho exceeds seq_len")
        if sum(g.count for g in self.heads) == 0 and self.layers > 0:
            raise ConfigError("heads", "roster has no heads")
        return self

    def head_count(self, kind: str) -> int:
        return sum(g.count for g in self.heads if g.kind == kind)

    def with_heads(self, heads, name: str | None = None) -> "ModelConfig":
        return replace(self, heads=tuple(heads), name=name or self.name)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["heads"] = [{k: v for k, v in asdict(g).items() if v is not None} for g in self.heads]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        base: dict = {}
        if "preset" in d:
            name = d.pop("preset")
            if name not in PRESETS:
                raise ConfigError("preset", f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
            base = PRESETS[name].to_dict()
        base.update(d)
        known = set(cls.__dataclass_fields__)
        for key in base:
            if key not in known:
                raise ConfigError(key, "unknown field")
        for key in ("layers", "hidden", "head_dim", "vocab", "seq_len", "heads"):
            if key not in base:
                raise ConfigError(key, "missing required field")
        heads = []
        if not isinstance(base["heads"], list):
            raise ConfigError("heads", "must be a list of head groups")
        for i, g in enumerate(base["heads"]):
            if not isinstance(g, dict):
                raise ConfigError(f"heads[{i}]", "must be an object")
            extra = set(g) - {"kind", "count", "rho", "window"}
            if extra:
                raise ConfigError(f"heads[{i}].{sorted(extra)[0]}", "unknown field")
            if "kind" not in g or "count" not in g:
                raise ConfigError(f"heads[{i}]", "needs 'kind' and 'count'")
            window = g.get("window")
            if g["kind"] == "local" and window is None:
                window = DEFAULT_LOCAL_WINDOW
            heads.append(HeadGroup(g["kind"], g["count"], g.get("rho"), window))
        base["heads"] = tuple(heads)
        return cls(**base).validate()


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 2000
    batch_size: int = 8
    lr: float = 0.00025
    warmup: int = 4000
    clip_norm: float = 0.25
    seed: int = 0
    precision: str = "float64"
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    checkpoint_every: int = 500
    eval_batches: int = 16
    smoothing: float = 0.98

    def validate(self) -> "TrainConfig":
        for key in ("steps", "batch_size", "warmup", "checkpoint_every", "eval_batches"):
            v = getattr(self, key)
            if not isinstance(v, int) or v < 1:
                raise ConfigError(key, f"must be a positive integer, got {v!r}")
        if not self.lr > 0:
            raise ConfigError("lr", "must be positive")
        if not self.clip_norm > 0:
            raise ConfigError("clip_norm", "must be positive")
        if self.precision not in ("float32", "float64"):
            raise ConfigError("precision", "must be 'float32' or 'float64'")
        if not 0 <= self.smoothing < 1:
            raise ConfigError("smoothing", "must lie in [0, 1)")
        return self

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = set(cls.__dataclass_fields__)
        for key in d:
            if key not in known:
                raise ConfigError(f"train.{key}", "unknown field")
        d = dict(d)
        if "betas" in d:
            d["betas"] = tuple(d["betas"])
        return cls(**d).validate()


# Nano trains in minutes on one CPU core; its own schedule replaces the
# 4k-step warmup, which would never finish inside a 2k-step run.
NANO_TRAIN = TrainConfig(steps=2000, batch_size=4, lr=1e-3, warmup=100)
# the published schedule: 100k batches of 64 at the default learning rate and warmup
FULL_TRAIN = TrainConfig(steps=100_000, batch_size=64)


def _dense(name, layers, hidden, heads, vocab=8000, seq_len=1024) -> ModelConfig:
    return ModelConfig(layers=layers, hidden=hidden, head_dim=64, vocab=vocab, seq_len=seq_len,
                       heads=(HeadGroup("dense", heads),), name=name)


PRESETS: dict[str, ModelConfig] = {
    "tiny": _dense("tiny", 6, 512, 9),
    "small": _dense("small", 9, 1024, 9),
    "medium": _dense("medium", 18, 1024, 9),
    "large": _dense("large", 27, 1280, 16),
    "nano": ModelConfig(layers=2, hidden=128, head_dim=32, vocab=257, seq_len=256,
                        heads=(HeadGroup("dense", 8),), name="nano"),
}


def load_model_config(source: str | Path) -> ModelConfig:
    """Preset name or path to a JSON model config."""
    if isinstance(source, str) and source in PRESETS:
        return PRESETS[source]
    path = Path(source)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError("config", f"cannot read {path}: {exc}") from exc
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"line {exc.lineno}", exc.msg) from exc
    if not isinstance(data, dict):
        raise ConfigError("config", "top level must be an object")
    if "model" in data and isinstance(data["model"], (dict, str)):
        data = data["model"]
        if isinstance(data, str):
            return load_model_config(data)
    return ModelConfig.from_dict(data)
