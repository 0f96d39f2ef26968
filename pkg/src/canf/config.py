"""Declarative model/run configuration: defaults, key=value parsing, validation."""
from __future__ import annotations

import difflib
import hashlib
from dataclasses import dataclass, field, fields

from .condaware import COND_KINDS

CONTROL_METHODS = ("CAN", "AdaNorm", "CondTokens")
CONDITION_SOURCES = ("class", "timestep")
WEIGHT_ADAPTERS = ("generator", "kernel-bank")


class ConfigError(ValueError):
    pass


@dataclass
class ModelConfig:
    image_size: int = 8
    patch_size: int = 2
    width: int = 64
    depth: int = 4
    heads: int = 4
    d: int = 64
    n_classes: int = 4
    mlp_ratio: int = 2
    cond_aware_set: frozenset = frozenset({"dw-conv", "patch-embed", "out-proj"})
    control_method: frozenset = frozenset({"CAN"})
    condition_sources: frozenset = frozenset({"class", "timestep"})
    skip_connections: bool = True
    weight_adapter: str = "generator"
    bank_size: int = 0  # 0 = parameter-budget-matched K for kernel-bank runs
    gen_out_scale: float = 0.25  # delta scale; sets the conditional path's step size under Adam

    def validate(self):
        if self.image_size % self.patch_size:
            raise ConfigError("image_size must be divisible by patch_size")
        if self.width % self.heads:
            raise ConfigError("width must be divisible by heads")
        if self.d % 2:
            raise ConfigError("d must be even (sinusoidal timestep code splits in half)")
        for v in (("image_size", self.image_size), ("patch_size", self.patch_size),
                  ("width", self.width), ("depth", self.depth), ("heads", self.heads),
                  ("d", self.d), ("mlp_ratio", self.mlp_ratio)):
            if v[1] < 1:
                raise ConfigError(f"{v[0]} must be >= 1")
        if self.n_classes < 1:
            raise ConfigError("n_classes must be >= 1")
        bad = self.cond_aware_set - set(COND_KINDS)
        if bad:
            raise ConfigError(f"cond_aware_set contains unknown kinds {sorted(bad)}; valid: {list(COND_KINDS)}")
        bad = self.control_method - set(CONTROL_METHODS)
        if bad:
            raise ConfigError(f"control_method contains unknown methods {sorted(bad)}; valid: {list(CONTROL_METHODS)}")
        bad = self.condition_sources - set(CONDITION_SOURCES)
        if bad:
            raise ConfigError(f"condition_sources contains unknown sources {sorted(bad)}; valid: {list(CONDITION_SOURCES)}")
        if self.cond_aware_set and "CAN" not in self.control_method:
            raise ConfigError("cond_aware_set is nonempty but control_method does not include CAN")
        if self.weight_adapter not in WEIGHT_ADAPTERS:
            raise ConfigError(f"weight_adapter must be one of {list(WEIGHT_ADAPTERS)}")
        if self.bank_size < 0:
            raise ConfigError("bank_size must be >= 0")
        if self.gen_out_scale <= 0:
            raise ConfigError("gen_out_scale must be positive")
        if not self.condition_sources and self.control_method:
            raise ConfigError("control_method set but condition_sources is empty")

    @property
    def tokens(self) -> int:
        return (self.image_size // self.patch_size) ** 2

    @property
    def hidden(self) -> int:
        return self.width * self.mlp_ratio


@dataclass
class RunSettings:
    epochs: int = 24
    batch_size: int = 32
    lr: float = 2e-3
    timesteps: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02
    p_null: float = 0.1
    sample_steps: int = 20
    guidance: float = 1.0
    n_per_class: int = 64
    holdout_per_class: int = 16
    eval_points: int = 10
    samples_per_class: int = 8
    data_seed: int = 1234

    def validate(self):
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if not 0 <= self.p_null < 1:
            raise ConfigError("p_null must be in [0, 1)")
        if self.sample_steps < 1 or self.sample_steps > self.timesteps:
            raise ConfigError("sample_steps must be in [1, timesteps]")
        if self.holdout_per_class >= self.n_per_class:
            raise ConfigError("holdout_per_class must be smaller than n_per_class")
        if self.guidance < 0:
            raise ConfigError("guidance must be >= 0")


@dataclass
class Config:
    model: ModelConfig = field(default_factory=ModelConfig)
    run: RunSettings = field(default_factory=RunSettings)

    def validate(self):
        self.model.validate()
        self.run.validate()
        return self


_SET_KEYS = {"cond_aware_set", "control_method", "condition_sources"}
_BOOL_KEYS = {"skip_connections"}


def _field_map():
    out = {}
    for f in fields(ModelConfig):
        out[f.name] = ("model", f.type)
    for f in fields(RunSettings):
        out[f.name] = ("run", f.type)
    return out


_FIELDS = _field_map()


def _parse_value(key: str, raw: str):
    raw = raw.strip()
    if key in _SET_KEYS:
        if not (raw.startswith("[") and raw.endswith("]")):
            raise ConfigError(f"key '{key}' expects a [a,b,...] list, got '{raw}'")
        inner = raw[1:-1].strip()
        return frozenset(tok.strip() for tok in inner.split(",") if tok.strip())
    if key in _BOOL_KEYS:
        if raw.lower() in ("true", "1", "yes"):
            return True
        if raw.lower() in ("false", "0", "no"):
            return False
        raise ConfigError(f"key '{key}' expects a boolean, got '{raw}'")
    section, ftype = _FIELDS[key]
    target = {"int": int, "float": float, "str": str}[ftype if isinstance(ftype, str) else ftype.__name__]
    try:
        return target(raw)
    except ValueError as e:
        raise ConfigError(f"key '{key}' expects {target.__name__}, got '{raw}'") from e


def _apply(cfg: Config, key: str, raw: str):
    if key not in _FIELDS:
        hint = difflib.get_close_matches(key, _FIELDS.keys(), n=1)
        extra = f" (did you mean '{hint[0]}'?)" if hint else ""
        raise ConfigError(f"unknown config key '{key}'{extra}")
    section, _ = _FIELDS[key]
    setattr(getattr(cfg, section), key, _parse_value(key, raw))


def parse_config(path=None, overrides=(), text=None) -> Config:
    """Build a Config from defaults, an optional key=value file/text, then overrides."""
    cfg = Config()
    lines = []
    if path is not None:
        with open(path, "r", encoding="utf-8") as fh:
            lines = fh.readlines()
    if text is not None:
        lines += text.splitlines()
    for source, items in (("file", lines), ("override", overrides)):
        for raw in items:
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ConfigError(f"malformed {source} entry '{line}' (expected key=value)")
            key, _, value = line.partition("=")
            _apply(cfg, key.strip(), value)
    return cfg.validate()


def serialize_config(cfg: Config) -> str:
    """Canonical key=value text: sorted keys, sorted set members."""
    out = []
    for key in sorted(_FIELDS):
        section, _ = _FIELDS[key]
        value = getattr(getattr(cfg, section), key)
        if isinstance(value, frozenset):
            value = "[" + ",".join(sorted(value)) + "]"
        elif isinstance(value, bool):
            value = "true" if value else "false"
        elif isinstance(value, float):
            value = repr(value)
        out.append(f"{key}={value}")
    return "\n".join(out) + "\n"


def config_hash(cfg: Config) -> str:
    return hashlib.sha256(serialize_config(cfg).encode()).hexdigest()[:12]
