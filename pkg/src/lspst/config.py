"""Training configuration and the ``key = value`` config file format."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

from .net import ModelConfig


class ConfigError(ValueError):
    pass


@dataclass
class TrainConfig:
    lr0: float = 1e-3
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.0
    epochs: int = 30
    batch: int = 4
    poly_power: float = 0.9
    seed: int = 0
    data_dir: str = "data"
    out_dir: str = "run"
    eval_dir: str = ""
    holdout: float = 0.2
    eval_every: int = 1
    augment: bool = True
    model: ModelConfig = field(default_factory=ModelConfig)

    def __post_init__(self):
        if not self.lr0 > 0:
            raise ConfigError(f"lr0 must be > 0, got {self.lr0}")
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch < 1:
            raise ConfigError(f"batch must be >= 1, got {self.batch}")
        if not 0 <= self.holdout < 1:
            raise ConfigError(f"holdout must be in [0, 1), got {self.holdout}")
        self.betas = tuple(float(b) for b in self.betas)
        if len(self.betas) != 2 or not all(0 <= b < 1 for b in self.betas):
            raise ConfigError(f"betas must be two values in [0, 1), got {self.betas}")


def _coerce(text, like, key):
    try:
        if isinstance(like, bool):
            low = text.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(text)
            return low in ("true", "1", "yes")
        if isinstance(like, int):
            return int(text)
        if isinstance(like, float):
            return float(text)
        if isinstance(like, tuple):
            conv = type(like[0]) if like else float
            return tuple(conv(v) for v in text.replace(",", " ").split())
    except ValueError:
        raise ConfigError(f"bad value for {key}: {text!r}") from None
    return text


def apply_overrides(cfg, pairs):
    """Set ``key`` / ``model.key`` values (strings) on a TrainConfig copy."""
    top, model = {}, {}
    top_names = {f.name for f in dataclasses.fields(TrainConfig)} - {"model"}
    for key, text in pairs:
        if key.startswith("model."):
            name = key[len("model."):]
            if name not in ModelConfig.field_names():
                raise ConfigError(f"unknown config key {key!r}")
            model[name] = _coerce(text, getattr(cfg.model, name), key)
        elif key in top_names:
            top[key] = _coerce(text, getattr(cfg, key), key)
        else:
            raise ConfigError(f"unknown config key {key!r}")
    try:
        new_model = dataclasses.replace(cfg.model, **model)
        return dataclasses.replace(cfg, model=new_model, **top)
    except (TypeError, ValueError) as e:
        raise ConfigError(str(e)) from None


def parse_config(text, source="<config>", base=None):
    pairs = []
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep or not key.strip():
            raise ConfigError(f"{source}:{n}: expected 'key = value', got {raw.strip()!r}")
        pairs.append((key.strip(), value.strip()))
    try:
        return apply_overrides(base or TrainConfig(), pairs)
    except ConfigError as e:
        raise ConfigError(f"{source}: {e}") from None


def load_config(path, base=None):
    try:
        with open(path) as fh:
            text = fh.read()
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e.strerror}") from None
    return parse_config(text, path, base)


def dump_config(cfg):
    lines = []
    for f in dataclasses.fields(cfg):
        if f.name != "model":
            lines.append(f"{f.name} = {_fmt(getattr(cfg, f.name))}")
    for f in dataclasses.fields(cfg.model):
        lines.append(f"model.{f.name} = {_fmt(getattr(cfg.model, f.name))}")
    return "\n".join(lines) + "\n"


def _fmt(v):
    if isinstance(v, tuple):
        return ",".join(repr(x) for x in v)
    if isinstance(v, bool):
        return "true" if v else "false"
    return repr(v) if isinstance(v, float) else str(v)
