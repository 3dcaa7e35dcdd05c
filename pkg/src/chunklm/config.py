"""Model and training configuration, plus the flat ``key = value`` file format."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, fields
from pathlib import Path


class ConfigKeyError(ValueError):
    def __init__(self, key, msg):
        self.key = key
        super().__init__(f"config key {key!r}: {msg}")


@dataclass
class ModelConfig:
    chunk_size: int = 128
    d_model: int = 128
    d_hidden: int = 128
    ssm_taps: int = 16
    conv_taps: int = 3
    dilations: tuple = (1, 2, 4)
    top_k: int = 1
    mem_capacity: int = 1024
    mem_index: str = "exact"
    n_list: int = 64
    n_probe: int = 8
    memory_scope: str = "sequence"  # "sequence" or "shared"
    no_ssm: bool = False
    no_retrieval: bool = False
    no_rnn: bool = False
    dtype: str = "float64"
    init_seed: int = 0

    @property
    def vocab(self) -> int:
        return 256

    @property
    def d_mem(self) -> int:
        return self.d_model


@dataclass
class TrainConfig:
    lr: float = 3e-4
    warmup: int = 100
    max_steps: int = 1000
    beta1: float = 0.9
    beta2: float = 0.98
    eps: float = 1e-9
    weight_decay: float = 0.01
    clip_norm: float = 1.0
    batch_size: int = 8
    bptt_window: int = 4
    seed: int = 0
    eval_every: int = 0
    ckpt_every: int = 0
    model: ModelConfig = field(default_factory=ModelConfig)

    def __post_init__(self):
        if self.bptt_window < 1:
            raise ConfigKeyError("bptt_window", "must be >= 1")
        if self.warmup > self.max_steps:
            raise ConfigKeyError("warmup", f"warmup {self.warmup} exceeds max_steps {self.max_steps}")


LARGE = ModelConfig(chunk_size=1024, d_model=256, d_hidden=512, ssm_taps=32, mem_capacity=4096)
TINY = ModelConfig(chunk_size=8, d_model=4, d_hidden=4, ssm_taps=4, conv_taps=2, dilations=(1, 2), top_k=1)


def _coerce(key, typ, raw):
    raw = raw.strip() if isinstance(raw, str) else raw
    try:
        if typ in (bool, "bool"):
            if isinstance(raw, bool):
                return raw
            low = str(raw).lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if typ in (int, "int"):
            return int(raw)
        if typ in (float, "float"):
            return float(raw)
        if typ in (tuple, "tuple"):
            if isinstance(raw, (tuple, list)):
                return tuple(int(v) for v in raw)
            return tuple(int(v) for v in str(raw).replace("[", "").replace("]", "").split(",") if v.strip())
        return str(raw)
    except ValueError:
        raise ConfigKeyError(key, f"cannot parse {raw!r} as {getattr(typ, '__name__', typ)}") from None


def config_keys():
    """Every flat key with its owning section and type."""
    keys = {}
    for f in fields(ModelConfig):
        keys[f.name] = ("model", f.type)
    for f in fields(TrainConfig):
        if f.name != "model":
            keys[f.name] = ("train", f.type)
    return keys


def apply_overrides(cfg: TrainConfig, values: dict) -> TrainConfig:
    keys = config_keys()
    model_kw, train_kw = {}, {}
    for k, v in values.items():
        if k not in keys:
            raise ConfigKeyError(k, "unknown key")
        section, typ = keys[k]
        (model_kw if section == "model" else train_kw)[k] = _coerce(k, typ, v)
    model = dataclasses.replace(cfg.model, **model_kw)
    return dataclasses.replace(cfg, model=model, **train_kw)


def parse_config_text(text: str) -> dict:
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigKeyError(line, f"line {lineno} is not 'key = value'")
        k, v = line.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def load_config(path=None, overrides=None) -> TrainConfig:
    cfg = TrainConfig()
    if path is not None:
        cfg = apply_overrides(cfg, parse_config_text(Path(path).read_text()))
    if overrides:
        cfg = apply_overrides(cfg, overrides)
    return cfg


def to_flat(cfg: TrainConfig) -> dict:
    out = {}
    for f in fields(ModelConfig):
        out[f.name] = getattr(cfg.model, f.name)
    for f in fields(TrainConfig):
        if f.name != "model":
            out[f.name] = getattr(cfg, f.name)
    return out


def format_value(v) -> str:
    if isinstance(v, tuple):
        return ",".join(str(x) for x in v)
    return str(v)


def dump_config(cfg: TrainConfig) -> str:
    return "".join(f"{k} = {format_value(v)}\n" for k, v in to_flat(cfg).items())
