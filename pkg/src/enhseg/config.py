"""Experiment configuration: one dataclass per section, YAML on disk, dotted overrides."""

from __future__ import annotations

import dataclasses
import typing
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .core import ConfigError
from .perturb import PerturbConfig


@dataclass
class DataConfig:
    root: str = ""
    fraction: str = "1/8"
    split_seed: int = 0
    pseudo_dir: str = ""  # empty: <train.out_dir>/pseudo
    reuse_labeled_when_full: bool = True


@dataclass
class ProviderConfig:
    kind: str = "mock"  # mock | clip-sam
    template: str = "a photo of a {classlabel}"
    sim_threshold: float = 0.0
    sam_checkpoint: str = ""
    sam_model_type: str = "vit_h"
    clip_model: str = "openai/clip-vit-base-patch16"
    n_gem_blocks: int = 4
    gem_temperature: float | None = None
    mock_dim: int = 32
    mock_seed: int = 0
    mock_patch: int = 4


@dataclass
class OptimConfig:
    lr0: float = 0.001
    momentum: float = 0.9
    weight_decay: float = 1e-4
    poly_power: float = 0.9


@dataclass
class LoopConfig:
    mode: str = "semi"  # semi | supervised
    labeled_batch: int = 8
    unlabeled_batch: int = 8
    max_iters: int = 1000
    eval_every: int = 250
    checkpoint_every: int = 250
    tau: float = 0.7
    smoothing_rule: str = "inverse-class-count"  # or fixed
    epsilon: float = 0.0  # used by the fixed rule only
    seed: int = 0
    out_dir: str = "runs/default"
    model: str = "tiny"
    model_width: int = 16
    device: str = "cpu"
    weak_bn_train: bool = True
    workers: int = 0


@dataclass
class TrainConfig:
    data: DataConfig = field(default_factory=DataConfig)
    providers: ProviderConfig = field(default_factory=ProviderConfig)
    perturb: PerturbConfig = field(default_factory=PerturbConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    train: LoopConfig = field(default_factory=LoopConfig)

    def validate(self) -> "TrainConfig":
        t = self.train
        if t.labeled_batch < 1 or t.unlabeled_batch < 1:
            raise ConfigError("batch sizes must be >= 1")
        if self.optim.lr0 < 0:
            raise ConfigError("lr0 must be non-negative")
        if t.max_iters < 1:
            raise ConfigError("max_iters must be >= 1")
        if t.mode not in ("semi", "supervised"):
            raise ConfigError(f"train.mode must be semi or supervised, got {t.mode!r}")
        if not 0 <= self.perturb.fp_dropout < 1:
            raise ConfigError("perturb.fp_dropout must be in [0, 1)")
        return self

    @property
    def pseudo_dir(self) -> str:
        return self.data.pseudo_dir or str(Path(self.train.out_dir) / "pseudo")


_SECTIONS = {f.name: f.type for f in dataclasses.fields(TrainConfig)}


def _hints(cls) -> dict:
    return typing.get_type_hints(cls)


def _coerce(value, hint, key: str):
    origin = typing.get_origin(hint)
    args = typing.get_args(hint)
    if value is None:
        if type(None) in args:
            return None
        raise ConfigError(f"{key} may not be null")
    if origin is typing.Union or (origin is not None and type(None) in args):
        inner = [a for a in args if a is not type(None)][0]
        return _coerce(value, inner, key)
    if origin is tuple:
        if not isinstance(value, (list, tuple)) or len(value) != len(args):
            raise ConfigError(f"{key} needs {len(args)} values, got {value!r}")
        return tuple(_coerce(v, a, key) for v, a in zip(value, args))
    try:
        if hint is bool:
            if isinstance(value, str):
                if value.lower() in ("true", "1", "yes"):
                    return True
                if value.lower() in ("false", "0", "no"):
                    return False
                raise ValueError(value)
            return bool(value)
        if hint is int:
            if isinstance(value, float) and not value.is_integer():
                raise ValueError(value)
            return int(value)
        if hint is float:
            return float(value)
        if hint is str:
            return str(value)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"bad value for {key}: {value!r}") from e
    return value


def from_dict(d: dict | None) -> TrainConfig:
    cfg = TrainConfig()
    for sec, values in (d or {}).items():
        if sec not in _SECTIONS:
            raise ConfigError(f"unknown config section {sec!r}")
        obj = getattr(cfg, sec)
        hints = _hints(type(obj))
        for k, v in (values or {}).items():
            if k not in hints:
                raise ConfigError(f"unknown config key {sec}.{k}")
            setattr(obj, k, _coerce(v, hints[k], f"{sec}.{k}"))
    return cfg


def to_dict(cfg: TrainConfig) -> dict:
    out = {}
    for sec in _SECTIONS:
        d = dataclasses.asdict(getattr(cfg, sec))
        out[sec] = {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}
    return out


def apply_overrides(cfg: TrainConfig, overrides: list[str]) -> TrainConfig:
    """Apply ``section.key=value`` strings; values are parsed as YAML scalars."""
    for item in overrides or []:
        if "=" not in item:
            raise ConfigError(f"override must look like section.key=value, got {item!r}")
        key, raw = item.split("=", 1)
        parts = key.strip().split(".")
        if len(parts) != 2:
            raise ConfigError(f"override key must be section.key, got {key!r}")
        sec, k = parts
        if sec not in _SECTIONS:
            raise ConfigError(f"unknown config section {sec!r}")
        obj = getattr(cfg, sec)
        hints = _hints(type(obj))
        if k not in hints:
            raise ConfigError(f"unknown config key {sec}.{k}")
        try:
            value = yaml.safe_load(raw)
        except yaml.YAMLError:
            value = raw
        setattr(obj, k, _coerce(value, hints[k], key))
    return cfg


def load_config(path: str | Path | None, overrides: list[str] | None = None) -> TrainConfig:
    d = {}
    if path:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file not found: {p}")
        try:
            d = yaml.safe_load(p.read_text()) or {}
        except yaml.YAMLError as e:
            raise ConfigError(f"cannot parse {p}: {e}") from e
        if not isinstance(d, dict):
            raise ConfigError(f"{p}: top level must be a mapping of sections")
    return apply_overrides(from_dict(d), overrides or []).validate()


def save_config(cfg: TrainConfig, path: str | Path) -> None:
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    p.write_text(yaml.safe_dump(to_dict(cfg), sort_keys=False))


def describe() -> str:
    """Every config key with its default, one per line."""
    lines = []
    for sec, values in to_dict(TrainConfig()).items():
        for k, v in values.items():
            lines.append(f"  {sec}.{k} = {v!r}")
    return "\n".join(lines)
