"""Declarative experiment configuration (YAML) with a resolved, self-describing copy."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import yaml

from .inner import InnerConfig
from .model import EncoderSpec, Variant
from .outer import MetaConfig
from .tasks import ClusterFamily, PretrainConfig, SinusoidFamily, TaskSpec

SCHEMA_VERSION = 1
PRECISIONS = {"single": np.float32, "double": np.float64}


class ConfigError(ValueError):
    """Invalid configuration; ``field`` names the offending key path."""

    def __init__(self, field: str, message: str):
        self.field = field
        super().__init__(f"{field}: {message}")


@dataclass(frozen=True)
class TaskConfig:
    family: str = "cluster"
    n_way: int = 5
    k_shot: int = 5
    query_per_class: int = 15
    # cluster family
    n_train: int = 60
    n_val: int = 16
    n_test: int = 20
    dim: int = 32
    radius: float = 3.0
    noise: float = 1.0
    family_seed: int = 1234
    # sinusoid family
    amplitude: tuple[float, float] = (0.1, 5.0)
    phase: tuple[float, float] = (0.0, float(np.pi))
    x_range: tuple[float, float] = (-5.0, 5.0)
    observation_noise: float = 0.1
    kernel_bandwidth: float = 1.0


@dataclass(frozen=True)
class EncoderConfig:
    hidden: tuple[int, ...] = (64, 64, 32)
    activation: str = "relu"
    warped_layers: tuple[int, ...] = (-1,)
    adapt_layers: tuple[int, ...] | None = (-1,)
    freeze_unadapted: bool = True


@dataclass(frozen=True)
class PretrainSection:
    enabled: bool = True
    steps: int = 500
    batch_size: int = 128
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 0.0005


@dataclass(frozen=True)
class EvalConfig:
    n_tasks: int = 600


@dataclass(frozen=True)
class ExperimentConfig:
    name: str = "experiment"
    task: TaskConfig = TaskConfig()
    encoder: EncoderConfig = EncoderConfig()
    variant: Variant = Variant()
    loss_hidden: tuple[int, ...] = (40, 40)
    inner: InnerConfig = InnerConfig()
    meta: MetaConfig = MetaConfig()
    pretrain: PretrainSection = PretrainSection()
    eval: EvalConfig = EvalConfig()
    precision: str = "single"
    seeds: tuple[int, ...] = (0,)
    out_dir: str = "runs/experiment"
    workers: int = 1
    schema_version: int = SCHEMA_VERSION

    # -- derived objects ---------------------------------------------------
    @property
    def dtype(self):
        return PRECISIONS[self.precision]

    @property
    def kind(self) -> str:
        return "regression" if self.task.family == "sinusoid" else "classification"

    def task_spec(self) -> TaskSpec:
        t = self.task
        if t.family == "sinusoid":
            return TaskSpec("regression", 1, t.k_shot, t.query_per_class, 1)
        return TaskSpec("classification", t.n_way, t.k_shot, t.query_per_class, t.dim)

    def family(self):
        t = self.task
        if t.family == "sinusoid":
            return SinusoidFamily(tuple(t.amplitude), tuple(t.phase), tuple(t.x_range),
                                  t.observation_noise)
        return ClusterFamily(t.n_train, t.n_val, t.n_test, t.dim, t.radius, t.noise, t.family_seed)

    def encoder_spec(self) -> EncoderSpec:
        e = self.encoder
        spec = EncoderSpec.mlp(self.task_spec().input_dim, list(e.hidden),
                               warped_layers=tuple(e.warped_layers),
                               activations=(e.activation,) * len(e.hidden),
                               adapt_policy=None if e.adapt_layers is None else tuple(e.adapt_layers),
                               freeze_unadapted=e.freeze_unadapted)
        return spec

    def pretrain_config(self) -> PretrainConfig:
        p = self.pretrain
        return PretrainConfig(p.steps, p.batch_size, p.lr, p.momentum, p.weight_decay)

    def with_seed(self, seed: int) -> ExperimentConfig:
        return dataclasses.replace(self, seeds=(int(seed),),
                                   meta=dataclasses.replace(self.meta, seed=int(seed)))

    def replace(self, **changes) -> ExperimentConfig:
        return dataclasses.replace(self, **changes)

    # -- serialization -----------------------------------------------------
    def to_dict(self) -> dict:
        return _to_plain(self)

    def dump(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(yaml.safe_dump(self.to_dict(), sort_keys=False))
        return path


def _to_plain(obj):
    if dataclasses.is_dataclass(obj):
        return {f.name: _to_plain(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, (tuple, list)):
        return [_to_plain(v) for v in obj]
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


_SECTIONS = {
    "task": TaskConfig, "encoder": EncoderConfig, "variant": Variant, "inner": InnerConfig,
    "meta": MetaConfig, "pretrain": PretrainSection, "eval": EvalConfig,
}


def _coerce(value, default, where: str):
    """Convert a YAML value to the type of the field's default."""
    if default is None or value is None:
        if isinstance(value, list):
            return tuple(value)
        return value
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(where, f"expected true/false, got {value!r}")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, (int, float)) or int(value) != value:
            raise ConfigError(where, f"expected an integer, got {value!r}")
        return int(value)
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(where, f"expected a number, got {value!r}")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(where, f"expected a string, got {value!r}")
        return value
    if isinstance(default, tuple):
        if not isinstance(value, (list, tuple)):
            raise ConfigError(where, f"expected a list, got {value!r}")
        if default:
            return tuple(_coerce(v, default[0], f"{where}[{i}]") for i, v in enumerate(value))
        return tuple(value)
    return value


def _build(cls, data: dict | None, where: str):
    data = {} if data is None else data
    if not isinstance(data, dict):
        raise ConfigError(where, "expected a mapping")
    names = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(data) - set(names)
    if unknown:
        raise ConfigError(f"{where}.{sorted(unknown)[0]}" if where else sorted(unknown)[0],
                          "unknown key")
    defaults = cls()
    kwargs = {}
    for key, value in data.items():
        path = f"{where}.{key}" if where else key
        kwargs[key] = _coerce(value, getattr(defaults, key), path)
    try:
        return cls(**kwargs)
    except (ValueError, TypeError) as err:
        if isinstance(err, ConfigError):
            raise
        # messages of the section's own validation start with the field name
        first = str(err).split(" ", 1)[0]
        target = f"{where}.{first}" if first in names else (where or "config")
        raise ConfigError(target, str(err)) from err


def from_dict(data: dict) -> ExperimentConfig:
    if not isinstance(data, dict):
        raise ConfigError("config", "top level must be a mapping")
    version = data.get("schema_version", SCHEMA_VERSION)
    if version != SCHEMA_VERSION:
        raise ConfigError("schema_version", f"unsupported version {version!r}")
    top = {}
    for key, value in data.items():
        if key in _SECTIONS:
            top[key] = _build(_SECTIONS[key], value, key)
        elif key in {f.name for f in dataclasses.fields(ExperimentConfig)}:
            top[key] = _coerce(value, getattr(ExperimentConfig(), key), key)
        else:
            raise ConfigError(key, "unknown key")
    cfg = ExperimentConfig(**top)
    validate(cfg)
    return cfg


def validate(cfg: ExperimentConfig) -> None:
    t = cfg.task
    if t.family not in ("cluster", "sinusoid"):
        raise ConfigError("task.family", f"must be 'cluster' or 'sinusoid', got {t.family!r}")
    if cfg.precision not in PRECISIONS:
        raise ConfigError("precision", f"must be one of {sorted(PRECISIONS)}")
    if not cfg.seeds:
        raise ConfigError("seeds", "need at least one seed")
    if cfg.workers < 1:
        raise ConfigError("workers", "must be >= 1")
    if not cfg.encoder.hidden:
        raise ConfigError("encoder.hidden", "need at least one layer")
    if t.family == "cluster":
        if t.n_way < 2:
            raise ConfigError("task.n_way", "classification needs at least 2 classes")
        if t.n_train + t.n_val + t.n_test < 3 * t.n_way:
            raise ConfigError("task.n_train", "class pool must hold at least 3 * n_way classes")
        for split in ("n_train", "n_val", "n_test"):
            if getattr(t, split) < t.n_way:
                raise ConfigError(f"task.{split}", f"fewer than n_way={t.n_way} classes")
    if cfg.eval.n_tasks < 2:
        raise ConfigError("eval.n_tasks", "need at least 2 tasks for a confidence interval")
    if cfg.variant.use_film and not cfg.encoder.warped_layers and not cfg.variant.use_meta_loss:
        raise ConfigError("variant.use_film", "task-adaptive modulation has no layers to modulate")
    try:
        cfg.encoder_spec()
    except ValueError as err:
        raise ConfigError("encoder", str(err)) from err


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        data = yaml.safe_load(path.read_text())
    except yaml.YAMLError as err:
        raise ConfigError(str(path), f"not valid YAML: {err}") from err
    return from_dict(data or {})
