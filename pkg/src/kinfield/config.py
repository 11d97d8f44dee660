"""Experiment configuration: dataclasses, YAML loading with unknown-key
rejection, and dotted-path overrides from the command line."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, fields, is_dataclass
from pathlib import Path

import yaml

from .objectives import HopSchedule, LossWeights


class ConfigError(ValueError):
    pass


@dataclass
class ModelConfig:
    # Feature-volume ranks per plane pair (xy/xz/yz order).
    static_density_ranks: tuple = (4, 4, 4)
    static_rgb_ranks: tuple = (12, 12, 12)
    dynamic_density_ranks: tuple = (4, 1, 1)
    dynamic_rgb_ranks: tuple = (12, 3, 3)
    kinematic_ranks: tuple = (8, 4, 4)
    radiance_hidden: int = 16
    kinematic_hidden: int = 16
    initial_resolution: int = 24
    final_resolution: int = 48
    time_resolution: int = 8
    max_order: int = 3


@dataclass
class TrainConfig:
    seed: int = 0
    steps: int = 3000
    batch_rays: int = 512
    chunk_rays: int = 512     # rays per tape; gradients accumulate over chunks
    n_samples: int = 20
    kin_points: int = 32

    lr_volume: float = 0.02
    lr_head: float = 1e-3
    lr_final_scale: float = 0.1       # cosine floor as a fraction of the base lr
    static_lr_drop: float = 0.1

    static_init_steps: int = 75
    kin_activation_step: int = 1000
    order_start: int = 1
    order_steps: tuple = (1200, 1800)
    hop_steps: tuple = (0, 1500)
    hop_sizes: tuple = (2, 3)
    upsample_steps: tuple = (1000, 2000)
    static_drop_steps: tuple = ()     # defaults to (static_init_steps, 60%)

    entropy_skew: float = 2.0
    lambda_div: float = 1.0
    eps_lambda: float = 0.2

    log_every: int = 50
    checkpoint_every: int = 1000

    weights: LossWeights = field(default_factory=LossWeights)

    @property
    def hop_schedule(self):
        return HopSchedule(steps=tuple(self.hop_steps), hops=tuple(self.hop_sizes))

    def order_at(self, step, max_order=None):
        order = self.order_start + sum(1 for s in self.order_steps if step >= s)
        if max_order is not None:
            order = min(order, max_order)
        return order

    def static_drops(self):
        if self.static_drop_steps:
            return tuple(self.static_drop_steps)
        return (self.static_init_steps, int(0.6 * self.steps))


@dataclass
class ExperimentConfig:
    manifest: str = ""
    out_dir: str = "out"
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)


def _coerce(value, target_type, path):
    if is_dataclass(target_type):
        if not isinstance(value, dict):
            raise ConfigError(f"{path}: expected a mapping")
        return _from_dict(target_type, value, path)
    if target_type is tuple:
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{path}: expected a list")
        return tuple(value)
    if target_type is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{path}: expected a boolean")
        return value
    if target_type is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{path}: expected an integer")
        return value
    if target_type is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path}: expected a number")
        return float(value)
    if target_type is str:
        if not isinstance(value, str):
            raise ConfigError(f"{path}: expected a string")
        return value
    return value


_TYPE_MAP = {"tuple": tuple, "int": int, "float": float, "str": str, "bool": bool}


def _field_type(f):
    t = f.type
    if isinstance(t, str):
        if t in _TYPE_MAP:
            return _TYPE_MAP[t]
        for cls in (ModelConfig, TrainConfig, ExperimentConfig, LossWeights):
            if t == cls.__name__:
                return cls
        return object
    return t


def _from_dict(cls, data, path=""):
    known = {f.name: f for f in fields(cls)}
    unknown = set(data) - set(known)
    if unknown:
        where = path or cls.__name__
        raise ConfigError(f"{where}: unknown keys {sorted(unknown)}")
    kwargs = {}
    for name, value in data.items():
        f = known[name]
        sub = f"{path}.{name}" if path else name
        kwargs[name] = _coerce(value, _field_type(f), sub)
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{path or cls.__name__}: {e}") from e


def load_config(path=None, overrides=()) -> ExperimentConfig:
    data = {}
    if path is not None:
        raw = Path(path).read_text()
        data = yaml.safe_load(raw) or {}
        if not isinstance(data, dict):
            raise ConfigError(f"{path}: top level must be a mapping")
    for ov in overrides:
        key, sep, val = ov.partition("=")
        if not sep:
            raise ConfigError(f"override {ov!r} is not key=value")
        node = data
        parts = key.split(".")
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override {ov!r} conflicts with scalar")
        node[parts[-1]] = yaml.safe_load(val)
    return _from_dict(ExperimentConfig, data)


def dump_config(cfg) -> str:
    def unwrap(obj):
        if is_dataclass(obj):
            return {f.name: unwrap(getattr(obj, f.name)) for f in fields(obj)}
        if isinstance(obj, tuple):
            return list(obj)
        return obj
    return yaml.safe_dump(unwrap(cfg), sort_keys=False)
