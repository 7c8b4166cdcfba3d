"""Experiment configuration: dataclasses plus a strict JSON loader.

Unknown keys are rejected and every value is type- and range-checked; errors
name the offending field, e.g. ``bsq.alpha: must be >= 0``.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import types
import typing
from dataclasses import dataclass, field
from pathlib import Path

from .models import ModelSpec


class ConfigError(ValueError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 10
    lr: float = 0.1
    milestones: tuple[int, ...] = ()
    gamma: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 1e-4
    batch_size: int = 128

    def validate(self) -> None:
        _require(self.epochs >= 0, "epochs", "must be >= 0")
        _require(self.lr > 0, "lr", "must be > 0")
        _require(all(m >= 0 for m in self.milestones), "milestones", "must be >= 0")
        _require(all(a < b for a, b in zip(self.milestones, self.milestones[1:])),
                 "milestones", "must be strictly increasing")
        _require(self.gamma > 0, "gamma", "must be > 0")
        _require(0 <= self.momentum < 1, "momentum", "must be in [0, 1)")
        _require(self.weight_decay >= 0, "weight_decay", "must be >= 0")
        _require(self.batch_size >= 1, "batch_size", "must be >= 1")

    def lr_at(self, epoch: int) -> float:
        return self.lr * self.gamma ** sum(1 for m in self.milestones if epoch >= m)


@dataclass
class BsqConfig(TrainConfig):
    alpha: float = 5e-3
    # "auto" = a third of the epochs; None = only the final adjustment
    requant_interval: int | str | None = "auto"
    n0: int = 8
    reweigh: bool = True

    def validate(self) -> None:
        super().validate()
        _require(self.alpha >= 0, "alpha", "must be >= 0")
        _require(self.n0 >= 1, "n0", "must be >= 1")
        ri = self.requant_interval
        _require(ri is None or ri == "auto" or (isinstance(ri, int) and ri >= 1),
                 "requant_interval", 'must be an integer >= 1, "auto" or null')

    @property
    def interval(self) -> int | None:
        if self.requant_interval == "auto":
            return max(1, self.epochs // 3)
        return self.requant_interval


@dataclass
class SynthConfig:
    num_classes: int = 4
    n_per_class: int = 200
    test_per_class: int = 100
    dim: int = 16
    separation: float = 6.0
    image_shape: tuple[int, ...] | None = None

    def validate(self) -> None:
        _require(self.num_classes >= 2, "num_classes", "must be >= 2")
        _require(self.n_per_class >= 1, "n_per_class", "must be >= 1")
        _require(self.test_per_class >= 1, "test_per_class", "must be >= 1")
        _require(self.dim >= 2, "dim", "must be >= 2")


@dataclass
class DataConfig:
    source: str = "synth"
    images: str | None = None
    labels: str | None = None
    cifar_train: tuple[str, ...] = ()
    cifar_test: tuple[str, ...] = ()
    n_train: int | None = None
    mean: float = 0.1307
    std: float = 0.3081
    split_seed: int = 0
    synth: SynthConfig = field(default_factory=SynthConfig)

    def validate(self) -> None:
        _require(self.source in ("synth", "mnist", "cifar10"), "source", "must be synth, mnist or cifar10")
        if self.source == "mnist":
            _require(self.images is not None and self.labels is not None, "images", "mnist needs images and labels paths")
            _require(self.n_train is not None and self.n_train >= 1, "n_train", "mnist needs n_train >= 1")
        if self.source == "cifar10":
            _require(bool(self.cifar_train) and bool(self.cifar_test), "cifar_train", "cifar10 needs train and test files")
        _require(self.std > 0, "std", "must be > 0")


@dataclass
class SweepConfig:
    alphas: tuple[float, ...] = (3e-3, 5e-3)
    seeds: tuple[int, ...] = (0,)

    def validate(self) -> None:
        _require(all(a >= 0 for a in self.alphas), "alphas", "must be >= 0")


@dataclass
class ExperimentConfig:
    seed: int = 0
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelSpec = field(default_factory=ModelSpec)
    pretrain: TrainConfig = field(default_factory=lambda: TrainConfig(epochs=20, lr=0.05, milestones=(15,)))
    bsq: BsqConfig = field(default_factory=lambda: BsqConfig(epochs=30, lr=0.1, milestones=(20,)))
    finetune: TrainConfig = field(default_factory=lambda: TrainConfig(epochs=10, lr=0.01, milestones=(6,)))
    scratch: TrainConfig = field(default_factory=lambda: TrainConfig(epochs=20, lr=0.05, milestones=(15,)))
    sweep: SweepConfig = field(default_factory=SweepConfig)
    # directory relative data paths are resolved against; not part of the hash
    base_dir: str = field(default=".", metadata={"internal": True})

    def to_dict(self) -> dict:
        d = _to_plain(self)
        d.pop("base_dir", None)
        return d

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def resolve(self, path: str) -> Path:
        p = Path(path)
        return p if p.is_absolute() else Path(self.base_dir) / p


class _FieldError(Exception):
    def __init__(self, name, msg):
        super().__init__(msg)
        self.name, self.msg = name, msg


def _require(ok: bool, name: str, msg: str) -> None:
    if not ok:
        raise _FieldError(name, msg)


def _to_plain(obj):
    if dataclasses.is_dataclass(obj):
        return {f.name: _to_plain(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, (tuple, list)):
        return [_to_plain(v) for v in obj]
    return obj


def _coerce(value, tp, path: str):
    origin = typing.get_origin(tp)
    if origin in (typing.Union, types.UnionType):
        args = typing.get_args(tp)
        if value is None and type(None) in args:
            return None
        errors = []
        for arg in args:
            if arg is type(None):
                continue
            try:
                return _coerce(value, arg, path)
            except ConfigError as exc:
                errors.append(str(exc))
        raise ConfigError(errors[0] if len(errors) == 1 else f"{path}: unsupported value {value!r}")
    if dataclasses.is_dataclass(tp):
        return _build(tp, value, path)
    if origin is tuple:
        if not isinstance(value, list):
            raise ConfigError(f"{path}: expected a list")
        (inner, _) = typing.get_args(tp)
        return tuple(_coerce(v, inner, f"{path}[{i}]") for i, v in enumerate(value))
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{path}: expected true/false")
        return value
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{path}: expected an integer")
        return value
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path}: expected a number")
        return float(value)
    if tp is str:
        if not isinstance(value, str):
            raise ConfigError(f"{path}: expected a string")
        return value
    raise ConfigError(f"{path}: unsupported field type {tp}")


def _build(cls, data, path: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{path or '<root>'}: expected an object")
    hints = typing.get_type_hints(cls)
    known = {f.name: f for f in dataclasses.fields(cls) if not f.metadata.get("internal")}
    kwargs = {}
    for key, value in data.items():
        sub = f"{path}.{key}" if path else key
        if key not in known:
            raise ConfigError(f"{sub}: unknown field")
        kwargs[key] = _coerce(value, hints[key], sub)
    try:
        obj = cls(**kwargs)
        if hasattr(obj, "validate"):
            obj.validate()
    except _FieldError as exc:
        raise ConfigError(f"{path + '.' if path else ''}{exc.name}: {exc.msg}") from None
    except ValueError as exc:
        raise ConfigError(f"{path or '<root>'}: {exc}") from None
    return obj


def config_from_dict(d: dict, base_dir: str = ".") -> ExperimentConfig:
    cfg = _build(ExperimentConfig, d, "")
    cfg.base_dir = str(base_dir)
    return cfg


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        d = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: not valid JSON ({exc})") from exc
    return config_from_dict(d, str(path.parent))
