"""Run configuration: one nested JSON document mirroring the module configs.

Parsing is strict (unknown keys are rejected with their dotted path), CLI
overrides address fields by dot path, and ``config_hash`` digests the
canonicalized document so reports and checkpoints can be tied to the exact
configuration that produced them.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import typing
from dataclasses import dataclass, field
from typing import Any, Dict, Optional, Tuple

from .augment import AugmentSpec
from .core import ConfigError
from .losses import LossConfig
from .transfer import TransferConfig

__all__ = [
    "DataSection",
    "DecoderSection",
    "EncoderSection",
    "PartFormerSection",
    "RunConfig",
    "TrainSection",
    "apply_overrides",
    "config_hash",
    "load_config",
]


@dataclass(frozen=True)
class EncoderSection:
    mode: str = "scratch"
    base_channels: int = 64
    reduction_blocks: int = 3
    backbone: Optional[str] = None


@dataclass(frozen=True)
class PartFormerSection:
    layers: int = 6
    heads: int = 8
    hidden: int = 256
    mlp_dim: int = 1024
    patch: int = 16


@dataclass(frozen=True)
class DecoderSection:
    widths: Tuple[int, int, int, int, int] = (256, 128, 128, 64, 64)


@dataclass(frozen=True)
class TrainSection:
    lr: float = 5e-4
    batch: int = 32
    steps: int = 2000
    weight_decay: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    exchange: bool = True
    eval_every: int = 100
    checkpoint_every: int = 0

    def __post_init__(self):
        if not self.lr > 0:
            raise ConfigError("train.lr must be > 0")
        if self.batch < 1:
            raise ConfigError("train.batch must be >= 1")


@dataclass(frozen=True)
class DataSection:
    root: Optional[str] = None
    n_classes: int = 1

    def __post_init__(self):
        if self.n_classes < 1:
            raise ConfigError("data.n_classes must be >= 1")


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    dtype: str = "float32"
    k_parts: int = 4
    image_size: int = 128
    channels: int = 256
    encoder: EncoderSection = field(default_factory=EncoderSection)
    partformer: PartFormerSection = field(default_factory=PartFormerSection)
    decoder: DecoderSection = field(default_factory=DecoderSection)
    transfer: TransferConfig = field(default_factory=TransferConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    augment: AugmentSpec = field(default_factory=AugmentSpec)
    train: TrainSection = field(default_factory=TrainSection)
    data: DataSection = field(default_factory=DataSection)

    def __post_init__(self):
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"dtype must be 'float32' or 'float64', got {self.dtype!r}")
        if self.k_parts < 1:
            raise ConfigError("k_parts must be >= 1")
        if self.image_size % self.partformer.patch:
            raise ConfigError(f"image_size {self.image_size} must be divisible by patch {self.partformer.patch}")

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "RunConfig":
        return _from_dict(cls, data, path="")

    def to_dict(self) -> Dict[str, Any]:
        return _to_jsonable(dataclasses.asdict(self))

    def hash(self) -> str:
        return config_hash(self.to_dict())


def _type_name(tp) -> str:
    return getattr(tp, "__name__", str(tp))


def _coerce(value: Any, tp, path: str):
    origin = typing.get_origin(tp)
    if origin is typing.Union:
        args = typing.get_args(tp)
        if value is None and type(None) in args:
            return None
        inner = [a for a in args if a is not type(None)]
        return _coerce(value, inner[0], path)
    if dataclasses.is_dataclass(tp):
        if not isinstance(value, dict):
            raise ConfigError(f"{path}: expected an object, got {type(value).__name__}")
        return _from_dict(tp, value, path)
    if origin in (tuple, list):
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{path}: expected a list, got {type(value).__name__}")
        args = typing.get_args(tp)
        if origin is tuple and args and args[-1] is not Ellipsis:
            if len(value) != len(args):
                raise ConfigError(f"{path}: expected {len(args)} entries, got {len(value)}")
            return tuple(_coerce(v, a, f"{path}[{i}]") for i, (v, a) in enumerate(zip(value, args)))
        elem = args[0] if args else Any
        seq = tuple(_coerce(v, elem, f"{path}[{i}]") for i, v in enumerate(value))
        return seq if origin is tuple else list(seq)
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path}: expected a number, got {value!r}")
        return float(value)
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{path}: expected an integer, got {value!r}")
        return value
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{path}: expected a boolean, got {value!r}")
        return value
    if tp is str:
        if not isinstance(value, str):
            raise ConfigError(f"{path}: expected a string, got {value!r}")
        return value
    return value


def _from_dict(cls, data: Dict[str, Any], path: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{path or 'config'}: expected an object, got {type(data).__name__}")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - names
    if unknown:
        key = sorted(unknown)[0]
        where = f"{path}.{key}" if path else key
        raise ConfigError(f"unknown config key: {where}")
    kwargs = {}
    for name, value in data.items():
        sub = f"{path}.{name}" if path else name
        kwargs[name] = _coerce(value, hints[name], sub)
    try:
        return cls(**kwargs)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{path or 'config'}: {exc}") from exc


def _to_jsonable(obj):
    if isinstance(obj, dict):
        return {k: _to_jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_to_jsonable(v) for v in obj]
    return obj


def apply_overrides(data: Dict[str, Any], overrides: Dict[str, str]) -> Dict[str, Any]:
    """Set dotted-path keys on a config dict; values parse as JSON or string."""
    out = json.loads(json.dumps(_to_jsonable(data)))
    for dotted, raw in overrides.items():
        try:
            value = json.loads(raw)
        except (json.JSONDecodeError, TypeError):
            value = raw
        node = out
        parts = dotted.split(".")
        for p in parts[:-1]:
            if not isinstance(node, dict) or p not in node:
                raise ConfigError(f"unknown config key: {dotted}")
            node = node[p]
        if not isinstance(node, dict) or parts[-1] not in node:
            raise ConfigError(f"unknown config key: {dotted}")
        node[parts[-1]] = value
    return out


def config_hash(data: Dict[str, Any]) -> str:
    canon = json.dumps(_to_jsonable(data), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode("utf-8")).hexdigest()[:16]


def load_config(path: str, overrides: Optional[Dict[str, str]] = None) -> RunConfig:
    with open(path) as fh:
        data = json.load(fh)
    # Validate and default-fill first so overrides can address any field.
    full = RunConfig.from_dict(data).to_dict()
    if overrides:
        full = apply_overrides(full, overrides)
    return RunConfig.from_dict(full)
