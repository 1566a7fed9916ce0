"""Flat ``key = value`` run configuration.

Keys mirror :class:`~mgc.trainer.TrainConfig`; nested configs use a dotted
prefix (``loss.``, ``vit.``, ``heads.``, ``augment.``) and the image source
uses ``data.``. ``preset`` picks the starting point (``desk`` or ``full``)
and is applied before every other key regardless of its position::

    # desk smoke run
    preset = desk
    seed = 3
    loss.sample_counts = 1:10, 2:10, 7:2, 14:1
    heads.projector = 256, 256, 128
    data.source = synthetic
    data.count = 64
"""
from __future__ import annotations

import dataclasses
import typing
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Tuple, Union

from .augment import AugmentParams
from .contrast import LossConfig
from .data import load_folder, synthetic
from .model import HeadConfig, ViTConfig
from .trainer import TrainConfig

PRESETS = ("desk", "full")
_NESTED = {"loss": LossConfig, "vit": ViTConfig, "heads": HeadConfig, "augment": AugmentParams}


class ConfigError(ValueError):
    def __init__(self, message: str, line: Optional[int] = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


@dataclass
class DataConfig:
    source: str = "synthetic"
    count: int = 64
    side: int = 256
    root: str = ""

    def __post_init__(self):
        if self.source not in ("synthetic", "folder"):
            raise ValueError("data.source must be 'synthetic' or 'folder'")
        if self.source == "folder" and not self.root:
            raise ValueError("data.root is required for a folder source")
        if self.count <= 0 or self.side < 32:
            raise ValueError("data.count must be positive and data.side at least 32")

    def build(self, seed: int):
        if self.source == "folder":
            return load_folder(self.root)
        return synthetic(self.count, seed=seed, side=self.side)


@dataclass
class RunConfig:
    train: TrainConfig = field(default_factory=TrainConfig.desk)
    data: DataConfig = field(default_factory=DataConfig)
    preset: str = "desk"

    def dataset(self):
        return self.data.build(self.train.seed)


def _hints(cls) -> Dict[str, object]:
    return typing.get_type_hints(cls)


def valid_keys() -> List[str]:
    keys = ["preset"]
    keys += [f.name for f in dataclasses.fields(TrainConfig) if f.name not in _NESTED]
    for prefix, cls in _NESTED.items():
        keys += [f"{prefix}.{f.name}" for f in dataclasses.fields(cls)]
    keys += [f"data.{f.name}" for f in dataclasses.fields(DataConfig)]
    return keys


def _coerce(text: str, hint):
    origin, args = typing.get_origin(hint), typing.get_args(hint)
    if origin is Union:
        inner = [a for a in args if a is not type(None)]
        if text.lower() in ("none", "null", ""):
            return None
        return _coerce(text, inner[0])
    if hint is bool:
        low = text.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"expected a boolean, got {text!r}")
    if hint is int:
        return int(text)
    if hint is float:
        return float(text)
    if hint is str:
        return text
    if origin is tuple:
        parts = [p.strip() for p in text.split(",") if p.strip()]
        elem = args[0] if args else float
        if len(args) > 1 and args[1] is not Ellipsis and len(parts) != len(args):
            raise ValueError(f"expected {len(args)} comma-separated values")
        return tuple(_coerce(p, elem) for p in parts)
    if origin is dict:
        out = {}
        for item in text.split(","):
            if not item.strip():
                continue
            k, sep, v = item.partition(":")
            if not sep:
                raise ValueError(f"expected key:value pairs, got {item.strip()!r}")
            out[_coerce(k.strip(), args[0])] = _coerce(v.strip(), args[1])
        return out
    raise ValueError(f"unsupported field type {hint}")


def parse_lines(lines: Iterable[str]) -> List[Tuple[int, str, str]]:
    """Split ``key = value`` lines, dropping blanks and ``#`` comments."""
    out = []
    for no, raw in enumerate(lines, start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep or not key.strip():
            raise ConfigError(f"expected 'key = value', got {raw.strip()!r}", no)
        out.append((no, key.strip(), value.strip()))
    return out


def build_config(pairs: Iterable[Tuple[Optional[int], str, str]]) -> RunConfig:
    pairs = list(pairs)
    allowed = set(valid_keys())
    for no, key, _ in pairs:
        if key not in allowed:
            raise ConfigError(f"unknown key {key!r}; valid keys: {', '.join(valid_keys())}", no)

    preset = "desk"
    for no, key, value in pairs:
        if key == "preset":
            if value not in PRESETS:
                raise ConfigError(f"preset must be one of {PRESETS}, got {value!r}", no)
            preset = value
    base = TrainConfig.desk() if preset == "desk" else TrainConfig()

    top: Dict[str, object] = {}
    nested: Dict[str, Dict[str, object]] = {p: {} for p in _NESTED}
    data: Dict[str, object] = {}
    top_hints, data_hints = _hints(TrainConfig), _hints(DataConfig)
    for no, key, value in pairs:
        if key == "preset":
            continue
        prefix, _, name = key.rpartition(".")
        try:
            if prefix == "data":
                data[name] = _coerce(value, data_hints[name])
            elif prefix:
                nested[prefix][name] = _coerce(value, _hints(_NESTED[prefix])[name])
            else:
                top[name] = _coerce(value, top_hints[name])
        except ValueError as e:
            raise ConfigError(f"bad value for {key}: {e}", no) from None

    try:
        for prefix, changes in nested.items():
            if changes:
                top[prefix] = dataclasses.replace(getattr(base, prefix), **changes)
        train = dataclasses.replace(base, **top)
        return RunConfig(train=train, data=DataConfig(**data), preset=preset)
    except ValueError as e:
        raise ConfigError(f"invalid configuration: {e}") from None


def parse_overrides(items: Iterable[str]) -> List[Tuple[Optional[int], str, str]]:
    out = []
    for item in items:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"override must look like key=value, got {item!r}")
        out.append((None, key.strip(), value.strip()))
    return out


def load_config(path: Optional[Union[str, Path]] = None, overrides: Iterable[str] = ()) -> RunConfig:
    """Read ``path`` (or start from the desk preset) and apply ``key=value`` overrides."""
    pairs: List[Tuple[Optional[int], str, str]] = []
    if path is not None:
        pairs = list(parse_lines(Path(path).read_text().splitlines()))
    return build_config(pairs + parse_overrides(overrides))
