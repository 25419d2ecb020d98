"""Flat ``key = value`` configuration files.

Keys mirror the fields of :class:`SamplerConfig` and :class:`TrainConfig`
plus the inference settings ``stride`` and ``threshold``.  Tuples are
written space-separated (``target_spacing = 1 1 1``); ``#`` starts a
comment.  ``seed`` feeds both the sampler and the trainer.
"""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ConfigError
from .preprocess import SamplerConfig
from .training import TrainConfig


@dataclass(frozen=True)
class PipelineConfig:
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    stride: int = 24
    threshold: float = 0.9


def _bool(s: str) -> bool:
    if s.lower() in ("true", "yes", "1", "on"):
        return True
    if s.lower() in ("false", "no", "0", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _floats(n):
    def parse(s):
        vals = tuple(float(t) for t in s.replace(",", " ").split())
        if len(vals) != n:
            raise ValueError(f"expected {n} numbers, got {len(vals)}")
        return vals
    return parse


_PARSERS = {
    int: int, float: float, str: str, bool: _bool,
    "target_spacing": _floats(3), "hu_window": _floats(2),
}


def _field_types(cls) -> dict[str, object]:
    hints = {"int": int, "float": float, "str": str, "bool": bool}
    out = {}
    for f in dataclasses.fields(cls):
        out[f.name] = _PARSERS.get(f.name) or _PARSERS[hints.get(str(f.type), str)]
    return out


_SAMPLER_KEYS = _field_types(SamplerConfig)
_TRAIN_KEYS = _field_types(TrainConfig)
_TOP_KEYS = {"stride": int, "threshold": float}


def parse_config(text: str) -> PipelineConfig:
    sampler, train, top = {}, {}, {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if not sep:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        known = False
        try:
            if key in _SAMPLER_KEYS:
                sampler[key] = _SAMPLER_KEYS[key](value)
                known = True
            if key in _TRAIN_KEYS:
                train[key] = _TRAIN_KEYS[key](value)
                known = True
            if key in _TOP_KEYS:
                top[key] = _TOP_KEYS[key](value)
                known = True
        except ValueError as exc:
            raise ConfigError(f"line {lineno}: bad value for {key}: {exc}") from None
        if not known:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
    try:
        return PipelineConfig(SamplerConfig(**sampler), TrainConfig(**train), **top)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def load_config(path: str | os.PathLike | None) -> PipelineConfig:
    if path is None:
        return PipelineConfig()
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return parse_config(text)
