"""Strict dataclass <-> dict conversion for configs and checkpoint metadata.

Unknown keys are rejected so config typos fail loudly instead of silently
falling back to defaults.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
from typing import Any, Type, TypeVar, get_origin

T = TypeVar("T")


class ConfigError(ValueError):
    pass


def to_dict(obj: Any) -> Any:
    if dataclasses.is_dataclass(obj) and not isinstance(obj, type):
        return {f.name: to_dict(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, (list, tuple)):
        return [to_dict(v) for v in obj]
    return obj


def from_dict(cls: Type[T], data: dict) -> T:
    if not dataclasses.is_dataclass(cls):
        raise ConfigError(f"{cls} is not a dataclass")
    if not isinstance(data, dict):
        raise ConfigError(f"expected mapping for {cls.__name__}, got {type(data).__name__}")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(data) - set(fields)
    if unknown:
        raise ConfigError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    kwargs = {}
    for name, value in data.items():
        ftype = fields[name].type
        resolved = _resolve(cls, ftype)
        if dataclasses.is_dataclass(resolved):
            kwargs[name] = from_dict(resolved, value)
        elif get_origin(resolved) is tuple and isinstance(value, list):
            kwargs[name] = tuple(value)
        else:
            kwargs[name] = value
    return cls(**kwargs)


def _resolve(cls: type, annotation: Any) -> Any:
    if isinstance(annotation, str):
        import sys
        module = sys.modules[cls.__module__]
        try:
            return eval(annotation, vars(module))  # noqa: S307 - trusted annotations
        except NameError:
            return annotation
    return annotation


def config_hash(obj: Any) -> str:
    """Stable hash of a config dataclass, for reproducibility stamps."""
    canon = json.dumps(to_dict(obj), sort_keys=True)
    return hashlib.sha256(canon.encode("utf-8")).hexdigest()[:16]
