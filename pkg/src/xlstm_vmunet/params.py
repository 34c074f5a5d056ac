"""Named parameter sets: seeded initialization and dataclass <-> flat dict."""

from __future__ import annotations

import dataclasses
import zlib
from typing import Mapping, TypeVar

import numpy as np

from .errors import ConfigurationError
from .tensor import Tensor

P = TypeVar("P")


def param_rng(seed: int, name: str) -> np.random.Generator:
    """Generator keyed by (seed, parameter name).

    Initial values of a parameter do not depend on which other parameters
    exist, so architecture variants share weights wherever names coincide.
    """
    return np.random.default_rng([seed, zlib.crc32(name.encode("utf-8"))])


def kaiming_uniform(seed: int, name: str, shape, fan_in: int) -> Tensor:
    bound = np.sqrt(6.0 / fan_in)
    return Tensor(param_rng(seed, name).uniform(-bound, bound, shape), requires_grad=True, name=name)


def constant(value: float, shape, name: str | None = None) -> Tensor:
    return Tensor(np.full(shape, value, dtype=np.float64), requires_grad=True, name=name)


def static(default):
    """Dataclass field holding a structural setting rather than a tensor."""
    return dataclasses.field(default=default, metadata={"static": True})


def _tensor_fields(cls):
    return [f for f in dataclasses.fields(cls) if not f.metadata.get("static")]


def flatten(params, prefix: str) -> dict[str, Tensor]:
    return {f"{prefix}.{f.name}": getattr(params, f.name) for f in _tensor_fields(params)}


def bind(cls: type[P], weights: Mapping[str, Tensor], prefix: str, **settings) -> P:
    try:
        tensors = {f.name: weights[f"{prefix}.{f.name}"] for f in _tensor_fields(cls)}
    except KeyError as exc:
        raise ConfigurationError(f"missing parameter {exc.args[0]!r}") from None
    return cls(**tensors, **settings)
