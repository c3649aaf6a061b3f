"""Runtime values exchanged with simulators.

A Value is one of Real, Integer, Boolean or RealVector.  These are the only
payload types that cross the wire, appear in trace entries, or are accepted by
distribution methods.  RealVector compares bitwise (shape plus raw float64
payload), so equality is total even in the presence of NaN payloads, which
matters for codec round-trip checks.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

MAX_RANK = 3


@dataclass(frozen=True, slots=True)
class Real:
    x: float

    def __post_init__(self) -> None:
        object.__setattr__(self, "x", float(self.x))

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Real):
            return NotImplemented
        return self.x == other.x or (math.isnan(self.x) and math.isnan(other.x))

    def __hash__(self) -> int:
        return hash(("Real", self.x))


@dataclass(frozen=True, slots=True)
class Integer:
    i: int

    def __post_init__(self) -> None:
        object.__setattr__(self, "i", int(self.i))


@dataclass(frozen=True, slots=True)
class Boolean:
    b: bool

    def __post_init__(self) -> None:
        object.__setattr__(self, "b", bool(self.b))


class RealVector:
    """Row-major float64 array with explicit shape, rank 0..3."""

    __slots__ = ("array",)

    def __init__(self, data) -> None:
        arr = np.ascontiguousarray(np.asarray(data, dtype=np.float64))
        if arr.ndim > MAX_RANK:
            raise ValueError(f"RealVector rank {arr.ndim} exceeds {MAX_RANK}")
        self.array = arr

    @property
    def shape(self) -> tuple[int, ...]:
        return self.array.shape

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, RealVector):
            return NotImplemented
        return self.shape == other.shape and self.array.tobytes() == other.array.tobytes()

    def __hash__(self) -> int:
        return hash(("RealVector", self.shape, self.array.tobytes()))

    def __repr__(self) -> str:
        return f"RealVector(shape={self.shape})"


Value = Real | Integer | Boolean | RealVector


def value_to_float(v) -> float:
    """Coerce a scalar Value (or plain number) to float; TypeError otherwise."""
    if isinstance(v, Real):
        return v.x
    if isinstance(v, (int, float)) and not isinstance(v, bool):
        return float(v)
    raise TypeError(f"expected a real scalar, got {type(v).__name__}")


def value_to_int(v) -> int:
    """Coerce an integer Value (or plain int) to int; TypeError otherwise."""
    if isinstance(v, Integer):
        return v.i
    if isinstance(v, (int, np.integer)) and not isinstance(v, bool):
        return int(v)
    raise TypeError(f"expected an integer, got {type(v).__name__}")


def value_from_json_file(path) -> Value:
    """Read a Value from a JSON convenience file (number or nested array)."""
    with open(path, "r", encoding="utf-8") as fh:
        payload = json.load(fh)
    if isinstance(payload, bool):
        return Boolean(payload)
    if isinstance(payload, (int, float)):
        return Real(float(payload)) if isinstance(payload, float) else Integer(payload)
    if isinstance(payload, list):
        return RealVector(np.asarray(payload, dtype=np.float64))
    raise ValueError(f"cannot interpret JSON payload of type {type(payload).__name__} as a value")
