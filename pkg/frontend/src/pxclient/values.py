"""Payload values exchanged with the inference engine.

The wire knows four value shapes: Real (float64), Integer (signed 64-bit),
Boolean, and RealVector (row-major float64 array of rank 0..3).  Model code
receives and returns these objects; the engine owns all randomness, so they
are plain carriers with no sampling behaviour.

RealVector equality is bytewise over shape and payload, so NaN-bearing
vectors still compare equal to themselves -- codec round-trip checks rely on
that.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

MAX_RANK = 3


@dataclass(frozen=True)
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


@dataclass(frozen=True)
class Integer:
    i: int

    def __post_init__(self) -> None:
        object.__setattr__(self, "i", int(self.i))


@dataclass(frozen=True)
class Boolean:
    b: bool

    def __post_init__(self) -> None:
        object.__setattr__(self, "b", bool(self.b))


class RealVector:
    """Contiguous float64 array with explicit shape, rank 0..3."""

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
