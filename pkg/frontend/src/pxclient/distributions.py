"""Distribution descriptions a model can attach to sample/observe sites.

These are parameter carriers only: the engine on the other end of the wire
draws the samples and evaluates densities.  Construction validates the
parameters (finite, ordered bounds, normalized simplices) so that malformed
frames are rejected at decode time and model bugs surface at the call site
rather than as engine-side errors.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

SIMPLEX_TOL = 1e-9


def _finite(name: str, x: float) -> float:
    x = float(x)
    if not math.isfinite(x):
        raise ValueError(f"{name} must be finite, got {x!r}")
    return x


def _simplex(name: str, probs) -> tuple[float, ...]:
    probs = tuple(float(p) for p in probs)
    if not probs:
        raise ValueError(f"{name} needs at least one entry")
    total = 0.0
    for p in probs:
        if not (math.isfinite(p) and p >= 0.0):
            raise ValueError(f"{name} entries must be finite and >= 0, got {p!r}")
        total += p
    if abs(total - 1.0) > SIMPLEX_TOL:
        raise ValueError(f"{name} sums to {total!r}, not 1")
    return probs


@dataclass(frozen=True)
class Uniform:
    low: float
    high: float

    def __post_init__(self) -> None:
        object.__setattr__(self, "low", _finite("low", self.low))
        object.__setattr__(self, "high", _finite("high", self.high))
        if not self.low < self.high:
            raise ValueError(f"Uniform requires low < high, got [{self.low}, {self.high}]")


@dataclass(frozen=True)
class Normal:
    mean: float
    std: float

    def __post_init__(self) -> None:
        object.__setattr__(self, "mean", _finite("mean", self.mean))
        object.__setattr__(self, "std", _finite("std", self.std))
        if not self.std > 0:
            raise ValueError(f"Normal requires std > 0, got {self.std}")


@dataclass(frozen=True)
class TruncatedNormal:
    """Normal(mean, std) restricted to [low, high]; mean and std describe the
    untruncated parent, so the mean may fall outside the interval."""

    mean: float
    std: float
    low: float
    high: float

    def __post_init__(self) -> None:
        object.__setattr__(self, "mean", _finite("mean", self.mean))
        object.__setattr__(self, "std", _finite("std", self.std))
        object.__setattr__(self, "low", _finite("low", self.low))
        object.__setattr__(self, "high", _finite("high", self.high))
        if not self.std > 0:
            raise ValueError(f"TruncatedNormal requires std > 0, got {self.std}")
        if not self.low < self.high:
            raise ValueError(
                f"TruncatedNormal requires low < high, got [{self.low}, {self.high}]"
            )


@dataclass(frozen=True)
class Categorical:
    probs: tuple[float, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "probs", _simplex("Categorical probabilities", self.probs))

    @property
    def size(self) -> int:
        return len(self.probs)


@dataclass(frozen=True)
class Poisson:
    rate: float

    def __post_init__(self) -> None:
        object.__setattr__(self, "rate", _finite("rate", self.rate))
        if not self.rate > 0:
            raise ValueError(f"Poisson requires rate > 0, got {self.rate}")


@dataclass(frozen=True)
class MixtureTruncatedNormal:
    """Finite mixture of TruncatedNormal components sharing one interval."""

    weights: tuple[float, ...]
    components: tuple[TruncatedNormal, ...]

    def __post_init__(self) -> None:
        components = tuple(self.components)
        if not components:
            raise ValueError("mixture requires at least one component")
        weights = _simplex("mixture weights", self.weights)
        if len(weights) != len(components):
            raise ValueError(f"{len(weights)} weights for {len(components)} components")
        low, high = components[0].low, components[0].high
        for c in components[1:]:
            if c.low != low or c.high != high:
                raise ValueError("mixture components must share one [low, high] interval")
        object.__setattr__(self, "weights", weights)
        object.__setattr__(self, "components", components)


Distribution = (
    Uniform | Normal | TruncatedNormal | Categorical | Poisson | MixtureTruncatedNormal
)
