"""Distribution specifications: validated parameters, sampling, densities.

Every sampler consumes a documented number of raw uniforms from the Rng:

== ====================== ===========================================
#  distribution           draws per sample
== ====================== ===========================================
1  Uniform                1
2  Normal                 1 (inverse CDF)
3  TruncatedNormal        1 (inverse CDF on the truncated interval)
4  Categorical            1 (cumulative scan)
5  Poisson, rate < 30     1 (sequential inversion)
6  Poisson, rate >= 30    2 per attempt (transformed rejection; the
                          expected attempt count is below 1.2)
7  MixtureTruncatedNormal 2 (component index, then component draw)
== ====================== ===========================================

``log_prob`` returns -inf for values of the right type outside the support and
raises TypeMismatch for values of the wrong type.  Categorical probabilities
and mixture weights are stored exactly as given (validated to within
SIMPLEX_TOL of a simplex); normalization happens inside the computations so
that wire round-trips preserve parameter bytes.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

from scipy.special import gammaln, log_ndtr, ndtri

from .values import Boolean, Integer, Real, value_to_float, value_to_int

SIMPLEX_TOL = 1e-9
_LOG_SQRT_2PI = 0.5 * math.log(2.0 * math.pi)
_POISSON_INVERSION_MAX_RATE = 30.0


class TypeMismatch(TypeError):
    """Value type is incompatible with the distribution."""


# --- support descriptions ---------------------------------------------------


@dataclass(frozen=True)
class Interval:
    low: float
    high: float

    bounded = True

    def contains(self, v: float) -> bool:
        return self.low <= v <= self.high


@dataclass(frozen=True)
class RealLine:
    bounded = False

    def contains(self, v: float) -> bool:
        return math.isfinite(v)


@dataclass(frozen=True)
class IndexSet:
    size: int

    bounded = True

    def contains(self, v: int) -> bool:
        return 0 <= v < self.size


@dataclass(frozen=True)
class Naturals:
    bounded = False

    def contains(self, v: int) -> bool:
        return v >= 0


def _require_finite(name: str, x: float) -> float:
    x = float(x)
    if not math.isfinite(x):
        raise ValueError(f"{name} must be finite, got {x!r}")
    return x


def _ppf(u: float) -> float:
    """Standard-normal inverse CDF, guarded against u == 0."""
    return float(ndtri(max(u, 1e-300)))


def _log_phi_diff(alpha: float, beta: float) -> float:
    """log(Phi(beta) - Phi(alpha)) for alpha < beta, computed in log space."""
    if alpha > 0.0:
        # reflect into the left tail where log_ndtr is accurate
        hi, lo = float(log_ndtr(-alpha)), float(log_ndtr(-beta))
    else:
        hi, lo = float(log_ndtr(beta)), float(log_ndtr(alpha))
    diff = lo - hi
    if diff >= 0.0:  # numerically empty interval
        return -math.inf
    return hi + math.log1p(-math.exp(diff))


# --- distributions ----------------------------------------------------------


@dataclass(frozen=True)
class Uniform:
    low: float
    high: float

    def __post_init__(self) -> None:
        object.__setattr__(self, "low", _require_finite("low", self.low))
        object.__setattr__(self, "high", _require_finite("high", self.high))
        if not self.low < self.high:
            raise ValueError(f"Uniform requires low < high, got [{self.low}, {self.high}]")

    def sample(self, rng) -> Real:
        return Real(self.low + rng.uniform() * (self.high - self.low))

    def log_prob(self, v) -> float:
        x = _as_real(v)
        if not (self.low <= x <= self.high):
            return -math.inf
        return -math.log(self.high - self.low)

    def support(self) -> Interval:
        return Interval(self.low, self.high)


@dataclass(frozen=True)
class Normal:
    mean: float
    std: float

    def __post_init__(self) -> None:
        object.__setattr__(self, "mean", _require_finite("mean", self.mean))
        object.__setattr__(self, "std", _require_finite("std", self.std))
        if not self.std > 0:
            raise ValueError(f"Normal requires std > 0, got {self.std}")

    def sample(self, rng) -> Real:
        return Real(self.mean + self.std * _ppf(rng.uniform()))

    def log_prob(self, v) -> float:
        x = _as_real(v)
        if not math.isfinite(x):
            return -math.inf
        z = (x - self.mean) / self.std
        return -0.5 * z * z - math.log(self.std) - _LOG_SQRT_2PI

    def support(self) -> RealLine:
        return RealLine()


@dataclass(frozen=True)
class TruncatedNormal:
    """Normal(mean, std) restricted to [low, high]; mean/std describe the
    untruncated parent, so mean may lie outside the interval."""

    mean: float
    std: float
    low: float
    high: float

    def __post_init__(self) -> None:
        object.__setattr__(self, "mean", _require_finite("mean", self.mean))
        object.__setattr__(self, "std", _require_finite("std", self.std))
        object.__setattr__(self, "low", _require_finite("low", self.low))
        object.__setattr__(self, "high", _require_finite("high", self.high))
        if not self.std > 0:
            raise ValueError(f"TruncatedNormal requires std > 0, got {self.std}")
        if not self.low < self.high:
            raise ValueError(
                f"TruncatedNormal requires low < high, got [{self.low}, {self.high}]"
            )

    def _bounds_z(self) -> tuple[float, float]:
        return (self.low - self.mean) / self.std, (self.high - self.mean) / self.std

    def sample(self, rng) -> Real:
        alpha, beta = self._bounds_z()
        fa, fb = math.exp(log_ndtr(alpha)), math.exp(log_ndtr(beta))
        u = fa + rng.uniform() * (fb - fa)
        x = self.mean + self.std * _ppf(u)
        return Real(min(max(x, self.low), self.high))

    def log_prob(self, v) -> float:
        x = _as_real(v)
        if not (self.low <= x <= self.high):
            return -math.inf
        alpha, beta = self._bounds_z()
        z = (x - self.mean) / self.std
        return (
            -0.5 * z * z
            - math.log(self.std)
            - _LOG_SQRT_2PI
            - _log_phi_diff(alpha, beta)
        )

    def support(self) -> Interval:
        return Interval(self.low, self.high)


@dataclass(frozen=True)
class Categorical:
    probs: tuple[float, ...]

    def __post_init__(self) -> None:
        probs = tuple(float(p) for p in self.probs)
        if len(probs) == 0:
            raise ValueError("Categorical requires at least one class")
        total = 0.0
        for p in probs:
            if not (math.isfinite(p) and p >= 0.0):
                raise ValueError(f"Categorical probabilities must be finite and >= 0, got {p!r}")
            total += p
        if abs(total - 1.0) > SIMPLEX_TOL:
            raise ValueError(f"Categorical probabilities sum to {total!r}, not 1")
        object.__setattr__(self, "probs", probs)

    @property
    def size(self) -> int:
        return len(self.probs)

    def sample(self, rng) -> Integer:
        total = math.fsum(self.probs)
        u = rng.uniform() * total
        acc = 0.0
        for k, p in enumerate(self.probs):
            acc += p
            if u < acc:
                return Integer(k)
        return Integer(len(self.probs) - 1)

    def log_prob(self, v) -> float:
        k = _as_index(v)
        if not (0 <= k < len(self.probs)):
            return -math.inf
        p = self.probs[k]
        if p <= 0.0:
            return -math.inf
        return math.log(p) - math.log(math.fsum(self.probs))

    def support(self) -> IndexSet:
        return IndexSet(len(self.probs))


@dataclass(frozen=True)
class Poisson:
    rate: float

    def __post_init__(self) -> None:
        object.__setattr__(self, "rate", _require_finite("rate", self.rate))
        if not self.rate > 0:
            raise ValueError(f"Poisson requires rate > 0, got {self.rate}")

    def sample(self, rng) -> Integer:
        if self.rate < _POISSON_INVERSION_MAX_RATE:
            return Integer(_poisson_inversion(self.rate, rng))
        return Integer(_poisson_ptrs(self.rate, rng))

    def log_prob(self, v) -> float:
        k = _as_index(v)
        if k < 0:
            return -math.inf
        return k * math.log(self.rate) - self.rate - float(gammaln(k + 1))

    def support(self) -> Naturals:
        return Naturals()


def _poisson_inversion(rate: float, rng) -> int:
    """Sequential-search inversion; one uniform per draw (rate < 30)."""
    u = rng.uniform()
    k = 0
    p = math.exp(-rate)
    acc = p
    while u >= acc:
        k += 1
        p *= rate / k
        acc += p
        if k > 2000:  # unreachable for rate < 30; guards fp pathologies
            break
    return k


def _poisson_ptrs(rate: float, rng) -> int:
    """Transformed-rejection sampler for rate >= 30; two uniforms per attempt."""
    b = 0.931 + 2.53 * math.sqrt(rate)
    a = -0.059 + 0.02483 * b
    inv_alpha = 1.1239 + 1.1328 / (b - 3.4)
    v_r = 0.9277 - 3.6224 / (b - 2.0)
    log_rate = math.log(rate)
    while True:
        u = rng.uniform() - 0.5
        v = rng.uniform()
        us = 0.5 - abs(u)
        k = math.floor((2.0 * a / us + b) * u + rate + 0.43)
        if us >= 0.07 and v <= v_r:
            return int(k)
        if k < 0 or (us < 0.013 and v > us):
            continue
        if (
            math.log(v) + math.log(inv_alpha) - math.log(a / (us * us) + b)
            <= k * log_rate - rate - float(gammaln(k + 1.0))
        ):
            return int(k)


@dataclass(frozen=True)
class MixtureTruncatedNormal:
    """Finite mixture of TruncatedNormal components on a common interval."""

    weights: tuple[float, ...]
    components: tuple[TruncatedNormal, ...]

    def __post_init__(self) -> None:
        weights = tuple(float(w) for w in self.weights)
        components = tuple(self.components)
        if len(components) == 0:
            raise ValueError("mixture requires at least one component")
        if len(weights) != len(components):
            raise ValueError(
                f"{len(weights)} weights for {len(components)} components"
            )
        total = 0.0
        for w in weights:
            if not (math.isfinite(w) and w >= 0.0):
                raise ValueError(f"mixture weights must be finite and >= 0, got {w!r}")
            total += w
        if abs(total - 1.0) > SIMPLEX_TOL:
            raise ValueError(f"mixture weights sum to {total!r}, not 1")
        low, high = components[0].low, components[0].high
        for c in components[1:]:
            if c.low != low or c.high != high:
                raise ValueError("mixture components must share one [low, high] interval")
        object.__setattr__(self, "weights", weights)
        object.__setattr__(self, "components", components)

    @property
    def low(self) -> float:
        return self.components[0].low

    @property
    def high(self) -> float:
        return self.components[0].high

    def sample(self, rng) -> Real:
        total = math.fsum(self.weights)
        u = rng.uniform() * total
        acc = 0.0
        idx = len(self.weights) - 1
        for k, w in enumerate(self.weights):
            acc += w
            if u < acc:
                idx = k
                break
        return self.components[idx].sample(rng)

    def log_prob(self, v) -> float:
        x = _as_real(v)
        if not (self.low <= x <= self.high):
            return -math.inf
        log_total = math.log(math.fsum(self.weights))
        terms = []
        for w, c in zip(self.weights, self.components):
            if w <= 0.0:
                continue
            terms.append(math.log(w) - log_total + c.log_prob(x))
        if not terms:
            return -math.inf
        m = max(terms)
        if m == -math.inf:
            return -math.inf
        return m + math.log(math.fsum(math.exp(t - m) for t in terms))

    def support(self) -> Interval:
        return Interval(self.low, self.high)


Distribution = (
    Uniform | Normal | TruncatedNormal | Categorical | Poisson | MixtureTruncatedNormal
)

_CONTINUOUS = (Uniform, Normal, TruncatedNormal, MixtureTruncatedNormal)
_DISCRETE = (Categorical, Poisson)


def _as_real(v) -> float:
    if isinstance(v, (Integer, Boolean)):
        raise TypeMismatch(f"continuous distribution cannot score {type(v).__name__}")
    try:
        return value_to_float(v)
    except TypeError as e:
        raise TypeMismatch(str(e)) from None


def _as_index(v) -> int:
    if isinstance(v, (Real, Boolean)):
        raise TypeMismatch(f"discrete distribution cannot score {type(v).__name__}")
    try:
        return value_to_int(v)
    except TypeError as e:
        raise TypeMismatch(str(e)) from None
