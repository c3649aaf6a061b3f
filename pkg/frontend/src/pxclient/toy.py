"""Toy particle-decay model served through the protocol front end.

A decay channel (six classes whose prior probabilities span roughly four
orders of magnitude) selects how many particles are produced and whether
their showers are shallow or deep.  Each particle gets a uniform momentum
and a fragmentation fraction drawn by rejection -- the fraction is redrawn
(replace=True) until twice its value fits under the momentum, which accepts
with probability at least energy_low / energy_high = 0.25 per attempt, so
every trace terminates.  Deterministic per-particle deposition kernels then
spread the energy over a depth x height x width calorimeter grid (shallow
showers front-loaded and narrow, deep ones rear-loaded and wider), and every
voxel is observed under a Poisson likelihood at rate = expected deposition
plus a 1e-3 floor.  The realized grid is returned as the run result.

All numbers here are fixture constants, not physics.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .distributions import Categorical, Poisson, Uniform
from .values import Integer, RealVector, Value


@dataclass(frozen=True)
class ToyConfig:
    """Geometry and prior constants for the toy decay model."""

    depth: int = 4
    height: int = 8
    width: int = 8
    channel_probs: tuple[float, ...] = (0.40, 0.30, 0.20, 0.0899, 0.01, 0.0001)
    multiplicity: tuple[int, ...] = (1, 2, 3, 2, 1, 3)
    # per channel: False = shallow shower, True = deep shower
    deep: tuple[bool, ...] = (False, True, False, True, False, True)
    energy_low: float = 0.5
    energy_high: float = 2.0
    scale: float = 15.0
    floor: float = 1e-3

    @property
    def grid_shape(self) -> tuple[int, int, int]:
        return (self.depth, self.height, self.width)


TOY_DEFAULT = ToyConfig()

_SHALLOW_PROFILE = (0.60, 0.25, 0.10, 0.05)
_DEEP_PROFILE = (0.10, 0.20, 0.35, 0.35)
_SHALLOW_SIGMA = 0.9
_DEEP_SIGMA = 1.6
_SIGMA_WIDENING = 0.15  # transverse sigma grows by this fraction per layer
_PARTICLE_OFFSETS = ((0.0, 0.0), (-1.2, 1.0), (1.1, -0.9))

_kernel_cache: dict[tuple, np.ndarray] = {}


def particle_kernels(config: ToyConfig, channel: int) -> np.ndarray:
    """Deterministic per-particle deposition patterns, shape (m, D, H, W);
    each particle's pattern sums to 1 over the grid."""
    key = (config, channel)
    cached = _kernel_cache.get(key)
    if cached is not None:
        return cached
    deep = config.deep[channel]
    profile = _DEEP_PROFILE if deep else _SHALLOW_PROFILE
    sigma0 = _DEEP_SIGMA if deep else _SHALLOW_SIGMA
    m = config.multiplicity[channel]
    ys = np.arange(config.height)[:, None]
    xs = np.arange(config.width)[None, :]
    cy0 = (config.height - 1) / 2.0
    cx0 = (config.width - 1) / 2.0
    out = np.zeros((m, config.depth, config.height, config.width))
    for j in range(m):
        dy, dx = _PARTICLE_OFFSETS[j]
        cy, cx = cy0 + dy, cx0 + dx
        for d in range(config.depth):
            sigma = sigma0 * (1.0 + _SIGMA_WIDENING * d)
            blob = np.exp(-((ys - cy) ** 2 + (xs - cx) ** 2) / (2.0 * sigma * sigma))
            out[j, d] = profile[d] * blob / blob.sum()
    _kernel_cache[key] = out
    return out


def expected_grid(
    channel: int, energies, fractions, config: ToyConfig = TOY_DEFAULT
) -> np.ndarray:
    """Expected deposition rates for the given latents (includes the floor)."""
    kernels = particle_kernels(config, channel)
    rates = np.full(config.grid_shape, config.floor)
    for j, (e, frac) in enumerate(zip(energies, fractions)):
        deposited = e * (0.5 + 0.5 * frac)
        rates += config.scale * deposited * kernels[j]
    return rates


def make_toy_model(config: ToyConfig = TOY_DEFAULT):
    """Build the toy decay model closed over ``config``.

    Site addresses are explicit labels: "channel", then "momentum_j" and a
    "fragment_j" rejection loop per particle, then one "calo" observe per
    voxel in row-major order.
    """

    def toy_decay(ctx) -> Value:
        ch = ctx.sample(Categorical(config.channel_probs), address="channel")
        m = config.multiplicity[ch.i]
        energies = []
        fractions = []
        for j in range(m):
            e = ctx.sample(
                Uniform(config.energy_low, config.energy_high), address=f"momentum_{j}"
            )
            while True:
                frac = ctx.sample(
                    Uniform(0.0, 1.0), address=f"fragment_{j}", replace=True
                )
                if 2.0 * frac.x <= e.x:
                    break
            energies.append(e.x)
            fractions.append(frac.x)
        rates = expected_grid(ch.i, energies, fractions, config)
        obs_arr = ctx.observation.array if isinstance(ctx.observation, RealVector) else None
        if obs_arr is not None and obs_arr.shape != config.grid_shape:
            raise ValueError(
                f"observation shape {obs_arr.shape} does not match grid {config.grid_shape}"
            )
        grid = np.zeros(config.grid_shape)
        for d in range(config.depth):
            for h in range(config.height):
                for w in range(config.width):
                    if obs_arr is None:
                        supplied: Value = Integer(0)
                    else:
                        supplied = Integer(int(round(obs_arr[d, h, w])))
                    got = ctx.observe(
                        Poisson(float(rates[d, h, w])), supplied, address="calo"
                    )
                    grid[d, h, w] = got.i if isinstance(got, Integer) else float(got.x)
        return RealVector(grid)

    return toy_decay


toy_model = make_toy_model()
