"""Single-site Metropolis-Hastings over execution traces.

Each step picks one Latent entry uniformly, proposes a new value there (from
the site's prior, or from a local random-walk kernel), re-executes the
simulator in Replay mode reusing every other matching value, and accepts with

    log a = [log p(x') - log p(x)] + [log K(x_j | x'_j) - log K(x'_j | x_j)]
          + [log |L| - log |L'|] + [sum_stale log f - sum_fresh log f]

where |L| counts eligible sites, "fresh" are latent draws present only in the
proposed trace (novel sites, or reuses invalidated by a support change), and
"stale" are their counterparts present only in the current trace.  For the
prior kernel the K-ratio is the site's prior density ratio, which cancels the
site's own factors inside log p; decisions therefore depend only on density
ratios and are invariant to constant offsets in the joint.

Simulator errors during a proposal count as rejections and are tallied, not
raised.  A model with zero eligible sites yields a degenerate chain of the
initial trace plus a warning flag.
"""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field

import numpy as np
from scipy.special import ndtri

from .controller import ImportancePrior, Replay, SimulatorError, execute_trace
from .distributions import Categorical, Normal
from .rng import Rng
from .trace import Kind, Trace, TraceEntry
from .values import Real, Value


@dataclass(frozen=True)
class RwKernelConfig:
    """Local random-walk kernel scales, as fractions of each site's natural
    scale: Uniform and other bounded sites step by a reflected Gaussian of
    std ``sigma * (high - low)``; Normal sites by a Gaussian of
    ``sigma * prior std``.  Categorical and unbounded-discrete sites resample
    from the prior (with the exact asymmetry correction).  sigma = 0 freezes
    the chain in place."""

    sigma: float = 0.1

    def __post_init__(self) -> None:
        if self.sigma < 0:
            raise ValueError(f"sigma must be >= 0, got {self.sigma}")


@dataclass
class MhState:
    current: Trace
    rng: Rng
    steps: int = 0
    accepted: int = 0
    simulator_rejections: int = 0


@dataclass
class StepRecord:
    log_joint: float
    accepted: bool
    simulator_error: bool = False


def _eligible_sites(t: Trace, conditions) -> list[TraceEntry]:
    if not conditions:
        return [e for e in t.entries if e.kind == Kind.LATENT]
    return [
        e
        for e in t.entries
        if e.kind == Kind.LATENT and (e.address, e.instance) not in conditions
    ]


def _reflect(x: float, low: float, high: float) -> float:
    span = high - low
    if span <= 0:
        return low
    t = math.fmod(x - low, 2.0 * span)
    if t < 0:
        t += 2.0 * span
    return low + (t if t <= span else 2.0 * span - t)


def _propose_prior(entry: TraceEntry, rng: Rng) -> tuple[Value, float, float]:
    dist = entry.distribution
    value = dist.sample(rng)
    return value, dist.log_prob(value), dist.log_prob(entry.value)


def _propose_walk(entry: TraceEntry, rng: Rng, sigma: float) -> tuple[Value, float, float]:
    dist = entry.distribution
    if isinstance(dist, Categorical):
        return _propose_prior(entry, rng)
    if isinstance(dist, Normal):
        scale = sigma * dist.std
        if scale == 0.0:
            return entry.value, 0.0, 0.0
        z = float(ndtri(max(rng.uniform(), 1e-300)))
        return Real(entry.value.x + scale * z), 0.0, 0.0
    support = dist.support()
    if getattr(support, "bounded", False) and hasattr(support, "low"):
        scale = sigma * (support.high - support.low)
        if scale == 0.0:
            return entry.value, 0.0, 0.0
        z = float(ndtri(max(rng.uniform(), 1e-300)))
        moved = _reflect(entry.value.x + scale * z, support.low, support.high)
        return Real(moved), 0.0, 0.0
    # unbounded discrete (or anything else): prior resample with correction
    return _propose_prior(entry, rng)


def _structure_correction(
    base: Trace, proposed: Trace, site: tuple[str, int]
) -> float:
    """sum_stale log f - sum_fresh log f over non-site latent entries."""
    base_latents = {
        (e.address, e.instance): e for e in base.entries if e.kind == Kind.LATENT
    }
    correction = 0.0
    seen = set()
    for e in proposed.entries:
        if e.kind != Kind.LATENT:
            continue
        key = (e.address, e.instance)
        seen.add(key)
        if key == site:
            continue
        counterpart = base_latents.get(key)
        if counterpart is None or counterpart.value != e.value:
            correction -= e.log_prob  # fresh draw in the proposed trace
            if counterpart is not None:
                correction += counterpart.log_prob  # its invalidated twin
    for key, e in base_latents.items():
        if key not in seen and key != site:
            correction += e.log_prob  # stale: present only in the current trace
    return correction


def _mh_step(
    state: MhState,
    conn,
    proposer,
    conditions=None,
    observation: Value | None = None,
    model_name: str = "engine",
) -> StepRecord:
    base = state.current
    eligible = _eligible_sites(base, conditions)
    state.steps += 1
    if not eligible:
        return StepRecord(base.log_joint, accepted=False)
    entry = eligible[state.rng.choice(len(eligible))]
    site = (entry.address, entry.instance)
    value, log_fwd, log_rev = proposer(entry, state.rng)
    try:
        proposed = execute_trace(
            conn,
            Replay(base, site, value),
            conditions,
            state.rng,
            observation,
            model_name,
        )
    except SimulatorError:
        state.simulator_rejections += 1
        return StepRecord(base.log_joint, accepted=False, simulator_error=True)

    if proposed.log_joint == -math.inf:
        accept = False
    elif base.log_joint == -math.inf:
        accept = True
    else:
        n_eligible_new = len(_eligible_sites(proposed, conditions))
        log_alpha = (
            (proposed.log_joint - base.log_joint)
            + (log_rev - log_fwd)
            + (math.log(len(eligible)) - math.log(n_eligible_new))
            + _structure_correction(base, proposed, site)
        )
        accept = log_alpha >= 0.0 or math.log(max(state.rng.uniform(), 1e-300)) < log_alpha
    if accept:
        state.current = proposed
        state.accepted += 1
    return StepRecord(state.current.log_joint, accepted=accept)


def lmh_step(
    state: MhState,
    conn,
    conditions=None,
    observation: Value | None = None,
    model_name: str = "engine",
) -> StepRecord:
    """One single-site step proposing from the site's prior."""
    return _mh_step(state, conn, _propose_prior, conditions, observation, model_name)


def rmh_step(
    state: MhState,
    conn,
    kernel: RwKernelConfig,
    conditions=None,
    observation: Value | None = None,
    model_name: str = "engine",
) -> StepRecord:
    """One single-site step proposing from a local random-walk kernel."""

    def proposer(entry: TraceEntry, rng: Rng):
        return _propose_walk(entry, rng, kernel.sigma)

    return _mh_step(state, conn, proposer, conditions, observation, model_name)


@dataclass
class ChainResult:
    traces: list[Trace]
    log_joints: np.ndarray
    accepted: np.ndarray
    acceptance_rate: float
    no_sites_warning: bool = False
    simulator_rejections: int = 0
    warnings: list[str] = field(default_factory=list)


def run_chain(
    conn,
    steps: int,
    kernel: RwKernelConfig | None = None,
    initial: Trace | None = None,
    burn_in: int = 0,
    thinning: int = 1,
    conditions=None,
    observation: Value | None = None,
    root_seed: int = 0,
    model_name: str = "engine",
) -> ChainResult:
    """Run a chain and return kept traces plus the full per-step sidecar.

    ``kernel=None`` selects prior-proposal steps; otherwise random-walk steps
    with the given config.  Kept traces are the post-burn-in states at every
    ``thinning``-th step.  ``burn_in >= steps`` yields a valid empty result.
    """
    if steps < 0:
        raise ValueError(f"steps must be >= 0, got {steps}")
    if thinning < 1:
        raise ValueError(f"thinning must be >= 1, got {thinning}")
    if burn_in < 0:
        raise ValueError(f"burn_in must be >= 0, got {burn_in}")
    rng = Rng(root_seed)
    if initial is None:
        initial = execute_trace(
            conn, ImportancePrior(), conditions, rng, observation, model_name
        )
    state = MhState(current=initial, rng=rng)
    no_sites = len(_eligible_sites(initial, conditions)) == 0

    log_joints = np.empty(steps, dtype=np.float64)
    accepted = np.zeros(steps, dtype=np.uint8)
    kept: list[Trace] = []
    for i in range(steps):
        if kernel is None:
            record = lmh_step(state, conn, conditions, observation, model_name)
        else:
            record = rmh_step(state, conn, kernel, conditions, observation, model_name)
        log_joints[i] = record.log_joint
        accepted[i] = 1 if record.accepted else 0
        if i >= burn_in and (i - burn_in) % thinning == 0:
            kept.append(state.current)
    warnings = []
    if no_sites:
        warnings.append("no eligible resample sites; chain repeats the initial trace")
    return ChainResult(
        traces=kept,
        log_joints=log_joints,
        accepted=accepted,
        acceptance_rate=(state.accepted / steps) if steps else 0.0,
        no_sites_warning=no_sites,
        simulator_rejections=state.simulator_rejections,
        warnings=warnings,
    )


_SIDECAR_RECORD = struct.Struct("<dB")


def save_chain_sidecar(path, log_joints, accepted) -> None:
    """Per-step records: little-endian f64 log joint + u8 accepted flag."""
    log_joints = np.asarray(log_joints, dtype=np.float64)
    accepted = np.asarray(accepted)
    if log_joints.shape != accepted.shape:
        raise ValueError("log_joints and accepted must have equal length")
    with open(path, "wb") as fh:
        for lj, acc in zip(log_joints, accepted):
            fh.write(_SIDECAR_RECORD.pack(float(lj), 1 if acc else 0))


def load_chain_sidecar(path) -> tuple[np.ndarray, np.ndarray]:
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) % _SIDECAR_RECORD.size:
        raise ValueError(
            f"sidecar length {len(data)} is not a multiple of {_SIDECAR_RECORD.size}"
        )
    n = len(data) // _SIDECAR_RECORD.size
    log_joints = np.empty(n, dtype=np.float64)
    accepted = np.empty(n, dtype=np.uint8)
    for i in range(n):
        lj, acc = _SIDECAR_RECORD.unpack_from(data, i * _SIDECAR_RECORD.size)
        log_joints[i] = lj
        accepted[i] = acc
    return log_joints, accepted
