"""Drives one simulator execution per session and records the trace.

The engine is the transport-level client.  One session is: Handshake ->
HandshakeResult, Run -> then the simulator leads with SampleRequest /
ObserveRequest messages, each answered by the engine, until RunResult (or an
Error on either side) ends the trace.  The controller asserts this shape on
every session and raises LockstepViolation otherwise.

Execution modes:

* Record        -- draw latents from their priors (optionally with categorical
                   prior inflation for training-set balancing) and draw
                   observe values from their likelihoods, handing them back to
                   the simulator so it can assemble its output.
* ImportancePrior -- draw latents from priors; observe values come from the
                   simulator (which read them out of the Run observation).
* ImportanceGuided -- controlled latents are drawn from a proposal network's
                   per-address heads where available, recording both prior and
                   proposal log densities.
* Replay        -- re-execute against a base trace: the chosen resample site
                   takes a forced value, other matching sites reuse the base
                   value (unless it left the support), novel sites draw fresh.

Conditioning: a mapping (raw address, instance) -> Value fixes sample sites in
any mode.  Fixed sites are recorded as Observed entries -- their prior density
becomes a likelihood factor, they are never proposal-trained or resampled, and
the trace-type census ignores them.  A fixed value outside the presented
distribution's support aborts the session with ConditionOutOfSupport.
"""
from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

from .distributions import Categorical, Distribution, TypeMismatch
from .protocol import (
    Handshake,
    HandshakeResult,
    ObserveRequest,
    ObserveResult,
    ProtocolError,
    Run,
    RunResult,
    SampleRequest,
    SampleResult,
)
from .rng import Rng, derive_seed
from .trace import Kind, Trace, TraceEntry
from .transport import Connection
from .values import Value


class SimulatorError(RuntimeError):
    """The simulator answered with an Error message."""

    def __init__(self, code: int, description: str) -> None:
        self.code = code
        self.description = description
        super().__init__(f"simulator error {code}: {description}")


class LockstepViolation(RuntimeError):
    """Session transcript broke the request-reply grammar."""


class ConditionOutOfSupport(ValueError):
    """A conditioned value is outside the support presented at its site."""


class ProposalSupportError(RuntimeError):
    """A learned proposal emitted a value with zero prior density."""


class WorkerError(RuntimeError):
    def __init__(self, worker_index: int, completed: int, cause: BaseException) -> None:
        self.worker_index = worker_index
        self.completed = completed
        self.cause = cause
        super().__init__(
            f"worker {worker_index} failed after {completed} completed traces: {cause!r}"
        )


@dataclass(frozen=True)
class InflationConfig:
    """Flatten categorical priors at the named addresses: p_k -> p_k**alpha,
    renormalized.  alpha=1 leaves the prior untouched, alpha=0 is uniform."""

    addresses: frozenset[str]
    alpha: float

    def __post_init__(self) -> None:
        object.__setattr__(self, "addresses", frozenset(self.addresses))
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must lie in [0, 1], got {self.alpha}")


def inflate_categorical(dist: Categorical, alpha: float) -> Categorical:
    powered = [p**alpha for p in dist.probs]
    total = sum(powered)
    return Categorical(tuple(p / total for p in powered))


@dataclass
class Record:
    inflation: InflationConfig | None = None


@dataclass
class ImportancePrior:
    pass


@dataclass
class ImportanceGuided:
    network: object  # anything exposing .session(observation)
    observation: Value | None = None


@dataclass
class Replay:
    base: Trace
    resample_site: tuple[str, int]
    value: Value


ExecutionMode = Record | ImportancePrior | ImportanceGuided | Replay

Conditions = dict[tuple[str, int], Value]

_SIM_TO_ENGINE = (SampleRequest, ObserveRequest, RunResult, ProtocolError)


def execute_trace(
    conn,
    mode: ExecutionMode,
    conditions: Conditions | None = None,
    rng: Rng | None = None,
    observation: Value | None = None,
    model_name: str = "engine",
) -> Trace:
    """Run one full session on ``conn`` and return the recorded trace."""
    conditions = conditions or {}
    rng = rng if rng is not None else Rng(0)
    if observation is None and isinstance(mode, ImportanceGuided):
        observation = mode.observation

    reply = conn.roundtrip(Handshake(model_name))
    if isinstance(reply, ProtocolError):
        raise SimulatorError(reply.code, reply.description)
    if not isinstance(reply, HandshakeResult):
        raise LockstepViolation(f"expected HandshakeResult, got {type(reply).__name__}")

    base_index: dict[tuple[str, int], TraceEntry] = {}
    if isinstance(mode, Replay):
        for e in mode.base.entries:
            if e.kind == Kind.LATENT:
                base_index[(e.address, e.instance)] = e

    session = None
    if isinstance(mode, ImportanceGuided):
        session = mode.network.session(observation)

    entries: list[TraceEntry] = []
    counts: dict[str, int] = {}
    reply = conn.roundtrip(Run(observation))
    while True:
        if isinstance(reply, ProtocolError):
            raise SimulatorError(reply.code, reply.description)
        if isinstance(reply, RunResult):
            return Trace(entries, reply.result)
        if isinstance(reply, SampleRequest):
            entry, answer = _handle_sample(
                reply, mode, conditions, rng, counts, base_index, session, conn
            )
            entries.append(entry)
            reply = conn.roundtrip(answer)
        elif isinstance(reply, ObserveRequest):
            entry, answer = _handle_observe(reply, mode, rng, counts)
            entries.append(entry)
            reply = conn.roundtrip(answer)
        else:
            raise LockstepViolation(
                f"expected a simulator request or RunResult, got {type(reply).__name__}"
            )


def _next_instance(counts: dict[str, int], address: str) -> int:
    instance = counts.get(address, 0) + 1
    counts[address] = instance
    return instance


def _handle_sample(
    req: SampleRequest,
    mode: ExecutionMode,
    conditions: Conditions,
    rng: Rng,
    counts: dict[str, int],
    base_index: dict[tuple[str, int], TraceEntry],
    session,
    conn,
) -> tuple[TraceEntry, SampleResult]:
    dist = req.distribution
    instance = _next_instance(counts, req.address)
    site = (req.address, instance)

    fixed = conditions.get(site)
    if fixed is not None:
        try:
            log_f = dist.log_prob(fixed)
        except TypeMismatch as e:
            log_f = -math.inf
            _abort_session(conn, f"conditioned value at {site}: {e}")
            raise ConditionOutOfSupport(f"conditioned value at {site} has wrong type: {e}") from None
        if log_f == -math.inf:
            _abort_session(conn, f"conditioned value at {site} outside support")
            raise ConditionOutOfSupport(
                f"conditioned value {fixed!r} at {site} is outside the support of {dist!r}"
            )
        entry = TraceEntry(
            address=req.address,
            instance=instance,
            distribution=dist,
            value=fixed,
            log_prob=log_f,
            kind=Kind.OBSERVED,
            controlled=False,
            replaced=req.replace,
        )
        return entry, SampleResult(fixed)

    proposal: Distribution | None = None
    if isinstance(mode, Record):
        inflation = mode.inflation
        if (
            inflation is not None
            and req.address in inflation.addresses
            and isinstance(dist, Categorical)
        ):
            proposal = inflate_categorical(dist, inflation.alpha)
        value = (proposal or dist).sample(rng)
    elif isinstance(mode, ImportanceGuided):
        if req.control and not req.replace and session is not None:
            proposal = session.proposal_for(req.address, instance, dist)
        if proposal is not None:
            _check_support_containment(proposal, dist)
            value = proposal.sample(rng)
            session.advance(req.address, instance, dist, value)
        else:
            value = dist.sample(rng)
    elif isinstance(mode, Replay):
        if site == mode.resample_site:
            value = mode.value
        else:
            base_entry = base_index.get(site)
            if base_entry is not None and dist.log_prob(base_entry.value) > -math.inf:
                value = base_entry.value
            else:
                value = dist.sample(rng)  # novel or out-of-support site: fresh draw
    else:  # ImportancePrior
        value = dist.sample(rng)

    log_f = dist.log_prob(value)
    if proposal is not None:
        log_q = proposal.log_prob(value)
        if log_f == -math.inf and isinstance(mode, ImportanceGuided):
            raise ProposalSupportError(
                f"proposal at {site} produced {value!r} outside the prior support"
            )
    else:
        log_q = log_f
    entry = TraceEntry(
        address=req.address,
        instance=instance,
        distribution=dist,
        value=value,
        log_prob=log_f,
        kind=Kind.LATENT,
        controlled=req.control,
        replaced=req.replace,
        proposal_log_prob=log_q,
    )
    return entry, SampleResult(value)


def _check_support_containment(proposal: Distribution, prior: Distribution) -> None:
    ps, rs = proposal.support(), prior.support()
    ok = True
    if hasattr(rs, "low"):
        ok = hasattr(ps, "low") and ps.low >= rs.low and ps.high <= rs.high
    elif hasattr(rs, "size"):
        ok = hasattr(ps, "size") and ps.size <= rs.size
    if not ok:
        raise ProposalSupportError(
            f"proposal support {ps!r} is not contained in prior support {rs!r}"
        )


def _handle_observe(
    req: ObserveRequest, mode: ExecutionMode, rng: Rng, counts: dict[str, int]
) -> tuple[TraceEntry, ObserveResult]:
    instance = _next_instance(counts, req.address)
    if isinstance(mode, Record):
        value = req.distribution.sample(rng)
        answer = ObserveResult(value)
    else:
        value = req.value
        answer = ObserveResult(None)
    try:
        log_g = req.distribution.log_prob(value)
    except TypeMismatch:
        log_g = -math.inf  # wrong-typed observed datum carries no likelihood
    entry = TraceEntry(
        address=req.address,
        instance=instance,
        distribution=req.distribution,
        value=value,
        log_prob=log_g,
        kind=Kind.OBSERVED,
        controlled=False,
        replaced=False,
    )
    return entry, answer


def _abort_session(conn, reason: str) -> None:
    """Reply with an Error so the simulator can reset, ignoring its answer."""
    try:
        conn.roundtrip(ProtocolError(1, reason))
    except Exception:
        pass


# --- batched execution ------------------------------------------------------


@dataclass
class _WorkerReport:
    completed: int = 0
    error: BaseException | None = None
    traces: list = field(default_factory=list)


def _as_factory(item):
    if isinstance(item, str):
        return lambda: Connection(item)
    if callable(item):
        return item
    raise TypeError(f"pool items must be endpoints or connection factories, got {item!r}")


def run_batch(
    pool,
    n: int,
    mode: ExecutionMode,
    conditions: Conditions | None = None,
    observation: Value | None = None,
    root_seed: int = 0,
    model_name: str = "engine",
) -> list[Trace]:
    """Execute ``n`` traces across one worker per pool entry.

    Trace ``i`` always uses the rng seeded with ``derive_seed(root_seed, i)``,
    so the resulting traces are identical for any worker count; workers take
    contiguous index blocks and results merge in (worker, sequence) order,
    which equals trace-index order.
    """
    if n < 0:
        raise ValueError(f"n must be >= 0, got {n}")
    factories = [_as_factory(p) for p in pool]
    if not factories:
        raise ValueError("pool must contain at least one endpoint or factory")
    if n == 0:
        return []
    workers = min(len(factories), n)
    bounds = [(w * n) // workers for w in range(workers + 1)]
    reports = [_WorkerReport() for _ in range(workers)]

    def work(w: int) -> None:
        report = reports[w]
        conn = None
        try:
            conn = factories[w]()
            for i in range(bounds[w], bounds[w + 1]):
                t = execute_trace(
                    conn,
                    mode,
                    conditions,
                    Rng(derive_seed(root_seed, i)),
                    observation,
                    model_name,
                )
                report.traces.append(t)
                report.completed += 1
        except BaseException as e:  # noqa: BLE001 - reported to the caller
            report.error = e
        finally:
            if conn is not None:
                try:
                    conn.close()
                except Exception:
                    pass

    if workers == 1:
        work(0)
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool_exec:
            list(pool_exec.map(work, range(workers)))

    for w, report in enumerate(reports):
        if report.error is not None:
            raise WorkerError(w, report.completed, report.error) from report.error
    out: list[Trace] = []
    for report in reports:
        out.extend(report.traces)
    return out
