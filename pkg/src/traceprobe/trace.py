"""Execution traces: entries, address dictionary, census, persistence.

A trace is the ordered record of one simulator execution.  Each entry carries
the raw address string sent by the simulator, the per-trace instance count for
that raw address (1 + number of earlier entries with the same raw address), the
distribution presented there, the realized value, its log density under that
distribution (``log_prob``), and the log density under whatever proposal
actually produced the value (``proposal_log_prob``; identical to ``log_prob``
wherever the prior itself was used).

``log_joint`` is the sum of log_prob over all entries -- prior factors for
Latent entries plus likelihood factors for Observed ones -- cached at
construction and recomputable to within 1e-12.

The trace file format ("PXT"):

* magic ``0x50 0x58 0x54``, version ``0x01``
* u32 dictionary size, then that many strings (raw addresses; the id of the
  k-th entry is ``A{k+1}``, in first-seen order)
* u32 trace count, then per trace:
  u32 entry count; per entry: u32 address index, u32 instance, distribution,
  value, f64 log_prob, f64 proposal_log_prob, u8 kind (0 Latent, 1 Observed),
  u8 controlled, u8 replaced; then an optional result value (presence byte +
  value) and the cached f64 log_joint.

Scalar encodings (strings, values, distributions) are exactly the protocol
module's.  A posterior file ("PXP") is identical except each trace record is
preceded by an f64 log weight.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

from .distributions import Distribution
from .protocol import CodecError, _Reader, _Writer
from .values import Value

TRACE_MAGIC = b"\x50\x58\x54"
POSTERIOR_MAGIC = b"\x50\x58\x50"
FILE_VERSION = 1
LOG_JOINT_TOL = 1e-12


class TraceIoError(OSError):
    """Underlying file I/O failed."""


class CorruptTraceFile(ValueError):
    def __init__(self, offset: int, detail: str) -> None:
        self.offset = offset
        super().__init__(f"{detail} (at byte offset {offset})")


class Kind(enum.IntEnum):
    LATENT = 0
    OBSERVED = 1


@dataclass(frozen=True)
class Address:
    """A raw simulator address paired with its stable short id (A1, A2, ...)."""

    raw: str
    id: str


class AddressDictionary:
    """First-seen registry of raw addresses; ids are ``A1``, ``A2``, ..."""

    def __init__(self) -> None:
        self._index: dict[str, int] = {}
        self._raws: list[str] = []

    def intern(self, raw: str) -> int:
        idx = self._index.get(raw)
        if idx is None:
            idx = len(self._raws)
            self._index[raw] = idx
            self._raws.append(raw)
        return idx

    def id_for(self, raw: str) -> str:
        return f"A{self.intern(raw) + 1}"

    def address(self, raw: str) -> Address:
        return Address(raw, self.id_for(raw))

    @property
    def raws(self) -> tuple[str, ...]:
        return tuple(self._raws)

    def __len__(self) -> int:
        return len(self._raws)


@dataclass
class TraceEntry:
    address: str
    instance: int
    distribution: Distribution
    value: Value
    log_prob: float
    kind: Kind
    controlled: bool = False
    replaced: bool = False
    proposal_log_prob: float = field(default=math.nan)

    def __post_init__(self) -> None:
        if self.instance < 1:
            raise ValueError(f"instance must be >= 1, got {self.instance}")
        if math.isnan(self.proposal_log_prob):
            self.proposal_log_prob = self.log_prob

    @property
    def is_latent(self) -> bool:
        return self.kind == Kind.LATENT


@dataclass
class Trace:
    entries: list[TraceEntry]
    result: Value | None = None
    log_joint: float = field(default=math.nan)

    def __post_init__(self) -> None:
        if math.isnan(self.log_joint):
            self.log_joint = trace_log_joint(self)

    def latent_entries(self) -> list[TraceEntry]:
        return [e for e in self.entries if e.kind == Kind.LATENT]

    def find(self, address: str, instance: int = 1) -> TraceEntry | None:
        for e in self.entries:
            if e.address == address and e.instance == instance:
                return e
        return None


TraceType = tuple[tuple[str, int], ...]


def trace_log_joint(t: Trace) -> float:
    """Recompute the joint log density from the entries."""
    return math.fsum(e.log_prob for e in t.entries) if t.entries else 0.0


def trace_type(t: Trace, dictionary: AddressDictionary) -> TraceType:
    """The (address id, instance) sequence over Latent entries."""
    return tuple(
        (dictionary.id_for(e.address), e.instance) for e in t.entries if e.kind == Kind.LATENT
    )


def trace_type_census(
    traces, dictionary: AddressDictionary | None = None
) -> tuple[dict[TraceType, int], AddressDictionary]:
    """Count occurrences of each trace type across ``traces``.

    Returns (counts in first-seen key order is not guaranteed; it is a plain
    dict keyed by type) plus the dictionary used for ids.
    """
    if dictionary is None:
        dictionary = AddressDictionary()
    counts: dict[TraceType, int] = {}
    for t in traces:
        tt = trace_type(t, dictionary)
        counts[tt] = counts.get(tt, 0) + 1
    return counts, dictionary


# --- persistence ------------------------------------------------------------


def _write_entry(w: _Writer, e: TraceEntry, index_of: dict[str, int]) -> None:
    w.u32(index_of[e.address])
    w.u32(e.instance)
    w.distribution(e.distribution)
    w.value(e.value)
    w.f64(e.log_prob)
    w.f64(e.proposal_log_prob)
    w.u8(int(e.kind))
    w.boolean(e.controlled)
    w.boolean(e.replaced)


def _write_trace_record(w: _Writer, t: Trace, index_of: dict[str, int]) -> None:
    w.u32(len(t.entries))
    for e in t.entries:
        _write_entry(w, e, index_of)
    w.opt_value(t.result)
    w.f64(t.log_joint)


def _read_entry(r: _Reader, raws: list[str]) -> TraceEntry:
    at = r.pos
    idx = r.u32()
    if idx >= len(raws):
        raise CorruptTraceFile(at, f"address index {idx} out of range")
    instance = r.u32()
    dist = r.distribution()
    value = r.value()
    log_prob = r.f64()
    proposal_log_prob = r.f64()
    kind_at = r.pos
    kind_byte = r.u8()
    if kind_byte not in (0, 1):
        raise CorruptTraceFile(kind_at, f"entry kind byte must be 0 or 1, got {kind_byte}")
    controlled = r.boolean()
    replaced = r.boolean()
    try:
        return TraceEntry(
            address=raws[idx],
            instance=instance,
            distribution=dist,
            value=value,
            log_prob=log_prob,
            kind=Kind(kind_byte),
            controlled=controlled,
            replaced=replaced,
            proposal_log_prob=proposal_log_prob,
        )
    except ValueError as e:
        raise CorruptTraceFile(at, f"invalid entry: {e}") from None


def _read_trace_record(r: _Reader, raws: list[str]) -> Trace:
    n = r.u32()
    entries = [_read_entry(r, raws) for _ in range(n)]
    result = r.opt_value()
    cached_at = r.pos
    cached = r.f64()
    t = Trace(entries, result, log_joint=cached)
    recomputed = trace_log_joint(t)
    same = (cached == recomputed) or abs(cached - recomputed) <= LOG_JOINT_TOL
    if not same:
        raise CorruptTraceFile(
            cached_at, f"cached log joint {cached!r} does not match recomputed {recomputed!r}"
        )
    return t


def _build_dictionary(traces) -> AddressDictionary:
    d = AddressDictionary()
    for t in traces:
        for e in t.entries:
            d.intern(e.address)
    return d


def _write_header(w: _Writer, magic: bytes, dictionary: AddressDictionary) -> None:
    w.buf += magic
    w.u8(FILE_VERSION)
    w.u32(len(dictionary))
    for raw in dictionary.raws:
        w.string(raw)


def _read_header(r: _Reader, magic: bytes) -> list[str]:
    for i, b in enumerate(magic):
        if r.pos >= len(r.data) or r.data[r.pos] != b:
            raise CorruptTraceFile(i, f"bad file magic, expected {magic!r}")
        r.pos += 1
    version_at = r.pos
    version = r.u8()
    if version != FILE_VERSION:
        raise CorruptTraceFile(version_at, f"unsupported file version {version}")
    count = r.u32()
    return [r.string() for _ in range(count)]


def save_traces(path, traces, dictionary: AddressDictionary | None = None) -> None:
    """Write traces (and their address dictionary) to ``path``."""
    traces = list(traces)
    if dictionary is None:
        dictionary = _build_dictionary(traces)
    else:
        for t in traces:
            for e in t.entries:
                dictionary.intern(e.address)
    index_of = {raw: i for i, raw in enumerate(dictionary.raws)}
    w = _Writer()
    _write_header(w, TRACE_MAGIC, dictionary)
    w.u32(len(traces))
    for t in traces:
        _write_trace_record(w, t, index_of)
    try:
        with open(path, "wb") as fh:
            fh.write(bytes(w.buf))
    except OSError as e:
        raise TraceIoError(f"cannot write {path}: {e}") from e


def load_traces(path) -> tuple[list[Trace], AddressDictionary]:
    """Read traces back; verifies each cached log joint against recomputation."""
    try:
        with open(path, "rb") as fh:
            data = fh.read()
    except OSError as e:
        raise TraceIoError(f"cannot read {path}: {e}") from e
    r = _Reader(data)
    try:
        raws = _read_header(r, TRACE_MAGIC)
        count = r.u32()
        traces = [_read_trace_record(r, raws) for _ in range(count)]
        if r.pos != len(data):
            raise CorruptTraceFile(r.pos, f"{len(data) - r.pos} trailing bytes")
    except CodecError as e:
        raise CorruptTraceFile(e.offset, f"unreadable trace file: {e}") from None
    dictionary = AddressDictionary()
    for raw in raws:
        dictionary.intern(raw)
    return traces, dictionary


def save_posterior(path, log_weights, traces, dictionary: AddressDictionary | None = None) -> None:
    """Write weighted traces: same layout as a trace file with per-trace f64
    log weights ahead of each record."""
    traces = list(traces)
    log_weights = [float(lw) for lw in log_weights]
    if len(log_weights) != len(traces):
        raise ValueError(f"{len(log_weights)} weights for {len(traces)} traces")
    if dictionary is None:
        dictionary = _build_dictionary(traces)
    index_of = {raw: i for i, raw in enumerate(dictionary.raws)}
    w = _Writer()
    _write_header(w, POSTERIOR_MAGIC, dictionary)
    w.u32(len(traces))
    for lw, t in zip(log_weights, traces):
        w.f64(lw)
        _write_trace_record(w, t, index_of)
    try:
        with open(path, "wb") as fh:
            fh.write(bytes(w.buf))
    except OSError as e:
        raise TraceIoError(f"cannot write {path}: {e}") from e


def load_posterior(path) -> tuple[list[float], list[Trace], AddressDictionary]:
    try:
        with open(path, "rb") as fh:
            data = fh.read()
    except OSError as e:
        raise TraceIoError(f"cannot read {path}: {e}") from e
    r = _Reader(data)
    try:
        raws = _read_header(r, POSTERIOR_MAGIC)
        count = r.u32()
        log_weights = []
        traces = []
        for _ in range(count):
            log_weights.append(r.f64())
            traces.append(_read_trace_record(r, raws))
        if r.pos != len(data):
            raise CorruptTraceFile(r.pos, f"{len(data) - r.pos} trailing bytes")
    except CodecError as e:
        raise CorruptTraceFile(e.offset, f"unreadable posterior file: {e}") from None
    dictionary = AddressDictionary()
    for raw in raws:
        dictionary.intern(raw)
    return log_weights, traces, dictionary
