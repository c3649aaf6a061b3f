"""Binary message codec for the simulator control protocol.

Layout (all integers little-endian):

* body      = magic ``0x50 0x58`` ("PX"), version ``0x01``, kind byte, fields
* strings   = u32 byte length, then UTF-8 payload
* booleans  = single byte 0 or 1
* optionals = presence byte 0 or 1, then the payload if present
* vectors   = u8 rank (0..3), rank x u32 dims, float64 payload row-major
* values    = tag byte (Real=1 f64, Integer=2 i64, RealVector=3 vector,
              Boolean=4 u8)
* dists     = tag byte, parameters in field order (Uniform=1 low,high;
              Normal=2 mean,std; TruncatedNormal=3 mean,std,low,high;
              Categorical=4 probs as rank-1 vector; Poisson=5 rate;
              MixtureTruncatedNormal=6 weights as rank-1 vector, u32 count,
              then each component as mean,std,low,high)

Message kinds: Handshake=0x01, HandshakeResult=0x02, Run=0x03, RunResult=0x04,
Sample=0x05, SampleResult=0x06, Observe=0x07, ObserveResult=0x08, Error=0xFF.

``encode`` and ``decode`` are pure and inverse: decode(encode(m)) == m for all
valid messages, and encode(decode(b)) == b bytewise for every accepted byte
string.  Decode failures name the first offending byte offset.  Framing (u32
length prefix, 64 MiB cap) lives in the transport module.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .distributions import (
    Categorical,
    Distribution,
    MixtureTruncatedNormal,
    Normal,
    Poisson,
    TruncatedNormal,
    Uniform,
)
from .values import MAX_RANK, Boolean, Integer, Real, RealVector, Value

MAGIC = b"\x50\x58"
VERSION = 1
MAX_MESSAGE_BYTES = 64 * 1024 * 1024


class CodecError(ValueError):
    """Base for decode failures; ``offset`` is the first offending byte."""

    def __init__(self, offset: int, detail: str) -> None:
        self.offset = offset
        super().__init__(f"{detail} (at byte offset {offset})")


class BadMagic(CodecError):
    pass


class BadVersion(CodecError):
    pass


class UnknownKind(CodecError):
    pass


class Truncated(CodecError):
    pass


class TrailingBytes(CodecError):
    pass


class BadUtf8(CodecError):
    pass


class InvalidPayload(CodecError):
    """Structurally well-formed bytes describing an invalid object."""


# --- message types ----------------------------------------------------------


@dataclass(frozen=True)
class Handshake:
    model_name: str


@dataclass(frozen=True)
class HandshakeResult:
    model_name: str


@dataclass(frozen=True)
class Run:
    observation: Value | None = None


@dataclass(frozen=True)
class RunResult:
    result: Value | None = None


@dataclass(frozen=True)
class SampleRequest:
    address: str
    distribution: Distribution
    control: bool = True
    replace: bool = False
    name: str | None = None

    def __post_init__(self) -> None:
        if not self.address:
            raise ValueError("sample address must be non-empty")


@dataclass(frozen=True)
class SampleResult:
    value: Value


@dataclass(frozen=True)
class ObserveRequest:
    address: str
    distribution: Distribution
    value: Value

    def __post_init__(self) -> None:
        if not self.address:
            raise ValueError("observe address must be non-empty")


@dataclass(frozen=True)
class ObserveResult:
    value: Value | None = None


@dataclass(frozen=True)
class ProtocolError:
    code: int
    description: str


Message = (
    Handshake
    | HandshakeResult
    | Run
    | RunResult
    | SampleRequest
    | SampleResult
    | ObserveRequest
    | ObserveResult
    | ProtocolError
)

KIND_HANDSHAKE = 0x01
KIND_HANDSHAKE_RESULT = 0x02
KIND_RUN = 0x03
KIND_RUN_RESULT = 0x04
KIND_SAMPLE = 0x05
KIND_SAMPLE_RESULT = 0x06
KIND_OBSERVE = 0x07
KIND_OBSERVE_RESULT = 0x08
KIND_ERROR = 0xFF

_KIND_OF = {
    Handshake: KIND_HANDSHAKE,
    HandshakeResult: KIND_HANDSHAKE_RESULT,
    Run: KIND_RUN,
    RunResult: KIND_RUN_RESULT,
    SampleRequest: KIND_SAMPLE,
    SampleResult: KIND_SAMPLE_RESULT,
    ObserveRequest: KIND_OBSERVE,
    ObserveResult: KIND_OBSERVE_RESULT,
    ProtocolError: KIND_ERROR,
}

DIST_TAG_UNIFORM = 0x01
DIST_TAG_NORMAL = 0x02
DIST_TAG_TRUNCATED_NORMAL = 0x03
DIST_TAG_CATEGORICAL = 0x04
DIST_TAG_POISSON = 0x05
DIST_TAG_MIXTURE = 0x06

VALUE_TAG_REAL = 0x01
VALUE_TAG_INTEGER = 0x02
VALUE_TAG_VECTOR = 0x03
VALUE_TAG_BOOLEAN = 0x04

_U32 = struct.Struct("<I")
_I64 = struct.Struct("<q")
_F64 = struct.Struct("<d")


# --- writer -----------------------------------------------------------------


class _Writer:
    __slots__ = ("buf",)

    def __init__(self) -> None:
        self.buf = bytearray()

    def u8(self, x: int) -> None:
        self.buf.append(x)

    def u32(self, x: int) -> None:
        self.buf += _U32.pack(x)

    def i64(self, x: int) -> None:
        self.buf += _I64.pack(x)

    def f64(self, x: float) -> None:
        self.buf += _F64.pack(x)

    def string(self, s: str) -> None:
        raw = s.encode("utf-8")
        self.u32(len(raw))
        self.buf += raw

    def boolean(self, b: bool) -> None:
        self.u8(1 if b else 0)

    def vector(self, arr: np.ndarray) -> None:
        self.u8(arr.ndim)
        for d in arr.shape:
            self.u32(d)
        self.buf += arr.tobytes(order="C")

    def value(self, v: Value) -> None:
        if isinstance(v, Real):
            self.u8(VALUE_TAG_REAL)
            self.f64(v.x)
        elif isinstance(v, Boolean):
            self.u8(VALUE_TAG_BOOLEAN)
            self.boolean(v.b)
        elif isinstance(v, Integer):
            self.u8(VALUE_TAG_INTEGER)
            self.i64(v.i)
        elif isinstance(v, RealVector):
            self.u8(VALUE_TAG_VECTOR)
            self.vector(v.array)
        else:
            raise TypeError(f"not a value: {type(v).__name__}")

    def opt_value(self, v: Value | None) -> None:
        if v is None:
            self.u8(0)
        else:
            self.u8(1)
            self.value(v)

    def opt_string(self, s: str | None) -> None:
        if s is None:
            self.u8(0)
        else:
            self.u8(1)
            self.string(s)

    def distribution(self, d: Distribution) -> None:
        if isinstance(d, Uniform):
            self.u8(DIST_TAG_UNIFORM)
            self.f64(d.low)
            self.f64(d.high)
        elif isinstance(d, Normal):
            self.u8(DIST_TAG_NORMAL)
            self.f64(d.mean)
            self.f64(d.std)
        elif isinstance(d, TruncatedNormal):
            self.u8(DIST_TAG_TRUNCATED_NORMAL)
            self.f64(d.mean)
            self.f64(d.std)
            self.f64(d.low)
            self.f64(d.high)
        elif isinstance(d, Categorical):
            self.u8(DIST_TAG_CATEGORICAL)
            self.vector(np.asarray(d.probs, dtype=np.float64))
        elif isinstance(d, Poisson):
            self.u8(DIST_TAG_POISSON)
            self.f64(d.rate)
        elif isinstance(d, MixtureTruncatedNormal):
            self.u8(DIST_TAG_MIXTURE)
            self.vector(np.asarray(d.weights, dtype=np.float64))
            self.u32(len(d.components))
            for c in d.components:
                self.f64(c.mean)
                self.f64(c.std)
                self.f64(c.low)
                self.f64(c.high)
        else:
            raise TypeError(f"not a distribution: {type(d).__name__}")


# --- reader -----------------------------------------------------------------


class _Reader:
    __slots__ = ("data", "pos")

    def __init__(self, data: bytes) -> None:
        self.data = data
        self.pos = 0

    def _take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise Truncated(len(self.data), f"need {self.pos + n} bytes, have {len(self.data)}")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def u8(self) -> int:
        return self._take(1)[0]

    def u32(self) -> int:
        return _U32.unpack(self._take(4))[0]

    def i64(self) -> int:
        return _I64.unpack(self._take(8))[0]

    def f64(self) -> float:
        return _F64.unpack(self._take(8))[0]

    def string(self) -> str:
        n = self.u32()
        start = self.pos
        raw = self._take(n)
        try:
            return raw.decode("utf-8")
        except UnicodeDecodeError as e:
            raise BadUtf8(start + e.start, "invalid UTF-8 in string") from None

    def boolean(self) -> bool:
        at = self.pos
        b = self.u8()
        if b not in (0, 1):
            raise InvalidPayload(at, f"boolean byte must be 0 or 1, got {b}")
        return b == 1

    def presence(self) -> bool:
        at = self.pos
        b = self.u8()
        if b not in (0, 1):
            raise InvalidPayload(at, f"presence byte must be 0 or 1, got {b}")
        return b == 1

    def vector(self) -> np.ndarray:
        at = self.pos
        rank = self.u8()
        if rank > MAX_RANK:
            raise InvalidPayload(at, f"vector rank {rank} exceeds {MAX_RANK}")
        shape = tuple(self.u32() for _ in range(rank))
        count = 1
        for d in shape:
            count *= d
        if count * 8 > MAX_MESSAGE_BYTES:
            raise InvalidPayload(at, f"vector of {count} elements exceeds the message cap")
        raw = self._take(count * 8)
        return np.frombuffer(raw, dtype="<f8").reshape(shape).copy()

    def value(self) -> Value:
        at = self.pos
        tag = self.u8()
        if tag == VALUE_TAG_REAL:
            return Real(self.f64())
        if tag == VALUE_TAG_INTEGER:
            return Integer(self.i64())
        if tag == VALUE_TAG_VECTOR:
            return RealVector(self.vector())
        if tag == VALUE_TAG_BOOLEAN:
            return Boolean(self.boolean())
        raise UnknownKind(at, f"unknown value tag 0x{tag:02x}")

    def opt_value(self) -> Value | None:
        return self.value() if self.presence() else None

    def opt_string(self) -> str | None:
        return self.string() if self.presence() else None

    def distribution(self) -> Distribution:
        at = self.pos
        tag = self.u8()
        body_at = self.pos
        try:
            if tag == DIST_TAG_UNIFORM:
                return Uniform(self.f64(), self.f64())
            if tag == DIST_TAG_NORMAL:
                return Normal(self.f64(), self.f64())
            if tag == DIST_TAG_TRUNCATED_NORMAL:
                return TruncatedNormal(self.f64(), self.f64(), self.f64(), self.f64())
            if tag == DIST_TAG_CATEGORICAL:
                probs = self.vector()
                if probs.ndim != 1:
                    raise InvalidPayload(body_at, "categorical probs must be rank 1")
                return Categorical(tuple(float(p) for p in probs))
            if tag == DIST_TAG_POISSON:
                return Poisson(self.f64())
            if tag == DIST_TAG_MIXTURE:
                weights = self.vector()
                if weights.ndim != 1:
                    raise InvalidPayload(body_at, "mixture weights must be rank 1")
                count = self.u32()
                comps = tuple(
                    TruncatedNormal(self.f64(), self.f64(), self.f64(), self.f64())
                    for _ in range(count)
                )
                return MixtureTruncatedNormal(tuple(float(w) for w in weights), comps)
        except ValueError as e:
            if isinstance(e, CodecError):
                raise
            raise InvalidPayload(body_at, f"invalid distribution parameters: {e}") from None
        raise UnknownKind(at, f"unknown distribution tag 0x{tag:02x}")


# --- encode / decode --------------------------------------------------------


def encode(msg: Message) -> bytes:
    """Serialize one message to its canonical byte form (unframed)."""
    w = _Writer()
    w.buf += MAGIC
    w.u8(VERSION)
    kind = _KIND_OF.get(type(msg))
    if kind is None:
        raise TypeError(f"not a protocol message: {type(msg).__name__}")
    w.u8(kind)
    if isinstance(msg, (Handshake, HandshakeResult)):
        w.string(msg.model_name)
    elif isinstance(msg, Run):
        w.opt_value(msg.observation)
    elif isinstance(msg, RunResult):
        w.opt_value(msg.result)
    elif isinstance(msg, SampleRequest):
        w.string(msg.address)
        w.opt_string(msg.name)
        w.distribution(msg.distribution)
        w.boolean(msg.control)
        w.boolean(msg.replace)
    elif isinstance(msg, SampleResult):
        w.value(msg.value)
    elif isinstance(msg, ObserveRequest):
        w.string(msg.address)
        w.distribution(msg.distribution)
        w.value(msg.value)
    elif isinstance(msg, ObserveResult):
        w.opt_value(msg.value)
    elif isinstance(msg, ProtocolError):
        w.i64(msg.code)
        w.string(msg.description)
    out = bytes(w.buf)
    if len(out) > MAX_MESSAGE_BYTES:
        raise ValueError(f"message of {len(out)} bytes exceeds the {MAX_MESSAGE_BYTES} cap")
    return out


def decode(data: bytes) -> Message:
    """Parse one message body; raises a CodecError naming the bad offset."""
    r = _Reader(bytes(data))
    if len(r.data) >= 1 and r.data[0] != MAGIC[0]:
        raise BadMagic(0, f"expected magic {MAGIC!r}")
    if len(r.data) >= 2 and r.data[1] != MAGIC[1]:
        raise BadMagic(1, f"expected magic {MAGIC!r}")
    r._take(2)
    version_at = r.pos
    version = r.u8()
    if version != VERSION:
        raise BadVersion(version_at, f"unsupported version {version}")
    kind_at = r.pos
    kind = r.u8()
    try:
        if kind == KIND_HANDSHAKE:
            msg: Message = Handshake(r.string())
        elif kind == KIND_HANDSHAKE_RESULT:
            msg = HandshakeResult(r.string())
        elif kind == KIND_RUN:
            msg = Run(r.opt_value())
        elif kind == KIND_RUN_RESULT:
            msg = RunResult(r.opt_value())
        elif kind == KIND_SAMPLE:
            address = r.string()
            name = r.opt_string()
            dist = r.distribution()
            control = r.boolean()
            replace = r.boolean()
            msg = SampleRequest(address, dist, control, replace, name)
        elif kind == KIND_SAMPLE_RESULT:
            msg = SampleResult(r.value())
        elif kind == KIND_OBSERVE:
            msg = ObserveRequest(r.string(), r.distribution(), r.value())
        elif kind == KIND_OBSERVE_RESULT:
            msg = ObserveResult(r.opt_value())
        elif kind == KIND_ERROR:
            msg = ProtocolError(r.i64(), r.string())
        else:
            raise UnknownKind(kind_at, f"unknown message kind 0x{kind:02x}")
    except ValueError as e:
        if isinstance(e, CodecError):
            raise
        raise InvalidPayload(kind_at, f"invalid message payload: {e}") from None
    if r.pos != len(r.data):
        raise TrailingBytes(r.pos, f"{len(r.data) - r.pos} unconsumed bytes after message")
    return msg
