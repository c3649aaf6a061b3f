"""Binary codec and framing for the engine control protocol.

Every message body starts with the magic bytes ``PX``, a version byte (0x01),
and a kind byte, followed by the kind's fields.  All integers are
little-endian; strings are a u32 byte length plus UTF-8; optional fields are
a presence byte (0/1) plus the payload; vectors are a u8 rank (0..3), one u32
per dimension, then the float64 payload in row-major order.

Value tags: Real=1 (f64), Integer=2 (i64), RealVector=3 (vector), Boolean=4.
Distribution tags: Uniform=1 (low, high), Normal=2 (mean, std),
TruncatedNormal=3 (mean, std, low, high), Categorical=4 (probs as a rank-1
vector), Poisson=5 (rate), MixtureTruncatedNormal=6 (weights as a rank-1
vector, u32 component count, then mean/std/low/high per component).

Message kinds: Handshake=0x01 (model name), HandshakeResult=0x02 (model
name), Run=0x03 (optional observation), RunResult=0x04 (optional result),
SampleRequest=0x05 (address, optional name, distribution, control flag,
replace flag), SampleResult=0x06 (value), ObserveRequest=0x07 (address,
distribution, value), ObserveResult=0x08 (optional value), ProtocolError=0xFF
(i64 code, description).

``decode`` is the exact inverse of ``encode``; any rejected byte string
raises WireError naming the first offending offset.  On the socket, a frame
is a u32 length prefix plus one body, capped at 64 MiB in both directions.
"""
from __future__ import annotations

import os
import socket
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

MAGIC = b"PX"
VERSION = 1
MAX_MESSAGE_BYTES = 64 * 1024 * 1024

_U32 = struct.Struct("<I")
_I64 = struct.Struct("<q")
_F64 = struct.Struct("<d")


class WireError(ValueError):
    """Bytes that are not a valid message; ``offset`` is the first bad byte."""

    def __init__(self, offset: int, reason: str) -> None:
        self.offset = offset
        super().__init__(f"{reason} (byte offset {offset})")


class FrameError(ConnectionError):
    """The byte stream violated the length-prefixed framing."""


# --- message kinds ----------------------------------------------------------


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

_KIND_HANDSHAKE = 0x01
_KIND_HANDSHAKE_RESULT = 0x02
_KIND_RUN = 0x03
_KIND_RUN_RESULT = 0x04
_KIND_SAMPLE = 0x05
_KIND_SAMPLE_RESULT = 0x06
_KIND_OBSERVE = 0x07
_KIND_OBSERVE_RESULT = 0x08
_KIND_ERROR = 0xFF

_VALUE_TAGS = {Real: 1, Integer: 2, RealVector: 3, Boolean: 4}
_DIST_TAGS = {
    Uniform: 1,
    Normal: 2,
    TruncatedNormal: 3,
    Categorical: 4,
    Poisson: 5,
    MixtureTruncatedNormal: 6,
}


# --- encoding ---------------------------------------------------------------


def _put_string(buf: bytearray, s: str) -> None:
    raw = s.encode("utf-8")
    buf += _U32.pack(len(raw))
    buf += raw


def _put_vector(buf: bytearray, arr: np.ndarray) -> None:
    buf.append(arr.ndim)
    for dim in arr.shape:
        buf += _U32.pack(dim)
    buf += arr.tobytes(order="C")


def _put_value(buf: bytearray, v: Value) -> None:
    tag = _VALUE_TAGS.get(type(v))
    if tag is None:
        raise TypeError(f"not a value: {type(v).__name__}")
    buf.append(tag)
    if isinstance(v, Real):
        buf += _F64.pack(v.x)
    elif isinstance(v, Integer):
        buf += _I64.pack(v.i)
    elif isinstance(v, RealVector):
        _put_vector(buf, v.array)
    else:
        buf.append(1 if v.b else 0)


def _put_opt_value(buf: bytearray, v: Value | None) -> None:
    if v is None:
        buf.append(0)
    else:
        buf.append(1)
        _put_value(buf, v)


def _put_distribution(buf: bytearray, d: Distribution) -> None:
    tag = _DIST_TAGS.get(type(d))
    if tag is None:
        raise TypeError(f"not a distribution: {type(d).__name__}")
    buf.append(tag)
    if isinstance(d, Uniform):
        buf += _F64.pack(d.low) + _F64.pack(d.high)
    elif isinstance(d, Normal):
        buf += _F64.pack(d.mean) + _F64.pack(d.std)
    elif isinstance(d, TruncatedNormal):
        buf += _F64.pack(d.mean) + _F64.pack(d.std)
        buf += _F64.pack(d.low) + _F64.pack(d.high)
    elif isinstance(d, Categorical):
        _put_vector(buf, np.asarray(d.probs, dtype=np.float64))
    elif isinstance(d, Poisson):
        buf += _F64.pack(d.rate)
    else:
        _put_vector(buf, np.asarray(d.weights, dtype=np.float64))
        buf += _U32.pack(len(d.components))
        for c in d.components:
            buf += _F64.pack(c.mean) + _F64.pack(c.std)
            buf += _F64.pack(c.low) + _F64.pack(c.high)


def encode(msg: Message) -> bytes:
    """Serialize one message to its canonical unframed byte form."""
    buf = bytearray(MAGIC)
    buf.append(VERSION)
    if isinstance(msg, Handshake):
        buf.append(_KIND_HANDSHAKE)
        _put_string(buf, msg.model_name)
    elif isinstance(msg, HandshakeResult):
        buf.append(_KIND_HANDSHAKE_RESULT)
        _put_string(buf, msg.model_name)
    elif isinstance(msg, Run):
        buf.append(_KIND_RUN)
        _put_opt_value(buf, msg.observation)
    elif isinstance(msg, RunResult):
        buf.append(_KIND_RUN_RESULT)
        _put_opt_value(buf, msg.result)
    elif isinstance(msg, SampleRequest):
        buf.append(_KIND_SAMPLE)
        _put_string(buf, msg.address)
        if msg.name is None:
            buf.append(0)
        else:
            buf.append(1)
            _put_string(buf, msg.name)
        _put_distribution(buf, msg.distribution)
        buf.append(1 if msg.control else 0)
        buf.append(1 if msg.replace else 0)
    elif isinstance(msg, SampleResult):
        buf.append(_KIND_SAMPLE_RESULT)
        _put_value(buf, msg.value)
    elif isinstance(msg, ObserveRequest):
        buf.append(_KIND_OBSERVE)
        _put_string(buf, msg.address)
        _put_distribution(buf, msg.distribution)
        _put_value(buf, msg.value)
    elif isinstance(msg, ObserveResult):
        buf.append(_KIND_OBSERVE_RESULT)
        _put_opt_value(buf, msg.value)
    elif isinstance(msg, ProtocolError):
        buf.append(_KIND_ERROR)
        buf += _I64.pack(msg.code)
        _put_string(buf, msg.description)
    else:
        raise TypeError(f"not a protocol message: {type(msg).__name__}")
    if len(buf) > MAX_MESSAGE_BYTES:
        raise ValueError(f"message of {len(buf)} bytes exceeds the {MAX_MESSAGE_BYTES} cap")
    return bytes(buf)


# --- decoding ---------------------------------------------------------------


class _Cursor:
    __slots__ = ("data", "pos")

    def __init__(self, data: bytes) -> None:
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise WireError(
                len(self.data), f"truncated: need {self.pos + n} bytes, have {len(self.data)}"
            )
        chunk = self.data[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def u8(self) -> int:
        return self.take(1)[0]

    def u32(self) -> int:
        return _U32.unpack(self.take(4))[0]

    def i64(self) -> int:
        return _I64.unpack(self.take(8))[0]

    def f64(self) -> float:
        return _F64.unpack(self.take(8))[0]

    def string(self) -> str:
        n = self.u32()
        start = self.pos
        raw = self.take(n)
        try:
            return raw.decode("utf-8")
        except UnicodeDecodeError as e:
            raise WireError(start + e.start, "invalid UTF-8 in string") from None

    def flag(self) -> bool:
        at = self.pos
        b = self.u8()
        if b not in (0, 1):
            raise WireError(at, f"flag byte must be 0 or 1, got {b}")
        return b == 1

    def vector(self) -> np.ndarray:
        at = self.pos
        rank = self.u8()
        if rank > MAX_RANK:
            raise WireError(at, f"vector rank {rank} exceeds {MAX_RANK}")
        shape = tuple(self.u32() for _ in range(rank))
        count = 1
        for dim in shape:
            count *= dim
        if count * 8 > MAX_MESSAGE_BYTES:
            raise WireError(at, f"vector of {count} elements exceeds the message cap")
        raw = self.take(count * 8)
        return np.frombuffer(raw, dtype="<f8").reshape(shape).copy()

    def value(self) -> Value:
        at = self.pos
        tag = self.u8()
        if tag == 1:
            return Real(self.f64())
        if tag == 2:
            return Integer(self.i64())
        if tag == 3:
            return RealVector(self.vector())
        if tag == 4:
            return Boolean(self.flag())
        raise WireError(at, f"unknown value tag 0x{tag:02x}")

    def opt_value(self) -> Value | None:
        return self.value() if self.flag() else None

    def distribution(self) -> Distribution:
        at = self.pos
        tag = self.u8()
        body = self.pos
        try:
            if tag == 1:
                return Uniform(self.f64(), self.f64())
            if tag == 2:
                return Normal(self.f64(), self.f64())
            if tag == 3:
                return TruncatedNormal(self.f64(), self.f64(), self.f64(), self.f64())
            if tag == 4:
                probs = self.vector()
                if probs.ndim != 1:
                    raise WireError(body, "categorical probs must be rank 1")
                return Categorical(tuple(float(p) for p in probs))
            if tag == 5:
                return Poisson(self.f64())
            if tag == 6:
                weights = self.vector()
                if weights.ndim != 1:
                    raise WireError(body, "mixture weights must be rank 1")
                count = self.u32()
                comps = tuple(
                    TruncatedNormal(self.f64(), self.f64(), self.f64(), self.f64())
                    for _ in range(count)
                )
                return MixtureTruncatedNormal(tuple(float(w) for w in weights), comps)
        except WireError:
            raise
        except ValueError as e:
            raise WireError(body, f"invalid distribution parameters: {e}") from None
        raise WireError(at, f"unknown distribution tag 0x{tag:02x}")


def decode(data: bytes) -> Message:
    """Parse one message body, rejecting any deviation from the format."""
    cur = _Cursor(bytes(data))
    for i in range(2):
        if len(cur.data) > i and cur.data[i] != MAGIC[i]:
            raise WireError(i, f"expected magic {MAGIC!r}")
    cur.take(2)
    at = cur.pos
    if cur.u8() != VERSION:
        raise WireError(at, f"unsupported version {cur.data[at]}")
    at = cur.pos
    kind = cur.u8()
    try:
        if kind == _KIND_HANDSHAKE:
            msg: Message = Handshake(cur.string())
        elif kind == _KIND_HANDSHAKE_RESULT:
            msg = HandshakeResult(cur.string())
        elif kind == _KIND_RUN:
            msg = Run(cur.opt_value())
        elif kind == _KIND_RUN_RESULT:
            msg = RunResult(cur.opt_value())
        elif kind == _KIND_SAMPLE:
            address = cur.string()
            name = cur.string() if cur.flag() else None
            dist = cur.distribution()
            control = cur.flag()
            replace = cur.flag()
            msg = SampleRequest(address, dist, control, replace, name)
        elif kind == _KIND_SAMPLE_RESULT:
            msg = SampleResult(cur.value())
        elif kind == _KIND_OBSERVE:
            msg = ObserveRequest(cur.string(), cur.distribution(), cur.value())
        elif kind == _KIND_OBSERVE_RESULT:
            msg = ObserveResult(cur.opt_value())
        elif kind == _KIND_ERROR:
            msg = ProtocolError(cur.i64(), cur.string())
        else:
            raise WireError(at, f"unknown message kind 0x{kind:02x}")
    except WireError:
        raise
    except ValueError as e:
        raise WireError(at, f"invalid message payload: {e}") from None
    if cur.pos != len(cur.data):
        raise WireError(cur.pos, f"{len(cur.data) - cur.pos} unconsumed bytes after message")
    return msg


# --- framing and endpoints --------------------------------------------------


def parse_endpoint(endpoint: str):
    """Split ``tcp://host:port`` or ``ipc://path`` into its parts."""
    if endpoint.startswith("tcp://"):
        rest = endpoint[len("tcp://") :]
        host, sep, port_text = rest.rpartition(":")
        if not sep or not host:
            raise ValueError(f"tcp endpoint needs host:port, got {endpoint!r}")
        try:
            port = int(port_text)
        except ValueError:
            raise ValueError(f"bad port in {endpoint!r}") from None
        if not 0 <= port <= 65535:
            raise ValueError(f"port out of range in {endpoint!r}")
        return ("tcp", host, port)
    if endpoint.startswith("ipc://"):
        path = endpoint[len("ipc://") :]
        if not path:
            raise ValueError(f"ipc endpoint needs a path, got {endpoint!r}")
        return ("ipc", path)
    raise ValueError(f"endpoint must start with tcp:// or ipc://, got {endpoint!r}")


def bind_endpoint(endpoint: str) -> socket.socket:
    """Bind and listen on an endpoint, replacing any stale ipc socket file."""
    parsed = parse_endpoint(endpoint)
    if parsed[0] == "tcp":
        sock = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        sock.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        sock.bind((parsed[1], parsed[2]))
    else:
        if os.path.exists(parsed[1]):
            os.unlink(parsed[1])
        sock = socket.socket(socket.AF_UNIX, socket.SOCK_STREAM)
        sock.bind(parsed[1])
    sock.listen(8)
    return sock


def bound_endpoint(endpoint: str, sock: socket.socket) -> str:
    """The concrete endpoint of a bound socket (resolves tcp port 0)."""
    parsed = parse_endpoint(endpoint)
    if parsed[0] == "tcp":
        return f"tcp://{parsed[1]}:{sock.getsockname()[1]}"
    return endpoint


def _recv_exact(sock: socket.socket, n: int) -> bytes:
    chunks = []
    remaining = n
    while remaining:
        chunk = sock.recv(min(remaining, 1 << 20))
        if not chunk:
            raise FrameError(f"connection closed mid-frame ({n - remaining}/{n} bytes)")
        chunks.append(chunk)
        remaining -= len(chunk)
    return b"".join(chunks)


def read_frame(sock: socket.socket) -> bytes | None:
    """Read one framed body; None on a clean close at a frame boundary."""
    first = sock.recv(1)
    if not first:
        return None
    (length,) = _U32.unpack(first + _recv_exact(sock, 3))
    if length > MAX_MESSAGE_BYTES:
        raise FrameError(f"frame of {length} bytes exceeds the {MAX_MESSAGE_BYTES} cap")
    return _recv_exact(sock, length)


class FrameReader:
    """Buffered frame reader for one socket.

    Keeps whatever the kernel hands over in one recv, so a typical small
    frame costs a single syscall instead of three.  A clean peer close is
    only clean on a frame boundary with nothing buffered.
    """

    __slots__ = ("_sock", "_buf")

    def __init__(self, sock: socket.socket) -> None:
        self._sock = sock
        self._buf = bytearray()

    def read(self) -> bytes | None:
        buf = self._buf
        while len(buf) < 4:
            chunk = self._sock.recv(65536)
            if not chunk:
                if buf:
                    raise FrameError(f"connection closed mid-frame ({len(buf)}/4 header bytes)")
                return None
            buf += chunk
        (length,) = _U32.unpack_from(buf)
        if length > MAX_MESSAGE_BYTES:
            raise FrameError(f"frame of {length} bytes exceeds the {MAX_MESSAGE_BYTES} cap")
        end = 4 + length
        while len(buf) < end:
            chunk = self._sock.recv(65536)
            if not chunk:
                raise FrameError(f"connection closed mid-frame ({len(buf) - 4}/{length} bytes)")
            buf += chunk
        body = bytes(buf[4:end])
        del buf[:end]
        return body


def write_frame(sock: socket.socket, body: bytes) -> None:
    if len(body) > MAX_MESSAGE_BYTES:
        raise FrameError(f"frame of {len(body)} bytes exceeds the {MAX_MESSAGE_BYTES} cap")
    sock.sendall(_U32.pack(len(body)) + body)
