"""Socket transport with length-prefixed framing and strict alternation.

A frame is a u32 little-endian body length followed by the body; bodies above
64 MiB are rejected on both send and receive.  Endpoints are ``tcp://host:port``
or ``ipc://path`` (AF_UNIX); anything else raises EndpointError.

The engine side holds a Connection and calls ``roundtrip``: one framed request
out, exactly one framed reply back.  If the peer volunteered extra bytes since
the last reply, the next roundtrip fails with FramingError before sending --
this is how a peer that answers a single request with two messages is caught.

Errors are mapped to idiomatic built-ins where one exists: a missing peer
raises ConnectionRefusedError, an overdue reply raises TimeoutError (default
deadline 30 s).
"""
from __future__ import annotations

import os
import select
import socket
import struct

from . import protocol

DEFAULT_TIMEOUT_SECS = 30.0
_LEN = struct.Struct("<I")


class TransportError(Exception):
    pass


class EndpointError(TransportError):
    """Endpoint string does not match tcp://host:port or ipc://path."""


class FramingError(TransportError):
    """Byte stream violated framing or the request-reply alternation."""


def parse_endpoint(endpoint: str):
    """Split an endpoint string into ("tcp", host, port) or ("ipc", path)."""
    if endpoint.startswith("tcp://"):
        rest = endpoint[len("tcp://") :]
        host, sep, port_text = rest.rpartition(":")
        if not sep or not host:
            raise EndpointError(f"tcp endpoint needs host:port, got {endpoint!r}")
        try:
            port = int(port_text)
        except ValueError:
            raise EndpointError(f"bad port in {endpoint!r}") from None
        if not 0 <= port <= 65535:
            raise EndpointError(f"port out of range in {endpoint!r}")
        return ("tcp", host, port)
    if endpoint.startswith("ipc://"):
        path = endpoint[len("ipc://") :]
        if not path:
            raise EndpointError(f"ipc endpoint needs a path, got {endpoint!r}")
        return ("ipc", path)
    raise EndpointError(f"endpoint must start with tcp:// or ipc://, got {endpoint!r}")


def _connect(endpoint: str, timeout: float) -> socket.socket:
    parsed = parse_endpoint(endpoint)
    try:
        if parsed[0] == "tcp":
            sock = socket.create_connection((parsed[1], parsed[2]), timeout=timeout)
            sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        else:
            sock = socket.socket(socket.AF_UNIX, socket.SOCK_STREAM)
            sock.settimeout(timeout)
            sock.connect(parsed[1])
    except (ConnectionRefusedError, FileNotFoundError) as e:
        raise ConnectionRefusedError(f"no peer bound at {endpoint}") from e
    except socket.timeout as e:
        raise TimeoutError(f"connect to {endpoint} timed out") from e
    sock.settimeout(timeout)
    return sock


def _recv_exact(sock: socket.socket, n: int) -> bytes:
    chunks = []
    remaining = n
    while remaining:
        try:
            chunk = sock.recv(min(remaining, 1 << 20))
        except socket.timeout as e:
            raise TimeoutError(f"peer reply overdue ({n - remaining}/{n} bytes)") from e
        if not chunk:
            raise FramingError(f"connection closed mid-frame ({n - remaining}/{n} bytes)")
        chunks.append(chunk)
        remaining -= len(chunk)
    return b"".join(chunks)


def read_frame(sock: socket.socket) -> bytes | None:
    """Read one framed body; None on clean EOF at a frame boundary."""
    try:
        first = sock.recv(1)
    except socket.timeout as e:
        raise TimeoutError("timed out waiting for a frame") from e
    if not first:
        return None
    header = first + _recv_exact(sock, 3)
    (length,) = _LEN.unpack(header)
    if length > protocol.MAX_MESSAGE_BYTES:
        raise FramingError(f"frame of {length} bytes exceeds the {protocol.MAX_MESSAGE_BYTES} cap")
    return _recv_exact(sock, length)


def write_frame(sock: socket.socket, body: bytes) -> None:
    if len(body) > protocol.MAX_MESSAGE_BYTES:
        raise FramingError(f"frame of {len(body)} bytes exceeds the {protocol.MAX_MESSAGE_BYTES} cap")
    sock.sendall(_LEN.pack(len(body)) + body)


class Connection:
    """Client side of one simulator link; request-reply lock-step."""

    def __init__(self, endpoint: str, timeout: float = DEFAULT_TIMEOUT_SECS) -> None:
        self.endpoint = endpoint
        self.timeout = timeout
        self._sock = _connect(endpoint, timeout)

    def _assert_quiet(self) -> None:
        # Any readable byte here is a reply we never asked for.
        ready, _, _ = select.select([self._sock], [], [], 0)
        if ready:
            probe = self._sock.recv(1, socket.MSG_PEEK)
            if probe:
                raise FramingError("peer sent data outside the request-reply alternation")
            raise FramingError("peer closed the connection")

    def roundtrip(self, msg: protocol.Message) -> protocol.Message:
        """Send one request, receive exactly one reply."""
        self._assert_quiet()
        write_frame(self._sock, protocol.encode(msg))
        body = read_frame(self._sock)
        if body is None:
            raise FramingError("peer closed the connection instead of replying")
        return protocol.decode(body)

    def close(self) -> None:
        try:
            self._sock.close()
        except OSError:
            pass

    def __enter__(self) -> "Connection":
        return self

    def __exit__(self, *exc) -> None:
        self.close()


def transport_roundtrip(
    endpoint: str, msg: protocol.Message, timeout: float = DEFAULT_TIMEOUT_SECS
) -> protocol.Message:
    """One-shot connect, request, reply, close."""
    conn = Connection(endpoint, timeout)
    try:
        return conn.roundtrip(msg)
    finally:
        conn.close()


def bind_endpoint(endpoint: str) -> socket.socket:
    """Server-side helper: bind + listen on an endpoint, returning the socket."""
    parsed = parse_endpoint(endpoint)
    if parsed[0] == "tcp":
        sock = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        sock.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        sock.bind((parsed[1], parsed[2]))
    else:
        path = parsed[1]
        if os.path.exists(path):
            os.unlink(path)
        sock = socket.socket(socket.AF_UNIX, socket.SOCK_STREAM)
        sock.bind(path)
    sock.listen(8)
    return sock


def bound_endpoint(endpoint: str, sock: socket.socket) -> str:
    """Endpoint string for a bound socket (resolves tcp port 0)."""
    parsed = parse_endpoint(endpoint)
    if parsed[0] == "tcp":
        host, port = sock.getsockname()[:2]
        return f"tcp://{parsed[1]}:{port}"
    return endpoint
