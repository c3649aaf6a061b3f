"""Serves a model function to the inference engine over the wire.

The engine is the connecting side.  One session is: Handshake answered by
HandshakeResult, then Run; from there the model leads -- every
``ctx.sample(...)`` or ``ctx.observe(...)`` call becomes one request to the
engine, answered with the value to use, and the model's return value closes
the session as RunResult.  The engine may abort a session mid-run with an
error message; the model is then unwound and the connection stays usable.

The model is an ordinary callable ``model(ctx)``.  To keep the socket in
strict request-reply alternation while the model blocks inside sample calls,
each run executes on its own worker thread; a small bridge hands requests to
the connection loop and replies back to the model.

A server owns one listening socket and talks to one engine connection at a
time; when the engine disconnects it goes back to listening.  Run several
server processes for parallel inference.
"""
from __future__ import annotations

import os
import queue
import socket
import sys
import threading

from .values import Boolean, Integer, Real, RealVector, Value
from .wire import (
    FrameError,
    FrameReader,
    Handshake,
    HandshakeResult,
    Message,
    ObserveRequest,
    ObserveResult,
    ProtocolError,
    Run,
    RunResult,
    SampleRequest,
    SampleResult,
    bind_endpoint,
    bound_endpoint,
    decode,
    encode,
    parse_endpoint,
    write_frame,
)

# Seconds the model may compute between two sites before the run is abandoned.
MODEL_STEP_TIMEOUT = 300.0

_CONNECTION_TIMEOUT = 30.0
_ADDRESS_MODES = ("explicit", "stack")


class SessionAbort(BaseException):
    """Unwinds a model run the engine has abandoned.

    Derived from BaseException so model code that catches Exception does not
    swallow the unwind.
    """


class AddressError(RuntimeError):
    """A sample/observe call could not be assigned a raw address."""


class _Bridge:
    """Channel between the model thread and the connection loop.

    The model thread pushes events -- ("request", message) for each site, then
    exactly one of ("done", result), ("failed", exception) or ("aborted",
    None) -- and blocks awaiting the engine's reply after each request.
    """

    def __init__(self) -> None:
        self._events: queue.SimpleQueue = queue.SimpleQueue()
        self._replies: queue.SimpleQueue = queue.SimpleQueue()

    def exchange(self, request: Message) -> Message:
        """Model side: send one request, block for the engine's reply."""
        self._events.put(("request", request))
        kind, payload = self._replies.get()
        if kind == "abort":
            raise SessionAbort
        return payload

    def finish(self, kind: str, payload) -> None:
        self._events.put((kind, payload))

    def next_event(self):
        return self._events.get(timeout=MODEL_STEP_TIMEOUT)

    def resume(self, reply: Message) -> None:
        self._replies.put(("reply", reply))

    def abort(self) -> None:
        self._replies.put(("abort", None))


class ModelContext:
    """Per-trace handle passed to the model function.

    ``observation`` is the Run payload (or None).  ``counters`` maps each raw
    address to the number of requests issued at it within this trace; the
    engine numbers site instances identically, so counters reset whenever a
    new trace starts simply because every Run builds a fresh context.

    With ``address_mode="explicit"`` (the default) every call must pass
    ``address=``.  With ``"stack"`` an omitted address is derived from the
    call stack between the model entry point and the call site, so the same
    source location always produces the same raw address and loops show up as
    incrementing instances at one address.
    """

    def __init__(self, bridge: _Bridge, observation: Value | None, address_mode: str) -> None:
        self.observation = observation
        self.counters: dict[str, int] = {}
        self._bridge = bridge
        self._address_mode = address_mode
        self._boundary = None  # model entry frame, set by the runner thread

    def sample(
        self,
        distribution,
        address: str | None = None,
        *,
        control: bool = True,
        replace: bool = False,
        name: str | None = None,
    ) -> Value:
        """Ask the engine for a value at this site and return it."""
        raw = self._site_address(address)
        self.counters[raw] = self.counters.get(raw, 0) + 1
        reply = self._bridge.exchange(SampleRequest(raw, distribution, control, replace, name))
        return reply.value

    def observe(self, distribution, value: Value, address: str | None = None) -> Value:
        """Condition on ``value`` at this site.

        Returns the value the engine chose to put in the trace: its own draw
        when it is generating data, otherwise ``value`` unchanged -- so model
        output assembled from observe returns is correct in every mode.
        """
        raw = self._site_address(address)
        self.counters[raw] = self.counters.get(raw, 0) + 1
        reply = self._bridge.exchange(ObserveRequest(raw, distribution, value))
        return reply.value if reply.value is not None else value

    def _site_address(self, address: str | None) -> str:
        if address is not None:
            if not address:
                raise AddressError("address must be a non-empty string")
            return address
        if self._address_mode == "stack":
            return self._stack_address()
        raise AddressError(
            "no address given; pass address=... or serve with address_mode='stack'"
        )

    def _stack_address(self) -> str:
        # Frames from the model entry point down to the sample/observe call
        # site, outermost first: "file:function:line+file:function:line+...".
        segments = []
        frame = sys._getframe(3)
        while frame is not None and frame is not self._boundary:
            code = frame.f_code
            segments.append(
                f"{os.path.basename(code.co_filename)}:{code.co_name}:{frame.f_lineno}"
            )
            frame = frame.f_back
        return "+".join(reversed(segments))


class _ModelRun:
    """One in-flight model execution on its own worker thread."""

    def __init__(self, model, context: ModelContext, bridge: _Bridge) -> None:
        self.bridge = bridge
        self.pending: Message | None = None  # last request forwarded to the engine
        self.thread = threading.Thread(
            target=self._main, args=(model, context), daemon=True
        )
        self.thread.start()

    def _main(self, model, context: ModelContext) -> None:
        context._boundary = sys._getframe()
        try:
            result = model(context)
        except SessionAbort:
            self.bridge.finish("aborted", None)
            return
        except BaseException as e:  # noqa: BLE001 - reported to the engine
            self.bridge.finish("failed", e)
            return
        if result is not None and not isinstance(result, (Real, Integer, Boolean, RealVector)):
            self.bridge.finish(
                "failed",
                TypeError(f"model returned {type(result).__name__}, expected a value or None"),
            )
            return
        self.bridge.finish("done", result)


class _Session:
    """Protocol state machine for one engine connection.

    Exactly one reply per incoming message; unexpected messages are answered
    with an error rather than dropping the connection, mirroring how the
    engine reports its side of a broken session.
    """

    def __init__(self, server: "ModelServer") -> None:
        self._server = server
        self._greeted = False
        self._run: _ModelRun | None = None

    def handle(self, msg: Message) -> Message:
        if isinstance(msg, Handshake):
            self.abandon_run()
            self._greeted = True
            return HandshakeResult(self._server.model_name)
        if isinstance(msg, Run):
            if not self._greeted:
                return ProtocolError(2, "run before handshake")
            if self._run is not None:
                self.abandon_run()
                return ProtocolError(2, "run while a run is already active")
            bridge = _Bridge()
            context = ModelContext(bridge, msg.observation, self._server.address_mode)
            self._run = _ModelRun(self._server.model, context, bridge)
            return self._advance(None)
        if isinstance(msg, SampleResult):
            if self._run is None or not isinstance(self._run.pending, SampleRequest):
                return ProtocolError(2, "sample result without a pending sample request")
            return self._advance(msg)
        if isinstance(msg, ObserveResult):
            if self._run is None or not isinstance(self._run.pending, ObserveRequest):
                return ProtocolError(2, "observe result without a pending observe request")
            return self._advance(msg)
        if isinstance(msg, ProtocolError):
            # engine abandoned the session mid-run
            self.abandon_run()
            self._greeted = False
            return ProtocolError(msg.code, "session aborted")
        return ProtocolError(2, f"unexpected {type(msg).__name__}")

    def _advance(self, reply: Message | None) -> Message:
        run = self._run
        if reply is not None:
            run.bridge.resume(reply)
        try:
            kind, payload = run.bridge.next_event()
        except queue.Empty:
            self._run = None
            return ProtocolError(3, f"model made no progress for {MODEL_STEP_TIMEOUT:.0f}s")
        if kind == "request":
            run.pending = payload
            return payload
        self._run = None
        if kind == "done":
            return RunResult(payload)
        exc = payload
        return ProtocolError(3, f"model raised {type(exc).__name__}: {exc}")

    def abandon_run(self) -> None:
        run = self._run
        if run is None:
            return
        self._run = None
        run.bridge.abort()
        try:
            run.bridge.next_event()  # the unwind acknowledgement
        except queue.Empty:
            pass
        run.thread.join(timeout=5.0)


class ModelServer:
    """Binds an endpoint and serves one model, one engine at a time.

    ``tap``, if given, is called as ``tap(direction, message)`` with
    direction "in" (engine to model) or "out" for every message crossing the
    wire -- handy for transcript assertions and debugging.
    """

    def __init__(
        self,
        model,
        endpoint: str = "tcp://127.0.0.1:0",
        *,
        model_name: str | None = None,
        address_mode: str = "explicit",
        tap=None,
    ) -> None:
        if address_mode not in _ADDRESS_MODES:
            raise ValueError(f"address_mode must be one of {_ADDRESS_MODES}, got {address_mode!r}")
        self.model = model
        self.model_name = model_name or getattr(model, "__name__", "model")
        self.address_mode = address_mode
        self.tap = tap
        self._listener = bind_endpoint(endpoint)
        self.endpoint = bound_endpoint(endpoint, self._listener)
        self._stop = threading.Event()
        self._thread: threading.Thread | None = None

    def serve_forever(self) -> None:
        """Accept engines one at a time until ``close`` is called."""
        self._listener.settimeout(0.2)
        while not self._stop.is_set():
            try:
                conn, _ = self._listener.accept()
            except TimeoutError:
                continue
            except OSError:
                break
            with conn:
                conn.settimeout(_CONNECTION_TIMEOUT)
                session = _Session(self)
                try:
                    self._pump(conn, session)
                except (OSError, ValueError):
                    pass  # engine vanished or sent junk: drop it, listen again
                finally:
                    session.abandon_run()

    def _pump(self, conn: socket.socket, session: _Session) -> None:
        reader = FrameReader(conn)
        while not self._stop.is_set():
            body = reader.read()
            if body is None:
                return  # clean disconnect at a frame boundary
            msg = decode(body)
            if self.tap is not None:
                self.tap("in", msg)
            reply = session.handle(msg)
            if self.tap is not None:
                self.tap("out", reply)
            write_frame(conn, encode(reply))

    def start(self) -> "ModelServer":
        """Serve on a background thread (for tests and embedding)."""
        self._thread = threading.Thread(target=self.serve_forever, daemon=True)
        self._thread.start()
        return self

    def close(self) -> None:
        self._stop.set()
        try:
            self._listener.close()
        except OSError:
            pass
        if self._thread is not None:
            self._thread.join(timeout=5.0)
            self._thread = None
        parsed = parse_endpoint(self.endpoint)
        if parsed[0] == "ipc":
            try:
                os.unlink(parsed[1])
            except OSError:
                pass

    def __enter__(self) -> "ModelServer":
        return self

    def __exit__(self, *exc) -> None:
        self.close()


def serve(model, endpoint: str, **kwargs) -> None:
    """Bind ``endpoint`` and serve ``model`` until interrupted."""
    server = ModelServer(model, endpoint, **kwargs)
    try:
        server.serve_forever()
    finally:
        server.close()


__all__ = [
    "AddressError",
    "FrameError",
    "MODEL_STEP_TIMEOUT",
    "ModelContext",
    "ModelServer",
    "SessionAbort",
    "serve",
]
