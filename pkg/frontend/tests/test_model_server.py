"""Behavior of the model-serving front end under a live engine.

Every test drives a served Python model through the real engine client, so
these are end-to-end checks of the session grammar: addressing, instance
counters, conditioning, error unwinding, and connection lifecycle.
"""

import socket

import pytest

from pxclient import ModelServer
from pxclient.distributions import Normal, Uniform
from pxclient.values import Real
from pxclient import wire
from pxclient.wire import (
    FrameReader,
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

from traceprobe.values import Real as EngineReal
from traceprobe.controller import (
    ConditionOutOfSupport,
    Connection,
    Record,
    SimulatorError,
    execute_trace,
)
from traceprobe.importance import infer_is
from traceprobe.rng import Rng


def _endpoint(tmp_path) -> str:
    return f"ipc://{tmp_path}/model.sock"


def _one_site(ctx):
    return ctx.sample(Uniform(0.0, 1.0), address="u")


# --- recording and replay ---------------------------------------------------


def test_record_single_uniform_site(tmp_path):
    with ModelServer(_one_site, _endpoint(tmp_path)).start() as server:
        with Connection(server.endpoint) as conn:
            trace = execute_trace(conn, Record(), rng=Rng(1))
    assert len(trace.entries) == 1
    entry = trace.entries[0]
    assert entry.address == "u"
    assert entry.instance == 1
    assert 0.0 <= entry.value.x <= 1.0
    assert trace.result == entry.value


def test_conditioned_value_reaches_the_model(tmp_path):
    with ModelServer(_one_site, _endpoint(tmp_path)).start() as server:
        with Connection(server.endpoint) as conn:
            trace = execute_trace(
                conn, Record(), conditions={("u", 1): EngineReal(0.25)}, rng=Rng(1)
            )
    assert trace.result == EngineReal(0.25)
    assert trace.entries[0].value == EngineReal(0.25)


def test_observe_returns_engine_draw_when_recording(tmp_path):
    def model(ctx):
        return ctx.observe(Normal(0.0, 1.0), Real(0.5), address="y")

    with ModelServer(model, _endpoint(tmp_path)).start() as server:
        with Connection(server.endpoint) as conn:
            trace = execute_trace(conn, Record(), rng=Rng(7))
        # recording synthesizes the observation, and the model sees that draw
        assert trace.result == trace.entries[0].value
        assert trace.result != EngineReal(0.5)

        # importance sampling keeps the model's own observed value
        posterior = infer_is([server.endpoint], 1, root_seed=7)
    assert posterior.traces[0].result == EngineReal(0.5)


def test_observation_is_delivered_to_the_model(tmp_path):
    def model(ctx):
        return ctx.observation

    with ModelServer(model, _endpoint(tmp_path)).start() as server:
        with Connection(server.endpoint) as conn:
            trace = execute_trace(conn, Record(), rng=Rng(0), observation=EngineReal(7.5))
    assert trace.result == EngineReal(7.5)


def test_repeated_sessions_on_one_connection(tmp_path):
    with ModelServer(_one_site, _endpoint(tmp_path)).start() as server:
        with Connection(server.endpoint) as conn:
            values = [
                execute_trace(conn, Record(), rng=Rng(seed)).result.x
                for seed in range(5)
            ]
    assert len(set(values)) == 5


# --- addressing -------------------------------------------------------------


def test_same_label_counts_instances(tmp_path):
    def model(ctx):
        total = 0.0
        for _ in range(3):
            total += ctx.sample(Uniform(0.0, 1.0), address="x").x
        return Real(total)

    with ModelServer(model, _endpoint(tmp_path)).start() as server:
        with Connection(server.endpoint) as conn:
            trace = execute_trace(conn, Record(), rng=Rng(3))
    assert [(e.address, e.instance) for e in trace.entries] == [
        ("x", 1),
        ("x", 2),
        ("x", 3),
    ]


def test_missing_address_in_explicit_mode_is_reported(tmp_path):
    def model(ctx):
        return ctx.sample(Uniform(0.0, 1.0))

    with ModelServer(model, _endpoint(tmp_path)).start() as server:
        with Connection(server.endpoint) as conn:
            with pytest.raises(SimulatorError):
                execute_trace(conn, Record(), rng=Rng(0))
        # the server recovered and accepts a fresh engine
        with Connection(server.endpoint) as conn:
            with pytest.raises(SimulatorError):
                execute_trace(conn, Record(), rng=Rng(0))


def test_stack_derived_addresses(tmp_path):
    def helper(ctx):
        return ctx.sample(Uniform(0.0, 1.0)).x

    def model(ctx):
        total = helper(ctx)
        total += helper(ctx)
        for _ in range(2):
            total += ctx.sample(Uniform(0.0, 1.0)).x
        return Real(total)

    with ModelServer(model, _endpoint(tmp_path), address_mode="stack").start() as server:
        with Connection(server.endpoint) as conn:
            trace = execute_trace(conn, Record(), rng=Rng(9))

    addressed = [(e.address, e.instance) for e in trace.entries]
    assert len(addressed) == 4
    for address, _ in addressed:
        for segment in address.split("+"):
            name, func, line = segment.rsplit(":", 2)
            assert name == "test_model_server.py"
            assert line.isdigit()

    # the two helper calls come from different call lines: distinct addresses
    first, second = addressed[0], addressed[1]
    assert first[0] != second[0]
    assert first[1] == 1 and second[1] == 1
    assert all("+" in a for a, _ in addressed[:2]), "nested calls add a segment"

    # the loop body reuses one source location: one address, counted instances
    assert addressed[2][0] == addressed[3][0]
    assert (addressed[2][1], addressed[3][1]) == (1, 2)


def test_address_error_names_the_site(tmp_path):
    def model(ctx):
        return ctx.sample(Uniform(0.0, 1.0))

    with ModelServer(model, _endpoint(tmp_path)).start() as server:
        with Connection(server.endpoint) as conn:
            with pytest.raises(SimulatorError) as exc_info:
                execute_trace(conn, Record(), rng=Rng(0))
    assert "address" in str(exc_info.value).lower()


# --- failure handling -------------------------------------------------------


def test_model_exception_becomes_simulator_error(tmp_path):
    runs = [0]

    def model(ctx):
        runs[0] += 1
        value = ctx.sample(Uniform(0.0, 1.0), address="u")
        if runs[0] == 1:
            raise RuntimeError("synthetic failure")
        return value

    with ModelServer(model, _endpoint(tmp_path)).start() as server:
        with Connection(server.endpoint) as conn:
            with pytest.raises(SimulatorError) as exc_info:
                execute_trace(conn, Record(), rng=Rng(0))
            assert "RuntimeError" in str(exc_info.value)
            # the failure poisoned neither the server nor the connection
            assert len(execute_trace(conn, Record(), rng=Rng(0)).entries) == 1


def test_invalid_model_result_is_reported(tmp_path):
    def model(ctx):
        ctx.sample(Uniform(0.0, 1.0), address="u")
        return 42  # not a protocol value

    with ModelServer(model, _endpoint(tmp_path)).start() as server:
        with Connection(server.endpoint) as conn:
            with pytest.raises(SimulatorError):
                execute_trace(conn, Record(), rng=Rng(0))


def test_engine_abort_mid_session_is_survivable(tmp_path):
    with ModelServer(_one_site, _endpoint(tmp_path)).start() as server:
        with Connection(server.endpoint) as conn:
            with pytest.raises(ConditionOutOfSupport):
                execute_trace(
                    conn, Record(), conditions={("u", 1): EngineReal(5.0)}, rng=Rng(0)
                )
            # same connection, next session: back to normal
            trace = execute_trace(conn, Record(), rng=Rng(4))
    assert trace.entries[0].address == "u"


def test_model_swallowing_exceptions_cannot_block_abort(tmp_path):
    def model(ctx):
        try:
            return ctx.sample(Uniform(0.0, 1.0), address="u")
        except Exception:  # noqa: BLE001 - the unwind must pierce this
            return Real(0.0)

    with ModelServer(model, _endpoint(tmp_path)).start() as server:
        with Connection(server.endpoint) as conn:
            with pytest.raises(ConditionOutOfSupport):
                execute_trace(
                    conn, Record(), conditions={("u", 1): EngineReal(5.0)}, rng=Rng(0)
                )
            assert execute_trace(conn, Record(), rng=Rng(2)).result is not None


# --- connection lifecycle ---------------------------------------------------


def test_tcp_port_zero_is_resolved(tmp_path):
    with ModelServer(_one_site, "tcp://127.0.0.1:0").start() as server:
        assert not server.endpoint.endswith(":0")
        with Connection(server.endpoint) as conn:
            assert execute_trace(conn, Record(), rng=Rng(0)).result is not None


def test_one_engine_at_a_time(tmp_path):
    with ModelServer(_one_site, _endpoint(tmp_path)).start() as server:
        with Connection(server.endpoint) as conn:
            assert execute_trace(conn, Record(), rng=Rng(0)) is not None
            # while the first engine is attached, a second one is queued:
            # its handshake gets no reply and times out
            with pytest.raises(OSError):
                with Connection(server.endpoint, timeout=0.4) as rival:
                    execute_trace(rival, Record(), rng=Rng(0))
        # once the first engine leaves, new connections are served again
        with Connection(server.endpoint) as conn:
            assert execute_trace(conn, Record(), rng=Rng(1)) is not None


def test_disconnect_mid_session_then_reconnect(tmp_path):
    with ModelServer(_one_site, _endpoint(tmp_path)).start() as server:
        kind, path = wire.parse_endpoint(server.endpoint)
        assert kind == "ipc"
        raw = socket.socket(socket.AF_UNIX, socket.SOCK_STREAM)
        raw.connect(path)
        reader = FrameReader(raw)
        wire.write_frame(raw, wire.encode(Handshake("engine")))
        assert isinstance(wire.decode(reader.read()), HandshakeResult)
        wire.write_frame(raw, wire.encode(Run(None)))
        assert isinstance(wire.decode(reader.read()), SampleRequest)
        raw.close()  # vanish mid-run

        with Connection(server.endpoint) as conn:
            assert execute_trace(conn, Record(), rng=Rng(5)).result is not None


# --- protocol edges over raw frames ----------------------------------------


def _raw_client(server):
    kind, path = wire.parse_endpoint(server.endpoint)
    assert kind == "ipc"
    raw = socket.socket(socket.AF_UNIX, socket.SOCK_STREAM)
    raw.connect(path)
    raw.settimeout(10.0)
    return raw, FrameReader(raw)


def test_run_before_handshake_yields_protocol_error(tmp_path):
    with ModelServer(_one_site, _endpoint(tmp_path)).start() as server:
        raw, reader = _raw_client(server)
        try:
            wire.write_frame(raw, wire.encode(Run(None)))
            reply = wire.decode(reader.read())
            assert isinstance(reply, ProtocolError)
            assert reply.code == 2

            # the connection is not poisoned: a handshake still works
            wire.write_frame(raw, wire.encode(Handshake("engine")))
            assert isinstance(wire.decode(reader.read()), HandshakeResult)
        finally:
            raw.close()


def test_wrong_reply_kind_aborts_the_run(tmp_path):
    with ModelServer(_one_site, _endpoint(tmp_path)).start() as server:
        raw, reader = _raw_client(server)
        try:
            wire.write_frame(raw, wire.encode(Handshake("engine")))
            assert isinstance(wire.decode(reader.read()), HandshakeResult)
            wire.write_frame(raw, wire.encode(Run(None)))
            assert isinstance(wire.decode(reader.read()), SampleRequest)

            wire.write_frame(raw, wire.encode(ObserveResult(None)))  # wrong kind
            reply = wire.decode(reader.read())
            assert isinstance(reply, ProtocolError)
            assert reply.code == 2

            # a fresh handshake resets the session completely
            wire.write_frame(raw, wire.encode(Handshake("engine")))
            assert isinstance(wire.decode(reader.read()), HandshakeResult)
            wire.write_frame(raw, wire.encode(Run(None)))
            request = wire.decode(reader.read())
            assert isinstance(request, SampleRequest)
            wire.write_frame(raw, wire.encode(SampleResult(Real(0.5))))
            done = wire.decode(reader.read())
            assert done == RunResult(Real(0.5))
        finally:
            raw.close()


def test_handshake_names_the_model(tmp_path):
    with ModelServer(
        _one_site, _endpoint(tmp_path), model_name="bespoke name"
    ).start() as server:
        raw, reader = _raw_client(server)
        try:
            wire.write_frame(raw, wire.encode(Handshake("engine")))
            assert wire.decode(reader.read()) == HandshakeResult("bespoke name")
        finally:
            raw.close()


# --- transcript shape -------------------------------------------------------


def _assert_lockstep(events):
    """Every inbound message is answered by exactly one outbound reply."""
    assert len(events) % 2 == 0
    for i, (direction, _) in enumerate(events):
        assert direction == ("in" if i % 2 == 0 else "out")

    pairs = [
        (events[i][1], events[i + 1][1]) for i in range(0, len(events), 2)
    ]
    assert isinstance(pairs[0][0], Handshake)
    assert isinstance(pairs[0][1], HandshakeResult)
    assert isinstance(pairs[1][0], Run)
    for request, reply in pairs[1:]:
        assert isinstance(request, (Run, SampleResult, ObserveResult))
        assert isinstance(reply, (SampleRequest, ObserveRequest, RunResult, ProtocolError))
    assert isinstance(pairs[-1][1], RunResult)

    # replies chain: a request of one kind is answered by the matching result
    for i in range(1, len(pairs) - 1):
        sent = pairs[i][1]
        answered = pairs[i + 1][0]
        if isinstance(sent, SampleRequest):
            assert isinstance(answered, SampleResult)
        elif isinstance(sent, ObserveRequest):
            assert isinstance(answered, ObserveResult)


def test_transcript_is_strictly_alternating(tmp_path):
    def model(ctx):
        a = ctx.sample(Uniform(0.0, 1.0), address="a")
        ctx.observe(Normal(a.x, 1.0), Real(0.0), address="y")
        return a

    events = []
    server = ModelServer(
        model, _endpoint(tmp_path), tap=lambda d, m: events.append((d, m))
    ).start()
    try:
        with Connection(server.endpoint) as conn:
            execute_trace(conn, Record(), rng=Rng(11))
    finally:
        server.close()

    _assert_lockstep(events)
    kinds = [type(m).__name__ for _, m in events]
    assert kinds.count("SampleRequest") == 1
    assert kinds.count("ObserveRequest") == 1
