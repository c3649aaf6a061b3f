"""Reference simulators driven through the lock-step message protocol.

A *program* is a generator function ``program(observation)`` that yields
SampleRequest / ObserveRequest messages and receives the effective value for
each (for observes: the engine-chosen draw when generating data, otherwise the
value the program itself supplied).  Its return value becomes the RunResult
payload.  The same programs can be driven in process (LocalConnection) or over
a socket (ProgramServer), so every engine feature is testable without an
external simulator build.

The module also hosts the fixture constants and exact enumerations used by the
test suites: a 24-state pair-categorical model, conjugate-normal models, and a
toy particle-decay simulator emitting a 4x8x8 calorimeter grid.
"""
from __future__ import annotations

import threading
from dataclasses import dataclass

import numpy as np
from scipy.special import ndtri

from .distributions import Categorical, Normal, Poisson, Uniform
from .protocol import (
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
    decode,
    encode,
)
from .transport import bind_endpoint, bound_endpoint, read_frame, write_frame
from .values import Integer, Real, RealVector, Value


class SessionStateError(RuntimeError):
    """A message arrived that the session state machine cannot accept."""


def _effective_observe_value(request: ObserveRequest, reply: ObserveResult) -> Value:
    return reply.value if reply.value is not None else request.value


class LocalConnection:
    """In-process peer with the same roundtrip surface as transport.Connection.

    With ``codec_check=True`` every message is pushed through encode/decode in
    both directions, so in-process runs also exercise the byte codec.
    """

    def __init__(self, program, model_name: str = "local", codec_check: bool = False) -> None:
        self._program = program
        self.model_name = model_name
        self._codec_check = codec_check
        self._gen = None
        self._pending = None  # outstanding request we sent to the engine
        self._ready = False  # a Handshake opens each session

    def _advance(self, to_send) -> Message:
        try:
            request = self._gen.send(to_send)
        except StopIteration as stop:
            self._gen = None
            self._pending = None
            self._ready = False  # session complete; next run needs a handshake
            return RunResult(stop.value)
        if not isinstance(request, (SampleRequest, ObserveRequest)):
            self._gen = None
            raise SessionStateError(
                f"program yielded {type(request).__name__}, expected a sample or observe request"
            )
        self._pending = request
        return request

    def roundtrip(self, msg: Message) -> Message:
        if self._codec_check:
            msg = decode(encode(msg))
        reply = self._handle(msg)
        if self._codec_check:
            reply = decode(encode(reply))
        return reply

    def _handle(self, msg: Message) -> Message:
        if isinstance(msg, Handshake):
            if self._gen is not None:
                self._gen.close()
            self._gen = None
            self._pending = None
            self._ready = True
            return HandshakeResult(self.model_name)
        if isinstance(msg, Run):
            if not self._ready:
                raise SessionStateError("run before handshake")
            if self._gen is not None:
                raise SessionStateError("run while a run is already active")
            self._gen = self._program(msg.observation)
            return self._advance(None)
        if isinstance(msg, SampleResult):
            if self._gen is None or not isinstance(self._pending, SampleRequest):
                raise SessionStateError("sample result without a pending sample request")
            return self._advance(msg.value)
        if isinstance(msg, ObserveResult):
            if self._gen is None or not isinstance(self._pending, ObserveRequest):
                raise SessionStateError("observe result without a pending observe request")
            return self._advance(_effective_observe_value(self._pending, msg))
        if isinstance(msg, ProtocolError):
            # engine aborted the session mid-run; drop the active generator
            if self._gen is not None:
                self._gen.close()
                self._gen = None
            self._pending = None
            self._ready = False
            return ProtocolError(msg.code, "session aborted")
        raise SessionStateError(f"unexpected message {type(msg).__name__}")

    def close(self) -> None:
        if self._gen is not None:
            self._gen.close()
            self._gen = None


class ProgramServer:
    """Serves a program over a real socket, one engine connection at a time."""

    def __init__(self, program, endpoint: str = "tcp://127.0.0.1:0", model_name: str = "served") -> None:
        self._program = program
        self.model_name = model_name
        self._listener = bind_endpoint(endpoint)
        self.endpoint = bound_endpoint(endpoint, self._listener)
        self._stop = threading.Event()
        self._thread = threading.Thread(target=self._serve, daemon=True)
        self._thread.start()

    def _serve(self) -> None:
        self._listener.settimeout(0.2)
        while not self._stop.is_set():
            try:
                conn, _ = self._listener.accept()
            except TimeoutError:
                continue
            except OSError:
                break
            with conn:
                conn.settimeout(30.0)
                try:
                    self._serve_connection(conn)
                except (OSError, TimeoutError, ValueError, SessionStateError):
                    pass  # drop the connection, go back to listening

    def _serve_connection(self, conn) -> None:
        peer = LocalConnection(self._program, self.model_name)
        while not self._stop.is_set():
            body = read_frame(conn)
            if body is None:
                return  # clean disconnect; accept the next engine
            reply = peer.roundtrip(decode(body))
            write_frame(conn, encode(reply))

    def close(self) -> None:
        self._stop.set()
        try:
            self._listener.close()
        except OSError:
            pass
        self._thread.join(timeout=5.0)

    def __enter__(self) -> "ProgramServer":
        return self

    def __exit__(self, *exc) -> None:
        self.close()


# --- small fixture programs -------------------------------------------------


def single_uniform_program(observation):
    v = yield SampleRequest("u", Uniform(0.0, 1.0))
    return v


def zero_latent_program(observation):
    value = observation if observation is not None else Real(0.0)
    y = yield ObserveRequest("y", Normal(0.0, 1.0), value)
    return y


def linear_three_program(observation):
    a = yield SampleRequest("first", Uniform(0.0, 1.0))
    b = yield SampleRequest("second", Uniform(0.0, 1.0))
    c = yield SampleRequest("third", Uniform(0.0, 1.0))
    _ = (a, b)
    return c


def rare_flag_program(observation):
    c = yield SampleRequest("c", Categorical((0.9999, 0.0001)))
    return c


def conjugate_normal_program(observation):
    """mu ~ N(0,1); y ~ N(mu,1).  Closed-form posterior N(y/2, 1/2)."""
    mu = yield SampleRequest("mu", Normal(0.0, 1.0))
    value = observation if observation is not None else Real(0.0)
    y = yield ObserveRequest("y", Normal(mu.x, 1.0), value)
    return y


def offset_conjugate_program(observation):
    """Conjugate model plus a constant likelihood factor on every trace."""
    mu = yield SampleRequest("mu", Normal(0.0, 1.0))
    value = observation if observation is not None else Real(0.0)
    y = yield ObserveRequest("y", Normal(mu.x, 1.0), value)
    _ = yield ObserveRequest("unit", Normal(0.0, 1.0), Real(0.5))
    return y


def conjugate_uniform_program(observation):
    """Same conjugate posterior, but the latent enters as a standard uniform
    that the simulator transforms through the normal inverse CDF."""
    u = yield SampleRequest("u", Uniform(0.0, 1.0))
    uu = min(max(u.x, 1e-12), 1.0 - 1e-12)
    mu = float(ndtri(uu))
    value = observation if observation is not None else Real(0.0)
    y = yield ObserveRequest("y", Normal(mu, 1.0), value)
    return y


def single_site_uniform_program(observation):
    u = yield SampleRequest("u", Uniform(0.0, 1.0))
    value = observation if observation is not None else Real(0.0)
    y = yield ObserveRequest("y", Normal(u.x, 0.3), value)
    return y


def bernoulli_symmetric_program(observation):
    z = yield SampleRequest("z", Categorical((0.5, 0.5)))
    row = (0.75, 0.25) if z.i == 0 else (0.25, 0.75)
    value = observation if observation is not None else Integer(0)
    _ = yield ObserveRequest("y", Categorical(row), value)
    return z


# --- enumerable pair-categorical model --------------------------------------

PAIR_PA = (0.40, 0.30, 0.20, 0.0899, 0.01, 0.0001)
PAIR_NB = 4
PAIR_NY = 8
_PAIR_PB_BASE = (0.4, 0.3, 0.2, 0.1)


def pair_pb_row(a: int) -> tuple[float, ...]:
    return tuple(_PAIR_PB_BASE[(k + a) % PAIR_NB] for k in range(PAIR_NB))


def pair_ly_row(a: int, b: int) -> tuple[float, ...]:
    """Peaked likelihood over 8 observation classes; entries are k/16 exactly."""
    peak = (a + 2 * b) % PAIR_NY
    w = [1.0] * PAIR_NY
    w[peak] += 4.0
    w[(peak + 1) % PAIR_NY] += 2.0
    w[(peak - 1) % PAIR_NY] += 2.0
    return tuple(x / 16.0 for x in w)


def pair_program(observation):
    a = yield SampleRequest("a", Categorical(PAIR_PA))
    b = yield SampleRequest("b", Categorical(pair_pb_row(a.i)))
    if isinstance(observation, Integer):
        y_val: Value = observation
    elif observation is not None:
        y_val = Integer(int(np.argmax(observation.array)))
    else:
        y_val = Integer(0)
    y = yield ObserveRequest("y", Categorical(pair_ly_row(a.i, b.i)), y_val)
    onehot = np.zeros(PAIR_NY)
    onehot[y.i] = 1.0
    return RealVector(onehot)


def pair_observation(y_class: int) -> RealVector:
    onehot = np.zeros(PAIR_NY)
    onehot[y_class] = 1.0
    return RealVector(onehot)


def pair_exact_posterior(y_class: int) -> np.ndarray:
    """Exact p(a, b | y) over the 6x4 joint grid, by direct enumeration."""
    joint = np.zeros((len(PAIR_PA), PAIR_NB))
    for a in range(len(PAIR_PA)):
        row_b = pair_pb_row(a)
        for b in range(PAIR_NB):
            joint[a, b] = PAIR_PA[a] * row_b[b] * pair_ly_row(a, b)[y_class]
    return joint / joint.sum()


def pair_exact_joint_mass(a: int, b: int, y_class: int) -> float:
    """Unnormalized p(a, b, y) for unbiasedness checks."""
    return PAIR_PA[a] * pair_pb_row(a)[b] * pair_ly_row(a, b)[y_class]


# --- toy decay simulator ----------------------------------------------------


@dataclass(frozen=True)
class ToyDecayConfig:
    """Fixture constants for the toy decay calorimeter simulator."""

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


TOY_DEFAULT = ToyDecayConfig()

_SHALLOW_PROFILE = (0.60, 0.25, 0.10, 0.05)
_DEEP_PROFILE = (0.10, 0.20, 0.35, 0.35)
_SHALLOW_SIGMA = 0.9
_DEEP_SIGMA = 1.6
_SIGMA_WIDENING = 0.15  # transverse sigma grows by this fraction per layer
_PARTICLE_OFFSETS = ((0.0, 0.0), (-1.2, 1.0), (1.1, -0.9))

_toy_kernel_cache: dict[tuple, np.ndarray] = {}


def _toy_particle_kernels(config: ToyDecayConfig, channel: int) -> np.ndarray:
    """Deterministic per-particle deposition patterns, shape (m, D, H, W);
    each particle's pattern sums to 1 over the grid."""
    key = (config, channel)
    cached = _toy_kernel_cache.get(key)
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
    _toy_kernel_cache[key] = out
    return out


def toy_expected_grid(
    channel: int, energies, fractions, config: ToyDecayConfig = TOY_DEFAULT
) -> np.ndarray:
    """Expected deposition rates for the given latents (includes the floor)."""
    kernels = _toy_particle_kernels(config, channel)
    rates = np.full(config.grid_shape, config.floor)
    for j, (e, frac) in enumerate(zip(energies, fractions)):
        deposited = e * (0.5 + 0.5 * frac)
        rates += config.scale * deposited * kernels[j]
    return rates


def make_toy_decay_program(config: ToyDecayConfig = TOY_DEFAULT):
    """Build a toy-decay program closed over ``config``.

    Latents: channel (categorical, controlled), per-particle energy (uniform,
    controlled) and a rejection loop drawing a fragmentation fraction until
    ``2 * fraction <= energy`` (replace=True interior draws; acceptance is at
    least energy_low / energy_high = 0.25 per attempt).  The likelihood is an
    independent Poisson per calorimeter cell at address "calo" (one instance
    per cell, row-major).  RunResult carries the realized grid.
    """

    def toy_decay_program(observation):
        chans = Categorical(config.channel_probs)
        ch = yield SampleRequest("channel", chans)
        m = config.multiplicity[ch.i]
        energies = []
        fractions = []
        for j in range(m):
            e = yield SampleRequest(f"momentum_{j}", Uniform(config.energy_low, config.energy_high))
            while True:
                frac = yield SampleRequest(
                    f"fragment_{j}", Uniform(0.0, 1.0), control=True, replace=True
                )
                if 2.0 * frac.x <= e.x:
                    break
            energies.append(e.x)
            fractions.append(frac.x)
        rates = toy_expected_grid(ch.i, energies, fractions, config)
        obs_arr = observation.array if isinstance(observation, RealVector) else None
        if obs_arr is not None and obs_arr.shape != config.grid_shape:
            raise SessionStateError(
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
                    got = yield ObserveRequest("calo", Poisson(float(rates[d, h, w])), supplied)
                    grid[d, h, w] = got.i if isinstance(got, Integer) else float(got.x)
        return RealVector(grid)

    return toy_decay_program


toy_decay_program = make_toy_decay_program()
