"""Wire codec: golden vectors, seeded round-trips, and malformed-input offsets."""
from __future__ import annotations

import importlib.util
import math
import pathlib
import random

import numpy as np
import pytest

from traceprobe.distributions import (
    Categorical,
    MixtureTruncatedNormal,
    Normal,
    Poisson,
    TruncatedNormal,
    Uniform,
)
from traceprobe.protocol import (
    BadMagic,
    BadUtf8,
    BadVersion,
    CodecError,
    Handshake,
    HandshakeResult,
    InvalidPayload,
    ObserveRequest,
    ObserveResult,
    ProtocolError,
    Run,
    RunResult,
    SampleRequest,
    SampleResult,
    TrailingBytes,
    Truncated,
    UnknownKind,
    decode,
    encode,
)
from traceprobe.values import Boolean, Integer, Real, RealVector

GOLDEN_DIR = pathlib.Path(__file__).parent / "golden"


def _load_golden_table():
    spec = importlib.util.spec_from_file_location(
        "golden_regenerate", GOLDEN_DIR / "regenerate.py"
    )
    module = importlib.util.module_from_spec(spec)
    spec.loader.exec_module(module)
    return module.golden_messages()


# --- golden vectors ---------------------------------------------------------


class TestGoldenVectors:
    def test_every_golden_file_decodes_to_its_message(self):
        for name, msg in _load_golden_table():
            data = (GOLDEN_DIR / name).read_bytes()
            assert decode(data) == msg, name

    def test_every_golden_message_encodes_to_its_file(self):
        for name, msg in _load_golden_table():
            data = (GOLDEN_DIR / name).read_bytes()
            assert encode(msg) == data, name

    def test_golden_prologue_bytes(self):
        data = (GOLDEN_DIR / "handshake.bin").read_bytes()
        assert data[:2] == b"\x50\x58"  # "PX"
        assert data[2] == 0x01  # version
        assert data[3] == 0x01  # Handshake kind

    def test_observe_result_absent_value_is_five_bytes(self):
        data = (GOLDEN_DIR / "observe_result_none.bin").read_bytes()
        assert data == b"\x50\x58\x01\x08\x00"


# --- seeded random round-trips ----------------------------------------------


def random_value(rng: random.Random):
    pick = rng.randrange(4)
    if pick == 0:
        return Real(rng.choice([rng.uniform(-1e6, 1e6), 0.0, -0.0, math.inf,
                                -math.inf, math.nan]))
    if pick == 1:
        return Integer(rng.randrange(-(2**62), 2**62))
    if pick == 2:
        return Boolean(rng.random() < 0.5)
    rank = rng.randrange(1, 4)
    shape = tuple(rng.randrange(1, 5) for _ in range(rank))
    arr = np.array([rng.uniform(-100, 100) for _ in range(int(np.prod(shape)))])
    return RealVector(arr.reshape(shape))


def random_distribution(rng: random.Random):
    pick = rng.randrange(6)
    if pick == 0:
        low = rng.uniform(-10, 10)
        return Uniform(low, low + rng.uniform(0.1, 5.0))
    if pick == 1:
        return Normal(rng.uniform(-10, 10), rng.uniform(0.1, 5.0))
    if pick == 2:
        low = rng.uniform(-10, 10)
        return TruncatedNormal(
            rng.uniform(-10, 10), rng.uniform(0.1, 5.0), low, low + rng.uniform(0.1, 5.0)
        )
    if pick == 3:
        k = rng.randrange(2, 7)
        raw = [rng.uniform(0.05, 1.0) for _ in range(k)]
        total = sum(raw)
        probs = [p / total for p in raw]
        probs[-1] = 1.0 - sum(probs[:-1])
        return Categorical(tuple(probs))
    if pick == 4:
        return Poisson(rng.uniform(0.1, 50.0))
    k = rng.randrange(1, 4)
    low = rng.uniform(-5, 5)
    high = low + rng.uniform(0.5, 4.0)
    raw = [rng.uniform(0.05, 1.0) for _ in range(k)]
    total = sum(raw)
    weights = [x / total for x in raw]
    weights[-1] = 1.0 - sum(weights[:-1])
    comps = tuple(
        TruncatedNormal(rng.uniform(-6, 6), rng.uniform(0.1, 3.0), low, high)
        for _ in range(k)
    )
    return MixtureTruncatedNormal(tuple(weights), comps)


def random_address(rng: random.Random) -> str:
    length = rng.randrange(1, 12)
    return "".join(
        rng.choice("abcdefghijklmnopqrstuvwxyz_0123456789é世")
        for _ in range(length)
    )


def random_message(rng: random.Random):
    pick = rng.randrange(9)
    if pick == 0:
        return Handshake(random_address(rng))
    if pick == 1:
        return HandshakeResult(random_address(rng))
    if pick == 2:
        return Run(random_value(rng) if rng.random() < 0.7 else None)
    if pick == 3:
        return RunResult(random_value(rng) if rng.random() < 0.7 else None)
    if pick == 4:
        return SampleRequest(
            random_address(rng),
            random_distribution(rng),
            control=rng.random() < 0.8,
            replace=rng.random() < 0.2,
            name=random_address(rng) if rng.random() < 0.5 else None,
        )
    if pick == 5:
        return SampleResult(random_value(rng))
    if pick == 6:
        return ObserveRequest(
            random_address(rng), random_distribution(rng), random_value(rng)
        )
    if pick == 7:
        return ObserveResult(random_value(rng) if rng.random() < 0.5 else None)
    return ProtocolError(rng.randrange(-5, 100), random_address(rng))


def test_thousand_seeded_messages_roundtrip_exactly():
    rng = random.Random(20240823)
    for i in range(1000):
        msg = random_message(rng)
        data = encode(msg)
        back = decode(data)
        assert back == msg, f"message {i}: {msg!r} != {back!r}"
        assert encode(back) == data, f"message {i}: re-encode not canonical"


def test_nan_and_infinite_reals_survive_the_wire():
    for x in (math.nan, math.inf, -math.inf, -0.0, 5e-324):
        back = decode(encode(SampleResult(Real(x))))
        assert isinstance(back.value, Real)
        if math.isnan(x):
            assert math.isnan(back.value.x)
        else:
            assert back.value.x == x


def test_vector_row_major_order_is_preserved():
    arr = np.arange(24.0).reshape(2, 3, 4)
    back = decode(encode(RunResult(RealVector(arr))))
    assert np.array_equal(back.result.array, arr)


# --- malformed inputs -------------------------------------------------------


class TestDecodeErrors:
    def test_wrong_first_magic_byte_reports_offset_zero(self):
        with pytest.raises(BadMagic) as exc:
            decode(b"\x00")
        assert exc.value.offset == 0

    def test_wrong_second_magic_byte_reports_offset_one(self):
        with pytest.raises(BadMagic) as exc:
            decode(b"\x50\x59\x01\x01")
        assert exc.value.offset == 1

    def test_single_valid_magic_byte_is_truncated_not_bad(self):
        with pytest.raises(Truncated):
            decode(b"\x50")

    def test_empty_input_is_truncated(self):
        with pytest.raises(Truncated):
            decode(b"")

    def test_unsupported_version(self):
        with pytest.raises(BadVersion) as exc:
            decode(b"\x50\x58\x02\x01")
        assert exc.value.offset == 2

    def test_unknown_kind(self):
        with pytest.raises(UnknownKind) as exc:
            decode(b"\x50\x58\x01\x77")
        assert exc.value.offset == 3

    def test_truncated_string_payload(self):
        intact = encode(Handshake("abcdef"))
        with pytest.raises(Truncated):
            decode(intact[:-3])

    def test_trailing_bytes_after_message(self):
        with pytest.raises(TrailingBytes) as exc:
            decode(encode(Run(None)) + b"\x00")
        assert exc.value.offset == 5

    def test_invalid_utf8_offset_points_at_the_bad_byte(self):
        data = b"\x50\x58\x01\x01" + b"\x02\x00\x00\x00" + b"\xff\xfe"
        with pytest.raises(BadUtf8) as exc:
            decode(data)
        assert exc.value.offset == 8

    def test_presence_byte_other_than_zero_or_one(self):
        data = b"\x50\x58\x01\x08\x02"
        with pytest.raises(InvalidPayload) as exc:
            decode(data)
        assert exc.value.offset == 4

    def test_vector_rank_above_three_rejected(self):
        # RunResult with present vector value of claimed rank 4
        data = b"\x50\x58\x01\x04" + b"\x01" + b"\x03" + b"\x04"
        with pytest.raises(InvalidPayload):
            decode(data)

    def test_negative_probabilities_rejected_as_invalid_payload(self):
        intact = bytearray(
            encode(SampleRequest("s", Categorical((0.5, 0.5))))
        )
        # flip the sign bit of the last f64 (second probability)
        flip_at = len(intact) - 2 - 8 + 7  # before control/replace booleans
        intact[flip_at] ^= 0x80
        with pytest.raises(InvalidPayload):
            decode(bytes(intact))

    def test_decode_errors_are_all_value_errors(self):
        for cls in (BadMagic, BadVersion, UnknownKind, Truncated, TrailingBytes,
                    BadUtf8, InvalidPayload):
            assert issubclass(cls, CodecError)
            assert issubclass(cls, ValueError)


def test_messages_are_immutable():
    msg = Handshake("fixed")
    with pytest.raises(AttributeError):
        msg.model_name = "other"


def test_empty_address_rejected_at_construction():
    with pytest.raises(ValueError):
        SampleRequest("", Uniform(0.0, 1.0))
    with pytest.raises(ValueError):
        ObserveRequest("", Poisson(1.0), Integer(0))
