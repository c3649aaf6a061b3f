"""Seeded stream determinism and child-stream derivation."""
from __future__ import annotations

import pytest

from traceprobe.rng import Rng, derive_seed, splitmix64


def test_splitmix64_reference_values():
    # scramble rounds starting from seed 0: the well-known splitmix64 sequence
    assert splitmix64(0) == 0xE220A8397B1DCDAF
    state = (0 + 0x9E3779B97F4A7C15) & ((1 << 64) - 1)
    assert splitmix64(state) == 0x6E789E6AA1B965F4


def test_splitmix64_stays_in_64_bits():
    for x in (0, 1, 2**63, 2**64 - 1, 123456789):
        y = splitmix64(x)
        assert 0 <= y < 2**64


def test_same_seed_same_stream():
    a, b = Rng(42), Rng(42)
    assert [a.uniform() for _ in range(100)] == [b.uniform() for _ in range(100)]


def test_different_seeds_differ():
    assert [Rng(1).uniform() for _ in range(5)] != [Rng(2).uniform() for _ in range(5)]


def test_uniform_range():
    rng = Rng(9)
    for _ in range(10_000):
        u = rng.uniform()
        assert 0.0 <= u < 1.0


def test_choice_covers_range_and_consumes_one_draw():
    rng = Rng(13)
    seen = set()
    for _ in range(1000):
        k = rng.choice(7)
        assert 0 <= k < 7
        seen.add(k)
    assert seen == set(range(7))
    with pytest.raises(ValueError):
        rng.choice(0)


def test_derivation_depends_only_on_root_and_index():
    assert derive_seed(5, 3) == derive_seed(5, 3)
    assert derive_seed(5, 3) != derive_seed(5, 4)
    assert derive_seed(5, 3) != derive_seed(6, 3)

    root = Rng(5)
    root.uniform()  # advancing the parent must not affect derivation
    child_after = root.derive(3)
    child_fresh = Rng(5).derive(3)
    assert [child_after.uniform() for _ in range(10)] == [
        child_fresh.uniform() for _ in range(10)
    ]


def test_derived_streams_are_pairwise_distinct():
    streams = [Rng(derive_seed(0, i)) for i in range(50)]
    firsts = [s.uniform() for s in streams]
    assert len(set(firsts)) == 50
