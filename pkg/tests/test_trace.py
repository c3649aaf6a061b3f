"""Trace entries, census, and file persistence."""
from __future__ import annotations

import math

import numpy as np
import pytest

from traceprobe.distributions import Categorical, Normal, Poisson, Uniform
from traceprobe.trace import (
    AddressDictionary,
    CorruptTraceFile,
    Kind,
    Trace,
    TraceEntry,
    TraceIoError,
    load_posterior,
    load_traces,
    save_posterior,
    save_traces,
    trace_log_joint,
    trace_type,
    trace_type_census,
)
from traceprobe.values import Integer, Real, RealVector


def _entry(addr, inst, dist, value, lp, kind=Kind.LATENT, **kw):
    return TraceEntry(addr, inst, dist, value, lp, kind, **kw)


def make_trace(seed_values=(0.3, 0.7), y=2):
    u = Uniform(0.0, 1.0)
    c = Categorical((0.25, 0.25, 0.25, 0.25))
    entries = [
        _entry("a", 1, u, Real(seed_values[0]), 0.0, controlled=True),
        _entry("a", 2, u, Real(seed_values[1]), 0.0, controlled=True),
        _entry("y", 1, c, Integer(y), math.log(0.25), kind=Kind.OBSERVED),
    ]
    return Trace(entries, result=Real(sum(seed_values)))


class TestTraceBasics:
    def test_log_joint_is_the_sum_over_all_entries(self):
        t = make_trace()
        assert t.log_joint == pytest.approx(math.log(0.25), abs=1e-15)
        assert trace_log_joint(t) == t.log_joint

    def test_minus_infinity_propagates_into_log_joint(self):
        t = Trace(
            [
                _entry("a", 1, Uniform(0, 1), Real(0.5), 0.0),
                _entry("y", 1, Uniform(0, 1), Real(5.0), -math.inf, kind=Kind.OBSERVED),
            ]
        )
        assert t.log_joint == -math.inf

    def test_empty_trace_has_zero_log_joint(self):
        assert Trace([]).log_joint == 0.0

    def test_instance_must_be_positive(self):
        with pytest.raises(ValueError):
            _entry("a", 0, Uniform(0, 1), Real(0.5), 0.0)

    def test_proposal_log_prob_defaults_to_prior_log_prob(self):
        e = _entry("a", 1, Uniform(0, 1), Real(0.5), -1.25)
        assert e.proposal_log_prob == -1.25
        e2 = TraceEntry(
            "a", 1, Uniform(0, 1), Real(0.5), -1.25, Kind.LATENT,
            proposal_log_prob=-0.5,
        )
        assert e2.proposal_log_prob == -0.5

    def test_find_by_address_and_instance(self):
        t = make_trace()
        assert t.find("a", 2).value == Real(0.7)
        assert t.find("a", 3) is None
        assert t.find("zzz", 1) is None


class TestCensus:
    def test_type_is_the_latent_site_sequence(self):
        d = AddressDictionary()
        t = make_trace()
        assert trace_type(t, d) == (("A1", 1), ("A1", 2))  # observed "y" excluded

    def test_census_counts_structures(self):
        t1 = make_trace()
        t2 = make_trace(seed_values=(0.9, 0.1))
        t3 = Trace([_entry("a", 1, Uniform(0, 1), Real(0.2), 0.0)])
        counts, d = trace_type_census([t1, t2, t3, t3])
        assert counts[(("A1", 1), ("A1", 2))] == 2
        assert counts[(("A1", 1),)] == 2
        assert d.raws == ("a", "y") or d.raws == ("a",)

    def test_dictionary_ids_are_first_seen_stable(self):
        d = AddressDictionary()
        assert d.id_for("first") == "A1"
        assert d.id_for("second") == "A2"
        assert d.id_for("first") == "A1"
        assert d.raws == ("first", "second")


class TestPersistence:
    def _rich_traces(self):
        entries = [
            _entry("mu", 1, Normal(0.0, 1.0), Real(-0.37), -1.2, controlled=True,
                   proposal_log_prob=-0.9),
            _entry(
                "frag", 1, Uniform(0, 1), Real(0.25), 0.0, controlled=True,
                replaced=True,
            ),
            _entry("k", 1, Poisson(3.5), Integer(4), -1.7, kind=Kind.OBSERVED),
        ]
        t1 = Trace(entries, result=RealVector(np.array([[1.0, 2.0], [3.0, 4.0]])))
        t2 = Trace(
            [_entry("mu", 1, Normal(0.0, 1.0), Real(1.5), -2.0)], result=None
        )
        return [t1, t2]

    def test_traces_roundtrip_exactly(self, tmp_path):
        path = tmp_path / "t.pxt"
        original = self._rich_traces()
        save_traces(path, original)
        loaded, dictionary = load_traces(path)
        assert loaded == original
        assert dictionary.raws == ("mu", "frag", "k")

    def test_posterior_roundtrip_keeps_weights(self, tmp_path):
        path = tmp_path / "p.pxp"
        traces = self._rich_traces()
        weights = [-1.5, -math.inf]
        save_posterior(path, weights, traces)
        lw, loaded, _ = load_posterior(path)
        assert lw == weights
        assert loaded == traces

    def test_trace_and_posterior_magics_differ(self, tmp_path):
        t_path, p_path = tmp_path / "t.pxt", tmp_path / "p.pxp"
        traces = self._rich_traces()
        save_traces(t_path, traces)
        save_posterior(p_path, [0.0, 0.0], traces)
        assert t_path.read_bytes()[:3] == b"PXT"
        assert p_path.read_bytes()[:3] == b"PXP"
        with pytest.raises(CorruptTraceFile):
            load_traces(p_path)
        with pytest.raises(CorruptTraceFile):
            load_posterior(t_path)

    def test_save_is_deterministic(self, tmp_path):
        a, b = tmp_path / "a.pxt", tmp_path / "b.pxt"
        save_traces(a, self._rich_traces())
        save_traces(b, self._rich_traces())
        assert a.read_bytes() == b.read_bytes()

    def test_corrupt_log_joint_detected_with_offset(self, tmp_path):
        path = tmp_path / "t.pxt"
        save_traces(path, self._rich_traces())
        data = bytearray(path.read_bytes())
        # the trailing 8 bytes of the final record are its cached log joint
        data[-1] ^= 0x40
        bad = tmp_path / "bad.pxt"
        bad.write_bytes(bytes(data))
        with pytest.raises(CorruptTraceFile) as exc:
            load_traces(bad)
        assert exc.value.offset >= len(data) - 8

    def test_truncated_file_reports_offset(self, tmp_path):
        path = tmp_path / "t.pxt"
        save_traces(path, self._rich_traces())
        data = path.read_bytes()
        bad = tmp_path / "cut.pxt"
        bad.write_bytes(data[: len(data) // 2])
        with pytest.raises(CorruptTraceFile):
            load_traces(bad)

    def test_garbage_magic_rejected(self, tmp_path):
        bad = tmp_path / "junk.pxt"
        bad.write_bytes(b"NOT A TRACE FILE")
        with pytest.raises(CorruptTraceFile):
            load_traces(bad)

    def test_missing_file_is_io_error(self, tmp_path):
        with pytest.raises(TraceIoError):
            load_traces(tmp_path / "absent.pxt")

    def test_shared_dictionary_preserves_external_ids(self, tmp_path):
        d = AddressDictionary()
        d.intern("seen_elsewhere")
        path = tmp_path / "t.pxt"
        save_traces(path, self._rich_traces(), dictionary=d)
        _, loaded_dict = load_traces(path)
        assert loaded_dict.raws[0] == "seen_elsewhere"
        assert loaded_dict.id_for("mu") == "A2"

    def test_infinite_log_joint_roundtrips(self, tmp_path):
        t = Trace(
            [_entry("y", 1, Uniform(0, 1), Real(7.0), -math.inf, kind=Kind.OBSERVED)]
        )
        path = tmp_path / "inf.pxt"
        save_traces(path, [t])
        loaded, _ = load_traces(path)
        assert loaded[0].log_joint == -math.inf
