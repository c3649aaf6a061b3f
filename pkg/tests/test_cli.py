"""Command-line front end: pipelines, manifests, determinism, exit codes."""
import json

import numpy as np
import pytest

from traceprobe.cli import main
from traceprobe.diagnostics import read_marginal_csv, tv_distance
from traceprobe.importance import WeightedPosterior
from traceprobe.mcmc import load_chain_sidecar
from traceprobe.models import (
    ProgramServer,
    bernoulli_symmetric_program,
    pair_program,
)
from traceprobe.protocol import _Writer
from traceprobe.trace import load_traces
from traceprobe.values import Real


@pytest.fixture(scope="module")
def server():
    with ProgramServer(pair_program) as srv:
        yield srv


@pytest.fixture(scope="module")
def guided_server():
    with ProgramServer(bernoulli_symmetric_program) as srv:
        yield srv


@pytest.fixture(scope="module")
def obs_json(tmp_path_factory):
    path = tmp_path_factory.mktemp("obs") / "obs.json"
    path.write_text("[0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0]")
    return str(path)


@pytest.fixture(scope="module")
def pipeline(server, obs_json, tmp_path_factory):
    """record -> infer {is, lmh, rmh} artifacts over the pair model."""
    d = tmp_path_factory.mktemp("pipeline")
    traces = d / "prior.pxt"
    paths = {
        "dir": d,
        "traces": traces,
        "is": d / "is.pxp",
        "lmh": d / "lmh.pxp",
        "rmh": d / "rmh.pxp",
    }
    assert main(["record", "--endpoint", server.endpoint, "--n", "300",
                 "--out", str(traces), "--seed", "7"]) == 0
    assert main(["infer", "--engine", "is", "--obs", obs_json,
                 "--endpoints", server.endpoint, "--n", "400",
                 "--out", str(paths["is"]), "--seed", "3"]) == 0
    assert main(["infer", "--engine", "lmh", "--obs", obs_json,
                 "--endpoints", server.endpoint, "--steps", "400",
                 "--out", str(paths["lmh"]), "--seed", "4"]) == 0
    assert main(["infer", "--engine", "rmh", "--obs", obs_json,
                 "--endpoints", server.endpoint, "--steps", "400",
                 "--sigma", "0.5", "--out", str(paths["rmh"]), "--seed", "5"]) == 0
    return paths


@pytest.fixture(scope="module")
def guided_pipeline(guided_server, tmp_path_factory):
    """record -> train -> infer ic over a model whose observation is passed
    through unchanged, so the live observation embeds exactly like the
    observed entries the network trained on."""
    d = tmp_path_factory.mktemp("guided")
    obs = d / "obs.json"
    obs.write_text("1")
    traces = d / "prior.pxt"
    net = d / "proposal.pxn"
    paths = {"dir": d, "obs": obs, "traces": traces, "net": net,
             "ic": d / "ic.pxp"}
    assert main(["record", "--endpoint", guided_server.endpoint, "--n", "300",
                 "--out", str(traces), "--seed", "11"]) == 0
    assert main(["train", "--data", str(traces), "--out", str(net),
                 "--epochs", "3", "--seed", "1"]) == 0
    assert main(["infer", "--engine", "ic", "--obs", str(obs),
                 "--endpoints", guided_server.endpoint, "--n", "300",
                 "--net", str(net), "--out", str(paths["ic"]), "--seed", "3"]) == 0
    return paths


class TestPipelineArtifacts:
    def test_recorded_traces_load(self, pipeline):
        traces, _ = load_traces(pipeline["traces"])
        assert len(traces) == 300
        assert {e.address for e in traces[0].entries} == {"a", "b", "y"}

    def test_posteriors_load(self, pipeline):
        post = WeightedPosterior.load(pipeline["is"])
        assert len(post) == 400
        for key in ("lmh", "rmh"):
            post = WeightedPosterior.load(pipeline[key])
            assert len(post) == 400
            assert np.all(post.log_weights == 0.0)  # uniform chain weights

    def test_chain_sidecars_written(self, pipeline):
        for key in ("lmh", "rmh"):
            lj, acc = load_chain_sidecar(str(pipeline[key]) + ".chain")
            assert len(lj) == 400
            assert set(np.unique(acc)) <= {0, 1}

    def test_manifest_contents(self, pipeline):
        manifest = json.loads(
            (pipeline["dir"] / "prior.pxt.manifest.json").read_text()
        )
        assert manifest["command"] == "record"
        assert manifest["arguments"]["n"] == "300"
        assert manifest["arguments"]["seed"] == "7"
        assert manifest["version"]
        assert manifest["outputs"] == [str(pipeline["traces"])]
        assert manifest["elapsed_secs"] >= 0.0
        assert manifest["started_utc"].endswith("+00:00")

    def test_every_output_has_a_manifest(self, pipeline, guided_pipeline):
        for key in ("traces", "is", "lmh", "rmh"):
            assert (pipeline["dir"] / (pipeline[key].name + ".manifest.json")).exists()
        for key in ("traces", "net", "ic"):
            assert (guided_pipeline["dir"]
                    / (guided_pipeline[key].name + ".manifest.json")).exists()

    def test_diagnose_marginal_and_tv(self, pipeline, tmp_path):
        m_is = tmp_path / "is.csv"
        m_mh = tmp_path / "mh.csv"
        assert main(["diagnose", "marginal", "--posterior", str(pipeline["is"]),
                     "--address", "a", "--classes", "6", "--out", str(m_is)]) == 0
        assert main(["diagnose", "marginal", "--posterior", str(pipeline["lmh"]),
                     "--address", "a", "--classes", "6", "--out", str(m_mh)]) == 0
        a, b = read_marginal_csv(m_is), read_marginal_csv(m_mh)
        assert a.masses.sum() + a.absent_mass == pytest.approx(1.0)
        assert tv_distance(a, b) <= 0.25  # both target the same posterior
        assert main(["diagnose", "tv", "--a", str(m_is), "--b", str(m_mh),
                     "--out", str(tmp_path / "tv.csv")]) == 0
        tv_line = (tmp_path / "tv.csv").read_text().splitlines()[1]
        assert tv_line.startswith("tv_distance,")

    def test_diagnose_gr_and_acf_and_ess(self, pipeline, tmp_path):
        chains = f"{pipeline['lmh']}.chain,{pipeline['rmh']}.chain"
        gr_csv = tmp_path / "gr.csv"
        assert main(["diagnose", "gr", "--chains", chains,
                     "--out", str(gr_csv)]) == 0
        name, value = gr_csv.read_text().splitlines()[1].split(",")
        assert name == "gelman_rubin"
        assert float(value) > 0.9

        acf_csv = tmp_path / "acf.csv"
        assert main(["diagnose", "acf", "--chain", f"{pipeline['lmh']}.chain",
                     "--max-lag", "10", "--out", str(acf_csv)]) == 0
        rows = acf_csv.read_text().splitlines()
        assert rows[0] == "lag,autocorrelation"
        assert len(rows) == 12
        assert float(rows[1].split(",")[1]) == 1.0

        for flag, path in (("--posterior", str(pipeline["is"])),
                           ("--chain", f"{pipeline['lmh']}.chain")):
            out = tmp_path / f"ess{flag.strip('-')}.csv"
            assert main(["diagnose", "ess", flag, path, "--out", str(out)]) == 0
            _, value = out.read_text().splitlines()[1].split(",")
            assert 1.0 <= float(value) <= 800.0

    def test_graph_command(self, pipeline, tmp_path):
        out = tmp_path / "g.dot"
        assert main(["graph", "--data", str(pipeline["traces"]),
                     "--out", str(out)]) == 0
        dot = out.read_text()
        assert dot.startswith("digraph execution {")
        assert '"A1" -> "A2"' in dot


class TestGuidedPipeline:
    def test_ic_posterior_uses_trained_proposal(self, guided_pipeline):
        post = WeightedPosterior.load(guided_pipeline["ic"])
        assert len(post) == 300
        entries = [t.find("z") for t in post.traces]
        assert any(e.proposal_log_prob != e.log_prob for e in entries)

    def test_ic_marginal_targets_posterior(self, guided_pipeline, tmp_path):
        out = tmp_path / "z.csv"
        assert main(["diagnose", "marginal",
                     "--posterior", str(guided_pipeline["ic"]),
                     "--address", "z", "--classes", "2",
                     "--out", str(out)]) == 0
        m = read_marginal_csv(out)
        assert m.masses.sum() + m.absent_mass == pytest.approx(1.0)
        assert m.masses[1] > 0.6  # observing y=1 makes z=1 three times likelier

    def test_train_progress_lines(self, guided_pipeline, tmp_path, capsys):
        assert main(["train", "--data", str(guided_pipeline["traces"]),
                     "--out", str(tmp_path / "n.pxn"),
                     "--epochs", "1", "--seed", "0"]) == 0
        lines = capsys.readouterr().out.splitlines()
        assert lines[0].startswith("untrained valid loss ")
        assert lines[1].startswith("epoch 1: train loss ")


class TestDeterminism:
    def test_same_seed_byte_identical_outputs(self, server, tmp_path):
        a, b = tmp_path / "a.pxt", tmp_path / "b.pxt"
        for out in (a, b):
            assert main(["record", "--endpoint", server.endpoint, "--n", "50",
                         "--out", str(out), "--seed", "21"]) == 0
        assert a.read_bytes() == b.read_bytes()

    def test_different_seed_differs(self, server, tmp_path):
        a, b = tmp_path / "a.pxt", tmp_path / "b.pxt"
        assert main(["record", "--endpoint", server.endpoint, "--n", "50",
                     "--out", str(a), "--seed", "21"]) == 0
        assert main(["record", "--endpoint", server.endpoint, "--n", "50",
                     "--out", str(b), "--seed", "22"]) == 0
        assert a.read_bytes() != b.read_bytes()

    def test_inflated_record(self, server, tmp_path):
        out = tmp_path / "flat.pxt"
        assert main(["record", "--endpoint", server.endpoint, "--n", "200",
                     "--out", str(out), "--inflate", "a", "--alpha", "0.0",
                     "--seed", "2"]) == 0
        traces, _ = load_traces(out)
        top = np.mean([1 if t.find("a").value.i == 0 else 0 for t in traces])
        assert top < 0.4  # prior gives class 0 mass 0.40; uniform gives 1/6


class TestUsageExits:
    def test_bad_integer_flag(self, server, capsys):
        with pytest.raises(SystemExit) as exc:
            main(["record", "--endpoint", server.endpoint, "--n", "many",
                  "--out", "x.pxt"])
        assert exc.value.code == 1

    def test_missing_required_flag(self, capsys):
        with pytest.raises(SystemExit) as exc:
            main(["record", "--n", "5", "--out", "x.pxt"])
        assert exc.value.code == 1

    def test_unknown_engine(self, capsys):
        with pytest.raises(SystemExit) as exc:
            main(["infer", "--engine", "vi", "--endpoints", "tcp://h:1",
                  "--out", "x"])
        assert exc.value.code == 1

    def test_zero_samples_rejected(self, obs_json, capsys):
        code = main(["infer", "--engine", "is", "--obs", obs_json,
                     "--endpoints", "tcp://127.0.0.1:1", "--n", "0",
                     "--out", "x.pxp"])
        assert code == 1

    def test_zero_record_rejected(self, capsys):
        assert main(["record", "--endpoint", "tcp://127.0.0.1:1", "--n", "0",
                     "--out", "x.pxt"]) == 1

    def test_alpha_without_inflate(self, capsys):
        assert main(["record", "--endpoint", "tcp://127.0.0.1:1", "--n", "5",
                     "--out", "x.pxt", "--alpha", "0.5"]) == 1

    def test_is_without_n(self, obs_json, capsys):
        assert main(["infer", "--engine", "is", "--obs", obs_json,
                     "--endpoints", "tcp://127.0.0.1:1", "--out", "x"]) == 1

    def test_ic_without_net(self, obs_json, capsys):
        assert main(["infer", "--engine", "ic", "--obs", obs_json,
                     "--endpoints", "tcp://127.0.0.1:1", "--n", "5",
                     "--out", "x"]) == 1

    def test_lmh_without_steps(self, obs_json, capsys):
        assert main(["infer", "--engine", "lmh", "--obs", obs_json,
                     "--endpoints", "tcp://127.0.0.1:1", "--out", "x"]) == 1

    def test_lmh_with_two_endpoints(self, obs_json, capsys):
        assert main(["infer", "--engine", "lmh", "--obs", obs_json,
                     "--endpoints", "tcp://127.0.0.1:1,tcp://127.0.0.1:2",
                     "--steps", "5", "--out", "x"]) == 1

    def test_diagnose_missing_inputs(self, capsys):
        assert main(["diagnose", "gr"]) == 1
        assert main(["diagnose", "acf"]) == 1
        assert main(["diagnose", "marginal", "--out", "x.csv"]) == 1
        assert main(["diagnose", "tv", "--a", "only.csv"]) == 1
        assert main(["diagnose", "ess", "--out", "x.csv"]) == 1

    def test_missing_input_files(self, tmp_path, capsys):
        assert main(["train", "--data", str(tmp_path / "absent.pxt"),
                     "--out", str(tmp_path / "n.pxn")]) == 1
        assert main(["graph", "--data", str(tmp_path / "absent.pxt"),
                     "--out", str(tmp_path / "g.dot")]) == 1
        assert main(["infer", "--engine", "is",
                     "--obs", str(tmp_path / "absent.json"),
                     "--endpoints", "tcp://127.0.0.1:1", "--n", "5",
                     "--out", str(tmp_path / "x.pxp")]) == 1

    def test_invalid_timeout_env(self, server, tmp_path, monkeypatch, capsys):
        monkeypatch.setenv("TRACEPROBE_TIMEOUT_SECS", "soon")
        assert main(["record", "--endpoint", server.endpoint, "--n", "5",
                     "--out", str(tmp_path / "x.pxt")]) == 1
        err = capsys.readouterr().err
        assert "TRACEPROBE_TIMEOUT_SECS" in err

    def test_no_manifest_on_failure(self, tmp_path, capsys):
        out = tmp_path / "x.pxt"
        main(["record", "--endpoint", "tcp://127.0.0.1:1", "--n", "0",
              "--out", str(out)])
        assert not (tmp_path / "x.pxt.manifest.json").exists()


class TestProtocolExits:
    def test_unreachable_endpoint(self, tmp_path, capsys):
        code = main(["record", "--endpoint", "tcp://127.0.0.1:1", "--n", "5",
                     "--out", str(tmp_path / "x.pxt")])
        assert code == 2

    def test_unreachable_endpoint_for_chain(self, obs_json, tmp_path, capsys):
        code = main(["infer", "--engine", "lmh", "--obs", obs_json,
                     "--endpoints", "tcp://127.0.0.1:1", "--steps", "5",
                     "--out", str(tmp_path / "x.pxp")])
        assert code == 2

    def test_corrupt_observation_file(self, server, tmp_path, capsys):
        bad = tmp_path / "obs.bin"
        w = _Writer()
        w.value(Real(1.0))
        bad.write_bytes(bytes(w.buf) + b"\xff")  # trailing garbage
        code = main(["infer", "--engine", "is", "--obs", str(bad),
                     "--endpoints", server.endpoint, "--n", "5",
                     "--out", str(tmp_path / "x.pxp")])
        assert code == 2

    def test_corrupt_network_file(self, server, obs_json, tmp_path, capsys):
        bad = tmp_path / "net.pxn"
        bad.write_bytes(b"\x00\x01\x02\x03")
        code = main(["infer", "--engine", "ic", "--obs", obs_json,
                     "--endpoints", server.endpoint, "--n", "5",
                     "--net", str(bad), "--out", str(tmp_path / "x.pxp")])
        assert code == 2


class TestNumericalExits:
    def test_training_without_learnable_sites(self, tmp_path, capsys):
        from traceprobe.controller import Record, run_batch
        from traceprobe.models import LocalConnection, conjugate_normal_program
        from traceprobe.trace import save_traces

        traces = run_batch(
            [lambda: LocalConnection(conjugate_normal_program)], 10, Record()
        )
        data = tmp_path / "normals.pxt"
        save_traces(data, traces)
        code = main(["train", "--data", str(data),
                     "--out", str(tmp_path / "n.pxn")])
        assert code == 3
        assert "nothing to learn" in capsys.readouterr().err

    def test_gr_length_mismatch(self, tmp_path, capsys):
        from traceprobe.mcmc import save_chain_sidecar

        a, b = tmp_path / "a.chain", tmp_path / "b.chain"
        save_chain_sidecar(a, np.zeros(20), np.zeros(20))
        save_chain_sidecar(b, np.zeros(30), np.zeros(30))
        code = main(["diagnose", "gr", "--chains", f"{a},{b}",
                     "--out", str(tmp_path / "gr.csv")])
        assert code == 3
