"""Shared fixtures: a served toy simulator and a trained proposal network.

Both are session-scoped because they are expensive relative to the tests
that consume them and are treated as read-only by every consumer.
"""

import pytest

from pxclient import ModelServer, toy_model


@pytest.fixture(scope="session")
def toy_server(tmp_path_factory):
    """The default toy simulator served on a private ipc endpoint."""
    sock = tmp_path_factory.mktemp("serve") / "toy.sock"
    server = ModelServer(toy_model, f"ipc://{sock}").start()
    yield server
    server.close()


@pytest.fixture(scope="session")
def inflation_net():
    """A proposal network trained on channel-inflated prior recordings.

    Inflation with exponent 0 records the channel uniformly, so the network
    sees even the 1e-4-prior channel often enough to learn a proposal for it.
    """
    from traceprobe.controller import InflationConfig, Record, run_batch
    from traceprobe.models import LocalConnection, toy_decay_program
    from traceprobe.neural.train import TrainConfig, network_for_traces, train

    traces = run_batch(
        [lambda: LocalConnection(toy_decay_program)],
        600,
        Record(inflation=InflationConfig(frozenset({"channel"}), 0.0)),
        root_seed=5,
    )
    network = network_for_traces(traces, seed=3)
    train(network, traces, TrainConfig(epochs=4, batch_size=16, seed=3))
    return network
