"""Training loop for the proposal network.

The objective is the mean over recorded traces of -log q(latents | observed),
summed over the controlled, non-replaced latent sites that carry a learned
head.  Each trace's observation vector is the concatenation of its observed
values, in execution order; the network's observation width is fixed by the
first trace.  Optimization is Adam with global-norm gradient clipping.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from ..trace import Kind, Trace
from .autodiff import no_grad
from .proposal import NetworkConfig, ProposalNetwork, value_to_vector


class NoControlledAddresses(ValueError):
    """The training data exposes nothing the network could learn to propose."""


class NonFiniteLoss(ArithmeticError):
    """The loss left the reals; carries the optimizer step where it happened."""

    def __init__(self, step: int, value: float) -> None:
        self.step = step
        self.value = value
        super().__init__(f"non-finite loss {value!r} at optimizer step {step}")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 10
    batch_size: int = 16
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    clip_norm: float = 5.0
    valid_fraction: float = 0.1
    seed: int = 0


@dataclass
class TrainResult:
    train_losses: list[float] = field(default_factory=list)  # one mean per epoch
    # valid_losses[0] is the untrained network; one more entry per epoch.
    valid_losses: list[float] = field(default_factory=list)
    steps: int = 0
    skipped_entries: int = 0


class Adam:
    def __init__(self, parameters, config: TrainConfig):
        self.parameters = list(parameters)
        self.config = config
        self.m = {name: np.zeros_like(t.data) for name, t in self.parameters}
        self.v = {name: np.zeros_like(t.data) for name, t in self.parameters}
        self.t = 0

    def zero_grad(self) -> None:
        for _, tensor in self.parameters:
            tensor.grad = None

    def clip_gradients(self) -> float:
        """Scale all gradients so their global norm is at most clip_norm."""
        total = math.sqrt(
            sum(
                float(np.sum(t.grad * t.grad))
                for _, t in self.parameters
                if t.grad is not None
            )
        )
        limit = self.config.clip_norm
        if total > limit > 0.0:
            scale = limit / total
            for _, tensor in self.parameters:
                if tensor.grad is not None:
                    tensor.grad *= scale
        return total

    def step(self) -> None:
        c = self.config
        self.t += 1
        correct1 = 1.0 - c.beta1**self.t
        correct2 = 1.0 - c.beta2**self.t
        for name, tensor in self.parameters:
            g = tensor.grad
            if g is None:
                continue
            m = self.m[name] = c.beta1 * self.m[name] + (1.0 - c.beta1) * g
            v = self.v[name] = c.beta2 * self.v[name] + (1.0 - c.beta2) * (g * g)
            tensor.data = tensor.data - c.learning_rate * (m / correct1) / (
                np.sqrt(v / correct2) + c.epsilon
            )


def observation_vector(trace: Trace) -> np.ndarray:
    """Concatenated observed values of one trace, in execution order."""
    parts = [
        value_to_vector(e.value) for e in trace.entries if e.kind == Kind.OBSERVED
    ]
    if not parts:
        return np.zeros(0)
    return np.concatenate(parts)


def _trainable_entries(trace: Trace):
    return [
        e
        for e in trace.entries
        if e.kind == Kind.LATENT and e.controlled and not e.replaced
    ]


def network_for_traces(
    traces, config: NetworkConfig | None = None, seed: int = 0
) -> ProposalNetwork:
    """Build a network sized to the data and register every trainable site."""
    traces = list(traces)
    if not traces:
        raise ValueError("cannot size a network from zero traces")
    obs_dim = len(observation_vector(traces[0]))
    if obs_dim == 0:
        raise ValueError("training traces contain no observed values")
    network = ProposalNetwork(obs_dim, config, seed=seed)
    _register_all(network, traces)
    return network


def _register_all(network: ProposalNetwork, traces) -> None:
    controlled = 0
    for t in traces:
        for e in _trainable_entries(t):
            controlled += 1
            network.register_site(e.address, e.instance, e.distribution, e.value)
    if controlled == 0:
        raise NoControlledAddresses("training data has no controlled latent sites")
    if not network.sites:
        raise NoControlledAddresses(
            "controlled sites exist, but every prior is unbounded; nothing to learn"
        )


def _trace_loss(network: ProposalNetwork, trace: Trace, obs_vec: np.ndarray):
    """(loss tensor or None, number of skipped entries)."""
    obs_embed = network.embed_observation(obs_vec)
    state = network.core.initial_state()
    prev = network.initial_sample_embed
    total = None
    skipped = 0
    for e in _trainable_entries(trace):
        site = network.site_for(e.address, e.instance)
        if site is None or not site.compatible(e.distribution):
            skipped += 1
            continue
        h, c = network.step_core(obs_embed, site, prev, state)
        state = (h, c)
        lp = network.head_log_prob(site, h, e.distribution, e.value)
        total = lp if total is None else total + lp
        prev = network.embed_value(site, e.value)
    if total is None:
        return None, skipped
    return -total, skipped


def dataset_loss(network: ProposalNetwork, traces, obs_vecs) -> float:
    """Mean per-trace loss without building a gradient graph."""
    traces = list(traces)
    if not traces:
        return math.nan
    with no_grad():
        total = 0.0
        for t, obs in zip(traces, obs_vecs):
            loss, _ = _trace_loss(network, t, obs)
            if loss is not None:
                total += loss.item()
    return total / len(traces)


def train(
    network: ProposalNetwork, traces, config: TrainConfig | None = None
) -> TrainResult:
    """Fit the network to recorded traces; returns per-epoch loss curves."""
    config = config or TrainConfig()
    traces = [t for t in traces]
    if not traces:
        raise ValueError("no training traces")
    _register_all(network, traces)

    obs_vecs = [observation_vector(t) for t in traces]
    for i, obs in enumerate(obs_vecs):
        if obs.shape != (network.obs_dim,):
            raise ValueError(
                f"trace {i} has {len(obs)} observed values, network expects "
                f"{network.obs_dim}"
            )

    rng = np.random.Generator(np.random.PCG64(config.seed))
    order = rng.permutation(len(traces))
    n_valid = int(round(config.valid_fraction * len(traces)))
    valid_idx = order[:n_valid]
    train_idx = order[n_valid:]
    if len(train_idx) == 0:
        raise ValueError("validation split leaves no training traces")

    optimizer = Adam(network.parameters(), config)
    result = TrainResult()
    valid_traces = [traces[i] for i in valid_idx]
    valid_obs = [obs_vecs[i] for i in valid_idx]
    # Entry 0 is the untrained network's loss, the baseline for improvement.
    result.valid_losses.append(dataset_loss(network, valid_traces, valid_obs))

    for _epoch in range(config.epochs):
        perm = rng.permutation(len(train_idx))
        epoch_sum = 0.0
        epoch_count = 0
        for start in range(0, len(perm), config.batch_size):
            batch = [train_idx[j] for j in perm[start : start + config.batch_size]]
            optimizer.zero_grad()
            batch_total = None
            for idx in batch:
                loss, skipped = _trace_loss(network, traces[idx], obs_vecs[idx])
                result.skipped_entries += skipped
                if loss is not None:
                    batch_total = loss if batch_total is None else batch_total + loss
            if batch_total is None:
                continue
            batch_loss = batch_total * (1.0 / len(batch))
            value = batch_loss.item()
            if not math.isfinite(value):
                raise NonFiniteLoss(result.steps, value)
            batch_loss.backward()
            optimizer.clip_gradients()
            optimizer.step()
            result.steps += 1
            epoch_sum += value * len(batch)
            epoch_count += len(batch)
        result.train_losses.append(
            epoch_sum / epoch_count if epoch_count else math.nan
        )
        result.valid_losses.append(dataset_loss(network, valid_traces, valid_obs))
    return result
