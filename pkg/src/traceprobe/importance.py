"""Sequential importance sampling over simulator traces.

Each trace's unnormalized log weight is the sum of its Observed log densities
plus, per Latent entry, the prior-minus-proposal log density gap.  Wherever a
latent was drawn from its prior the gap vanishes, so prior-mode inference
reduces to likelihood weighting; guided mode (learned proposals) and
inflation-recorded traces are reweighted exactly through the same formula.

Weights of -inf (impossible values under the prior, or observed data with zero
likelihood) are retained and count toward n; they simply carry no posterior
mass.  The empirical posterior is the weight-normalized point mass over the
returned traces.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from .controller import ImportanceGuided, ImportancePrior, run_batch
from .trace import (
    AddressDictionary,
    Kind,
    Trace,
    load_posterior,
    save_posterior,
)
from .values import Value


def importance_log_weight(t: Trace) -> float:
    """Unnormalized log importance weight of one trace."""
    total = 0.0
    for e in t.entries:
        if e.kind == Kind.OBSERVED:
            term = e.log_prob
        else:
            if e.log_prob == -math.inf:
                return -math.inf
            term = e.log_prob - e.proposal_log_prob
        if term == -math.inf:
            return -math.inf
        total += term
    return total


@dataclass
class WeightedPosterior:
    """Weighted point-mass posterior: (log weight, trace) pairs."""

    log_weights: np.ndarray
    traces: list[Trace]

    def __post_init__(self) -> None:
        self.log_weights = np.asarray(self.log_weights, dtype=np.float64)
        if self.log_weights.shape != (len(self.traces),):
            raise ValueError(
                f"{self.log_weights.shape} log weights for {len(self.traces)} traces"
            )

    def __len__(self) -> int:
        return len(self.traces)

    @property
    def log_normalizer(self) -> float:
        if len(self.log_weights) == 0:
            return -math.inf
        return float(logsumexp(self.log_weights))

    def normalized_weights(self) -> np.ndarray:
        z = self.log_normalizer
        if z == -math.inf:
            return np.zeros_like(self.log_weights)
        return np.exp(self.log_weights - z)

    def ess(self) -> float:
        """Kish effective sample size, (sum w)^2 / sum w^2, in log space."""
        finite = self.log_weights[np.isfinite(self.log_weights)]
        if len(finite) == 0:
            return 0.0
        return float(np.exp(2.0 * logsumexp(finite) - logsumexp(2.0 * finite)))

    def mean(self, f) -> float:
        """Posterior expectation of a scalar function of the trace."""
        w = self.normalized_weights()
        return float(sum(wi * f(t) for wi, t in zip(w, self.traces) if wi > 0.0))

    def save(self, path, dictionary: AddressDictionary | None = None) -> None:
        save_posterior(path, self.log_weights.tolist(), self.traces, dictionary)

    @classmethod
    def load(cls, path) -> "WeightedPosterior":
        log_weights, traces, _ = load_posterior(path)
        return cls(np.asarray(log_weights), traces)


def infer_is(
    pool,
    n: int,
    observation: Value | None = None,
    conditions=None,
    root_seed: int = 0,
    model_name: str = "engine",
) -> WeightedPosterior:
    """Likelihood-weighted posterior from n prior-proposal executions."""
    traces = run_batch(
        pool,
        n,
        ImportancePrior(),
        conditions=conditions,
        observation=observation,
        root_seed=root_seed,
        model_name=model_name,
    )
    lw = np.array([importance_log_weight(t) for t in traces], dtype=np.float64)
    return WeightedPosterior(lw, traces)


def infer_ic(
    pool,
    network,
    n: int,
    observation: Value | None = None,
    conditions=None,
    root_seed: int = 0,
    model_name: str = "engine",
) -> WeightedPosterior:
    """Posterior from n executions guided by a trained proposal network.

    Addresses the network has never seen fall back to the prior, so the
    estimator stays correct (if possibly no better than prior proposals).
    """
    traces = run_batch(
        pool,
        n,
        ImportanceGuided(network, observation),
        conditions=conditions,
        observation=observation,
        root_seed=root_seed,
        model_name=model_name,
    )
    lw = np.array([importance_log_weight(t) for t in traces], dtype=np.float64)
    return WeightedPosterior(lw, traces)
