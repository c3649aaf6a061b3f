"""Probabilistic execution engine for external stochastic simulators.

The engine drives a simulator over a binary lock-step protocol (in-process,
TCP, or unix-domain sockets), records execution traces, and runs posterior
inference over them: likelihood-weighted importance sampling, importance
sampling guided by a trained recurrent proposal network, and single-site
Metropolis-Hastings in prior-resample and random-walk flavors.
"""
from .controller import (
    ConditionOutOfSupport,
    ImportanceGuided,
    ImportancePrior,
    InflationConfig,
    LockstepViolation,
    ProposalSupportError,
    Record,
    Replay,
    SimulatorError,
    WorkerError,
    execute_trace,
    run_batch,
)
from .distributions import (
    Categorical,
    Distribution,
    MixtureTruncatedNormal,
    Normal,
    Poisson,
    TruncatedNormal,
    TypeMismatch,
    Uniform,
)
from .importance import WeightedPosterior, infer_ic, infer_is
from .mcmc import ChainResult, RwKernelConfig, lmh_step, rmh_step, run_chain
from .rng import Rng, derive_seed
from .trace import (
    AddressDictionary,
    Kind,
    Trace,
    TraceEntry,
    load_posterior,
    load_traces,
    save_posterior,
    save_traces,
    trace_type_census,
)
from .transport import Connection, bound_endpoint, parse_endpoint
from .values import Boolean, Integer, Real, RealVector, Value

__version__ = "0.1.0"

__all__ = [
    "AddressDictionary",
    "Boolean",
    "Categorical",
    "ChainResult",
    "ConditionOutOfSupport",
    "Connection",
    "Distribution",
    "ImportanceGuided",
    "ImportancePrior",
    "InflationConfig",
    "Integer",
    "Kind",
    "LockstepViolation",
    "MixtureTruncatedNormal",
    "Normal",
    "Poisson",
    "ProposalSupportError",
    "Real",
    "RealVector",
    "Record",
    "Replay",
    "Rng",
    "RwKernelConfig",
    "SimulatorError",
    "Trace",
    "TraceEntry",
    "TruncatedNormal",
    "TypeMismatch",
    "Uniform",
    "Value",
    "WeightedPosterior",
    "WorkerError",
    "__version__",
    "bound_endpoint",
    "derive_seed",
    "execute_trace",
    "infer_ic",
    "infer_is",
    "lmh_step",
    "load_posterior",
    "load_traces",
    "parse_endpoint",
    "rmh_step",
    "run_batch",
    "run_chain",
    "save_posterior",
    "save_traces",
    "trace_type_census",
]
