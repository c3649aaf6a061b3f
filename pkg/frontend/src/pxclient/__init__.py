"""Simulator-side front end for the lock-step inference protocol.

Write a model as a plain function taking a context, attach distributions to
``ctx.sample`` / ``ctx.observe`` calls, and serve it to the inference engine
over a socket; the engine drives every execution and owns all randomness.
Ships a toy particle-decay model exercising every protocol feature.
"""
from .distributions import (
    Categorical,
    Distribution,
    MixtureTruncatedNormal,
    Normal,
    Poisson,
    TruncatedNormal,
    Uniform,
)
from .server import AddressError, ModelContext, ModelServer, SessionAbort, serve
from .toy import TOY_DEFAULT, ToyConfig, expected_grid, make_toy_model, toy_model
from .values import Boolean, Integer, Real, RealVector, Value
from .wire import MAX_MESSAGE_BYTES, WireError, decode, encode

__all__ = [
    "AddressError",
    "Boolean",
    "Categorical",
    "Distribution",
    "Integer",
    "MAX_MESSAGE_BYTES",
    "MixtureTruncatedNormal",
    "ModelContext",
    "ModelServer",
    "Normal",
    "Poisson",
    "Real",
    "RealVector",
    "SessionAbort",
    "TOY_DEFAULT",
    "ToyConfig",
    "TruncatedNormal",
    "Uniform",
    "Value",
    "WireError",
    "decode",
    "encode",
    "expected_grid",
    "make_toy_model",
    "serve",
    "toy_model",
]
