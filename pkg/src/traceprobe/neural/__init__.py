"""Learned-proposal machinery: autodiff, layers, the proposal network, and
its training loop."""
from .autodiff import Tensor, no_grad
from .proposal import (
    GuidedSession,
    NetworkConfig,
    NetworkFileError,
    PriorNetwork,
    ProposalNetwork,
    SiteSpec,
    value_to_vector,
)
from .train import (
    Adam,
    NoControlledAddresses,
    NonFiniteLoss,
    TrainConfig,
    TrainResult,
    dataset_loss,
    network_for_traces,
    observation_vector,
    train,
)

__all__ = [
    "Adam",
    "GuidedSession",
    "NetworkConfig",
    "NetworkFileError",
    "NoControlledAddresses",
    "NonFiniteLoss",
    "PriorNetwork",
    "ProposalNetwork",
    "SiteSpec",
    "Tensor",
    "TrainConfig",
    "TrainResult",
    "dataset_loss",
    "network_for_traces",
    "no_grad",
    "observation_vector",
    "train",
    "value_to_vector",
]
