"""Federated multi-view DSSM recommendation on MovieLens-100K."""

from .federation import FederationConfig, Model, predict_topk, run_centralized, run_training
from .privacy import DpParams, account_epsilon

__all__ = [
    "DpParams",
    "FederationConfig",
    "Model",
    "account_epsilon",
    "predict_topk",
    "run_centralized",
    "run_training",
]

__version__ = "0.1.0"
