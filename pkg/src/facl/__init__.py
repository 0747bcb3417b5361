"""Federated attention-consistent multiple-instance learning for slide classification."""

from .data import FeatureBag, SyntheticSpec, generate_center, read_bags, stratified_split, write_bags
from .estimators import AttentionMILClassifier, FederatedAttentionMILClassifier, check_bags
from .federation import Client, FederationConfig, aggregate, evaluate_server, run_federation
from .metrics import MetricSet, cohen_kappa, roc_auc
from .model import ModelConfig, ModelParams, forward, init_params, load_checkpoint, save_checkpoint

__version__ = "0.1.0"

__all__ = [
    "AttentionMILClassifier",
    "Client",
    "FeatureBag",
    "FederatedAttentionMILClassifier",
    "FederationConfig",
    "MetricSet",
    "ModelConfig",
    "ModelParams",
    "SyntheticSpec",
    "aggregate",
    "check_bags",
    "cohen_kappa",
    "evaluate_server",
    "forward",
    "generate_center",
    "init_params",
    "load_checkpoint",
    "read_bags",
    "roc_auc",
    "run_federation",
    "save_checkpoint",
    "stratified_split",
    "write_bags",
]
