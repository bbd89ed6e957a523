"""Deterministic simulator for communication-efficient learning at the network edge."""

from .blockfl import BlockFlConfig, Malfunction, optimal_lambda, simulate_block_round
from .config import ConfigError, ExperimentConfig, parse_config, serialize_config
from .estimators import FederatedClassifier, GPDTailEstimator, UniformQuantizer
from .evt import GpdParams, fit_gpd_mle, fit_gpd_wasserstein, gpd_cdf, sinkhorn
from .experiment import MetricsRecord, run_experiment
from .msi import MsiMessage
from .nn import ModelSpec

__version__ = "0.1.0"

__all__ = [
    "BlockFlConfig",
    "ConfigError",
    "ExperimentConfig",
    "FederatedClassifier",
    "GPDTailEstimator",
    "GpdParams",
    "Malfunction",
    "MetricsRecord",
    "ModelSpec",
    "MsiMessage",
    "UniformQuantizer",
    "fit_gpd_mle",
    "fit_gpd_wasserstein",
    "gpd_cdf",
    "optimal_lambda",
    "parse_config",
    "run_experiment",
    "serialize_config",
    "simulate_block_round",
    "sinkhorn",
]
