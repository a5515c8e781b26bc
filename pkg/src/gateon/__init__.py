"""Context-gated networks with relevance-driven availability for continual learning."""

from .detector import ContextDetector
from .harness import ExperimentConfig, run_experiment, run_isolated_baselines
from .metrics import MetricsLedger
from .network import GatedNetwork
from .plasticity import Availability, ObstructedOptimizer, RelevanceVariant

__all__ = [
    "Availability",
    "ContextDetector",
    "ExperimentConfig",
    "GatedNetwork",
    "MetricsLedger",
    "ObstructedOptimizer",
    "RelevanceVariant",
    "run_experiment",
    "run_isolated_baselines",
]

__version__ = "0.1.0"
