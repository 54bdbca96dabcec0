"""Region classification with iterative local (spatial memory) and global (graph) reasoning."""
from .config import ExperimentConfig, load_config
from .estimator import ReasoningClassifier
from .metrics import MetricReport, aggregate, average_precision
from .model import LossConfig, ModelConfig, ReasoningNet, rollout, total_loss
from .synthetic import DropProtocol, SceneSpec, generate_dataset, generate_scene

__all__ = [
    "DropProtocol", "ExperimentConfig", "LossConfig", "MetricReport", "ModelConfig", "ReasoningClassifier",
    "ReasoningNet", "SceneSpec", "aggregate", "average_precision", "generate_dataset", "generate_scene",
    "load_config", "rollout", "total_loss",
]
