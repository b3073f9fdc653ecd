"""Mixture of nested experts: a vision transformer whose tokens are routed
to weight-sliced submodels of exponentially spaced widths.

The high-level entry points are :class:`NestedExpertsClassifier` (a
scikit-learn style estimator) and the ``mone`` command-line tool; the
building blocks (tensor core, nested blocks, routing, FLOP accounting,
training harness) are importable from their submodules.
"""

from .data import Dataset, load_idx, synth_planted_patch, write_idx
from .errors import (
    ConfigError,
    FormatError,
    InfeasibleCapacityError,
    MoneError,
    NumericError,
    RoutingError,
    ShapeError,
    TrainingError,
)
from .estimator import NestedExpertsClassifier
from .flops import FlopReport, flops_per_token, model_flops, predicted_ratio
from .model import ModelConfig, ModelParams, NestedSpec
from .routing import (
    RouterParams,
    effective_capacity,
    epr_assign,
    expert_counts,
    random_assign,
    solve_capacity,
)
from .tensor import GradCheckReport, GradTape, Tensor, grad_check
from .train import (
    ADAPTIVE_CAPACITY_SET,
    EvalMetrics,
    TrainConfig,
    TrainResult,
    capacity_sweep,
    evaluate,
    mat_joint_pretrain,
    mone_finetune,
)

__version__ = "0.1.0"

__all__ = [
    "ADAPTIVE_CAPACITY_SET",
    "ConfigError",
    "Dataset",
    "EvalMetrics",
    "FlopReport",
    "FormatError",
    "GradCheckReport",
    "GradTape",
    "InfeasibleCapacityError",
    "ModelConfig",
    "ModelParams",
    "MoneError",
    "NestedExpertsClassifier",
    "NestedSpec",
    "NumericError",
    "RouterParams",
    "RoutingError",
    "ShapeError",
    "Tensor",
    "TrainConfig",
    "TrainResult",
    "TrainingError",
    "capacity_sweep",
    "effective_capacity",
    "epr_assign",
    "evaluate",
    "expert_counts",
    "flops_per_token",
    "grad_check",
    "load_idx",
    "mat_joint_pretrain",
    "model_flops",
    "mone_finetune",
    "predicted_ratio",
    "random_assign",
    "solve_capacity",
    "synth_planted_patch",
    "write_idx",
]
