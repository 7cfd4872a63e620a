"""Prompt-guided out-of-distribution segmentation for panoramic scenes.

A numpy mask-transformer with prompt-based restoration attention, the
bilevel prompt distribution losses, outlier-exposure fine-tuning, and the
AuPRC / FPR95 / mIoU evaluation, all on deterministic synthetic data.
"""

from .bpdl import BpdlConfig, loss_bpdl
from .config import RunConfig
from .decoder import FeatureBundle, ModelConfig, POSModel, SegOutput, forward_scene
from .errors import (
    ConfigError,
    ContractError,
    DimensionError,
    EvaluationError,
    FormatError,
    NumericDomainError,
    PanoosError,
)
from .estimator import POSSegmenter
from .evaluation import EvalReport, auprc, evaluate_maps, fpr95, miou, pr_curve
from .synthdata import SceneConfig, SceneSample, generate_scene, make_outlier_bank
from .training import TrainConfig, finetune_oe, train_closed_set

__version__ = "0.1.0"

__all__ = [
    "BpdlConfig",
    "ConfigError",
    "ContractError",
    "DimensionError",
    "EvalReport",
    "EvaluationError",
    "FeatureBundle",
    "FormatError",
    "ModelConfig",
    "NumericDomainError",
    "POSModel",
    "POSSegmenter",
    "PanoosError",
    "RunConfig",
    "SceneConfig",
    "SceneSample",
    "SegOutput",
    "TrainConfig",
    "auprc",
    "evaluate_maps",
    "finetune_oe",
    "forward_scene",
    "fpr95",
    "generate_scene",
    "loss_bpdl",
    "make_outlier_bank",
    "miou",
    "pr_curve",
    "train_closed_set",
]
