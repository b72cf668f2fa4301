"""Exemplar-free counting of repeated objects via self-similarity.

A two-branch convolutional frontend feeds a pseudo-exemplar simulator and a
dual-attention similarity stage; a location-aware counter regresses the
scalar count. Includes synthetic label-exact data, a training/eval harness,
gradient verification, and a binary checkpoint format.
"""

from .config import ABLATION_ROWS, ModelConfig, ablation_variant
from .errors import (
    CheckpointError,
    CorruptCheckpointError,
    EmptySplitError,
    GeometryError,
    InfeasiblePackingError,
    MalformedAnnotationError,
    MissingAuxiliaryError,
    NaNLossError,
    SchemaVersionError,
    ShapeMismatchError,
)
from .backbone import FeatureBranch, PseudoSiameseBackbone
from .exemplar import ExemplarTokenizer
from .model import ModelOutput, SelfSimilarityCounter, build_model, parameter_count
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .data import (
    AugmentationConfig,
    DatasetRecord,
    SyntheticSceneSpec,
    augment,
    generate_synthetic,
    load_fsc147,
    load_synthetic_dataset,
    resize_policy,
    write_synthetic_dataset,
)
from .train_eval import (
    EvalReport,
    TrainConfig,
    TrainResult,
    count_loss_l1,
    count_loss_l2,
    count_mae,
    count_mse,
    evaluate,
    exemplar_guided_loss,
    run_ablation,
    train,
)
from .gradcheck import GradCheckReport, gradient_check, model_gradient_check
from .presets import desk_scene_spec, desk_train_config, tiny_model_config

__version__ = "0.1.0"

__all__ = [
    "ABLATION_ROWS",
    "AugmentationConfig",
    "Checkpoint",
    "CheckpointError",
    "CorruptCheckpointError",
    "DatasetRecord",
    "EmptySplitError",
    "EvalReport",
    "ExemplarTokenizer",
    "FeatureBranch",
    "GeometryError",
    "GradCheckReport",
    "InfeasiblePackingError",
    "MalformedAnnotationError",
    "MissingAuxiliaryError",
    "ModelConfig",
    "ModelOutput",
    "NaNLossError",
    "PseudoSiameseBackbone",
    "SchemaVersionError",
    "SelfSimilarityCounter",
    "ShapeMismatchError",
    "SyntheticSceneSpec",
    "TrainConfig",
    "TrainResult",
    "ablation_variant",
    "augment",
    "build_model",
    "count_loss_l1",
    "count_loss_l2",
    "count_mae",
    "count_mse",
    "desk_scene_spec",
    "desk_train_config",
    "evaluate",
    "exemplar_guided_loss",
    "generate_synthetic",
    "gradient_check",
    "load_checkpoint",
    "load_fsc147",
    "load_synthetic_dataset",
    "model_gradient_check",
    "parameter_count",
    "resize_policy",
    "run_ablation",
    "save_checkpoint",
    "tiny_model_config",
    "train",
    "write_synthetic_dataset",
]
