"""Propagation-aware pruning with closed-form low-rank adapter correction.

Desk-scale toolkit: LoRA-adapted toy models, importance scoring that looks
one layer ahead, EMA-smoothed row-wise masks, a ridge closed form that
retargets adapters to the surviving weights, an end-to-end
prune-while-fine-tune loop, subspace analytics, and a binary tensor
container plus CLI for moving artifacts around.
"""

from .analysis import (
    SubspacePair,
    grassmann_distance,
    projection_energy,
    propagation_demo,
    relative_performance,
)
from .container import load_container, save_container
from .estimator import EfficientXpertRegressor
from .masking import (
    ScoreState,
    apply_mask,
    ema_update,
    globalwise_prune,
    mask_churn,
    rowwise_prune,
    sparsity_of,
)
from .model import (
    CalibrationStats,
    LoraLinear,
    Matrix,
    PairingRule,
    ToyModel,
    compose_effective,
    forward,
)
from .pbs import PbsReport, masked_residual_norm, pbs_correct, pbs_row_update
from .scoring import (
    ScoreMatrix,
    exact_hessian_diag,
    exact_prune_delta,
    foresight_attention_scores,
    foresight_loss,
    foresight_scores,
    local_loss,
    magnitude_scores,
    wanda_scores,
)
from .tasks import (
    TaskData,
    build_toy_mlp,
    calibration_inputs,
    char_classification_task,
    make_teacher,
    regression_task,
)
from .trainer import (
    PruneConfig,
    RunRecord,
    adapter_gradients,
    efficientxpert_run,
    evaluate,
    merge_and_mask,
    train_epoch,
    wanda_baseline_run,
)
from .validation import MaskError, NonFiniteError, NumericError, ShapeError

__version__ = "0.1.0"

__all__ = [
    "__version__",
    # model
    "Matrix",
    "LoraLinear",
    "PairingRule",
    "ToyModel",
    "CalibrationStats",
    "compose_effective",
    "forward",
    # scoring
    "ScoreMatrix",
    "foresight_loss",
    "local_loss",
    "foresight_scores",
    "foresight_attention_scores",
    "wanda_scores",
    "magnitude_scores",
    "exact_hessian_diag",
    "exact_prune_delta",
    # masking
    "ScoreState",
    "ema_update",
    "rowwise_prune",
    "globalwise_prune",
    "apply_mask",
    "sparsity_of",
    "mask_churn",
    # pbs
    "PbsReport",
    "pbs_row_update",
    "pbs_correct",
    "masked_residual_norm",
    # trainer
    "PruneConfig",
    "RunRecord",
    "adapter_gradients",
    "train_epoch",
    "evaluate",
    "efficientxpert_run",
    "wanda_baseline_run",
    "merge_and_mask",
    # tasks
    "TaskData",
    "build_toy_mlp",
    "make_teacher",
    "regression_task",
    "char_classification_task",
    "calibration_inputs",
    # analysis
    "SubspacePair",
    "grassmann_distance",
    "projection_energy",
    "relative_performance",
    "propagation_demo",
    # container
    "save_container",
    "load_container",
    # estimator
    "EfficientXpertRegressor",
    # errors
    "ShapeError",
    "MaskError",
    "NumericError",
    "NonFiniteError",
]
