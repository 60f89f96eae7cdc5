"""Class-based ensemble CNN for multi-label image classification.

A shared truncated-Xception head feeds one shallow sigmoid submodel per
class; training, evaluation, dataset IO, checkpointing, cost accounting
and gradient verification are all included.
"""

__version__ = "1.0.0"

from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .data import (
    bilinear_resize,
    class_names,
    class_texture,
    decode_image,
    export_dataset,
    gen_synthetic,
    load_dataset,
    load_manifest,
    write_manifest,
)
from .ensembles import (
    class_based_ensemble,
    fabricnet_classify,
    fabricnet_predict,
    stacked_ensemble,
    weight_average_ensemble,
)
from .errors import (
    CheckpointError,
    FabricNetError,
    ImageDecodeError,
    ManifestError,
    ShapeError,
    SpecParseError,
    ValidationError,
)
from .metrics import (
    ConfusionCounts,
    aggregate_reports,
    aggregate_runs,
    auc_200,
    confusion_counts,
    exact_match_accuracy,
    micro_precision_recall_f1,
    precision_recall_f1,
    report_csv,
    report_text,
    roc_points,
)
from .model import (
    DEFAULT_SPEC_TEXT,
    EnsembleSpec,
    FabricNet,
    LayerSpec,
    ModelGraph,
    assemble_fabricnet,
    assemble_monolithic,
    assemble_xception_reference,
    build_ensemble_submodel,
    build_entry_flow,
    build_exit_flow,
    build_head,
    build_middle_flow,
    count_flops,
    count_params,
    default_spec,
    fabricnet_accounting,
    init_params,
    parse_ensemble_spec,
)
from .tensor import Tensor, backward, no_grad
from .training import (
    AdamState,
    TrainConfig,
    adam_step,
    augment_batch,
    augment_image,
    bce_loss,
    evaluate,
    holdout_split,
    kfold_split,
    run_fold,
    train,
)

__all__ = [
    "AdamState",
    "Checkpoint",
    "CheckpointError",
    "ConfusionCounts",
    "DEFAULT_SPEC_TEXT",
    "EnsembleSpec",
    "FabricNet",
    "FabricNetError",
    "ImageDecodeError",
    "LayerSpec",
    "ManifestError",
    "ModelGraph",
    "ShapeError",
    "SpecParseError",
    "Tensor",
    "TrainConfig",
    "ValidationError",
    "adam_step",
    "aggregate_reports",
    "aggregate_runs",
    "assemble_fabricnet",
    "assemble_monolithic",
    "assemble_xception_reference",
    "auc_200",
    "augment_batch",
    "augment_image",
    "backward",
    "bce_loss",
    "bilinear_resize",
    "build_ensemble_submodel",
    "build_entry_flow",
    "build_exit_flow",
    "build_head",
    "build_middle_flow",
    "class_based_ensemble",
    "class_names",
    "class_texture",
    "confusion_counts",
    "count_flops",
    "count_params",
    "decode_image",
    "default_spec",
    "evaluate",
    "exact_match_accuracy",
    "export_dataset",
    "fabricnet_accounting",
    "fabricnet_classify",
    "fabricnet_predict",
    "gen_synthetic",
    "holdout_split",
    "init_params",
    "kfold_split",
    "load_checkpoint",
    "load_dataset",
    "load_manifest",
    "micro_precision_recall_f1",
    "no_grad",
    "parse_ensemble_spec",
    "precision_recall_f1",
    "report_csv",
    "report_text",
    "roc_points",
    "run_fold",
    "save_checkpoint",
    "stacked_ensemble",
    "train",
    "weight_average_ensemble",
    "write_manifest",
]
