"""From-scratch CNN engine for three-class mirrored-handwriting images:
tensor autodiff, a compact MobileNet-V3-style model, stratified k-fold
training with AdamW and plateau LR scheduling, metric reporting, and
Grad-CAM explanations.
"""

from . import _perf  # noqa: F401  (allocator/BLAS tuning; import for side effect)
from .data import (
    AugmentConfig,
    Dataset,
    FoldPlan,
    Sample,
    augment,
    decode_image,
    load_dataset,
    preprocess,
    stratified_kfold,
    synth_glyphs,
)
from .estimator import GlyphClassifier, ImagePreprocessor
from .explain import Heatmap, OverlayImage, colormap_overlay, emit_png, grad_cam
from .layers import (
    BlockSpec,
    Model,
    ModelConfig,
    build_model,
    mv3_mini_config,
    softmax,
)
from .tensor import Graph, Tensor, backward, finite_difference_check, tensor_create
from .training import (
    Checkpoint,
    ConfusionMatrix,
    MetricsReport,
    TrainConfig,
    adamw_step,
    cross_entropy_loss,
    evaluate,
    load_checkpoint,
    metric_defs,
    run_cross_validation,
    save_checkpoint,
    train_epoch,
)

__version__ = "0.1.0"

__all__ = [
    "AugmentConfig",
    "BlockSpec",
    "Checkpoint",
    "ConfusionMatrix",
    "Dataset",
    "FoldPlan",
    "GlyphClassifier",
    "Graph",
    "Heatmap",
    "ImagePreprocessor",
    "MetricsReport",
    "Model",
    "ModelConfig",
    "OverlayImage",
    "Sample",
    "Tensor",
    "TrainConfig",
    "adamw_step",
    "augment",
    "backward",
    "build_model",
    "colormap_overlay",
    "cross_entropy_loss",
    "decode_image",
    "emit_png",
    "evaluate",
    "finite_difference_check",
    "grad_cam",
    "load_checkpoint",
    "load_dataset",
    "metric_defs",
    "mv3_mini_config",
    "preprocess",
    "run_cross_validation",
    "save_checkpoint",
    "softmax",
    "stratified_kfold",
    "synth_glyphs",
    "tensor_create",
    "train_epoch",
]
