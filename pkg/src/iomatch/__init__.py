"""Open-set semi-supervised learning with fused open-set targets, at desk scale."""

from .data import (AugmentSpec, FeatureFileError, OpenSetDataset, augment, load_feature_csv,
                   make_gaussian_mixture_task, write_feature_csv)
from .evaluation import (MetricsRecord, balanced_accuracy, closed_accuracy, evaluate_test,
                         per_class_recall, predict_closed, predict_open, utilization_rate)
from .kernels import BACKEND
from .networks import (ConfigError, NetworkDims, NetworkParams, forward, init_params,
                       load_checkpoint, save_checkpoint)
from .objectives import (AlignmentState, LabelError, distribution_align, multi_binary_loss,
                         open_set_loss, open_set_targets, overall_loss, supervised_loss,
                         unlabeled_inlier_loss)
from .tensor import ShapeError, Tape, TapeError, Tensor, backward, no_grad
from .trainer import MODES, TrainConfig, TrainingAborted, train_run

__version__ = "0.1.0"

__all__ = [
    "AlignmentState", "AugmentSpec", "BACKEND", "ConfigError", "FeatureFileError", "LabelError",
    "MODES", "MetricsRecord", "NetworkDims", "NetworkParams", "OpenSetDataset", "ShapeError",
    "Tape", "TapeError", "Tensor", "TrainConfig", "TrainingAborted", "augment", "backward",
    "balanced_accuracy", "closed_accuracy", "distribution_align", "evaluate_test", "forward",
    "init_params", "load_checkpoint", "load_feature_csv", "make_gaussian_mixture_task",
    "multi_binary_loss", "no_grad", "open_set_loss", "open_set_targets", "overall_loss",
    "per_class_recall", "predict_closed", "predict_open", "save_checkpoint", "supervised_loss",
    "train_run", "unlabeled_inlier_loss", "utilization_rate", "write_feature_csv",
]
