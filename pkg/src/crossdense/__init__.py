"""crossdense: cross-connected dense ensemble CNNs on a small numpy
autodiff core, with adversarial and corruption robustness evaluation."""

__version__ = "0.1.0"

from .attacks import AttackParams, fgsm, pgd, robust_accuracy
from .corruptions import (CorruptionSpec, CorruptionTable, corrupt,
                          corruption_error, mce)
from .data import AugmentConfig, LabeledImageSet, augment, load_cifar10, normalize, synthetic_dataset
from .model import (DccConfig, Model, WiringPlan, build_dcc_ecnn,
                    build_ensemble_cnn, build_single_densenet,
                    build_standard_cnn, export_graph, infer_shapes, param_count)
from .optim import Schedule, SgdConfig, SgdState, cosine_lr, evaluate, sgd_step, train
from .tensor import Precision, Tape, Tensor, backward

__all__ = [
    "AttackParams", "AugmentConfig", "CorruptionSpec", "CorruptionTable",
    "DccConfig", "LabeledImageSet", "Model", "Precision", "Schedule",
    "SgdConfig", "SgdState", "Tape", "Tensor", "WiringPlan", "augment",
    "backward", "build_dcc_ecnn", "build_ensemble_cnn",
    "build_single_densenet", "build_standard_cnn", "corrupt",
    "corruption_error", "cosine_lr", "evaluate", "export_graph", "fgsm",
    "infer_shapes", "load_cifar10", "mce", "normalize", "param_count", "pgd",
    "robust_accuracy", "sgd_step", "synthetic_dataset", "train",
]
