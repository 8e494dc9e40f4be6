"""fortnet: DAE-fortified classifiers, gradient attacks, gradient-masking
diagnostics, and reconstruction-error off-manifold detection on a small
numpy autodiff core."""

from .tensor import Tensor, activation, conv2d, matmul, softmax_cross_entropy
from .optim import Adam
from .layers import (Activation, Conv2d, ConvDAE, DAEConfig, Dense, DenseDAE,
                     Flatten, FortifiedNetwork, dae_forward, fortify)
from .attacks import AttackConfig, fgsm, pgd, project_linf
from .training import TrainConfig, evaluate, total_loss, train, train_epoch
from .data import Dataset, SyntheticSpec, batch_iter, generate_synthetic, load_idx

__all__ = [
    "Tensor", "activation", "conv2d", "matmul", "softmax_cross_entropy",
    "Adam", "Activation", "Conv2d", "ConvDAE", "DAEConfig", "Dense",
    "DenseDAE", "Flatten", "FortifiedNetwork", "dae_forward", "fortify",
    "AttackConfig", "fgsm", "pgd", "project_linf",
    "TrainConfig", "evaluate", "total_loss", "train", "train_epoch",
    "Dataset", "SyntheticSpec", "batch_iter", "generate_synthetic", "load_idx",
]

__version__ = "0.1.0"
