"""advlab: a toy-scale adversarial training laboratory.

Parameter-interpolation adversarial training, normalized logit alignment and
gradient-sign attacks on a small float64 autodiff engine.
"""

__version__ = "0.1.0"

from .attacks import AttackConfig, fgsm, ifgsm, mifgsm, pgd
from .data import LabeledDataset, ToyConfig, generate_toy, load_csv, save_csv
from .model import Mlp, MlpSpec, ParamVector
from .objectives import LossConfig, total_loss
from .training import LambdaSchedule, PiatConfig, TrainConfig, lambda_at, train

__all__ = [
    "AttackConfig", "fgsm", "ifgsm", "mifgsm", "pgd",
    "LabeledDataset", "ToyConfig", "generate_toy", "load_csv", "save_csv",
    "Mlp", "MlpSpec", "ParamVector",
    "LossConfig", "total_loss",
    "LambdaSchedule", "PiatConfig", "TrainConfig", "lambda_at", "train",
]
