"""Frame-wise regional wall thickness estimation from cine sequences.

A two-path residual recurrent regressor (convolutional embedding plus
temporal/spatial LSTMs with an optional circular recurrence) built on a
small numpy-backed reverse-mode autodiff engine, trained and benchmarked on
a synthetic cardiac phantom with analytically known ground truth.
"""

from .autodiff import Tape, Tensor, ShapeError, backward, grad_check
from .estimator import RWTRegressor
from .layers import CircleConfig, ConvBlockParams, FCParams, LSTMCellParams
from .model import REGION_NAMES, VARIANTS, ResRNNConfig, ResRNNParams, forward, init_params
from .phantom import (CineSequence, PhantomSpec, SpecRanges, augment_crop,
                      generate_dataset, generate_subject, read_dataset, write_dataset)
from .training import (MetricsReport, TrainConfig, evaluate, five_fold,
                       learning_rate, loss, run_ablation, run_cv, sgd_step, train)

__all__ = [
    "Tape", "Tensor", "ShapeError", "backward", "grad_check",
    "RWTRegressor",
    "CircleConfig", "ConvBlockParams", "FCParams", "LSTMCellParams",
    "REGION_NAMES", "VARIANTS", "ResRNNConfig", "ResRNNParams", "forward", "init_params",
    "CineSequence", "PhantomSpec", "SpecRanges", "augment_crop",
    "generate_dataset", "generate_subject", "read_dataset", "write_dataset",
    "MetricsReport", "TrainConfig", "evaluate", "five_fold",
    "learning_rate", "loss", "run_ablation", "run_cv", "sgd_step", "train",
]

__version__ = "0.1.0"
