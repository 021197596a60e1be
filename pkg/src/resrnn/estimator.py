"""Scikit-learn style estimator facade over the sequence regressor.

Wraps model construction, training and inference behind fit/predict with
get_params/set_params, so the regressor composes with pipelines and
cross-validation utilities from the wider ecosystem. X is an array of cine
sequences (n_subjects, frames, H, W); y holds the per-frame region
thicknesses (n_subjects, frames, 6) in normalized units.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from . import model as mdl
from . import training
from .autodiff import Tensor
from .model import ResRNNConfig
from .phantom import CineSequence, PhantomSpec
from .training import TrainConfig


def check_sequence_arrays(X, y=None, frames: int = 20, regions: int = 6):
    """Validate and coerce (N,F,H,W) inputs and optional (N,F,L) targets."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 4:
        raise ValueError(f"X must be (n_subjects, frames, H, W), got shape {X.shape}")
    if X.shape[1] != frames:
        raise ValueError(f"X has {X.shape[1]} frames per subject, expected {frames}")
    if X.shape[2] != X.shape[3]:
        raise ValueError(f"frames must be square, got {X.shape[2]}x{X.shape[3]}")
    if not np.all(np.isfinite(X)):
        raise ValueError("X contains non-finite values")
    if y is None:
        return X
    y = np.asarray(y, dtype=np.float64)
    if y.shape != (X.shape[0], frames, regions):
        raise ValueError(f"y must be {(X.shape[0], frames, regions)}, got {y.shape}")
    if not np.all(np.isfinite(y)):
        raise ValueError("y contains non-finite values")
    return X, y


class RWTRegressor(BaseEstimator):
    """Frame-wise regional wall thickness regressor.

    Parameters mirror the model variant (convolutional path only, recurrent
    path only, or the residual combination; plain or circular recurrence),
    the circle depths, and the SGD schedule. Sequences of 80x80 frames are
    randomly cropped to ``input_size`` during fit and center-cropped during
    predict; sequences already at ``input_size`` are used as-is.
    """

    def __init__(self, variant: str = "resrnn_circle", frames: int = 20,
                 regions: int = 6, input_size: int = 75, embed_dim: int = 100,
                 temporal_depth: int = 20, spatial_depth: int = 6,
                 use_spatial: bool = True, base_lr: float = 0.05,
                 weight_decay: float = 0.0005, momentum: float = 0.9,
                 lr_gamma: float = 0.5, lr_step: int = 2500,
                 max_iters: int = 7500, batch_subjects: int = 4,
                 grad_clip: float | None = None, seed: int = 0):
        self.variant = variant
        self.frames = frames
        self.regions = regions
        self.input_size = input_size
        self.embed_dim = embed_dim
        self.temporal_depth = temporal_depth
        self.spatial_depth = spatial_depth
        self.use_spatial = use_spatial
        self.base_lr = base_lr
        self.weight_decay = weight_decay
        self.momentum = momentum
        self.lr_gamma = lr_gamma
        self.lr_step = lr_step
        self.max_iters = max_iters
        self.batch_subjects = batch_subjects
        self.grad_clip = grad_clip
        self.seed = seed

    def _model_config(self) -> ResRNNConfig:
        return ResRNNConfig(frames=self.frames, regions=self.regions,
                            input_size=self.input_size, embed_dim=self.embed_dim,
                            variant=self.variant, temporal_depth=self.temporal_depth,
                            spatial_depth=self.spatial_depth, use_spatial=self.use_spatial)

    def _train_config(self) -> TrainConfig:
        return TrainConfig(base_lr=self.base_lr, weight_decay=self.weight_decay,
                           momentum=self.momentum, lr_gamma=self.lr_gamma,
                           lr_step=self.lr_step, max_iters=self.max_iters,
                           batch_subjects=self.batch_subjects,
                           grad_clip=self.grad_clip, seed=self.seed)

    def fit(self, X, y):
        X, y = check_sequence_arrays(X, y, frames=self.frames, regions=self.regions)
        cfg = self._model_config()
        if X.shape[2] not in (80, self.input_size):
            raise ValueError(f"frames must be 80x80 or {self.input_size}x{self.input_size}")
        sequences = [
            CineSequence(subject_id=i, frames=X[i], labels=y[i],
                         spec=PhantomSpec(image_size=X.shape[2], frames=self.frames))
            for i in range(X.shape[0])
        ]
        self.config_, self.params_ = cfg, None
        self.params_, self.loss_curve_ = training.train(sequences, cfg, self._train_config())
        return self

    def predict(self, X) -> np.ndarray:
        if not hasattr(self, "params_") or self.params_ is None:
            raise NotFittedError("RWTRegressor is not fitted yet; call fit first")
        X = check_sequence_arrays(X, frames=self.frames, regions=self.regions)
        cfg = self.config_
        if X.shape[2] == 80 and cfg.input_size != 80:
            off = (80 - cfg.input_size) // 2
            X = X[:, :, off:off + cfg.input_size, off:off + cfg.input_size]
        elif X.shape[2] != cfg.input_size:
            raise ValueError(f"frames must be 80x80 or {cfg.input_size}x{cfg.input_size}")
        return mdl.forward_batch(self.params_, cfg, Tensor(X)).data

    def score(self, X, y) -> float:
        """Negative mean absolute error (higher is better)."""
        X, y = check_sequence_arrays(X, y, frames=self.frames, regions=self.regions)
        return -float(np.abs(self.predict(X) - y).mean())
