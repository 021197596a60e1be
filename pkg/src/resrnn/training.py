"""Objective, SGD schedule, cross-validation and error reporting.

The objective is mean squared error over (subject, frame, region) entries,
scaled by 1/(2*S*F), plus an L2 penalty on weight matrices (biases exempt).
Optimization is SGD with momentum and a piecewise-constant "step" learning
rate that halves every fixed number of iterations. Evaluation is by-subject
five-fold cross-validation, reporting per-region and per-frame mean absolute
error.
"""

from __future__ import annotations

import concurrent.futures
import os
from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from . import model as mdl
from .autodiff import ShapeError, Tape, Tensor
from .model import REGION_NAMES, ResRNNConfig, ResRNNParams
from .phantom import CineSequence, augment_crop


def _tune_allocator() -> None:
    """Keep large freed buffers on the heap instead of returning them to
    the OS.  Training allocates and frees tens of megabytes of activation
    and column buffers per iteration; with glibc defaults each round trip
    goes through mmap/munmap and the page faults dominate the runtime."""
    try:
        import ctypes

        libc = ctypes.CDLL("libc.so.6", use_errno=True)
        libc.mallopt(-3, 1 << 30)  # M_MMAP_THRESHOLD
        libc.mallopt(-1, 1 << 30)  # M_TRIM_THRESHOLD
    except (OSError, AttributeError):  # pragma: no cover - non-glibc platform
        pass


_tune_allocator()


class TrainingDiverged(RuntimeError):
    """Raised when training produces NaN gradients or a runaway loss."""


@dataclass
class TrainConfig:
    base_lr: float = 0.05
    weight_decay: float = 0.0005
    momentum: float = 0.9
    lr_gamma: float = 0.5
    lr_step: int = 2500
    max_iters: int = 7500
    batch_subjects: int = 4
    grad_clip: float | None = None  # optional global max-norm on gradients
    seed: int = 0
    log_every: int = 50

    def __post_init__(self):
        if self.base_lr <= 0 or self.lr_step <= 0 or self.max_iters <= 0 \
                or self.batch_subjects <= 0 or self.weight_decay < 0 or self.momentum < 0:
            raise ValueError("train config fields must be positive")
        if not (0.0 < self.lr_gamma < 1.0):
            raise ValueError(f"lr_gamma must lie in (0,1), got {self.lr_gamma}")


def learning_rate(cfg: TrainConfig, iteration: int) -> float:
    """Piecewise-constant step policy: base_lr * gamma^floor(it / step)."""
    return cfg.base_lr * cfg.lr_gamma ** (iteration // cfg.lr_step)


def loss(pred: Tensor, target: Tensor, params: ResRNNParams | None = None,
         weight_decay: float = 0.0) -> Tensor:
    """Objective value as a scalar graph node.

    Data term: sum of squared errors over all entries divided by
    2 * subjects * frames (the per-frame region vector norm is summed, not
    averaged). The L2 term covers weight matrices only.
    """
    if pred.shape != target.shape:
        raise ShapeError(f"loss: pred {pred.shape} vs target {target.shape}")
    if pred.data.ndim == 2:
        s, f = 1, pred.shape[0]
    elif pred.data.ndim == 3:
        s, f = pred.shape[0], pred.shape[1]
    else:
        raise ShapeError(f"loss: expected (F,L) or (B,F,L), got {pred.shape}")
    diff = ad.sub(pred, target)
    total = ad.scale(ad.tsum(ad.mul(diff, diff)), 1.0 / (2.0 * s * f))
    if weight_decay > 0.0 and params is not None:
        for _, t, is_bias in params.named_tensors():
            if not is_bias:
                total = ad.add(total, ad.scale(ad.tsum(ad.mul(t, t)), weight_decay / 2.0))
    return total


@dataclass
class SGDState:
    velocities: dict = field(default_factory=dict)


def sgd_step(params: ResRNNParams, state: SGDState, cfg: TrainConfig,
             iteration: int) -> None:
    """One momentum-SGD update in place; weight decay skips bias terms."""
    lr = learning_rate(cfg, iteration)
    named = list(params.named_tensors())
    grads = {}
    for name, t, _ in named:
        g = np.zeros_like(t.data) if t.grad is None else t.grad
        if not np.all(np.isfinite(g)):
            raise TrainingDiverged(f"non-finite gradient in parameter {name}")
        grads[name] = g
    if cfg.grad_clip is not None:
        norm = np.sqrt(sum(float((g * g).sum()) for g in grads.values()))
        if norm > cfg.grad_clip:
            scale = cfg.grad_clip / norm
            grads = {k: g * scale for k, g in grads.items()}
    for name, t, is_bias in named:
        g = grads[name]
        if not is_bias and cfg.weight_decay > 0.0:
            g = g + cfg.weight_decay * t.data
        v = state.velocities.get(name)
        if v is None:
            v = np.zeros_like(t.data)
        v = cfg.momentum * v - lr * g
        state.velocities[name] = v
        t.data = t.data + v


def _stack_dataset(dataset: list[CineSequence]):
    frames = np.stack([s.frames for s in dataset])
    labels = np.stack([s.labels for s in dataset])
    return frames, labels


def train(dataset: list[CineSequence], model_cfg: ResRNNConfig,
          train_cfg: TrainConfig):
    """Train one model on whole-subject batches with random-crop augmentation.

    Returns (params, loss_curve) where loss_curve is a list of
    (iteration, objective value) pairs. Deterministic for a given seed.
    """
    if not dataset:
        raise ValueError("train: empty training split")
    frames, labels = _stack_dataset(dataset)
    n = len(dataset)
    rng = np.random.default_rng(train_cfg.seed)
    params = mdl.init_params(model_cfg, seed=train_cfg.seed)
    state = SGDState()
    curve = []
    initial = None
    crop_span = frames.shape[-1] - model_cfg.input_size
    for it in range(train_cfg.max_iters):
        idx = rng.choice(n, size=min(train_cfg.batch_subjects, n), replace=False)
        batch = np.empty((len(idx), model_cfg.frames, model_cfg.input_size,
                          model_cfg.input_size))
        for b, si in enumerate(idx):
            oy = int(rng.integers(0, crop_span + 1))
            ox = int(rng.integers(0, crop_span + 1))
            batch[b] = frames[si][:, oy:oy + model_cfg.input_size, ox:ox + model_cfg.input_size]
        target = Tensor(labels[idx])
        params.zero_grad()
        with Tape() as tape:
            pred = mdl.forward_batch(params, model_cfg, Tensor(batch))
            data_loss = loss(pred, target)
            ad.backward(data_loss, tape)
        value = data_loss.item()
        if train_cfg.weight_decay > 0.0:
            value += sum(train_cfg.weight_decay / 2.0 * float((t.data ** 2).sum())
                         for _, t, is_bias in params.named_tensors() if not is_bias)
        if not np.isfinite(value):
            raise TrainingDiverged(f"non-finite loss at iteration {it}")
        if initial is None:
            initial = value
        elif value > 1e3 * max(initial, 1e-12):
            raise TrainingDiverged(
                f"loss diverged at iteration {it}: {value:.3e} vs initial {initial:.3e}")
        sgd_step(params, state, train_cfg, it)
        if it % train_cfg.log_every == 0 or it == train_cfg.max_iters - 1:
            curve.append((it, value))
    return params, curve


# ---------------------------------------------------------------------------
# evaluation


@dataclass
class MetricsReport:
    """Raw per-(subject, frame, region) absolute errors plus aggregation views.

    Errors are stored in normalized units (thickness / image size); pixel and
    millimetre views are derived. Aggregation follows the per-subject
    convention: each region row is mean +- std over subjects of the
    subject-level mean, and the Average row re-aggregates the raw errors the
    same way over all regions.
    """

    subject_ids: list
    errors: np.ndarray  # (N, F, L), normalized units
    image_size: int = 80
    spacing_mm: float | None = None

    def __post_init__(self):
        if self.errors.ndim != 3:
            raise ValueError(f"errors must be (N,F,L), got {self.errors.shape}")
        if len(self.subject_ids) != self.errors.shape[0]:
            raise ValueError("subject_ids and errors disagree on subject count")

    @classmethod
    def merge(cls, reports: list["MetricsReport"]) -> "MetricsReport":
        ids = [sid for r in reports for sid in r.subject_ids]
        errors = np.concatenate([r.errors for r in reports], axis=0)
        return cls(subject_ids=ids, errors=errors,
                   image_size=reports[0].image_size, spacing_mm=reports[0].spacing_mm)

    def region_rows(self) -> list[tuple[str, float, float]]:
        """(name, mean, std) per region plus a final Average row, normalized units."""
        per_subject_region = self.errors.mean(axis=1)  # (N, L)
        rows = [(name, float(per_subject_region[:, l].mean()),
                 float(per_subject_region[:, l].std()))
                for l, name in enumerate(REGION_NAMES)]
        per_subject_all = self.errors.mean(axis=(1, 2))
        rows.append(("Average", float(per_subject_all.mean()), float(per_subject_all.std())))
        return rows

    def frame_curve(self, region: int | None = None) -> np.ndarray:
        """Per-frame MAE over subjects; one region or (default) all regions."""
        err = self.errors if region is None else self.errors[:, :, region:region + 1]
        return err.mean(axis=(0, 2))

    def overall_mae(self) -> float:
        return float(self.errors.mean())

    def frame1_mae(self) -> float:
        return float(self.errors[:, 0, :].mean())

    def table_text(self) -> str:
        cols = ["region", "mae_norm", "std_norm", "mae_px", "std_px"]
        if self.spacing_mm is not None:
            cols += ["mae_mm", "std_mm"]
        lines = ["\t".join(cols)]
        for name, mean, std in self.region_rows():
            vals = [name, f"{mean:.6f}", f"{std:.6f}",
                    f"{mean * self.image_size:.4f}", f"{std * self.image_size:.4f}"]
            if self.spacing_mm is not None:
                vals += [f"{mean * self.image_size * self.spacing_mm:.4f}",
                         f"{std * self.image_size * self.spacing_mm:.4f}"]
            lines.append("\t".join(vals))
        return "\n".join(lines) + "\n"

    def frame_curve_text(self, region: int | None = None) -> str:
        lines = ["frame\tmae_norm"]
        for f, v in enumerate(self.frame_curve(region), start=1):
            lines.append(f"{f}\t{v:.6f}")
        return "\n".join(lines) + "\n"


def evaluate(params: ResRNNParams, model_cfg: ResRNNConfig,
             sequences: list[CineSequence], spacing_mm: float | None = None,
             chunk: int = 8) -> MetricsReport:
    """Center-crop inputs, run the model, and collect absolute errors."""
    if not sequences:
        raise ValueError("evaluate: no sequences")
    for s in sequences:
        if s.labels is None or s.labels.shape != (model_cfg.frames, model_cfg.regions):
            raise ValueError(f"evaluate: subject {s.subject_id} lacks a valid label matrix")
    errors = np.empty((len(sequences), model_cfg.frames, model_cfg.regions))
    for start in range(0, len(sequences), chunk):
        group = sequences[start:start + chunk]
        x = np.stack([augment_crop(s.frames, "center", out_size=model_cfg.input_size)
                      for s in group])
        pred = mdl.forward_batch(params, model_cfg, Tensor(x)).data
        for k, s in enumerate(group):
            errors[start + k] = np.abs(pred[k] - s.labels)
    return MetricsReport(subject_ids=[s.subject_id for s in sequences], errors=errors,
                         image_size=sequences[0].spec.image_size, spacing_mm=spacing_mm)


# ---------------------------------------------------------------------------
# cross-validation


def five_fold(dataset: list[CineSequence], seed: int, n_folds: int = 5) -> list[list[int]]:
    """Deterministic by-subject partition into n_folds near-equal folds."""
    if len(dataset) < n_folds:
        raise ValueError(f"need at least {n_folds} subjects, got {len(dataset)}")
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(dataset))
    return [sorted(chunk.tolist()) for chunk in np.array_split(order, n_folds)]


def _cv_fold_task(args):
    dataset, model_cfg, train_cfg, test_idx, spacing_mm = args
    test_set = set(test_idx)
    train_split = [s for i, s in enumerate(dataset) if i not in test_set]
    test_split = [dataset[i] for i in test_idx]
    params, curve = train(train_split, model_cfg, train_cfg)
    report = evaluate(params, model_cfg, test_split, spacing_mm=spacing_mm)
    return report, curve


def run_cv(dataset: list[CineSequence], model_cfg: ResRNNConfig,
           train_cfg: TrainConfig, folds: list[list[int]] | None = None,
           spacing_mm: float | None = None, workers: int = 1) -> MetricsReport:
    """Train on 4 folds / evaluate on the held-out fold, for every fold.

    Per-fold training seeds are derived from train_cfg.seed so folds are
    independent but reproducible. Fold runs may execute in parallel workers.
    """
    folds = folds if folds is not None else five_fold(dataset, train_cfg.seed)
    tasks = []
    for k, test_idx in enumerate(folds):
        fold_cfg = replace(train_cfg, seed=train_cfg.seed * 1009 + k)
        tasks.append((dataset, model_cfg, fold_cfg, list(test_idx), spacing_mm))
    if workers > 1:
        with concurrent.futures.ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_cv_fold_task, tasks))
    else:
        results = [_cv_fold_task(t) for t in tasks]
    return MetricsReport.merge([r for r, _ in results])


def run_ablation(dataset: list[CineSequence], model_cfg_base: ResRNNConfig,
                 train_cfg: TrainConfig, variants=mdl.VARIANTS,
                 spacing_mm: float | None = None, workers: int = 1) -> dict:
    """Cross-validate every variant on shared fold splits; returns a dict
    variant -> MetricsReport. Sharing data and folds isolates architecture
    effects."""
    folds = five_fold(dataset, train_cfg.seed)
    tasks = []
    keys = []
    for variant in variants:
        cfg = replace(model_cfg_base, variant=variant)
        for k, test_idx in enumerate(folds):
            fold_cfg = replace(train_cfg, seed=train_cfg.seed * 1009 + k)
            tasks.append((dataset, cfg, fold_cfg, list(test_idx), spacing_mm))
            keys.append(variant)
    if workers > 1:
        with concurrent.futures.ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_cv_fold_task, tasks))
    else:
        results = [_cv_fold_task(t) for t in tasks]
    out = {}
    for variant in variants:
        reports = [r for key, (r, _) in zip(keys, results) if key == variant]
        out[variant] = MetricsReport.merge(reports)
    return out


def ablation_table(reports: dict, image_size: int = 80,
                   spacing_mm: float | None = None) -> str:
    """Combined 7-row table (6 regions + Average), one column per variant."""
    variants = list(reports.keys())
    unit = image_size * (spacing_mm if spacing_mm is not None else 1.0 / image_size)
    header = "region\t" + "\t".join(variants)
    rows_by_variant = {v: reports[v].region_rows() for v in variants}
    lines = [header]
    for i in range(len(REGION_NAMES) + 1):
        name = rows_by_variant[variants[0]][i][0]
        cells = [f"{rows_by_variant[v][i][1] * unit:.4f}±{rows_by_variant[v][i][2] * unit:.4f}"
                 for v in variants]
        lines.append(name + "\t" + "\t".join(cells))
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# full-model gradient verification


def toy_config(variant: str = "resrnn_circle") -> ResRNNConfig:
    """Small configuration for exhaustive finite-difference verification."""
    return ResRNNConfig(frames=3, regions=2, input_size=10,
                        conv_specs=((2, 3, 1, 0), (3, 3, 1, 0)),
                        embed_dim=5, variant=variant,
                        temporal_depth=2, spatial_depth=2)


def model_gradcheck(model_cfg: ResRNNConfig | None = None, seed: int = 0,
                    h: float = 1e-5) -> dict:
    """Check every parameter's gradient against central finite differences.

    Returns {parameter name: max relative error} using the denominator
    max(1, |analytic|) per coordinate, on the squared-error objective.
    """
    cfg = model_cfg if model_cfg is not None else toy_config()
    rng = np.random.default_rng(seed)
    params = mdl.init_params(cfg, seed=seed)
    x = Tensor(rng.uniform(0.0, 1.0, size=(1, cfg.frames, cfg.input_size, cfg.input_size)))
    y = Tensor(rng.uniform(0.05, 0.25, size=(1, cfg.frames, cfg.regions)))

    def objective() -> float:
        return loss(mdl.forward_batch(params, cfg, x), y).item()

    params.zero_grad()
    with Tape() as tape:
        ad.backward(loss(mdl.forward_batch(params, cfg, x), y), tape)

    result = {}
    for name, t, _ in params.named_tensors():
        analytic = np.zeros_like(t.data) if t.grad is None else t.grad
        flat = t.data.reshape(-1)
        numeric = np.empty(flat.size)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = objective()
            flat[i] = orig - h
            fm = objective()
            flat[i] = orig
            numeric[i] = (fp - fm) / (2.0 * h)
        rel = np.abs(analytic.reshape(-1) - numeric) / np.maximum(1.0, np.abs(analytic.reshape(-1)))
        result[name] = float(rel.max()) if np.all(np.isfinite(rel)) else float("inf")
    return result
