"""Differentiable training objectives with sentinel masking.

Targets are plain numpy arrays (never differentiated); predictions are traced
tensors. Sentinel-labeled samples are dropped by row selection *before* any
arithmetic, so appending masked samples to a batch cannot change a loss value
even in the last bit.

Sentinels: valence/arousal use -5; expression and action units use -1 (an AU
row is either fully labeled or all -1).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import (
    ConfigError,
    DegenerateInputError,
    DimensionError,
    EmptyBatchError,
)
from .layers import NUM_AUS, NUM_EXPRESSIONS

VA_SENTINEL = -5.0
EXPR_SENTINEL = -1
AU_SENTINEL = -1

PROB_FLOOR = 1e-12
CCC_DENOM_FLOOR = 1e-8


@dataclass(frozen=True)
class ClassWeights:
    """Per-class loss weights; each vector is normalized to mean 1."""

    au: np.ndarray  # (12,)
    expr: np.ndarray  # (8,)

    @staticmethod
    def ones() -> "ClassWeights":
        return ClassWeights(np.ones(NUM_AUS), np.ones(NUM_EXPRESSIONS))


@dataclass(frozen=True)
class LossWeights:
    """Weights for the combined objective; zero means the task is excluded."""

    au: float = 0.0
    expr: float = 0.0
    va: float = 0.0


def _valid_au_rows(targets: np.ndarray) -> np.ndarray:
    return np.flatnonzero(targets[:, 0] != AU_SENTINEL)


def au_loss(pred: Tensor, targets: np.ndarray, weights: np.ndarray | None = None) -> Tensor:
    """Weighted mean binary cross-entropy over the 12 action units.

    ``pred`` holds per-unit probabilities (rows of shape 12); rows whose
    targets are the -1 sentinel are excluded entirely.
    """
    targets = np.asarray(targets)
    if pred.ndim != 2 or pred.shape[1] != NUM_AUS or pred.shape != targets.shape:
        raise DimensionError(f"au_loss: pred {pred.shape} vs targets {targets.shape}")
    valid = _valid_au_rows(targets)
    if valid.size == 0:
        raise EmptyBatchError("no AU-labeled samples in batch")
    w = np.ones(NUM_AUS) if weights is None else np.asarray(weights, dtype=np.float64)
    p = ad.clamp(ad.take_rows(pred, valid), PROB_FLOOR, 1.0 - PROB_FLOOR)
    y = targets[valid].astype(np.float64)
    ll = ad.add(ad.mul(Tensor(y), ad.log(p)),
                ad.mul(Tensor(1.0 - y), ad.log(ad.sub(Tensor(1.0), p))))
    per_sample = ad.tensor_sum(ad.mul(ll, Tensor(w)), axis=1)
    return ad.mul(ad.mean(per_sample), Tensor(-1.0 / NUM_AUS))


def expr_loss(pred: Tensor, targets: np.ndarray, weights: np.ndarray | None = None) -> Tensor:
    """Weighted mean cross-entropy over the 8 expression classes.

    The per-sample sum runs over all 8 one-hot slots and keeps the 1/8
    prefactor, so a uniform prediction costs log(8)/8 regardless of weights
    equal to one.
    """
    targets = np.asarray(targets).astype(np.int64).ravel()
    if pred.ndim != 2 or pred.shape[1] != NUM_EXPRESSIONS or pred.shape[0] != targets.shape[0]:
        raise DimensionError(f"expr_loss: pred {pred.shape} vs targets {targets.shape}")
    valid = np.flatnonzero(targets != EXPR_SENTINEL)
    if valid.size == 0:
        raise EmptyBatchError("no expression-labeled samples in batch")
    w = np.ones(NUM_EXPRESSIONS) if weights is None else np.asarray(weights, dtype=np.float64)
    p = ad.clamp(ad.take_rows(pred, valid), PROB_FLOOR, 1.0)
    onehot = np.zeros((valid.size, NUM_EXPRESSIONS))
    onehot[np.arange(valid.size), targets[valid]] = 1.0
    per_sample = ad.tensor_sum(ad.mul(Tensor(onehot * w), ad.log(p)), axis=1)
    return ad.mul(ad.mean(per_sample), Tensor(-1.0 / NUM_EXPRESSIONS))


def ccc(x: Tensor, y: Tensor) -> Tensor:
    """Concordance correlation 2·cov / (var_x + var_y + (mean_x − mean_y)²).

    Population (1/N) variance and covariance. The denominator is floored at
    1e-8, so two constant sequences with equal means give 0 instead of 0/0;
    any non-degenerate pair is computed exactly.
    """
    if x.ndim != 1 or y.ndim != 1 or x.shape != y.shape:
        raise DimensionError(f"ccc: shapes {x.shape} vs {y.shape}")
    if x.shape[0] < 2:
        raise DegenerateInputError("ccc needs at least 2 entries")
    mx = ad.mean(x)
    my = ad.mean(y)
    dx = ad.sub(x, mx)
    dy = ad.sub(y, my)
    var_x = ad.mean(ad.mul(dx, dx))
    var_y = ad.mean(ad.mul(dy, dy))
    cov = ad.mean(ad.mul(dx, dy))
    dm = ad.sub(mx, my)
    denom = ad.add(ad.add(var_x, var_y), ad.mul(dm, dm))
    return ad.div(ad.mul(cov, Tensor(2.0)), ad.clamp(denom, lo=CCC_DENOM_FLOOR))


VA_COMPONENTS = ("valence", "arousal")


def va_loss(pred_v: Tensor, pred_a: Tensor, target_v: np.ndarray, target_a: np.ndarray,
            components: tuple[str, ...] = VA_COMPONENTS) -> Tensor:
    """Sum of (1 − CCC) over the selected valence/arousal channels.

    Entries whose target is the -5 sentinel are dropped per channel; a
    selected channel with fewer than 2 valid entries raises EmptyBatchError.
    """
    total = None
    for name, pred, target in (("valence", pred_v, target_v), ("arousal", pred_a, target_a)):
        if name not in components:
            continue
        t = np.asarray(target, dtype=np.float64).ravel()
        valid = np.flatnonzero(t != VA_SENTINEL)
        if valid.size < 2:
            raise EmptyBatchError(f"fewer than 2 {name}-labeled samples in batch")
        term = ad.sub(Tensor(1.0), ccc(ad.take_rows(pred, valid), Tensor(t[valid])))
        total = term if total is None else ad.add(total, term)
    if total is None:
        raise ConfigError("va_loss: no components selected")
    return total


def overall_loss(task_losses: dict[str, Tensor], weights: LossWeights) -> Tensor:
    """Weighted sum λ_AU·L_AU + λ_EXPR·L_EXPR + λ_VA·L_VA.

    A zero weight means the task is excluded: its loss must not be present in
    ``task_losses``, so no gradient ever reaches an excluded task's head.
    """
    pairs = [("AU", weights.au), ("EXPR", weights.expr), ("VA", weights.va)]
    if all(w == 0.0 for _, w in pairs):
        raise ConfigError("all task weights are zero")
    total = None
    for task, w in pairs:
        present = task in task_losses
        if (w == 0.0) and present:
            raise ConfigError(f"loss for excluded task {task} (weight 0) was supplied")
        if w != 0.0 and not present:
            continue  # caller skipped the task this batch (e.g. empty mask)
        if not present:
            continue
        term = ad.mul(task_losses[task], Tensor(float(w)))
        total = term if total is None else ad.add(total, term)
    if total is None:
        raise EmptyBatchError("no task loss available for this batch")
    return total


def _inverse_weights(counts: np.ndarray, total: int) -> np.ndarray:
    """Weights ∝ total/count, absent classes pinned to the max present weight,
    then normalized to mean 1."""
    counts = counts.astype(np.float64)
    present = counts > 0
    if not present.any():
        raise DegenerateInputError("no labeled samples to weight")
    w = np.zeros_like(counts)
    w[present] = total / counts[present]
    if (~present).any():
        w[~present] = w[present].max()
    return w / w.mean()


def compute_class_weights(au_positive_counts: np.ndarray, au_valid: int,
                          expr_class_counts: np.ndarray, expr_valid: int,
                          mode: str = "inverse") -> ClassWeights:
    """Inverse-frequency class weights from training-split label histograms."""
    if mode == "ones":
        return ClassWeights.ones()
    if mode != "inverse":
        raise ConfigError(f"unknown class_weight_mode {mode!r}")
    au = (np.ones(NUM_AUS) if au_valid == 0
          else _inverse_weights(np.asarray(au_positive_counts), au_valid))
    expr = (np.ones(NUM_EXPRESSIONS) if expr_valid == 0
            else _inverse_weights(np.asarray(expr_class_counts), expr_valid))
    return ClassWeights(au=au, expr=expr)
