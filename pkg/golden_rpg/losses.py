"""
Golden RPG - region-aware golden noise prediction at desk scale.
Licensed under GNU GPL-3.0-or-later.

The four-term training objective:

    L = MSE(z_out, z+) + lambda_r * L_rank + lambda_d * L_div + lambda_alpha(epoch) * L_alpha
"""

from dataclasses import dataclass

import numpy as np

from . import ops
from .adapter import AdapterOutput
from .config import LossConfig
from .errors import CorpusError, LayoutError
from .synthetic import TrainingRecord
from .tensor import ArrayLike, Tensor, as_tensor


def rank_margin(delta: float, delta_mean: float, weights: LossConfig) -> float:
    """m(delta) = m0 * clip(delta / delta_mean, low, high)."""
    if delta_mean <= 0:
        raise CorpusError(f"Mean candidate gap must be positive, got {delta_mean}; the corpus is degenerate.")
    return weights.m0 * float(np.clip(delta / delta_mean, weights.margin_clip_low, weights.margin_clip_high))


def rank_loss(z_out: Tensor, z_pos: ArrayLike, z_neg: ArrayLike, delta: float, delta_mean: float,
              weights: LossConfig) -> Tensor:
    """Hinge on squared distances (element sums): max(0, |z - z+|^2 - |z - z-|^2 + m(delta))."""
    margin = rank_margin(delta, delta_mean, weights)
    z_out = as_tensor(z_out)
    positive = ops.sum_squares(ops.sub(z_out, z_pos))
    negative = ops.sum_squares(ops.sub(z_out, z_neg))
    return ops.relu(ops.add(ops.sub(positive, negative), margin))


def diversity_loss(z_out: Tensor, hard_masks: np.ndarray) -> Tensor:
    """Negative mean distance between the channel means of adjacent regions, 0 for one region."""
    hard_masks = np.asarray(hard_masks, dtype=np.float64)
    count = hard_masks.shape[0]
    areas = hard_masks.sum(axis=(1, 2))
    if np.any(areas <= 0):
        raise LayoutError(f"Region {int(np.argmin(areas)) + 1} is empty.")
    if count < 2:
        return Tensor(0.0)
    z_out = as_tensor(z_out)
    means = [ops.masked_mean(z_out, mask) for mask in hard_masks]
    distances = [ops.l2_norm(ops.sub(means[k], means[k + 1])) for k in range(count - 1)]
    total = distances[0]
    for distance in distances[1:]:
        total = ops.add(total, distance)
    return ops.mul(total, -1.0 / (count - 1))


def alpha_target(delta: float, alpha_max: float, tau_alpha: float) -> float:
    return alpha_max * 0.5 * (1.0 + float(np.tanh(0.5 * delta / tau_alpha)))


def alpha_loss(alpha: Tensor, delta: float, weights: LossConfig, alpha_max: float = 0.6) -> Tensor:
    """SmoothL1 between alpha and the gap-derived target alpha_max * sigmoid(delta / tau_alpha)."""
    alpha = as_tensor(alpha)
    target = np.full(alpha.shape, alpha_target(delta, alpha_max, weights.tau_alpha))
    return ops.smooth_l1(alpha, target, weights.smooth_l1_beta)


def lambda_alpha_schedule(epoch: int, total_epochs: int, warmup_epochs: int = 60, lambda_alpha: float = 1.0) -> float:
    """
    Constant for the warm-up epochs, then linear decay reaching 0 at the last trained
    epoch, total_epochs - 1. A warm-up at least as long as the run is shortened to
    total_epochs - 1 epochs, so the last epoch is still 0.
    """
    if total_epochs < 1 or not 0 <= epoch < total_epochs:
        raise ValueError(f"Epoch {epoch} outside [0, {total_epochs}).")
    last = total_epochs - 1
    warmup = min(warmup_epochs, last)
    if epoch < warmup:
        return float(lambda_alpha)
    if epoch == last:
        return 0.0
    return float(lambda_alpha) * (1.0 - (epoch - warmup) / (last - warmup))


@dataclass(frozen=True)
class LossBreakdown:
    total: Tensor
    mse: float
    rank: float
    div: float
    alpha: float
    lambda_alpha: float

    def as_dict(self) -> dict:
        return {"total": self.total.item(), "mse": self.mse, "rank": self.rank, "div": self.div,
                "alpha_loss": self.alpha, "lambda_alpha": self.lambda_alpha}


def total_loss(record: TrainingRecord, output: AdapterOutput, weights: LossConfig, delta_mean: float,
               lambda_alpha: float, alpha_max: float = 0.6, hard_masks: np.ndarray = None) -> LossBreakdown:
    """
    Weighted sum of the four terms for one record; lambda_alpha is the scheduled
    value for the current epoch.
    """
    if hard_masks is None:
        hard_masks = record.prompt.hard_masks()
    mse = ops.mse(output.z_out, record.z_pos)
    rank = rank_loss(output.z_out, record.z_pos, record.z_neg, record.delta, delta_mean, weights)
    div = diversity_loss(output.z_out, hard_masks)
    alpha = alpha_loss(output.alpha, record.delta, weights, alpha_max)
    total = ops.add(mse, ops.mul(rank, weights.lambda_r))
    total = ops.add(total, ops.mul(div, weights.lambda_d))
    total = ops.add(total, ops.mul(alpha, lambda_alpha))
    return LossBreakdown(total, mse.item(), rank.item(), div.item(), alpha.item(), float(lambda_alpha))
