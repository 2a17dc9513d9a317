"""Training objectives.

Source domain: plain MSE against the paired label. Target domain: a
heteroscedastic fit to pseudo-labels where the reliability mask enters
inside the squared norm, so weights act quadratically on the data term:

    data = ((pseudo - pred) * m)^2 / sigma^2        per pixel
    term = mean(data) + beta * mean(logvar)

sigma^2 = exp(logvar) with logvar clamped to [-10, 10] before the exp;
the clamp is a numerical guard against runaway variance collapse or
blowup and is applied identically everywhere log-variances are
consumed. mask_outside_norm=True switches to masking the squared
residual once (m * r^2), kept as an explicit toggle because both
conventions appear in practice; the default is the inside placement.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .data import ImageGrid
from .masks import ReliabilityMask

LOGVAR_RANGE = (-10.0, 10.0)


class NonFiniteLossError(FloatingPointError):
    """Raised when a loss term stops being finite; message names the term."""


def variance_from_logvar(logvar):
    """exp of the clamped log-variance; works on tensors and arrays."""
    if torch.is_tensor(logvar):
        return torch.exp(torch.clamp(logvar, *LOGVAR_RANGE))
    return np.exp(np.clip(np.asarray(logvar, dtype=np.float64), *LOGVAR_RANGE))


def _grid_values(x) -> np.ndarray:
    if isinstance(x, ImageGrid):
        return x.values
    if isinstance(x, ReliabilityMask):
        return x.weights.values
    return np.asarray(x, dtype=np.float64)


@dataclass(frozen=True)
class TargetTerms:
    data_term: float
    logvar_term: float
    beta: float


@dataclass(frozen=True)
class LossBreakdown:
    """Scalar decomposition of the joint objective for one batch pair."""

    source_mse: float
    target_data_term: float
    target_logvar_term: float
    total: float
    beta: float

    def __post_init__(self):
        for name in ("source_mse", "target_data_term", "target_logvar_term", "total"):
            if not np.isfinite(getattr(self, name)):
                raise NonFiniteLossError(f"non-finite loss term {name}")


def source_loss(pred: ImageGrid, label: ImageGrid) -> float:
    """Mean squared error between prediction and paired label."""
    p, y = _grid_values(pred), _grid_values(label)
    if p.shape != y.shape:
        raise ValueError(f"shape mismatch {p.shape} vs {y.shape}")
    val = float(np.mean((y - p) ** 2))
    if not np.isfinite(val):
        raise NonFiniteLossError("non-finite loss term source_mse")
    return val


def _target_pixelwise(pred, logvar, pseudo, mask, mask_outside_norm):
    p, lv, y, m = map(_grid_values, (pred, logvar, pseudo, mask))
    if not (p.shape == lv.shape == y.shape == m.shape):
        raise ValueError("target loss inputs disagree in shape")
    lv = np.clip(lv, *LOGVAR_RANGE)
    var = np.exp(lv)
    r = y - p
    # Overflow here is reported as NonFiniteLossError below, not a warning.
    with np.errstate(over="ignore", invalid="ignore"):
        if mask_outside_norm:
            data = m * r**2 / var
        else:
            data = (m * r) ** 2 / var
    bad = ~np.isfinite(data)
    if bad.any():
        idx = int(np.flatnonzero(bad)[0])
        raise NonFiniteLossError(f"non-finite target data term at pixel {idx}")
    return data, lv


def target_loss(pred: ImageGrid, logvar: ImageGrid, pseudo: ImageGrid, mask,
                beta: float = 1.0, mask_outside_norm: bool = False):
    """Masked heteroscedastic pseudo-label loss.

    Returns (value, TargetTerms) where value = data + beta * logvar
    means. mask may be a ReliabilityMask or a raw weight grid.
    """
    if beta < 0.0:
        raise ValueError(f"beta must be >= 0, got {beta}")
    data, lv = _target_pixelwise(pred, logvar, pseudo, mask, mask_outside_norm)
    terms = TargetTerms(float(np.mean(data)), float(np.mean(lv)), float(beta))
    return terms.data_term + beta * terms.logvar_term, terms


def gst_total(source_batch, target_batch, beta: float = 1.0,
              mask_outside_norm: bool = False, allow_empty_source: bool = False) -> LossBreakdown:
    """Joint objective over one source batch and one target batch.

    source_batch: sequence of (pred, label) grid pairs. target_batch:
    sequence of (pred, logvar, pseudo, mask) tuples. Empty target batch
    reduces to supervised source training; an empty source batch is an
    ablation that must be requested explicitly.
    """
    source_batch = list(source_batch or [])
    target_batch = list(target_batch or [])
    if not source_batch and not target_batch:
        raise ValueError("gst_total called with two empty batches")
    if not source_batch and not allow_empty_source:
        raise ValueError("empty source batch; pass allow_empty_source=True for ablations")
    if beta < 0.0:
        raise ValueError(f"beta must be >= 0, got {beta}")

    if source_batch:
        src = float(np.mean([source_loss(p, y) for p, y in source_batch]))
    else:
        src = 0.0

    if target_batch:
        data_means, lv_means = [], []
        for pred, logvar, pseudo, mask in target_batch:
            data, lv = _target_pixelwise(pred, logvar, pseudo, mask, mask_outside_norm)
            data_means.append(np.mean(data))
            lv_means.append(np.mean(lv))
        data_term = float(np.mean(data_means))
        lv_term = float(np.mean(lv_means))
    else:
        data_term = 0.0
        lv_term = 0.0

    total = src + data_term + beta * lv_term
    return LossBreakdown(src, data_term, lv_term, total, float(beta))


# ---------------------------------------------------------------------------
# tensor-path twins used inside the training loop (differentiable)
# ---------------------------------------------------------------------------

def source_mse_t(pred: torch.Tensor, label: torch.Tensor) -> torch.Tensor:
    return torch.mean((label - pred) ** 2)


def target_terms_t(pred: torch.Tensor, logvar: torch.Tensor, pseudo: torch.Tensor,
                   mask: torch.Tensor, mask_outside_norm: bool = False):
    """(data_mean, logvar_mean) tensors for the masked target loss."""
    lv = torch.clamp(logvar, *LOGVAR_RANGE)
    var = torch.exp(lv)
    r = pseudo - pred
    if mask_outside_norm:
        data = mask * r**2 / var
    else:
        data = (mask * r) ** 2 / var
    return data.mean(), lv.mean()
