"""Reliability masks over per-pixel uncertainty maps.

Three families: a binary keep-fraction mask driven by a linearly
growing schedule (self-paced curriculum), a continuous exp(-u) map,
and attentive variants that multiply a learned attention map into
either of those. The binary mask keeps exactly floor(rho * N) pixels,
breaking uncertainty ties by ascending row-major pixel index.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from .data import ImageGrid

log = logging.getLogger(__name__)

MASK_KINDS = ("binary", "continuous", "attentive", "attentive_binary")


@dataclass(frozen=True, eq=False)
class ReliabilityMask:
    """Per-pixel weights in [0, 1] plus provenance.

    epsilon is only meaningful for binary masks: the smallest excluded
    uncertainty value, +inf when nothing was excluded.
    """

    kind: str
    weights: ImageGrid
    epsilon: float | None = None

    def __post_init__(self):
        if self.kind not in MASK_KINDS:
            raise ValueError(f"unknown mask kind {self.kind!r}")
        w = self.weights.values
        if w.min() < 0.0 or w.max() > 1.0:
            raise ValueError(f"mask weights outside [0, 1]: [{w.min()}, {w.max()}]")
        if self.kind == "binary" and self.epsilon is None:
            raise ValueError("binary mask requires an epsilon threshold")


@dataclass(frozen=True)
class RhoSchedule:
    """Linear keep-fraction ramp over a fixed number of iterations."""

    start: float = 0.30
    end: float = 0.80
    total_iters: int = 1

    def __post_init__(self):
        if not 0.0 <= self.start <= 1.0 or not 0.0 <= self.end <= 1.0:
            raise ValueError(f"rho bounds must lie in [0, 1]: {self.start}, {self.end}")
        if self.end < self.start:
            raise ValueError(f"schedule must be nondecreasing: {self.start} -> {self.end}")
        if self.total_iters < 1:
            raise ValueError(f"total_iters must be >= 1, got {self.total_iters}")


def rho_at(schedule: RhoSchedule, iter_index: int) -> float:
    """Keep fraction at a given iteration, clamped past the end."""
    if iter_index < 0:
        raise ValueError(f"negative iteration index {iter_index}")
    last = schedule.total_iters - 1
    if iter_index >= schedule.total_iters:
        log.warning("rho_at called at iter %d past schedule end %d; clamping",
                    iter_index, last)
        return schedule.end
    if last == 0:
        return schedule.start
    return schedule.start + (schedule.end - schedule.start) * (iter_index / last)


def binary_mask(uncertainty: ImageGrid, rho: float) -> ReliabilityMask:
    """Keep the floor(rho * N) most certain pixels.

    Ties in the uncertainty map are resolved toward the lower row-major
    index via a stable argsort. epsilon records the smallest excluded
    uncertainty, +inf when rho admits every pixel.
    """
    if not 0.0 <= rho <= 1.0:
        raise ValueError(f"rho must be in [0, 1], got {rho}")
    u = uncertainty.values.ravel()
    n = u.size
    count = int(math.floor(rho * n))
    order = np.argsort(u, kind="stable")
    flat = np.zeros(n)
    flat[order[:count]] = 1.0
    epsilon = float(u[order[count]]) if count < n else math.inf
    weights = ImageGrid(uncertainty.height, uncertainty.width,
                        flat.reshape(uncertainty.values.shape), 0.0, 1.0)
    return ReliabilityMask("binary", weights, epsilon)


def continuous_mask(uncertainty: ImageGrid) -> ReliabilityMask:
    """Soft reliability exp(-u); requires a nonnegative uncertainty map."""
    u = uncertainty.values
    if u.min() < 0.0:
        raise ValueError(f"uncertainty must be nonnegative, min={u.min()}")
    weights = ImageGrid(uncertainty.height, uncertainty.width, np.exp(-u), 0.0, 1.0)
    return ReliabilityMask("continuous", weights)


def attentive_mask(attention: ImageGrid, base: ReliabilityMask) -> ReliabilityMask:
    """Pixelwise product of an attention map with a base mask.

    The base is usually continuous; a binary base gives the gated
    variant. The product can only shrink weights, so the [0, 1] bound
    is preserved.
    """
    a = attention.values
    if a.min() < 0.0 or a.max() > 1.0:
        raise ValueError("attention values must lie in [0, 1]")
    if a.shape != base.weights.values.shape:
        raise ValueError("attention/base shape mismatch")
    kind = "attentive" if base.kind == "continuous" else "attentive_binary"
    weights = base.weights.with_values(a * base.weights.values)
    return ReliabilityMask(kind, weights, base.epsilon)
