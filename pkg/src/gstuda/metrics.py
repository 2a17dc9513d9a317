"""Evaluation metrics and the target-domain evaluation harness.

SSIM uses an 11x11 Gaussian window (sigma 1.5, normalized to unit sum),
valid-mode windowing (no padding), and the standard stabilizers
C1 = (0.01 L)^2, C2 = (0.03 L)^2 where L is the nominal range span from
the grid metadata. PSNR is 10 log10(L^2 / MSE), capped at 100 dB with
the cap also returned for an exact zero MSE.

Both range-aware metrics evaluate on range-normalized values
(v - range_lo) / span, which is algebraically the standard definition
with L folded in and makes them exactly invariant when both images and
their range metadata go through one affine map.

The paired one-tailed t-test computes the t statistic by hand and maps
it to a p-value through the regularized incomplete beta function; the
alternative hypothesis is mean(a - b) > 0, i.e. small p means a tends
to exceed b.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import betainc

from .data import Dataset, ImageGrid, UnpairedSample

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
PSNR_CAP = 100.0


def hidden_target_for_eval(sample: UnpairedSample) -> ImageGrid:
    """Reveal a target sample's ground truth.

    Evaluation-only escape hatch; training modules must not import or
    reimplement this (a test enforces that statically).
    """
    if sample._hidden_target is None:
        raise ValueError(f"sample from {sample.subject_id} has no hidden target")
    return sample._hidden_target


def _check_pair(pred: ImageGrid, truth: ImageGrid, need_range: bool):
    if pred.values.shape != truth.values.shape:
        raise ValueError(f"shape mismatch {pred.values.shape} vs {truth.values.shape}")
    if need_range and (pred.range_lo != truth.range_lo or pred.range_hi != truth.range_hi):
        raise ValueError("range metadata mismatch between prediction and truth")


def l1(pred: ImageGrid, truth: ImageGrid) -> float:
    """Mean absolute error; range-agnostic."""
    _check_pair(pred, truth, need_range=False)
    return float(np.mean(np.abs(pred.values - truth.values)))


def _gaussian_kernel(size: int, sigma: float) -> np.ndarray:
    half = (size - 1) / 2.0
    coords = np.arange(size, dtype=np.float64) - half
    g = np.exp(-(coords**2) / (2.0 * sigma**2))
    k = np.outer(g, g)
    return k / k.sum()


def _windowed_mean(x: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    win = sliding_window_view(x, kernel.shape)
    return np.tensordot(win, kernel, axes=([2, 3], [0, 1]))


def ssim(pred: ImageGrid, truth: ImageGrid) -> float:
    """Mean structural similarity over all valid window positions."""
    _check_pair(pred, truth, need_range=True)
    if pred.height < SSIM_WINDOW or pred.width < SSIM_WINDOW:
        raise ValueError(
            f"image {pred.height}x{pred.width} smaller than the {SSIM_WINDOW}px window"
        )
    c1 = 0.01**2
    c2 = 0.03**2
    kernel = _gaussian_kernel(SSIM_WINDOW, SSIM_SIGMA)

    span = truth.span
    x = (pred.values - pred.range_lo) / span
    y = (truth.values - truth.range_lo) / span
    mu_x = _windowed_mean(x, kernel)
    mu_y = _windowed_mean(y, kernel)
    var_x = _windowed_mean(x * x, kernel) - mu_x**2
    var_y = _windowed_mean(y * y, kernel) - mu_y**2
    cov = _windowed_mean(x * y, kernel) - mu_x * mu_y

    num = (2.0 * mu_x * mu_y + c1) * (2.0 * cov + c2)
    den = (mu_x**2 + mu_y**2 + c1) * (var_x + var_y + c2)
    return float(np.mean(num / den))


def psnr(pred: ImageGrid, truth: ImageGrid) -> float:
    """Peak signal-to-noise ratio in dB against the nominal span."""
    _check_pair(pred, truth, need_range=True)
    span = truth.span
    x = (pred.values - pred.range_lo) / span
    y = (truth.values - truth.range_lo) / span
    mse = float(np.mean((x - y) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return float(min(-10.0 * math.log10(mse), PSNR_CAP))


@dataclass(frozen=True)
class TTestResult:
    t_stat: float
    p_value: float
    degenerate: bool = False


def paired_ttest_one_tailed(a, b) -> TTestResult:
    """Test whether paired values a exceed b on average.

    Identical inputs give t = 0, p = 0.5 by convention. A zero-variance
    nonzero difference has no finite t statistic; it is flagged
    degenerate with p 0 or 1 by the difference sign.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError("paired test needs two equal-length 1-D arrays")
    n = a.size
    if n < 2:
        raise ValueError(f"need at least 2 pairs, got {n}")
    d = a - b
    mean_d = float(d.mean())
    sd = float(d.std(ddof=1))
    if sd == 0.0:
        if mean_d == 0.0:
            return TTestResult(0.0, 0.5, degenerate=True)
        return TTestResult(math.copysign(math.inf, mean_d),
                           0.0 if mean_d > 0 else 1.0, degenerate=True)
    t = mean_d / (sd / math.sqrt(n))
    df = n - 1
    # Survival function of Student t via the regularized incomplete beta.
    tail = 0.5 * float(betainc(df / 2.0, 0.5, df / (df + t * t)))
    p = tail if t >= 0 else 1.0 - tail
    return TTestResult(float(t), float(p), degenerate=False)


METRIC_NAMES = ("l1", "ssim", "psnr")
_METRIC_FNS = {"l1": l1, "ssim": ssim, "psnr": psnr}
# Orientation used when testing "a better than b": L1 improves downward.
METRIC_HIGHER_IS_BETTER = {"l1": False, "ssim": True, "psnr": True}


@dataclass(frozen=True)
class MetricsReport:
    """Per-method summary plus per-slice values for significance tests."""

    per_method: dict
    per_sample: dict = field(repr=False, default_factory=dict)
    config_fingerprint: str = ""

    def methods(self):
        return list(self.per_method.keys())


def evaluate(models: dict, target_ds: Dataset, config_fingerprint: str = "") -> MetricsReport:
    """Score each model's deterministic predictions on every target slice.

    models maps method name to anything with .predict(grid) returning an
    object with a .mean grid. All target samples must carry hidden
    ground truth.
    """
    truths = [hidden_target_for_eval(s) for s in target_ds.samples]
    per_method, per_sample = {}, {}
    for name, model in models.items():
        values = {m: [] for m in METRIC_NAMES}
        for sample, truth in zip(target_ds.samples, truths):
            pred = model.predict(sample.input, stochastic=False).mean
            for m in METRIC_NAMES:
                values[m].append(_METRIC_FNS[m](pred, truth))
        per_sample[name] = {m: np.asarray(v) for m, v in values.items()}
        per_method[name] = {m: float(np.mean(v)) for m, v in values.items()}
    return MetricsReport(per_method, per_sample, config_fingerprint)
