import math

import numpy as np
import pytest
import scipy.stats

from gstuda.data import Dataset, ImageGrid, UnpairedSample
from gstuda.metrics import (TTestResult, evaluate, hidden_target_for_eval, l1,
                            paired_ttest_one_tailed, psnr, ssim)

from conftest import grid01, tiny_task


def test_l1_hand_values():
    a = grid01([[0.0, 0.5], [1.0, 0.25]])
    b = grid01([[0.5, 0.5], [0.0, 0.25]])
    assert l1(a, a) == 0.0
    assert abs(l1(a, b) - (0.5 + 0.0 + 1.0 + 0.0) / 4.0) < 1e-15


def brute_force_ssim(x, y, span):
    # direct transcription of the windowed formula, plain loops
    size, sigma = 11, 1.5
    half = (size - 1) / 2.0
    coords = np.arange(size) - half
    k1 = np.exp(-(coords**2) / (2 * sigma**2))
    kernel = np.outer(k1, k1)
    kernel = kernel / kernel.sum()
    c1, c2 = (0.01 * span) ** 2, (0.03 * span) ** 2
    h, w = x.shape
    vals = []
    for i in range(h - size + 1):
        for j in range(w - size + 1):
            wx = x[i : i + size, j : j + size]
            wy = y[i : i + size, j : j + size]
            mx = (kernel * wx).sum()
            my = (kernel * wy).sum()
            vx = (kernel * wx * wx).sum() - mx * mx
            vy = (kernel * wy * wy).sum() - my * my
            cxy = (kernel * wx * wy).sum() - mx * my
            vals.append(((2 * mx * my + c1) * (2 * cxy + c2)) /
                        ((mx * mx + my * my + c1) * (vx + vy + c2)))
    return float(np.mean(vals))


def test_ssim_matches_brute_force_reference():
    rng = np.random.default_rng(11)
    x = rng.random((20, 24))
    y = np.clip(x + rng.normal(0, 0.1, x.shape), 0, 1)
    got = ssim(grid01(x), grid01(y))
    want = brute_force_ssim(x, y, 1.0)
    assert abs(got - want) < 1e-9


def test_ssim_identity_and_bounds():
    rng = np.random.default_rng(12)
    x = grid01(rng.random((16, 16)))
    assert ssim(x, x) == 1.0
    noisy = grid01(np.clip(x.values + rng.normal(0, 0.3, (16, 16)), 0, 1))
    assert ssim(x, noisy) < 1.0


def test_ssim_input_validation():
    small = grid01(np.zeros((8, 8)))
    with pytest.raises(ValueError):
        ssim(small, small)
    a = grid01(np.zeros((16, 16)))
    b = ImageGrid.from_array(np.zeros((16, 16)), 0.0, 255.0)
    with pytest.raises(ValueError):
        ssim(a, b)  # mismatched range metadata


def test_psnr_hand_value_255():
    truth = ImageGrid.from_array(np.zeros((8, 8)), 0.0, 255.0)
    pred = ImageGrid.from_array(np.ones((8, 8)), 0.0, 255.0)  # MSE exactly 1
    value = psnr(pred, truth)
    assert abs(value - 20.0 * math.log10(255.0)) < 1e-12
    assert abs(value - 48.1308) < 0.01


def test_psnr_cap_and_symmetry():
    x = grid01(np.full((4, 4), 0.25))
    assert psnr(x, x) == 100.0
    almost = grid01(x.values + 1e-9)
    assert psnr(almost, x) == 100.0
    rng = np.random.default_rng(13)
    a, b = grid01(rng.random((6, 6))), grid01(rng.random((6, 6)))
    assert psnr(a, b) == psnr(b, a)


def test_metrics_affine_rescaling_invariance():
    rng = np.random.default_rng(14)
    x = rng.random((16, 16))
    y = np.clip(x + rng.normal(0, 0.05, x.shape), 0, 1)
    base_ssim = ssim(grid01(x), grid01(y))
    base_psnr = psnr(grid01(x), grid01(y))
    for scale, offset in ((255.0, 0.0), (2.5, -1.0), (0.1, 3.0)):
        gx = ImageGrid.from_array(scale * x + offset, offset, scale + offset)
        gy = ImageGrid.from_array(scale * y + offset, offset, scale + offset)
        assert abs(ssim(gx, gy) - base_ssim) < 1e-9
        assert abs(psnr(gx, gy) - base_psnr) < 1e-9


def hand_t(a, b):
    d = np.asarray(a, dtype=float) - np.asarray(b, dtype=float)
    return d.mean() / (d.std(ddof=1) / math.sqrt(d.size))


def test_ttest_matches_hand_and_scipy():
    a = np.array([1.2, 0.9, 1.4, 1.1, 0.8])
    b = np.array([1.0, 0.7, 1.5, 0.9, 0.6])
    res = paired_ttest_one_tailed(a, b)
    assert abs(res.t_stat - hand_t(a, b)) < 1e-12
    want = scipy.stats.ttest_rel(a, b, alternative="greater")
    assert abs(res.t_stat - want.statistic) < 1e-9
    assert abs(res.p_value - want.pvalue) < 1e-9
    assert not res.degenerate
    # orientation: swapping the arguments mirrors the p-value
    res_rev = paired_ttest_one_tailed(b, a)
    assert abs(res.p_value + res_rev.p_value - 1.0) < 1e-12


def test_ttest_fixed_three_vector():
    a, b = [2.0, 3.0, 4.0], [1.0, 1.5, 2.0]
    res = paired_ttest_one_tailed(a, b)
    # d = [1, 1.5, 2], mean 1.5, sd 0.5, n 3 -> t = 1.5 / (0.5/sqrt(3))
    assert abs(res.t_stat - 1.5 / (0.5 / math.sqrt(3.0))) < 1e-12


def test_ttest_degenerate_cases():
    same = paired_ttest_one_tailed([1.0, 2.0, 3.0], [1.0, 2.0, 3.0])
    assert same == TTestResult(0.0, 0.5, True)
    shifted = paired_ttest_one_tailed([2.0, 3.0, 4.0], [1.0, 2.0, 3.0])
    assert shifted.degenerate and shifted.p_value == 0.0 and shifted.t_stat == math.inf
    worse = paired_ttest_one_tailed([0.0, 1.0, 2.0], [1.0, 2.0, 3.0])
    assert worse.degenerate and worse.p_value == 1.0
    with pytest.raises(ValueError):
        paired_ttest_one_tailed([1.0], [2.0])
    with pytest.raises(ValueError):
        paired_ttest_one_tailed([1.0, 2.0], [1.0, 2.0, 3.0])


class _ConstModel:
    """Predicts a constant image; lets the harness run without torch."""

    def __init__(self, value, like):
        self.value = value
        self.like = like

    def predict(self, x, stochastic=False, rng_seed=0):
        from gstuda.translator import TranslatorOutput
        mean = self.like.with_values(np.full_like(self.like.values, self.value))
        return TranslatorOutput(mean, self.like.with_values(np.zeros_like(self.like.values)))


def test_evaluate_scores_every_slice():
    _, tgt = tiny_task()
    like = tgt.samples[0].input
    models = {"flat0": _ConstModel(0.0, like), "flat1": _ConstModel(0.3, like)}
    report = evaluate(models, tgt, config_fingerprint="abc")
    assert report.config_fingerprint == "abc"
    assert set(report.per_method) == {"flat0", "flat1"}
    for name in models:
        assert len(report.per_sample[name]["l1"]) == len(tgt)
        want = np.mean(report.per_sample[name]["l1"])
        assert abs(report.per_method[name]["l1"] - want) < 1e-12


def test_evaluate_requires_hidden_targets():
    _, tgt = tiny_task()
    bare = Dataset("target", tuple(UnpairedSample(s.input, s.subject_id)
                                   for s in tgt.samples), tgt.seed)
    with pytest.raises(ValueError, match="hidden target"):
        evaluate({"m": _ConstModel(0.0, bare.samples[0].input)}, bare)
    with pytest.raises(ValueError):
        hidden_target_for_eval(bare.samples[0])
