"""Procedural two-domain image translation tasks.

A task is a set of smooth blob phantoms (the translation ground truth)
rendered into observed inputs by a domain-specific appearance model:
multiplicative stripe tagging, gamma distortion, brightness offset,
additive Gaussian noise, optional background pedestal. Source and
target domains share the phantom distribution and differ only in their
ShiftConfig, so the domain gap is fully parameterized and a zero-gap
control is one config away.

Intensities live in [0, 1]. Rendered values are quantized through
float32 so datasets round-trip bit-exactly through the raw-file format.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, replace

import numpy as np

from .data import Dataset, ImageGrid, PairedSample, UnpairedSample
from .util import derive_seed

SYNTH_RANGE = (0.0, 1.0)


@dataclass(frozen=True)
class ShiftConfig:
    """Appearance parameters for one domain's rendering."""

    tag_period: float = 8.0
    tag_contrast: float = 0.6
    gamma: float = 1.0
    brightness_offset: float = 0.0
    noise_sigma: float = 0.0
    background_level: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.tag_period < 2.0:
            raise ValueError(f"tag_period must be >= 2, got {self.tag_period}")
        if not 0.0 <= self.tag_contrast <= 1.0:
            raise ValueError(f"tag_contrast must be in [0, 1], got {self.tag_contrast}")
        if self.gamma <= 0.0:
            raise ValueError(f"gamma must be positive, got {self.gamma}")
        if self.noise_sigma < 0.0:
            raise ValueError(f"noise_sigma must be >= 0, got {self.noise_sigma}")
        if not 0.0 <= self.background_level < 1.0:
            raise ValueError(f"background_level must be in [0, 1), got {self.background_level}")

    def same_appearance(self, other: "ShiftConfig") -> bool:
        """True when all rendering parameters match, ignoring seeds."""
        return (
            self.tag_period == other.tag_period
            and self.tag_contrast == other.tag_contrast
            and self.gamma == other.gamma
            and self.brightness_offset == other.brightness_offset
            and self.noise_sigma == other.noise_sigma
            and self.background_level == other.background_level
        )


@dataclass(frozen=True)
class PhantomSpec:
    """Geometry of the clean blob phantoms."""

    height: int = 64
    width: int = 64
    n_blobs: int = 5
    blob_scale: float = 7.0
    seed: int = 0

    def __post_init__(self):
        if self.height < 8 or self.width < 8:
            raise ValueError(f"phantom too small: {self.height}x{self.width}")
        if self.n_blobs < 1:
            raise ValueError(f"n_blobs must be >= 1, got {self.n_blobs}")
        if self.blob_scale <= 0.0:
            raise ValueError(f"blob_scale must be positive, got {self.blob_scale}")


def _f32(arr: np.ndarray) -> np.ndarray:
    # Quantize through float32 so disk round-trips are exact.
    return arr.astype(np.float32).astype(np.float64)


def make_phantom(spec: PhantomSpec) -> ImageGrid:
    """Render anisotropic Gaussian blobs under an edge-fade window.

    The outer margin is exactly zero, interior peaks reach 0.95. Output
    is a pure function of the spec.
    """
    rng = np.random.default_rng(spec.seed)
    yy, xx = np.mgrid[0 : spec.height, 0 : spec.width].astype(np.float64)
    field = np.zeros((spec.height, spec.width))
    for _ in range(spec.n_blobs):
        cy = rng.uniform(0.28, 0.72) * (spec.height - 1)
        cx = rng.uniform(0.28, 0.72) * (spec.width - 1)
        sy = spec.blob_scale * rng.uniform(0.65, 1.45)
        sx = sy * rng.uniform(0.7, 1.4)
        amp = rng.uniform(0.5, 1.0)
        field += amp * np.exp(-0.5 * (((yy - cy) / sy) ** 2 + ((xx - cx) / sx) ** 2))

    edge = np.minimum(np.minimum(yy, xx), np.minimum(spec.height - 1 - yy, spec.width - 1 - xx))
    d = edge / float(min(spec.height, spec.width))
    w = np.clip((d - 0.08) / 0.10, 0.0, 1.0)
    w = w * w * (3.0 - 2.0 * w)

    v = field * w
    peak = v.max()
    if peak > 0.0:
        v = v * (0.95 / peak)
    return ImageGrid.from_array(_f32(v), *SYNTH_RANGE)


def foreground_mask(grid: ImageGrid, threshold_frac: float = 0.05) -> np.ndarray:
    """Boolean mask of pixels above threshold_frac of the nominal span."""
    return grid.values > grid.range_lo + threshold_frac * grid.span


def _stripe_pattern(height: int, width: int, period: float, contrast: float) -> np.ndarray:
    # Multiplicative tagging stripes along rows; contrast 1 gives exact
    # zero valleys wherever cos(2*pi*i/period) = 1.
    rows = np.arange(height, dtype=np.float64)
    profile = 1.0 - contrast * 0.5 * (1.0 + np.cos(2.0 * np.pi * rows / period))
    return np.repeat(profile[:, None], width, axis=1)


def render_pair(phantom: ImageGrid, shift: ShiftConfig, subject_id: str = "sample") -> PairedSample:
    """Observed input for a phantom under one domain's appearance model.

    The pair's target is the clean phantom itself; the input applies, in
    order: gamma remap, stripe tagging, background pedestal, brightness
    offset, additive noise, clipping to the nominal range.
    """
    lo, hi = phantom.range_lo, phantom.range_hi
    span = hi - lo
    norm = np.clip((phantom.values - lo) / span, 0.0, 1.0)
    shaped = lo + span * norm**shift.gamma

    pattern = _stripe_pattern(phantom.height, phantom.width, shift.tag_period, shift.tag_contrast)
    obs = shift.background_level * span + pattern * shaped
    obs = obs + shift.brightness_offset
    if shift.noise_sigma > 0.0:
        rng = np.random.default_rng(derive_seed(shift.seed, "noise"))
        obs = obs + rng.normal(0.0, shift.noise_sigma, obs.shape)
    obs = np.clip(obs, lo, hi)
    inp = ImageGrid.from_array(_f32(obs), lo, hi)
    return PairedSample(inp, phantom, subject_id)


def _render_slice(spec: PhantomSpec, shift: ShiftConfig, domain_tag: str,
                  subject_index: int, slice_index: int, subject_id: str) -> PairedSample:
    pseed = derive_seed(spec.seed, domain_tag, subject_index, slice_index)
    phantom = make_phantom(replace(spec, seed=pseed))
    sseed = derive_seed(shift.seed, domain_tag, subject_index, slice_index)
    return render_pair(phantom, replace(shift, seed=sseed), subject_id)


def build_task(spec: PhantomSpec, source_shift: ShiftConfig, target_shift: ShiftConfig,
               n_source_subjects: int = 10, source_slices: int = 20,
               n_target_subjects: int = 1, target_slices: int = 50):
    """Generate the paired source dataset and unpaired target dataset.

    Target ground truth is kept only in the samples' hidden slot. All
    content derives from the phantom and shift seeds; the same arguments
    always rebuild identical datasets.
    """
    if n_source_subjects < 1 or n_target_subjects < 1:
        raise ValueError("need at least one subject per domain")
    if source_slices < 1 or target_slices < 1:
        raise ValueError("need at least one slice per subject")
    if source_shift.same_appearance(target_shift):
        warnings.warn("source and target shifts share all appearance parameters; "
                      "the domain gap is zero", stacklevel=2)

    source_samples = []
    for si in range(n_source_subjects):
        sid = f"src{si:02d}"
        for k in range(source_slices):
            source_samples.append(_render_slice(spec, source_shift, "source", si, k, sid))

    target_samples = []
    for si in range(n_target_subjects):
        sid = f"tgt{si:02d}"
        for k in range(target_slices):
            pair = _render_slice(spec, target_shift, "target", si, k, sid)
            target_samples.append(UnpairedSample(pair.input, sid, pair.target))

    source_ds = Dataset("source", tuple(source_samples), derive_seed(spec.seed, "source"))
    target_ds = Dataset("target", tuple(target_samples), derive_seed(spec.seed, "target"))
    return source_ds, target_ds


def build_probe_slice(spec: PhantomSpec, target_shift: ShiftConfig,
                      target_slices: int, subject_index: int = 0) -> UnpairedSample:
    """One extra target-domain slice past the end of the training set.

    Uses the same derivation chain as build_task with slice index equal
    to target_slices, so it never collides with training slices and is
    stable across runs.
    """
    sid = f"tgt{subject_index:02d}"
    pair = _render_slice(spec, target_shift, "target", subject_index, target_slices, sid)
    return UnpairedSample(pair.input, sid, pair.target)
