"""Image containers, datasets and their on-disk layout.

Images are immutable 2-D float64 grids with explicit nominal intensity
range metadata. Datasets are flat sample collections tagged with the
domain they come from; target-domain samples keep their ground truth in
a private slot that training code has no accessor for (evaluation code
reveals it explicitly, see metrics.hidden_target_for_eval).

On disk a dataset is a directory: a key-value manifest plus one raw
float32 little-endian row-major .bin file per image, named
<subject_id>_<index>.<role>.bin with role "input" or "target".
"""

from __future__ import annotations

import math
import os
import re
from dataclasses import dataclass, field

import numpy as np

DOMAIN_TAGS = ("source", "target")
_SUBJECT_ID_RE = re.compile(r"^[A-Za-z0-9-]+$")
_MANIFEST_NAME = "manifest.txt"


class DataError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class ImageGrid:
    """2-D scalar field with a nominal [range_lo, range_hi] intensity range.

    values is always float64, C-contiguous and write-protected. The range
    is metadata used by range-aware metrics; values may exceed it (for
    example variance or log-variance maps reuse the container).
    """

    height: int
    width: int
    values: np.ndarray
    range_lo: float = 0.0
    range_hi: float = 255.0

    def __post_init__(self):
        if self.height < 1 or self.width < 1:
            raise DataError(f"bad grid shape {self.height}x{self.width}")
        arr = np.ascontiguousarray(np.asarray(self.values, dtype=np.float64))
        if arr.shape != (self.height, self.width):
            raise DataError(
                f"values shape {arr.shape} does not match {self.height}x{self.width}"
            )
        if not np.all(np.isfinite(arr)):
            raise DataError("grid contains non-finite values")
        if not (math.isfinite(self.range_lo) and math.isfinite(self.range_hi)):
            raise DataError("non-finite range metadata")
        if self.range_lo >= self.range_hi:
            raise DataError(f"empty range [{self.range_lo}, {self.range_hi}]")
        arr.setflags(write=False)
        object.__setattr__(self, "values", arr)

    @classmethod
    def from_array(cls, arr, range_lo: float = 0.0, range_hi: float = 255.0) -> "ImageGrid":
        arr = np.asarray(arr, dtype=np.float64)
        if arr.ndim != 2:
            raise DataError(f"expected 2-D array, got ndim={arr.ndim}")
        return cls(arr.shape[0], arr.shape[1], arr, range_lo, range_hi)

    def with_values(self, arr) -> "ImageGrid":
        """New grid with the same shape and range but different values."""
        return ImageGrid.from_array(arr, self.range_lo, self.range_hi)

    @property
    def span(self) -> float:
        return self.range_hi - self.range_lo


@dataclass(frozen=True, eq=False)
class PairedSample:
    """Source-domain sample: input image and its translation target."""

    input: ImageGrid
    target: ImageGrid
    subject_id: str

    def __post_init__(self):
        _check_subject_id(self.subject_id)
        if self.input.values.shape != self.target.values.shape:
            raise DataError("paired sample input/target shape mismatch")


@dataclass(frozen=True, eq=False)
class UnpairedSample:
    """Target-domain sample: input only.

    The ground truth, when synthesized, rides along in _hidden_target so
    final evaluation is possible, but no training-facing accessor exists.
    """

    input: ImageGrid
    subject_id: str
    _hidden_target: ImageGrid | None = field(default=None, repr=False)

    def __post_init__(self):
        _check_subject_id(self.subject_id)
        if self._hidden_target is not None:
            if self._hidden_target.values.shape != self.input.values.shape:
                raise DataError("hidden target shape mismatch")


def _check_subject_id(subject_id: str):
    # No underscores: the persistence filename grammar splits on "_".
    if not _SUBJECT_ID_RE.match(subject_id):
        raise DataError(f"invalid subject id {subject_id!r}")


@dataclass(frozen=True, eq=False)
class Dataset:
    """Ordered collection of same-shaped samples from one domain."""

    domain_tag: str
    samples: tuple
    seed: int = 0

    def __post_init__(self):
        if self.domain_tag not in DOMAIN_TAGS:
            raise DataError(f"unknown domain tag {self.domain_tag!r}")
        samples = tuple(self.samples)
        if not samples:
            raise DataError("dataset is empty")
        want = PairedSample if self.domain_tag == "source" else UnpairedSample
        shape = samples[0].input.values.shape
        for s in samples:
            if not isinstance(s, want):
                raise DataError(
                    f"{self.domain_tag} dataset holds a {type(s).__name__}"
                )
            if s.input.values.shape != shape:
                raise DataError("mixed image shapes in dataset")
        object.__setattr__(self, "samples", samples)

    def __len__(self) -> int:
        return len(self.samples)

    @property
    def height(self) -> int:
        return self.samples[0].input.height

    @property
    def width(self) -> int:
        return self.samples[0].input.width


def batch_iter(dataset: Dataset, batch_size: int, epoch_seed: int):
    """Yield shuffled batches covering the dataset exactly once.

    The permutation is a pure function of (dataset.seed, epoch_seed); the
    final batch may be short. batch_size larger than the dataset yields a
    single full-dataset batch.
    """
    if batch_size < 1:
        raise DataError(f"batch_size must be >= 1, got {batch_size}")
    rng = np.random.default_rng(np.random.SeedSequence([dataset.seed, epoch_seed]))
    order = rng.permutation(len(dataset))
    for lo in range(0, len(order), batch_size):
        yield [dataset.samples[i] for i in order[lo : lo + batch_size]]


# ---------------------------------------------------------------------------
# persistence
# ---------------------------------------------------------------------------

def _write_bin(path: str, grid: ImageGrid):
    grid.values.astype("<f4").tofile(path)


def _read_bin(path: str, height: int, width: int, range_lo: float, range_hi: float) -> ImageGrid:
    raw = np.fromfile(path, dtype="<f4")
    if raw.size != height * width:
        raise DataError(f"{path}: expected {height * width} floats, found {raw.size}")
    return ImageGrid(height, width, raw.reshape(height, width).astype(np.float64),
                     range_lo, range_hi)


def save_dataset(dataset: Dataset, dirpath: str):
    """Write manifest plus per-sample .bin files. Round-trips bit-exactly
    provided the float64 values are exactly representable in float32
    (the synthetic generator quantizes through float32 to guarantee it).
    """
    os.makedirs(dirpath, exist_ok=True)
    first = dataset.samples[0].input
    lines = [
        f"domain_tag = {dataset.domain_tag}",
        f"count = {len(dataset)}",
        f"height = {dataset.height}",
        f"width = {dataset.width}",
        f"range_lo = {first.range_lo!r}",
        f"range_hi = {first.range_hi!r}",
        f"seed = {dataset.seed}",
    ]
    with open(os.path.join(dirpath, _MANIFEST_NAME), "w") as fh:
        fh.write("\n".join(lines) + "\n")
    for i, s in enumerate(dataset.samples):
        stem = f"{s.subject_id}_{i}"
        _write_bin(os.path.join(dirpath, f"{stem}.input.bin"), s.input)
        if isinstance(s, PairedSample):
            _write_bin(os.path.join(dirpath, f"{stem}.target.bin"), s.target)
        elif s._hidden_target is not None:
            _write_bin(os.path.join(dirpath, f"{stem}.target.bin"), s._hidden_target)


def _parse_manifest(path: str) -> dict:
    out = {}
    with open(path) as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise DataError(f"{path}:{lineno}: expected 'key = value'")
            key, _, val = line.partition("=")
            out[key.strip()] = val.strip()
    return out


def load_dataset(dirpath: str) -> Dataset:
    manifest_path = os.path.join(dirpath, _MANIFEST_NAME)
    if not os.path.exists(manifest_path):
        raise DataError(f"no manifest at {manifest_path}")
    man = _parse_manifest(manifest_path)
    try:
        tag = man["domain_tag"]
        count = int(man["count"])
        height, width = int(man["height"]), int(man["width"])
        lo, hi = float(man["range_lo"]), float(man["range_hi"])
        seed = int(man["seed"])
    except KeyError as exc:
        raise DataError(f"{manifest_path}: missing key {exc}") from exc

    samples = []
    for i in range(count):
        matches = [
            f for f in os.listdir(dirpath)
            if f.endswith(f"_{i}.input.bin")
        ]
        if len(matches) != 1:
            raise DataError(f"{dirpath}: expected one input for index {i}, found {len(matches)}")
        subject_id = matches[0][: -len(f"_{i}.input.bin")]
        image = _read_bin(os.path.join(dirpath, matches[0]), height, width, lo, hi)
        target_path = os.path.join(dirpath, f"{subject_id}_{i}.target.bin")
        target = None
        if os.path.exists(target_path):
            target = _read_bin(target_path, height, width, lo, hi)
        if tag == "source":
            if target is None:
                raise DataError(f"{dirpath}: source sample {i} lacks a target file")
            samples.append(PairedSample(image, target, subject_id))
        else:
            samples.append(UnpairedSample(image, subject_id, target))
    return Dataset(tag, tuple(samples), seed)
