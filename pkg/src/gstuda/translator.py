"""Image translator with a mean head and a log-variance head.

Both heads share the encoder and bottleneck; each has its own decoder.
Dropout lives only in the decoder stages, so stochastic forwards vary
both heads while the encoding stays fixed. A stochastic forward is a
pure function of (weights, input, rng_seed).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .data import ImageGrid
from .losses import LOGVAR_RANGE
from .networks import EncoderDecoderNet, init_weights, load_into, read_checkpoint, save_checkpoint
from .util import derive_seed


@dataclass(frozen=True, eq=False)
class TranslatorOutput:
    """Predicted mean image plus per-pixel log-variance map."""

    mean: ImageGrid
    logvar: ImageGrid

    def __post_init__(self):
        if self.mean.values.shape != self.logvar.values.shape:
            raise ValueError("mean/logvar shape mismatch")


class TranslatorModel:
    """Wraps the dual-head network with grid-level in/out conversion."""

    kind = "translator"

    def __init__(self, depth: int = 3, base_channels: int = 16, dropout_rate: float = 0.2,
                 init_seed: int = 0, dtype=torch.float32):
        if not 0.0 <= dropout_rate < 1.0:
            raise ValueError(f"dropout_rate must be in [0, 1), got {dropout_rate}")
        self.depth = depth
        self.base_channels = base_channels
        self.dropout_rate = float(dropout_rate)
        self.init_seed = init_seed
        self.dtype = dtype
        self.net = EncoderDecoderNet(depth, base_channels, heads=2,
                                     dropout_rate=dropout_rate, dtype=dtype)
        # The log-variance output stage starts at zero so sigma^2 is
        # exactly 1 everywhere until the heteroscedastic loss trains it;
        # a randomly initialized variance head would otherwise emit
        # seed-dependent exp() spikes on inputs it has never seen.
        init_weights(self.net, derive_seed(init_seed, "translator-init"),
                     zero_modules=(self.net.outs[1],))

    def descriptor(self) -> dict:
        return {
            "kind": self.kind,
            "depth": self.depth,
            "base_channels": self.base_channels,
            "dropout_rate": self.dropout_rate,
            "init_seed": self.init_seed,
        }

    def forward_tensor(self, x: torch.Tensor, dropout_generator=None):
        """(mean, logvar) tensors; differentiable."""
        mean, logvar = self.net(x, dropout_generator=dropout_generator)
        return mean, logvar

    def predict(self, x: ImageGrid, stochastic: bool = False, rng_seed: int = 0) -> TranslatorOutput:
        """Single-image forward pass.

        stochastic=False ignores rng_seed entirely and applies no
        dropout; stochastic=True draws dropout masks from a generator
        seeded with rng_seed, so repeats with one seed are bit-identical
        and different seeds generally differ.
        """
        gen = None
        if stochastic and self.dropout_rate > 0.0:
            gen = torch.Generator().manual_seed(rng_seed % 2**63)
        xt = torch.tensor(x.values, dtype=self.dtype).reshape(1, 1, x.height, x.width)
        with torch.no_grad():
            mean, logvar = self.forward_tensor(xt, dropout_generator=gen)
        mean_grid = ImageGrid.from_array(
            mean[0, 0].cpu().numpy().astype(np.float64), x.range_lo, x.range_hi)
        logvar_grid = ImageGrid.from_array(
            logvar[0, 0].cpu().numpy().astype(np.float64), *LOGVAR_RANGE)
        return TranslatorOutput(mean_grid, logvar_grid)

    def save(self, path: str):
        save_checkpoint(path, {"translator": self.net}, self.descriptor())

    @classmethod
    def load(cls, path: str) -> "TranslatorModel":
        desc, tensors = read_checkpoint(path)
        if desc.get("kind") != cls.kind:
            raise ValueError(f"{path}: checkpoint kind {desc.get('kind')!r}, expected translator")
        model = cls(desc["depth"], desc["base_channels"], desc["dropout_rate"],
                    desc["init_seed"])
        load_into(model.net, tensors, "translator")
        return model
