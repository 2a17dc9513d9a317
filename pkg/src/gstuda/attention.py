"""Spatial attention network producing per-pixel weights in [0, 1].

Same encoder-decoder family as the translator but single-headed, no
dropout, sigmoid output. The output head starts zeroed so the initial
attention map is exactly 0.5 everywhere; training signal arrives only
through the joint masked objective that multiplies attention into the
reliability weights.
"""

from __future__ import annotations

import numpy as np
import torch

from .data import ImageGrid
from .networks import EncoderDecoderNet, init_weights, load_into, read_checkpoint, save_checkpoint
from .util import derive_seed


class AttentionModel:
    kind = "attention"

    def __init__(self, depth: int = 3, base_channels: int = 16, init_seed: int = 0,
                 dtype=torch.float32):
        self.depth = depth
        self.base_channels = base_channels
        self.init_seed = init_seed
        self.dtype = dtype
        self.net = EncoderDecoderNet(depth, base_channels, heads=1,
                                     dropout_rate=0.0, dtype=dtype)
        init_weights(self.net, derive_seed(init_seed, "attention-init"),
                     zero_modules=(self.net.outs[0],))

    def descriptor(self) -> dict:
        return {
            "kind": self.kind,
            "depth": self.depth,
            "base_channels": self.base_channels,
            "init_seed": self.init_seed,
        }

    def forward_tensor(self, x: torch.Tensor) -> torch.Tensor:
        """Attention logits squashed to (0, 1); differentiable."""
        (logits,) = self.net(x)
        return torch.sigmoid(logits)

    def attend(self, x: ImageGrid) -> ImageGrid:
        """Deterministic attention map for one image."""
        xt = torch.tensor(x.values, dtype=self.dtype).reshape(1, 1, x.height, x.width)
        with torch.no_grad():
            a = self.forward_tensor(xt)
        return ImageGrid.from_array(a[0, 0].cpu().numpy().astype(np.float64), 0.0, 1.0)

    def save(self, path: str):
        save_checkpoint(path, {"attention": self.net}, self.descriptor())

    @classmethod
    def load(cls, path: str) -> "AttentionModel":
        desc, tensors = read_checkpoint(path)
        if desc.get("kind") != cls.kind:
            raise ValueError(f"{path}: checkpoint kind {desc.get('kind')!r}, expected attention")
        model = cls(desc["depth"], desc["base_channels"], desc["init_seed"])
        load_into(model.net, tensors, "attention")
        return model
