"""Shared conv building blocks, deterministic init and checkpoint files.

All stochastic choices (weight init, dropout masks) are driven by
explicit torch.Generator objects so every forward and every training
run is a pure function of seeds. nn.Dropout cannot take a generator,
hence the functional seeded_dropout below.

Checkpoint layout: 8-byte magic, uint32 little-endian manifest length,
JSON manifest (descriptor dict plus ordered tensor names and shapes),
then all parameter tensors concatenated as little-endian float32.
"""

from __future__ import annotations

import json
import os
import struct

import numpy as np
import torch
from torch import nn

_MAGIC = b"GSTCKPT1"


class CheckpointError(RuntimeError):
    pass


def seeded_dropout(x: torch.Tensor, rate: float, generator) -> torch.Tensor:
    """Inverted dropout with an explicit generator; identity when the
    generator is None or the rate is zero."""
    if generator is None or rate <= 0.0:
        return x
    keep = 1.0 - rate
    mask = (torch.rand(x.shape, generator=generator, dtype=x.dtype) < keep).to(x.dtype)
    return x * mask / keep


def _conv_fan_in(module: nn.Module) -> int:
    w = module.weight
    if isinstance(module, nn.ConvTranspose2d):
        return w.shape[0] * w.shape[2] * w.shape[3]
    return w.shape[1] * w.shape[2] * w.shape[3]


def init_weights(module: nn.Module, seed: int, zero_modules=()):
    """He-style Gaussian init fully determined by the seed.

    Modules listed in zero_modules get zero weights and bias, useful for
    heads that should start at a known constant output.
    """
    g = torch.Generator().manual_seed(seed)
    zero_set = set(id(m) for m in zero_modules)
    with torch.no_grad():
        for m in module.modules():
            if not isinstance(m, (nn.Conv2d, nn.ConvTranspose2d)):
                continue
            if id(m) in zero_set:
                m.weight.zero_()
                if m.bias is not None:
                    m.bias.zero_()
                continue
            std = (2.0 / _conv_fan_in(m)) ** 0.5
            m.weight.normal_(0.0, std, generator=g)
            if m.bias is not None:
                m.bias.zero_()


class EncoderDecoderNet(nn.Module):
    """Strided-conv encoder, two-path-capable decoder with skip concats.

    depth downsampling stages halve the spatial dims each; inputs must
    be divisible by 2**depth. Decoder stages may apply seeded dropout.
    Built from plain convs and transposed convs (no pooling) so finite
    difference checks of the gradients behave well.
    """

    def __init__(self, depth: int = 3, base_channels: int = 16, heads: int = 1,
                 dropout_rate: float = 0.0, dtype=torch.float32):
        super().__init__()
        if depth < 1:
            raise ValueError(f"depth must be >= 1, got {depth}")
        if base_channels < 1:
            raise ValueError(f"base_channels must be >= 1, got {base_channels}")
        if heads not in (1, 2):
            raise ValueError(f"heads must be 1 or 2, got {heads}")
        self.depth = depth
        self.base_channels = base_channels
        self.heads = heads
        self.dropout_rate = float(dropout_rate)

        chans = [base_channels * (2**i) for i in range(depth + 1)]
        self.stem = nn.Conv2d(1, chans[0], 3, padding=1, dtype=dtype)
        self.downs = nn.ModuleList(
            nn.Conv2d(chans[i], chans[i + 1], 3, stride=2, padding=1, dtype=dtype)
            for i in range(depth)
        )
        self.mid = nn.Conv2d(chans[-1], chans[-1], 3, padding=1, dtype=dtype)

        self.ups = nn.ModuleList()
        self.mixes = nn.ModuleList()
        self.outs = nn.ModuleList()
        for _ in range(heads):
            ups, mixes = nn.ModuleList(), nn.ModuleList()
            for i in reversed(range(depth)):
                ups.append(nn.ConvTranspose2d(chans[i + 1], chans[i], 4, stride=2,
                                              padding=1, dtype=dtype))
                mixes.append(nn.Conv2d(chans[i] * 2, chans[i], 3, padding=1, dtype=dtype))
            self.ups.append(ups)
            self.mixes.append(mixes)
            self.outs.append(nn.Conv2d(chans[0], 1, 1, dtype=dtype))

        self.act_enc = nn.LeakyReLU(0.2)
        self.act_dec = nn.ReLU()

    def forward(self, x: torch.Tensor, dropout_generator=None):
        if x.shape[-2] % (2**self.depth) or x.shape[-1] % (2**self.depth):
            raise ValueError(
                f"spatial dims {tuple(x.shape[-2:])} not divisible by {2 ** self.depth}"
            )
        skips = []
        h = self.act_enc(self.stem(x))
        for down in self.downs:
            skips.append(h)
            h = self.act_enc(down(h))
        h = self.act_enc(self.mid(h))

        outputs = []
        for head in range(self.heads):
            g = h
            for stage, (up, mix) in enumerate(zip(self.ups[head], self.mixes[head])):
                g = self.act_dec(up(g))
                g = torch.cat([g, skips[self.depth - 1 - stage]], dim=1)
                g = self.act_dec(mix(g))
                g = seeded_dropout(g, self.dropout_rate, dropout_generator)
            outputs.append(self.outs[head](g))
        return outputs


def gradients(loss: torch.Tensor, module: nn.Module) -> dict:
    """Per-parameter gradient arrays for a scalar loss; raises on any
    non-finite entry, naming the offending tensor."""
    params = [p for _, p in module.named_parameters()]
    names = [n for n, _ in module.named_parameters()]
    grads = torch.autograd.grad(loss, params, allow_unused=True)
    out = {}
    for name, p, g in zip(names, params, grads):
        arr = (torch.zeros_like(p) if g is None else g).detach().cpu().numpy()
        if not np.all(np.isfinite(arr)):
            raise FloatingPointError(f"non-finite gradient in {name}")
        out[name] = arr
    return out


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def save_checkpoint(path: str, nets: dict, descriptor: dict):
    """Write one or more named networks to a single checkpoint file."""
    tensors = []
    payload = []
    for net_name, net in nets.items():
        for pname, p in net.named_parameters():
            full = f"{net_name}.{pname}"
            arr = p.detach().cpu().numpy().astype("<f4")
            tensors.append({"name": full, "shape": list(arr.shape)})
            payload.append(arr.tobytes())
    manifest = json.dumps({"descriptor": descriptor, "tensors": tensors}).encode("utf-8")
    tmp = path + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<I", len(manifest)))
        fh.write(manifest)
        fh.write(b"".join(payload))
    os.replace(tmp, path)


def read_checkpoint(path: str):
    """Return (descriptor, {tensor name: float32 array})."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[: len(_MAGIC)] != _MAGIC:
        raise CheckpointError(f"{path}: bad magic")
    (mlen,) = struct.unpack_from("<I", blob, len(_MAGIC))
    start = len(_MAGIC) + 4
    manifest = json.loads(blob[start : start + mlen].decode("utf-8"))
    offset = start + mlen
    tensors = {}
    for entry in manifest["tensors"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(blob, dtype="<f4", count=count, offset=offset)
        if arr.size != count:
            raise CheckpointError(f"{path}: truncated payload at {entry['name']}")
        tensors[entry["name"]] = arr.reshape(shape).copy()
        offset += count * 4
    if offset != len(blob):
        raise CheckpointError(f"{path}: {len(blob) - offset} trailing bytes")
    return manifest["descriptor"], tensors


def load_into(net: nn.Module, tensors: dict, net_name: str):
    """Copy checkpoint arrays into a network, verifying every shape."""
    prefix = net_name + "."
    wanted = {n: p for n, p in net.named_parameters()}
    for pname, p in wanted.items():
        full = prefix + pname
        if full not in tensors:
            raise CheckpointError(f"checkpoint lacks tensor {full}")
        arr = tensors[full]
        if tuple(arr.shape) != tuple(p.shape):
            raise CheckpointError(
                f"{full}: checkpoint shape {tuple(arr.shape)} != model {tuple(p.shape)}"
            )
    with torch.no_grad():
        for pname, p in wanted.items():
            p.copy_(torch.from_numpy(tensors[prefix + pname]).to(p.dtype))
