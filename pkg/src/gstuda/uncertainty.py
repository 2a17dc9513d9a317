"""Monte Carlo dropout ensembles and uncertainty decomposition.

An ensemble is K stochastic forward passes of the translator on one
input, each seeded independently so the whole ensemble is reproducible
bit for bit. Epistemic uncertainty is the biased (divide by K) variance
of the member means; aleatoric is the mean of the members' predicted
variances; total is their sum.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import ImageGrid
from .losses import variance_from_logvar
from .translator import TranslatorOutput
from .util import derive_seed

# Nominal range tag for uncertainty maps; values may exceed it.
_U_RANGE = (0.0, 1.0)


@dataclass(frozen=True, eq=False)
class DropoutEnsemble:
    members: tuple
    seed: int

    def __post_init__(self):
        if len(self.members) < 2:
            raise ValueError(f"ensemble needs K >= 2 members, got {len(self.members)}")
        shape = self.members[0].mean.values.shape
        for m in self.members:
            if not isinstance(m, TranslatorOutput):
                raise TypeError(f"ensemble member is {type(m).__name__}")
            if m.mean.values.shape != shape:
                raise ValueError("ensemble members disagree in shape")

    @property
    def num_passes(self) -> int:
        return len(self.members)


@dataclass(frozen=True, eq=False)
class UncertaintyMaps:
    """Epistemic, aleatoric and total maps plus the ensemble mean."""

    epistemic: ImageGrid
    aleatoric: ImageGrid
    total: ImageGrid
    mean_prediction: ImageGrid

    def __post_init__(self):
        shape = self.epistemic.values.shape
        for name in ("aleatoric", "total", "mean_prediction"):
            if getattr(self, name).values.shape != shape:
                raise ValueError(f"{name} map shape mismatch")
        for name in ("epistemic", "aleatoric", "total"):
            if getattr(self, name).values.min() < 0.0:
                raise ValueError(f"negative {name} uncertainty")


def mc_ensemble(model, x: ImageGrid, num_passes: int = 20, seed: int = 0) -> DropoutEnsemble:
    """K seeded stochastic forwards on one image.

    Member k uses rng seed derive_seed(seed, "mc", k); the ensemble is a
    pure function of (weights, x, num_passes, seed).
    """
    if num_passes < 2:
        raise ValueError(f"num_passes must be >= 2, got {num_passes}")
    members = tuple(
        model.predict(x, stochastic=True, rng_seed=derive_seed(seed, "mc", k))
        for k in range(num_passes)
    )
    return DropoutEnsemble(members, seed)


def ensemble_mean(ensemble: DropoutEnsemble) -> ImageGrid:
    """Average of the member mean images; the pseudo-label candidate."""
    stack = np.stack([m.mean.values for m in ensemble.members])
    ref = ensemble.members[0].mean
    return ref.with_values(stack.mean(axis=0))


def epistemic(ensemble: DropoutEnsemble) -> ImageGrid:
    """Biased variance of member means: (1/K) sum (member - mean)^2."""
    stack = np.stack([m.mean.values for m in ensemble.members])
    var = np.mean((stack - stack.mean(axis=0)) ** 2, axis=0)
    ref = ensemble.members[0].mean
    return ImageGrid(ref.height, ref.width, var, *_U_RANGE)


def aleatoric(ensemble: DropoutEnsemble) -> ImageGrid:
    """Mean predicted variance across members: (1/K) sum exp(logvar_k)."""
    stack = np.stack([variance_from_logvar(m.logvar.values) for m in ensemble.members])
    ref = ensemble.members[0].mean
    return ImageGrid(ref.height, ref.width, stack.mean(axis=0), *_U_RANGE)


def total(u_epistemic: ImageGrid, u_aleatoric: ImageGrid,
          mean_prediction: ImageGrid) -> UncertaintyMaps:
    """Bundle the two components with their sum and the ensemble mean."""
    if u_epistemic.values.shape != u_aleatoric.values.shape:
        raise ValueError("uncertainty component shape mismatch")
    u_total = ImageGrid(u_epistemic.height, u_epistemic.width,
                        u_epistemic.values + u_aleatoric.values, *_U_RANGE)
    return UncertaintyMaps(u_epistemic, u_aleatoric, u_total, mean_prediction)
