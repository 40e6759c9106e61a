"""Static parameter merging: one global weight vector, or per-block weights (MBW)."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .errors import ParameterError, StructuralError
from .unet import ToyUNet, build_denoiser


@dataclass(frozen=True)
class MergeRecipe:
    """``mode`` is ``weighted`` or ``mbw``; weight rows are normalised on construction.

    ``block_weights`` is ``(K, N)`` and only used by ``mbw``.  Parameters
    outside the blocks always use ``global_weights``.
    """

    mode: str
    global_weights: tuple[float, ...]
    block_weights: tuple[tuple[float, ...], ...] | None = None

    def __post_init__(self):
        if self.mode not in ("weighted", "mbw"):
            raise ParameterError(f"unknown merge mode {self.mode!r}")
        object.__setattr__(self, "global_weights", _normalise(self.global_weights))
        if self.mode == "mbw":
            if self.block_weights is None:
                raise ParameterError("mbw needs block_weights")
            rows = tuple(_normalise(r) for r in self.block_weights)
            if any(len(r) != len(self.global_weights) for r in rows):
                raise ParameterError("block weight rows must have N entries")
            object.__setattr__(self, "block_weights", rows)

    @classmethod
    def uniform(cls, n: int) -> "MergeRecipe":
        return cls("weighted", (1.0,) * n)

    def weights_for(self, block: int | None) -> tuple[float, ...]:
        if self.mode == "mbw" and block is not None:
            return self.block_weights[block]
        return self.global_weights


def _normalise(w) -> tuple[float, ...]:
    w = np.asarray(w, dtype=np.float64)
    if w.ndim != 1 or w.size == 0 or np.any(w < 0) or not np.isfinite(w).all():
        raise ParameterError("weights must be a nonempty vector of nonnegative reals")
    s = w.sum()
    if s <= 0:
        raise ParameterError("weights must not all be zero")
    return tuple(float(v) for v in w / s)


def _block_of(name: str) -> int | None:
    parts = name.split(".")
    return int(parts[1]) if parts[0] == "blocks" else None


def merge(models: list[ToyUNet], recipe: MergeRecipe) -> ToyUNet:
    """Parameter-wise convex combination of structurally identical denoisers."""
    if not models:
        raise ParameterError("nothing to merge")
    spec = models[0].spec
    if any(m.spec != spec for m in models):
        raise StructuralError("merged models must share one spec")
    if len(recipe.global_weights) != len(models):
        raise ParameterError("recipe has the wrong number of weights")
    if recipe.mode == "mbw" and len(recipe.block_weights) != spec.K:
        raise ParameterError("mbw recipe needs one weight row per block")
    states = [m.state_dict() for m in models]
    merged = {}
    for name in states[0]:
        w = recipe.weights_for(_block_of(name))
        acc = w[0] * states[0][name]
        for wi, st in zip(w[1:], states[1:]):
            acc = acc + wi * st[name]
        merged[name] = acc
    out = build_denoiser(spec, 0)
    with torch.no_grad():
        out.load_state_dict(merged)
    return out
