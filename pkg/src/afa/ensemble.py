"""Adaptive feature aggregation over N frozen denoisers sharing one spec.

All models receive the same aggregated input at every block; the skip
stack stores aggregated features.  ``mode`` selects the full method or one
of the ablation variants:

``full``            aggregator at every block
``block-average``   uniform averaging at every block
``last-block``      models run privately; aggregator only on the final block
``noise-average``   models run privately; predicted noises are averaged
"""

from __future__ import annotations

import torch
import torch.nn as nn

from .errors import ParameterError, ShapeError, StructuralError
from .sabw import Sabw, sabw_aggregate, sabw_attention, sabw_init, sabw_logits
from .unet import Condition, ToyUNet, run_blocks

MODES = ("full", "block-average", "last-block", "noise-average")


class EnsembleBundle(nn.Module):
    def __init__(self, models: list[ToyUNet], sabw: Sabw | None = None, mode: str = "full"):
        super().__init__()
        if not models:
            raise ParameterError("need at least one model")
        spec = models[0].spec
        if any(m.spec != spec for m in models):
            raise StructuralError("all ensembled models must share one spec")
        if mode not in MODES:
            raise ParameterError(f"unknown mode {mode!r}")
        self.spec = spec
        self.models = nn.ModuleList(models)
        for p in self.models.parameters():
            p.requires_grad_(False)
        self.sabw = sabw if sabw is not None else sabw_init(len(models), spec)
        if self.sabw.n_models != len(models):
            raise ShapeError("aggregator was built for a different number of models")
        self.mode = mode

    @property
    def N(self) -> int:
        return len(self.models)

    def forward(self, x_t, c, t, trace=None, attn_out=None):
        return afa_forward(self, x_t, c, t, trace=trace, attn_out=attn_out)


def _uniform(feats: list[torch.Tensor]) -> torch.Tensor:
    f = feats[0]
    n = len(feats)
    return torch.full((f.shape[0], n, *f.shape[2:]), 1.0 / n, dtype=f.dtype)


def aggregate(bundle: EnsembleBundle, j: int, feats: list[torch.Tensor], c: Condition, t,
              attn_out: dict | None = None, learned: bool = True) -> torch.Tensor:
    if learned:
        A = sabw_attention(sabw_logits(bundle.sabw, j, feats, c, t))
    else:
        A = _uniform(feats)
    if attn_out is not None:
        attn_out[j] = A.detach()
    return sabw_aggregate(A, feats)


def afa_block(bundle: EnsembleBundle, j: int, x: torch.Tensor, c: Condition, t,
              attn_out: dict | None = None) -> torch.Tensor:
    """Run block ``j`` of every model on the shared input and aggregate."""
    feats = [m.block_forward(j, x, c, t) for m in bundle.models]
    return aggregate(bundle, j, feats, c, t, attn_out, learned=bundle.mode != "block-average")


def afa_forward(bundle: EnsembleBundle, x_t: torch.Tensor, c: Condition, t,
                trace: dict | None = None, attn_out: dict | None = None) -> torch.Tensor:
    """Predicted noise of the ensemble; same contract as a single denoiser."""
    if bundle.mode in ("full", "block-average"):
        def run_block(j, x, c_, t_):
            return afa_block(bundle, j, x, c_, t_, attn_out)
        return run_blocks(run_block, bundle.spec, x_t, c, t, trace)
    outs = [run_blocks(m.block_forward, bundle.spec, x_t, c, t, trace) for m in bundle.models]
    return aggregate(bundle, bundle.spec.K - 1, outs, c, t, attn_out,
                     learned=bundle.mode == "last-block")


def with_mode(bundle: EnsembleBundle, mode: str) -> EnsembleBundle:
    """A view of ``bundle`` sharing its parameters but using another mode."""
    return EnsembleBundle(list(bundle.models), bundle.sabw, mode)
