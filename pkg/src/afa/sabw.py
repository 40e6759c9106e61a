"""Spatial-aware block-wise (SABW) feature aggregator.

For block ``j`` the aggregator sees the N per-model outputs ``y_i`` (each
``(B, c_j, h_j, w_j)``), concatenates them along channels, adds a learned
time embedding, and maps them through a ResLayer, a cross-attention
TransformerLayer and a zero-initialised 1x1 projection to per-location
logits ``(B, N, h_j, w_j)``.  A softmax over the model axis gives the
attention map; the aggregate is the attention-weighted sum of the ``y_i``.
"""

from __future__ import annotations

import torch
import torch.nn as nn

from .errors import NumericError, ParameterError, ShapeError
from .unet import (Condition, DenoiserSpec, ResLayer, TransformerLayer, _batch_t,
                   block_shapes, group_count, time_embedding)


class SabwBlock(nn.Module):
    def __init__(self, n_models: int, channels: int, hidden: int, cond_dim: int,
                 time_freqs: int, heads: int = 1, mlp_ratio: int = 2):
        super().__init__()
        self.n_models = n_models
        self.channels = channels
        self.time_freqs = time_freqs
        width = n_models * channels
        self.gamma = nn.Sequential(nn.Linear(time_freqs, width), nn.SiLU(), nn.Linear(width, width))
        # groups never straddle two models' channel slices
        self.res = ResLayer(width, hidden, in_groups=n_models * group_count(channels))
        self.attn = TransformerLayer(hidden, cond_dim, heads, mlp_ratio, self_attn=False)
        self.proj = nn.Conv2d(hidden, n_models, 1)
        nn.init.zeros_(self.proj.weight)
        nn.init.zeros_(self.proj.bias)

    def forward(self, feats: list[torch.Tensor], ctx: torch.Tensor, t) -> torch.Tensor:
        y = torch.cat(feats, dim=1)
        emb = time_embedding(_batch_t(t, y.shape[0]), self.time_freqs).to(y.dtype)
        h = self.res(y + self.gamma(emb)[:, :, None, None])
        return self.proj(self.attn(h, ctx))


class Sabw(nn.Module):
    """Per-block aggregator parameters for N models sharing ``spec``."""

    def __init__(self, n_models: int, spec: DenoiserSpec, hidden: int | None = None,
                 heads: int = 1, mlp_ratio: int = 2, time_freqs: int = 32):
        super().__init__()
        if n_models < 1:
            raise ParameterError("need at least one model")
        if hidden is not None and hidden < 1:
            raise ParameterError("hidden width must be positive")
        self.n_models = n_models
        self.spec = spec
        self.hidden = hidden
        self.heads = heads
        self.mlp_ratio = mlp_ratio
        self.time_freqs = time_freqs
        self.blocks = nn.ModuleList()
        for _, (c_j, _, _) in block_shapes(spec):
            d = hidden if hidden is not None else c_j
            self.blocks.append(SabwBlock(n_models, c_j, d, spec.cond_dim, time_freqs,
                                         heads, mlp_ratio))

    def config(self) -> dict:
        return {"n_models": self.n_models, "hidden": self.hidden, "heads": self.heads,
                "mlp_ratio": self.mlp_ratio, "time_freqs": self.time_freqs}


def sabw_init(n_models: int, spec: DenoiserSpec, hidden: int | None = None, seed: int = 0,
              **kwargs) -> Sabw:
    """Fresh aggregator; ``hidden=None`` uses ``d = c_j`` per block."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return Sabw(n_models, spec, hidden, **kwargs)


def sabw_logits(params: Sabw, j: int, feats: list[torch.Tensor], c: Condition, t) -> torch.Tensor:
    if len(feats) != params.n_models:
        raise ShapeError(f"expected {params.n_models} features, got {len(feats)}")
    shape = feats[0].shape
    if any(f.shape != shape for f in feats):
        raise ShapeError("all features must share one shape")
    if shape[1] != params.blocks[j].channels:
        raise ShapeError(f"block {j} aggregates {params.blocks[j].channels} channels, got {shape[1]}")
    ctx = c.to(feats[0].dtype).zeroed_null()
    return params.blocks[j](feats, ctx, t)


def sabw_attention(logits: torch.Tensor) -> torch.Tensor:
    """Softmax over the model axis (dim 1) of ``(B, N, h, w)`` logits."""
    if torch.isnan(logits).any():
        raise NumericError("NaN in aggregator logits")
    shifted = logits - logits.amax(dim=1, keepdim=True)
    e = shifted.exp()
    return e / e.sum(dim=1, keepdim=True)


def sabw_aggregate(A: torch.Tensor, feats: list[torch.Tensor]) -> torch.Tensor:
    """``sum_i A[:, i] * feats[i]`` with each map broadcast over channels."""
    if A.shape[1] != len(feats):
        raise ShapeError("attention map has the wrong number of models")
    for f in feats:
        if f.shape[0] != A.shape[0] or f.shape[2:] != A.shape[2:]:
            raise ShapeError(f"feature {tuple(f.shape)} incompatible with map {tuple(A.shape)}")
    out = A[:, 0:1] * feats[0]
    for i in range(1, len(feats)):
        out = out + A[:, i:i + 1] * feats[i]
    return out


def zero_projection_norm(params: Sabw) -> float:
    return max(max(b.proj.weight.abs().max().item(), b.proj.bias.abs().max().item())
               for b in params.blocks)

