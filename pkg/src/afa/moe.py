"""Mixture-of-experts ensembling baselines.

A router per block maps the block input to N logits.  Training uses
Gumbel-softmax probabilities with a straight-through one-hot selection;
inference evaluates only the arg-max expert.  Denoiser-level routing is
the special case of a single decision before the first block.

Ties always resolve to the lowest model index.  Model indices are 0-based.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ParameterError, ShapeError, StructuralError
from .unet import (Condition, DenoiserSpec, ResLayer, ToyUNet, TransformerLayer, _batch_t,
                   block_shapes, run_blocks, time_embedding)


@dataclass(frozen=True)
class GumbelConfig:
    tau: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.tau <= 0:
            raise ParameterError("temperature must be positive")


class RouterBlock(nn.Module):
    def __init__(self, in_ch: int, hidden: int, n_models: int, cond_dim: int,
                 time_freqs: int = 32):
        super().__init__()
        self.in_ch = in_ch
        self.time_freqs = time_freqs
        self.gamma = nn.Sequential(nn.Linear(time_freqs, in_ch), nn.SiLU(), nn.Linear(in_ch, in_ch))
        self.res = ResLayer(in_ch, hidden)
        self.attn = TransformerLayer(hidden, cond_dim, self_attn=False)
        self.head = nn.Linear(hidden, n_models)

    def forward(self, x, ctx, t):
        emb = time_embedding(_batch_t(t, x.shape[0]), self.time_freqs).to(x.dtype)
        h = self.res(x + self.gamma(emb)[:, :, None, None])
        o = self.attn(h, ctx)
        return self.head(o.mean(dim=(2, 3)))


class Router(nn.Module):
    """Router parameters: one block per U-Net block, or a single one for denoiser-level routing."""

    def __init__(self, n_models: int, spec: DenoiserSpec, level: str = "block",
                 hidden: int | None = None):
        super().__init__()
        if level not in ("block", "denoiser"):
            raise ParameterError(f"unknown routing level {level!r}")
        self.n_models = n_models
        self.level = level
        self.hidden = hidden
        d = hidden if hidden is not None else spec.base_channels
        shapes = block_shapes(spec) if level == "block" else block_shapes(spec)[:1]
        self.blocks = nn.ModuleList(RouterBlock(c_in, d, n_models, spec.cond_dim)
                                    for (c_in, _, _), _ in shapes)

    def config(self) -> dict:
        return {"n_models": self.n_models, "level": self.level, "hidden": self.hidden}


def router_init(n_models: int, spec: DenoiserSpec, level: str = "block",
                hidden: int | None = None, seed: int = 0) -> Router:
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return Router(n_models, spec, level, hidden)


def router_logits(zeta: Router, j: int, x: torch.Tensor, c: Condition, t) -> torch.Tensor:
    block = zeta.blocks[j]
    if x.shape[1] != block.in_ch:
        raise ShapeError(f"router {j} expects {block.in_ch} channels, got {x.shape[1]}")
    return block(x, c.to(x.dtype).zeroed_null(), t)


def gumbel_noise(shape, generator: torch.Generator | None = None, dtype=torch.float32) -> torch.Tensor:
    u = torch.rand(shape, generator=generator, dtype=torch.float64)
    u = u.clamp(1e-20, 1.0 - 1e-16)
    return (-torch.log(-torch.log(u))).to(dtype)


def gumbel_probs(logits: torch.Tensor, tau: float = 1.0, generator: torch.Generator | None = None,
                 noise: torch.Tensor | None = None) -> torch.Tensor:
    """``softmax((l + g) / tau)`` along the last axis with i.i.d. Gumbel(0, 1) noise ``g``.

    Pass ``noise`` explicitly (e.g. zeros) to disable sampling.
    """
    if tau <= 0:
        raise ParameterError("temperature must be positive")
    if noise is None:
        noise = gumbel_noise(logits.shape, generator, logits.dtype)
    return torch.softmax((logits + noise) / tau, dim=-1)


def straight_through(p: torch.Tensor) -> torch.Tensor:
    """Forward value ``onehot(argmax p)``; gradient flows through ``p``."""
    hard = F.one_hot(p.argmax(dim=-1), p.shape[-1]).to(p.dtype)
    return hard + (p - p.detach())     # exact one-hot value


def moe_block_train(expert_outputs: list[torch.Tensor], p_prime: torch.Tensor) -> torch.Tensor:
    """Selection-weighted sum of all expert outputs (every expert evaluated)."""
    if p_prime.shape[-1] != len(expert_outputs):
        raise ShapeError("selection vector length differs from the number of experts")
    shape = expert_outputs[0].shape
    if any(y.shape != shape for y in expert_outputs) or p_prime.shape[0] != shape[0]:
        raise ShapeError("expert outputs must share one shape")
    w = p_prime.reshape(shape[0], -1, *([1] * (len(shape) - 1)))
    out = w[:, 0] * expert_outputs[0]
    for i in range(1, len(expert_outputs)):
        out = out + w[:, i] * expert_outputs[i]
    return out


def _dispatch(models, k: torch.Tensor, run, x: torch.Tensor, c: Condition,
              counter: dict | None) -> torch.Tensor:
    """Evaluate ``run(model, x_sub, c_sub)`` only for each element's chosen model."""
    if counter is not None:
        counter["expert_evals"] = counter.get("expert_evals", 0) + x.shape[0]
    first = int(k[0])
    if bool((k == first).all()):
        return run(models[first], x, c)
    out = None
    for i in torch.unique(k).tolist():
        idx = torch.nonzero(k == i).squeeze(1)
        y = run(models[i], x[idx], c[idx])
        if out is None:
            out = y.new_zeros((x.shape[0], *y.shape[1:]))
        out[idx] = y
    return out


class MoeBundle(nn.Module):
    def __init__(self, models: list[ToyUNet], router: Router | None = None,
                 level: str = "block", tau: float = 1.0):
        super().__init__()
        spec = models[0].spec
        if any(m.spec != spec for m in models):
            raise StructuralError("all experts must share one spec")
        self.spec = spec
        self.models = nn.ModuleList(models)
        for p in self.models.parameters():
            p.requires_grad_(False)
        self.router = router if router is not None else router_init(len(models), spec, level)
        if self.router.n_models != len(models):
            raise ShapeError("router was built for a different number of models")
        self.level = self.router.level
        self.tau = GumbelConfig(tau).tau
        self.training_mode = False

    @property
    def N(self) -> int:
        return len(self.models)

    def forward(self, x_t, c, t, generator=None, counter=None):
        return moe_forward(self, x_t, c, t, train=self.training_mode,
                           generator=generator, counter=counter)


def moe_block_infer(bundle: MoeBundle, zeta: Router, j: int, x: torch.Tensor, c: Condition, t,
                    counter: dict | None = None) -> torch.Tensor:
    k = router_logits(zeta, j, x, c, t).argmax(dim=-1)
    return _dispatch(bundle.models, k, lambda m, xs, cs: m.block_forward(j, xs, cs, t), x, c, counter)


def denoiser_level_route(zeta: Router, x_t: torch.Tensor, c: Condition, t) -> torch.Tensor:
    """Per-element index of the model that runs the whole forward."""
    return router_logits(zeta, 0, x_t, c, t).argmax(dim=-1)


def moe_forward(bundle: MoeBundle, x_t: torch.Tensor, c: Condition, t, train: bool = False,
                generator: torch.Generator | None = None, counter: dict | None = None,
                noise_scale: float = 1.0) -> torch.Tensor:
    """Training (straight-through) or inference (arg-max) forward.

    ``noise_scale=0`` disables Gumbel noise in training mode.
    """
    zeta = bundle.router

    def select(j, x):
        logits = router_logits(zeta, j, x, c, t)
        noise = gumbel_noise(logits.shape, generator, logits.dtype) * noise_scale
        return straight_through(gumbel_probs(logits, bundle.tau, noise=noise))

    if bundle.level == "denoiser":
        if train:
            p = select(0, x_t)
            if counter is not None:
                counter["expert_evals"] = counter.get("expert_evals", 0) + x_t.shape[0] * bundle.N
            return moe_block_train([m(x_t, c, t) for m in bundle.models], p)
        k = denoiser_level_route(zeta, x_t, c, t)
        return _dispatch(bundle.models, k, lambda m, xs, cs: m(xs, cs, t), x_t, c, counter)

    if train:
        def run_block(j, x, c_, t_):
            if counter is not None:
                counter["expert_evals"] = counter.get("expert_evals", 0) + x.shape[0] * bundle.N
            return moe_block_train([m.block_forward(j, x, c_, t_) for m in bundle.models], select(j, x))
    else:
        def run_block(j, x, c_, t_):
            return moe_block_infer(bundle, zeta, j, x, c_, t_, counter)
    return run_blocks(run_block, bundle.spec, x_t, c, t)
