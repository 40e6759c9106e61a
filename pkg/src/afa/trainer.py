"""Expert pretraining and aggregator/router training with frozen base models."""

from __future__ import annotations

import copy
import hashlib
import math
from dataclasses import dataclass
from typing import Callable

import torch
import torch.nn as nn

from .data import ConditionedBatch
from .diffusion import NoiseSchedule, denoising_loss, make_schedule, q_sample
from .ensemble import EnsembleBundle
from .errors import InvariantError, ParameterError, ShapeError, TrainingError
from .moe import MoeBundle, moe_forward
from .sabw import Sabw
from .unet import Condition, DenoiserSpec, ToyUNet, build_denoiser

LogFn = Callable[[dict], None]


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-4
    weight_decay: float = 0.01
    epochs: int = 10
    batch_size: int = 8
    prompt_drop_prob: float = 0.1
    seed: int = 0
    optimizer: str = "adamw"
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    max_steps: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "betas", tuple(self.betas))
        if self.lr <= 0:
            raise ParameterError("lr must be positive")
        if not 0 <= self.prompt_drop_prob <= 1:
            raise ParameterError("prompt_drop_prob must lie in [0, 1]")
        if self.optimizer != "adamw":
            raise ParameterError("only adamw is supported")
        if self.batch_size < 1 or self.epochs < 0:
            raise ParameterError("batch_size must be >= 1 and epochs >= 0")


def optimizer_step(params: list[torch.Tensor], grads: list[torch.Tensor | None],
                   cfg: TrainConfig, state: dict | None = None):
    """One AdamW update with decoupled weight decay, applied in place.

    ``state`` holds the step count and both moment estimates; parameters
    whose gradient is ``None`` are skipped entirely.
    """
    if len(params) != len(grads):
        raise ShapeError("params and grads differ in length")
    if state is None:
        state = {}
    if not state:
        state.update(step=0, m=[None] * len(params), v=[None] * len(params))
    b1, b2 = cfg.betas
    state["step"] += 1
    step = state["step"]
    bc1 = 1 - b1 ** step
    bc2 = 1 - b2 ** step
    with torch.no_grad():
        for i, (p, g) in enumerate(zip(params, grads)):
            if g is None:
                continue
            if g.shape != p.shape:
                raise ShapeError(f"gradient {i} has shape {tuple(g.shape)}, parameter {tuple(p.shape)}")
            if state["m"][i] is None:
                state["m"][i] = torch.zeros_like(p)
                state["v"][i] = torch.zeros_like(p)
            m, v = state["m"][i], state["v"][i]
            p.mul_(1 - cfg.lr * cfg.weight_decay)
            m.mul_(b1).add_(g, alpha=1 - b1)
            v.mul_(b2).addcmul_(g, g, value=1 - b2)
            denom = (v / bc2).sqrt_().add_(cfg.eps)
            p.addcdiv_(m, denom, value=-cfg.lr / bc1)
    return params, state


def digest(module: nn.Module) -> str:
    """SHA-256 over every tensor in the state dict, in name order."""
    h = hashlib.sha256()
    for name, tensor in sorted(module.state_dict().items()):
        h.update(name.encode())
        h.update(tensor.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def drop_prompts(c: Condition, prob: float, generator: torch.Generator) -> Condition:
    """Replace each condition with the null one with probability ``prob``."""
    drop = torch.rand(len(c), generator=generator, dtype=torch.float64) < prob
    null = c.null | drop
    return Condition(c.tokens.masked_fill(null[:, None, None], 0.0), null)


def _batches(n: int, cfg: TrainConfig, generator: torch.Generator):
    for _ in range(cfg.epochs):
        perm = torch.randperm(n, generator=generator)
        for start in range(0, n, cfg.batch_size):
            yield perm[start:start + cfg.batch_size]


def _fit(params: list[torch.Tensor], predict, data: ConditionedBatch, cfg: TrainConfig,
         sched: NoiseSchedule, log: LogFn | None, tag: str) -> list[float]:
    gen = torch.Generator().manual_seed(cfg.seed)
    state: dict = {}
    losses: list[float] = []
    step = 0
    for idx in _batches(len(data), cfg, gen):
        if cfg.max_steps is not None and step >= cfg.max_steps:
            break
        x0 = data.images[idx]
        c = drop_prompts(data.conditions[idx], cfg.prompt_drop_prob, gen)
        t = torch.randint(1, sched.T + 1, (len(idx),), generator=gen)
        eps = torch.randn(x0.shape, generator=gen)
        x_t = q_sample(x0, eps, t, sched).x
        loss = denoising_loss(predict(x_t, c, t, gen), eps)
        value = loss.item()
        if not math.isfinite(value):
            raise TrainingError(f"{tag}: non-finite loss at step {step}; "
                                f"last losses {losses[-5:]}")
        grads = torch.autograd.grad(loss, params, allow_unused=True)
        optimizer_step(params, list(grads), cfg, state)
        losses.append(value)
        if log is not None:
            log({"stage": tag, "step": step, "loss": value})
        step += 1
    return losses


def pretrain_expert(data: ConditionedBatch, spec: DenoiserSpec, cfg: TrainConfig,
                    sched: NoiseSchedule | None = None, init: ToyUNet | None = None,
                    log: LogFn | None = None) -> ToyUNet:
    """Train every parameter of a denoiser on ``data`` with the denoising loss.

    Starts from a copy of ``init`` when given, else from ``build_denoiser(spec, cfg.seed)``.
    """
    if len(data) == 0:
        raise ParameterError("empty training data")
    sched = sched or make_schedule()
    model = copy.deepcopy(init) if init is not None else build_denoiser(spec, cfg.seed)
    for p in model.parameters():
        p.requires_grad_(True)
    params = list(model.parameters())
    model.losses = _fit(params, lambda x, c, t, g: model(x, c, t), data, cfg, sched, log, "expert")
    for p in params:
        p.requires_grad_(False)
    return model


def train_sabw(bundle: EnsembleBundle, data: ConditionedBatch, cfg: TrainConfig,
               sched: NoiseSchedule | None = None, log: LogFn | None = None) -> Sabw:
    """Fit the aggregator in place with all base models frozen."""
    sched = sched or make_schedule()
    before = [digest(m) for m in bundle.models]
    params = list(bundle.sabw.parameters())
    for p in params:
        p.requires_grad_(True)
    bundle.sabw.losses = _fit(params, lambda x, c, t, g: bundle(x, c, t), data, cfg, sched,
                              log, f"sabw-{bundle.mode}")
    if [digest(m) for m in bundle.models] != before:
        raise InvariantError("a frozen base model changed during aggregator training")
    return bundle.sabw


def train_moe(bundle: MoeBundle, data: ConditionedBatch, cfg: TrainConfig,
              sched: NoiseSchedule | None = None, log: LogFn | None = None):
    """Fit the router with Gumbel straight-through selection; experts frozen."""
    sched = sched or make_schedule()
    before = [digest(m) for m in bundle.models]
    params = list(bundle.router.parameters())
    for p in params:
        p.requires_grad_(True)
    bundle.router.losses = _fit(
        params, lambda x, c, t, g: moe_forward(bundle, x, c, t, train=True, generator=g),
        data, cfg, sched, log, f"moe-{bundle.level}")
    if [digest(m) for m in bundle.models] != before:
        raise InvariantError("a frozen expert changed during router training")
    return bundle.router
