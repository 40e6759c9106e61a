"""Noise schedules, forward diffusion, the denoising loss, CFG and DDIM sampling.

Timesteps are 1-based (``t`` in ``[1, T]``).  ``t = 0`` is accepted only as a
sampling target and denotes the clean image (``alpha_bar = 1``).

Images are torch tensors in ``(B, C, H, W)`` layout.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Union

import numpy as np
import torch

from .errors import ParameterError, ShapeError

Timestep = Union[int, torch.Tensor]


@dataclass(frozen=True)
class NoiseSchedule:
    """Cumulative signal levels ``alpha_bar[t-1]`` for ``t = 1..T``."""

    alpha_bar: np.ndarray

    def __post_init__(self):
        ab = np.asarray(self.alpha_bar, dtype=np.float64)
        if ab.ndim != 1 or ab.size == 0:
            raise ParameterError("alpha_bar must be a non-empty 1-d array")
        if not np.all((ab > 0) & (ab <= 1)):
            raise ParameterError("alpha_bar entries must lie in (0, 1]")
        if np.any(np.diff(ab) >= 0):
            raise ParameterError("alpha_bar must be strictly decreasing")
        ab.setflags(write=False)
        object.__setattr__(self, "alpha_bar", ab)

    @property
    def T(self) -> int:
        return int(self.alpha_bar.size)

    def at(self, t: Timestep) -> torch.Tensor:
        """``alpha_bar`` at timestep(s) ``t`` as a float64 tensor; ``t = 0`` gives 1."""
        padded = torch.from_numpy(np.concatenate([[1.0], self.alpha_bar]))
        idx = torch.as_tensor(t, dtype=torch.long)
        if torch.any(idx < 0) or torch.any(idx > self.T):
            raise ParameterError(f"timestep outside [0, {self.T}]")
        return padded[idx]


@dataclass(frozen=True)
class NoisyState:
    x: torch.Tensor
    t: Timestep


@dataclass(frozen=True)
class CfgConfig:
    beta_cfg: float = 7.5
    steps: int = 50

    def __post_init__(self):
        if self.beta_cfg < 0:
            raise ParameterError("beta_cfg must be nonnegative")
        if self.steps < 1:
            raise ParameterError("steps must be >= 1")


def make_schedule(T: int = 1000, kind: str = "linear-beta", lo: float = 1e-4,
                  hi: float = 0.02) -> NoiseSchedule:
    """Build a schedule.

    ``linear-beta`` spaces ``beta`` linearly over ``[lo, hi]`` and takes the
    cumulative product of ``1 - beta``.  ``cosine`` is the squared-cosine
    schedule with offset 0.008 (``lo``/``hi`` unused).
    """
    if not isinstance(T, (int, np.integer)) or T < 1:
        raise ParameterError("T must be a positive integer")
    if kind == "linear-beta":
        if not (0 < lo <= hi < 1):
            raise ParameterError("need 0 < lo <= hi < 1")
        betas = np.linspace(lo, hi, T, dtype=np.float64)
        return NoiseSchedule(np.cumprod(1.0 - betas))
    if kind == "cosine":
        s = 0.008
        steps = np.arange(T + 1, dtype=np.float64) / T
        f = np.cos((steps + s) / (1 + s) * math.pi / 2) ** 2
        betas = np.clip(1 - f[1:] / f[:-1], 0.0, 0.999)
        return NoiseSchedule(np.cumprod(1.0 - betas))
    raise ParameterError(f"unknown schedule kind {kind!r}")


def _per_sample(coef: torch.Tensor, like: torch.Tensor) -> torch.Tensor:
    coef = coef.to(like.dtype)
    if coef.ndim == 0:
        return coef
    return coef.reshape(-1, *([1] * (like.ndim - 1)))


def _check_same(a: torch.Tensor, b: torch.Tensor, what: str):
    if a.shape != b.shape:
        raise ShapeError(f"{what}: shapes {tuple(a.shape)} and {tuple(b.shape)} differ")


def q_sample(x0: torch.Tensor, eps: torch.Tensor, t: Timestep,
             sched: NoiseSchedule) -> NoisyState:
    """Diffuse ``x0`` to timestep ``t`` with the given noise ``eps``.

    ``t`` may be an int or a per-sample ``(B,)`` tensor.
    """
    _check_same(x0, eps, "q_sample")
    ab = sched.at(t)
    if torch.any(torch.as_tensor(t) < 1):
        raise ParameterError("q_sample needs t >= 1")
    a = _per_sample(ab.sqrt(), x0)
    s = _per_sample((1 - ab).sqrt(), x0)
    return NoisyState(a * x0 + s * eps, t)


def denoising_loss(pred: torch.Tensor, eps: torch.Tensor) -> torch.Tensor:
    """Mean squared error over every element."""
    _check_same(pred, eps, "denoising_loss")
    return ((pred - eps) ** 2).mean()


def cfg_combine(eps_c: torch.Tensor, eps_uc: torch.Tensor, beta: float) -> torch.Tensor:
    _check_same(eps_c, eps_uc, "cfg_combine")
    return eps_uc + beta * (eps_c - eps_uc)


def predict_x0(x_t: torch.Tensor, eps: torch.Tensor, t: Timestep,
               sched: NoiseSchedule) -> torch.Tensor:
    ab = sched.at(t)
    return (x_t - _per_sample((1 - ab).sqrt(), x_t) * eps) / _per_sample(ab.sqrt(), x_t)


def ddim_step(state: NoisyState, eps_pred: torch.Tensor, t_next: int,
              sched: NoiseSchedule) -> NoisyState:
    """Deterministic DDIM update (eta = 0) from ``state.t`` to ``t_next``.

    With ``t_next = 0`` this is the single-jump update
    ``x_t / sqrt(a) - sqrt(1 - a) / sqrt(a) * eps``.
    """
    _check_same(state.x, eps_pred, "ddim_step")
    if not int(t_next) < int(state.t):
        raise ParameterError("t_next must be smaller than the current timestep")
    x0_hat = predict_x0(state.x, eps_pred, state.t, sched)
    ab_next = sched.at(t_next)
    x = _per_sample(ab_next.sqrt(), x0_hat) * x0_hat \
        + _per_sample((1 - ab_next).sqrt(), x0_hat) * eps_pred
    return NoisyState(x, int(t_next))


def timestep_sequence(T: int, steps: int, t_start: int | None = None) -> list[int]:
    """Decreasing, uniformly strided timesteps starting at ``t_start`` (default T)."""
    t_start = T if t_start is None else t_start
    if not 1 <= steps <= t_start <= T:
        raise ParameterError("need 1 <= steps <= t_start <= T")
    stride = t_start / steps
    return [t_start - int(round(k * stride)) for k in range(steps)]


Denoiser = Callable[[torch.Tensor, object, Timestep], torch.Tensor]


@torch.no_grad()
def sample(denoiser: Denoiser, cond, uncond, cfg: CfgConfig, sched: NoiseSchedule,
           seed: int, shape: tuple[int, ...] | None = None, *,
           x_start: torch.Tensor | None = None, t_start: int | None = None,
           dtype: torch.dtype = torch.float32) -> torch.Tensor:
    """Run CFG-guided DDIM from Gaussian noise (or from ``x_start`` at ``t_start``).

    The conditional and unconditional branches are separate denoiser calls.
    """
    if cfg.steps > sched.T:
        raise ParameterError("steps must not exceed T")
    if x_start is None:
        if shape is None:
            raise ParameterError("either shape or x_start is required")
        gen = torch.Generator().manual_seed(seed)
        x = torch.randn(shape, generator=gen, dtype=torch.float64).to(dtype)
        t_start = sched.T
    else:
        x = x_start.to(dtype)
        t_start = sched.T if t_start is None else t_start
    ts = timestep_sequence(sched.T, cfg.steps, t_start)
    state = NoisyState(x, ts[0])
    for i, t in enumerate(ts):
        eps_c = denoiser(state.x, cond, t)
        if eps_c.shape != state.x.shape:
            raise ShapeError("denoiser output shape differs from its input")
        if cfg.beta_cfg == 1.0:
            eps = eps_c
        else:
            eps_uc = denoiser(state.x, uncond, t)
            eps = cfg_combine(eps_c, eps_uc, cfg.beta_cfg)
        t_next = ts[i + 1] if i + 1 < len(ts) else 0
        state = ddim_step(NoisyState(state.x, t), eps, t_next, sched)
    return state.x


class PerfectEpsOracle:
    """Denoiser that returns the exact noise for a known clean target.

    Used as a test stub; evaluation harnesses call :meth:`set_target` with
    the clean images before each query.
    """

    def __init__(self, sched: NoiseSchedule, x0: torch.Tensor | None = None):
        self.sched = sched
        self.x0 = x0

    def set_target(self, x0: torch.Tensor):
        self.x0 = x0

    def __call__(self, x_t, c, t):
        ab = self.sched.at(t)
        x0 = self.x0.to(x_t.dtype)
        return (x_t - _per_sample(ab.sqrt(), x_t) * x0) / _per_sample((1 - ab).sqrt(), x_t)
