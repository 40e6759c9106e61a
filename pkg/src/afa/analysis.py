"""Positional denoising capability, win maps, attention export and MSE evaluation."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .data import ConditionedBatch
from .diffusion import NoiseSchedule, q_sample
from .ensemble import EnsembleBundle, afa_forward
from .errors import ParameterError
from .unet import Condition


@dataclass
class CapabilityMap:
    data: np.ndarray        # (H, W), <= 0
    model_id: int
    t: int
    n_samples: int


@dataclass
class WinMap:
    data: np.ndarray        # (R, C, N) win proportions
    region_size: int


def _bind(model, x0):
    if hasattr(model, "set_target"):
        model.set_target(x0)


def _expand(x0: torch.Tensor, c: Condition, m: int):
    if x0.ndim == 3:
        x0 = x0[None]
    if x0.shape[0] != 1 or len(c) != 1:
        raise ParameterError("capability maps are computed for a single image")
    return x0.expand(m, *x0.shape[1:]), Condition(c.tokens.expand(m, *c.tokens.shape[1:]),
                                                  c.null.expand(m))


@torch.no_grad()
def _location_errors(model, x0, c, t, sched, eps) -> torch.Tensor:
    x_t = q_sample(x0, eps, t, sched).x
    _bind(model, x0)
    pred = model(x_t, c, t)
    return ((pred - eps) ** 2).sum(dim=1)          # (M, H, W), channel-summed


def _noise(shape, seed: int, dtype) -> torch.Tensor:
    gen = torch.Generator().manual_seed(seed)
    return torch.randn(shape, generator=gen, dtype=torch.float64).to(dtype)


def positional_capability(model, x0: torch.Tensor, c: Condition, t: int, sched: NoiseSchedule,
                          M: int, seed: int, model_id: int = 0) -> CapabilityMap:
    """Negative mean (over M noise draws) of the channel-summed squared error per location."""
    if M < 1:
        raise ParameterError("M must be >= 1")
    x0m, cm = _expand(x0, c, M)
    eps = _noise(x0m.shape, seed, x0m.dtype)
    err = _location_errors(model, x0m, cm, t, sched, eps)
    return CapabilityMap(-err.mean(dim=0).double().numpy(), model_id, t, M)


def win_map(models: list, x0: torch.Tensor, c: Condition, t: int, sched: NoiseSchedule,
            region_size: int = 4, M: int = 100, seed: int = 0) -> WinMap:
    """Per-region win proportions: for each noise draw the model with the smallest
    regional squared error wins (ties go to the lowest index)."""
    x0m, cm = _expand(x0, c, M)
    h, w = x0m.shape[2:]
    if h % region_size or w % region_size:
        raise ParameterError("region_size must divide the image size")
    eps = _noise(x0m.shape, seed, x0m.dtype)
    errs = []
    for model in models:
        e = _location_errors(model, x0m, cm, t, sched, eps)
        e = e.reshape(M, h // region_size, region_size, w // region_size, region_size)
        errs.append(e.sum(dim=(2, 4)))
    winner = torch.stack(errs, dim=-1).argmin(dim=-1)          # (M, R, C)
    counts = torch.stack([(winner == i).sum(dim=0) for i in range(len(models))], dim=-1)
    return WinMap((counts.double() / M).numpy(), region_size)


@torch.no_grad()
def eval_mse(model, data: ConditionedBatch, sched: NoiseSchedule, n_timesteps_sampled: int = 1,
             seed: int = 0, batch_size: int = 250) -> float:
    """Mean denoising loss with seeded ``(t, eps)`` draws that do not depend on the model."""
    if len(data) == 0:
        raise ParameterError("empty validation set")
    gen = torch.Generator().manual_seed(seed)
    total, count = 0.0, 0
    for _ in range(n_timesteps_sampled):
        for start in range(0, len(data), batch_size):
            x0 = data.images[start:start + batch_size]
            c = data.conditions[start:start + batch_size]
            t = torch.randint(1, sched.T + 1, (x0.shape[0],), generator=gen)
            eps = torch.randn(x0.shape, generator=gen)
            x_t = q_sample(x0, eps, t, sched).x
            _bind(model, x0)
            pred = model(x_t, c, t)
            total += ((pred - eps) ** 2).double().sum().item()
            count += eps.numel()
    return total / count


def heatmap_png(array: np.ndarray, path: Path):
    """Write values in [0, 1] as an 8-bit grayscale PNG."""
    img = np.clip(np.rint(np.asarray(array) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(img, mode="L").save(path)


@torch.no_grad()
def export_attention(bundle: EnsembleBundle, x_t: torch.Tensor, c: Condition, t,
                     block_ids: list[int], out_dir: str | Path | None = None) -> list[dict]:
    """Attention maps of the requested blocks, one record per (sample, block, model).

    With ``out_dir`` each map is also written as a grayscale PNG.
    """
    K = bundle.spec.K
    for j in block_ids:
        if not 0 <= j < K:
            raise ParameterError(f"block id {j} outside [0, {K})")
    maps: dict[int, torch.Tensor] = {}
    afa_forward(bundle, x_t, c, t, attn_out=maps)
    missing = [j for j in block_ids if j not in maps]
    if missing:
        raise ParameterError(f"mode {bundle.mode!r} has no attention for blocks {missing}")
    records = []
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
    for b in range(x_t.shape[0]):
        for j in block_ids:
            for i in range(bundle.N):
                arr = maps[j][b, i].double().numpy()
                rec = {"sample": b, "block": j, "model": i, "array": arr}
                if out_dir is not None:
                    path = out_dir / f"attn_s{b}_b{j}_m{i}.png"
                    heatmap_png(arr, path)
                    rec["png"] = str(path)
                records.append(rec)
    return records


def write_jsonl(path: str | Path, records: list[dict]):
    with open(path, "a") as fh:
        for r in records:
            fh.write(json.dumps(r, sort_keys=True) + "\n")
