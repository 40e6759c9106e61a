"""Miniature conditional U-Net denoisers organised as K ordered blocks.

Block layout for ``n_down = n_up = n``::

    0 .. n-1      down blocks   (block 0 owns the input convolution)
    n             middle block
    n+1 .. 2n     up blocks     (block 2n owns the output convolution)

Every down block's output is pushed onto a skip stack; every up block
receives ``concat(previous output, popped skip)`` along channels.  Block
indices are 0-based throughout the package.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import InvariantError, ParameterError, ShapeError

FORMAT_VERSION = 1


@dataclass(frozen=True)
class DenoiserSpec:
    n_down: int = 3
    n_up: int = 3
    base_channels: int = 32
    channel_mults: tuple[int, ...] = (1, 2, 2)
    cond_dim: int = 32
    img_channels: int = 3
    img_size: int = 16
    n_tokens: int = 4
    heads: int = 1
    mlp_ratio: int = 2

    def __post_init__(self):
        object.__setattr__(self, "channel_mults", tuple(self.channel_mults))
        if self.n_down != self.n_up:
            raise ParameterError("n_down must equal n_up")
        if self.n_down < 1 or len(self.channel_mults) != self.n_down:
            raise ParameterError("need one channel multiplier per down block")
        if self.img_size % (2 ** self.n_down):
            raise ParameterError("img_size must be divisible by 2**n_down")

    @property
    def K(self) -> int:
        return self.n_down + 1 + self.n_up

    @property
    def time_dim(self) -> int:
        return 4 * self.base_channels

    def kind(self, j: int) -> str:
        if j < self.n_down:
            return "down"
        return "mid" if j == self.n_down else "up"

    def to_dict(self) -> dict:
        d = asdict(self)
        d["channel_mults"] = list(self.channel_mults)
        return d


def block_shapes(spec: DenoiserSpec) -> list[tuple[tuple[int, int, int], tuple[int, int, int]]]:
    """``(input_shape, output_shape)`` per block, each as ``(C, H, W)``."""
    n = spec.n_down
    chans = [spec.base_channels * m for m in spec.channel_mults]
    out = []
    size, c_prev = spec.img_size, spec.img_channels
    for j in range(n):
        out.append(((c_prev, size, size), (chans[j], size // 2, size // 2)))
        size //= 2
        c_prev = chans[j]
    out.append(((c_prev, size, size), (c_prev, size, size)))
    for u in range(n):
        skip_c = chans[n - 1 - u]
        c_out = chans[n - 2 - u] if u < n - 1 else spec.img_channels
        out.append(((c_prev + skip_c, size, size), (c_out, size * 2, size * 2)))
        size *= 2
        c_prev = c_out
    return out


@dataclass
class Condition:
    """A batch of condition token sequences.

    ``tokens`` is ``(B, L, cond_dim)``; ``null`` marks the unconditional
    entries of the batch.  Denoisers substitute their own learned null
    tokens wherever ``null`` is set.
    """

    tokens: torch.Tensor
    null: torch.Tensor = field(default=None)

    def __post_init__(self):
        if self.tokens.ndim == 2:
            self.tokens = self.tokens[None]
        if self.tokens.ndim != 3 or self.tokens.shape[1] < 1:
            raise ShapeError("condition tokens must be (B, L, D) with L >= 1")
        if self.null is None:
            self.null = torch.zeros(self.tokens.shape[0], dtype=torch.bool)
        self.null = torch.as_tensor(self.null, dtype=torch.bool).reshape(-1)
        if self.null.numel() == 1 and self.tokens.shape[0] > 1:
            self.null = self.null.expand(self.tokens.shape[0]).clone()

    @property
    def is_null(self) -> bool:
        return bool(self.null.all())

    def __len__(self):
        return self.tokens.shape[0]

    def __getitem__(self, idx) -> "Condition":
        return Condition(self.tokens[idx], self.null[idx])

    def to(self, dtype) -> "Condition":
        return Condition(self.tokens.to(dtype), self.null)

    def zeroed_null(self) -> torch.Tensor:
        """Tokens with the null entries replaced by zeros."""
        return self.tokens.masked_fill(self.null[:, None, None], 0.0)


def time_embedding(t, dim: int) -> torch.Tensor:
    """Sinusoidal embedding, interleaved ``[sin f0 t, cos f0 t, sin f1 t, ...]``.

    Returns ``(B, dim)`` for a ``(B,)`` tensor, ``(dim,)`` for a scalar.
    """
    if dim % 2:
        raise ParameterError("embedding width must be even")
    t = torch.as_tensor(t, dtype=torch.float64)
    if torch.any(t < 0):
        raise ParameterError("timestep must be nonnegative")
    freqs = torch.exp(-math.log(10000.0) * torch.arange(dim // 2, dtype=torch.float64) / (dim // 2))
    ang = t[..., None] * freqs
    emb = torch.stack([torch.sin(ang), torch.cos(ang)], dim=-1)
    return emb.reshape(*t.shape, dim)


def _batch_t(t, batch: int) -> torch.Tensor:
    t = torch.as_tensor(t)
    if t.ndim == 0:
        t = t.expand(batch)
    return t


def group_count(ch: int) -> int:
    for g in (8, 4, 2, 1):
        if ch % g == 0:
            return g
    return 1


class ResLayer(nn.Module):
    def __init__(self, in_ch: int, out_ch: int, temb_dim: int | None = None,
                 in_groups: int | None = None):
        super().__init__()
        self.norm1 = nn.GroupNorm(in_groups or group_count(in_ch), in_ch)
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, padding=1)
        self.temb = nn.Linear(temb_dim, out_ch) if temb_dim else None
        self.norm2 = nn.GroupNorm(group_count(out_ch), out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1)
        self.skip = nn.Conv2d(in_ch, out_ch, 1) if in_ch != out_ch else nn.Identity()

    def forward(self, x, temb=None):
        h = self.conv1(F.silu(self.norm1(x)))
        if self.temb is not None:
            h = h + self.temb(F.silu(temb))[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return self.skip(x) + h


class Attention(nn.Module):
    def __init__(self, dim: int, ctx_dim: int, heads: int = 1):
        super().__init__()
        if dim % heads:
            heads = 1
        self.heads = heads
        self.q = nn.Linear(dim, dim, bias=False)
        self.k = nn.Linear(ctx_dim, dim, bias=False)
        self.v = nn.Linear(ctx_dim, dim, bias=False)
        self.o = nn.Linear(dim, dim)

    def forward(self, x, ctx):
        b, n, d = x.shape
        h = self.heads

        def split(z):
            return z.reshape(b, z.shape[1], h, d // h).transpose(1, 2)

        q, k, v = split(self.q(x)), split(self.k(ctx)), split(self.v(ctx))
        w = torch.softmax(q @ k.transpose(-1, -2) / math.sqrt(d // h), dim=-1)
        out = (w @ v).transpose(1, 2).reshape(b, n, d)
        return self.o(out)


class TransformerLayer(nn.Module):
    """Pre-norm transformer over spatial tokens with cross-attention on the condition.

    ``self_attn=False`` drops the spatial self-attention so every location is
    processed independently (used by the aggregator and routers).
    """

    def __init__(self, dim: int, cond_dim: int, heads: int = 1, mlp_ratio: int = 2,
                 self_attn: bool = True):
        super().__init__()
        self.ln1 = nn.LayerNorm(dim) if self_attn else None
        self.attn1 = Attention(dim, dim, heads) if self_attn else None
        self.ln2 = nn.LayerNorm(dim)
        self.attn2 = Attention(dim, cond_dim, heads)
        self.ln3 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(nn.Linear(dim, mlp_ratio * dim), nn.GELU(),
                                 nn.Linear(mlp_ratio * dim, dim))

    def forward(self, x, ctx):
        b, c, hh, ww = x.shape
        z = x.flatten(2).transpose(1, 2)
        if self.attn1 is not None:
            y = self.ln1(z)
            z = z + self.attn1(y, y)
        z = z + self.attn2(self.ln2(z), ctx)
        z = z + self.mlp(self.ln3(z))
        return z.transpose(1, 2).reshape(b, c, hh, ww)


class Block(nn.Module):
    """One U-Net stage: ResLayer (time-conditioned) then a cross-attention TransformerLayer."""

    def __init__(self, spec: DenoiserSpec, j: int):
        super().__init__()
        (c_in, _, _), (c_out, _, _) = block_shapes(spec)[j]
        self.kind = spec.kind(j)
        self.conv_in = None
        self.resample = None
        self.out = None
        if j == 0:
            self.conv_in = nn.Conv2d(spec.img_channels, spec.base_channels, 3, padding=1)
            c_in = spec.base_channels
        if self.kind == "down":
            width = c_out
        elif self.kind == "mid":
            width = c_out
        else:
            width = c_out if j < spec.K - 1 else spec.base_channels
        self.res = ResLayer(c_in, width, spec.time_dim)
        self.attn = TransformerLayer(width, spec.cond_dim, spec.heads, spec.mlp_ratio)
        if self.kind == "down":
            self.resample = nn.Conv2d(width, width, 3, stride=2, padding=1)
        elif self.kind == "up":
            self.resample = nn.Conv2d(width, width, 3, padding=1)
            if j == spec.K - 1:
                self.out = nn.Sequential(nn.GroupNorm(group_count(width), width), nn.SiLU(),
                                         nn.Conv2d(width, spec.img_channels, 3, padding=1))

    def forward(self, x, ctx, temb):
        if self.conv_in is not None:
            x = self.conv_in(x)
        h = self.attn(self.res(x, temb), ctx)
        if self.kind == "down":
            h = self.resample(h)
        elif self.kind == "up":
            h = self.resample(F.interpolate(h, scale_factor=2.0, mode="nearest"))
            if self.out is not None:
                h = self.out(h)
        return h


class ToyUNet(nn.Module):
    """All parameters of one denoiser: K blocks plus the shared time MLP and null tokens."""

    version = FORMAT_VERSION

    def __init__(self, spec: DenoiserSpec):
        super().__init__()
        self.spec = spec
        self.time_mlp = nn.Sequential(nn.Linear(spec.base_channels, spec.time_dim), nn.SiLU(),
                                      nn.Linear(spec.time_dim, spec.time_dim))
        self.null_tokens = nn.Parameter(torch.randn(spec.n_tokens, spec.cond_dim) * 0.02)
        self.blocks = nn.ModuleList(Block(spec, j) for j in range(spec.K))
        self._shapes = block_shapes(spec)

    def temb(self, t, batch: int, dtype) -> torch.Tensor:
        emb = time_embedding(_batch_t(t, batch), self.spec.base_channels).to(dtype)
        return self.time_mlp(emb)

    def context(self, c: Condition) -> torch.Tensor:
        null = self.null_tokens.to(c.tokens.dtype).expand_as(c.tokens)
        return torch.where(c.null[:, None, None], null, c.tokens)

    def block_forward(self, j: int, x: torch.Tensor, c: Condition, t) -> torch.Tensor:
        if not 0 <= j < self.spec.K:
            raise ParameterError(f"block index {j} outside [0, {self.spec.K})")
        expected = self._shapes[j][0]
        if tuple(x.shape[1:]) != expected:
            raise ShapeError(f"block {j} expects input {expected}, got {tuple(x.shape[1:])}")
        if len(c) != x.shape[0]:
            raise ShapeError("condition batch size differs from feature batch size")
        temb = self.temb(t, x.shape[0], x.dtype)
        return self.blocks[j](x, self.context(c.to(x.dtype)), temb)

    def forward(self, x_t: torch.Tensor, c: Condition, t, trace: dict | None = None) -> torch.Tensor:
        return run_blocks(self.block_forward, self.spec, x_t, c, t, trace)


def run_blocks(run_block, spec: DenoiserSpec, x_t: torch.Tensor, c: Condition, t,
               trace: dict | None = None) -> torch.Tensor:
    """Run ``run_block(j, x, c, t)`` for every block with skip-stack discipline.

    Outputs of down blocks are pushed; each up block's input is its
    predecessor's output concatenated with the popped skip feature.
    ``trace`` (if given) receives push/pop counts.
    """
    if tuple(x_t.shape[1:]) != (spec.img_channels, spec.img_size, spec.img_size):
        raise ShapeError(f"input shape {tuple(x_t.shape)} does not match the DenoiserSpec")
    stack: list[torch.Tensor] = []
    pushes = pops = 0
    x = x_t
    for j in range(spec.K):
        y = run_block(j, x, c, t)
        nxt = spec.kind(j + 1) if j + 1 < spec.K else None
        if spec.kind(j) == "down":
            stack.append(y)
            pushes += 1
        if nxt == "up":
            if not stack:
                raise InvariantError("skip stack underflow")
            x = torch.cat([y, stack.pop()], dim=1)
            pops += 1
        else:
            x = y
    if stack:
        raise InvariantError("skip stack not empty after the last block")
    if trace is not None:
        trace["pushes"] = trace.get("pushes", 0) + pushes
        trace["pops"] = trace.get("pops", 0) + pops
    return x


def build_denoiser(spec: DenoiserSpec, seed: int) -> ToyUNet:
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        model = ToyUNet(spec)
    return model


def block_forward(params: ToyUNet, j: int, x: torch.Tensor, c: Condition, t) -> torch.Tensor:
    return params.block_forward(j, x, c, t)


def denoiser_forward(params: ToyUNet, x_t: torch.Tensor, c: Condition, t,
                     trace: dict | None = None) -> torch.Tensor:
    return run_blocks(params.block_forward, params.spec, x_t, c, t, trace)
