"""Synthetic conditioned shapes corpus.

Each image is one anti-aliased shape on a plain gray background; its
condition is a fixed token embedding of the scene attributes.  Expert
slices are attribute predicates, e.g. ``shape_in("circle")``.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Callable

import numpy as np
import torch

from .errors import ParameterError
from .unet import Condition

SHAPES = ("circle", "square", "triangle")
COLORS = ("red", "green", "blue", "yellow")
POSITIONS = ("top-left", "top-right", "bottom-left", "bottom-right")
SIZES = ("small", "large")

_RGB = {"red": (1.0, -1.0, -1.0), "green": (-1.0, 1.0, -1.0),
        "blue": (-1.0, -1.0, 1.0), "yellow": (1.0, 1.0, -1.0)}
_BACKGROUND = -0.5
_SUPERSAMPLE = 4
_EMBED_SEED = 20240917


@dataclass(frozen=True)
class SceneSpec:
    shape: str
    color: str
    position: str
    size: str

    def __post_init__(self):
        for value, allowed in ((self.shape, SHAPES), (self.color, COLORS),
                               (self.position, POSITIONS), (self.size, SIZES)):
            if value not in allowed:
                raise ParameterError(f"{value!r} not in {allowed}")

    def as_tuple(self):
        return (self.shape, self.color, self.position, self.size)


def all_scenes() -> list[SceneSpec]:
    return [SceneSpec(*v) for v in itertools.product(SHAPES, COLORS, POSITIONS, SIZES)]


def shape_in(*shapes: str) -> Callable[[SceneSpec], bool]:
    for s in shapes:
        if s not in SHAPES:
            raise ParameterError(f"unknown shape {s!r}")
    return lambda spec: spec.shape in shapes


@dataclass
class ConditionedBatch:
    images: torch.Tensor            # (B, 3, H, W) in [-1, 1]
    conditions: Condition
    scene_specs: list[SceneSpec]

    def __len__(self):
        return self.images.shape[0]

    def subset(self, idx) -> "ConditionedBatch":
        idx = torch.as_tensor(idx, dtype=torch.long)
        return ConditionedBatch(self.images[idx], self.conditions[idx],
                                [self.scene_specs[i] for i in idx.tolist()])

    @staticmethod
    def concat(batches: list["ConditionedBatch"]) -> "ConditionedBatch":
        return ConditionedBatch(
            torch.cat([b.images for b in batches]),
            Condition(torch.cat([b.conditions.tokens for b in batches]),
                      torch.cat([b.conditions.null for b in batches])),
            [s for b in batches for s in b.scene_specs])


def _coverage(spec: SceneSpec, img_size: int, center: np.ndarray) -> np.ndarray:
    n = img_size * _SUPERSAMPLE
    coords = (np.arange(n) + 0.5) / _SUPERSAMPLE
    yy, xx = np.meshgrid(coords, coords, indexing="ij")
    r = img_size * (0.14 if spec.size == "small" else 0.22)
    dy, dx = yy - center[0], xx - center[1]
    if spec.shape == "circle":
        inside = dx ** 2 + dy ** 2 <= r ** 2
    elif spec.shape == "square":
        half = r * 0.9
        inside = (np.abs(dx) <= half) & (np.abs(dy) <= half)
    else:
        # upward triangle inscribed in the circle of radius r
        top, base = -r, r * 0.5
        half_w = (dy - top) / (base - top) * r * np.sqrt(3) / 2
        inside = (dy >= top) & (dy <= base) & (np.abs(dx) <= half_w)
    cov = inside.reshape(img_size, _SUPERSAMPLE, img_size, _SUPERSAMPLE).mean(axis=(1, 3))
    return cov


def render(spec: SceneSpec, img_size: int, rng: np.random.Generator) -> np.ndarray:
    q = img_size / 4
    cy = q if spec.position.startswith("top") else 3 * q
    cx = q if spec.position.endswith("left") else 3 * q
    center = np.array([cy, cx]) + rng.uniform(-0.08, 0.08, size=2) * img_size
    cov = _coverage(spec, img_size, center)
    color = np.array(_RGB[spec.color])[:, None, None]
    img = _BACKGROUND + cov[None] * (color - _BACKGROUND)
    return np.clip(img, -1.0, 1.0)


def _embedding_table(cond_dim: int, n_tokens: int) -> dict[tuple[int, str], np.ndarray]:
    table = {}
    for a, values in enumerate((SHAPES, COLORS, POSITIONS, SIZES)):
        for v_idx, value in enumerate(values):
            rng = np.random.default_rng([_EMBED_SEED, a, v_idx, cond_dim, n_tokens])
            table[(a, value)] = rng.standard_normal((n_tokens, cond_dim)) / np.sqrt(cond_dim)
    return table


def encode_condition(spec: SceneSpec, cond_dim: int = 32, n_tokens: int = 4) -> Condition:
    """Deterministic token embedding: sum of per-attribute-value token tables."""
    table = _embedding_table(cond_dim, n_tokens)
    tokens = sum(table[(a, v)] for a, v in enumerate(spec.as_tuple()))
    return Condition(torch.as_tensor(tokens, dtype=torch.float32)[None])


def encode_conditions(specs: list[SceneSpec], cond_dim: int = 32, n_tokens: int = 4) -> Condition:
    table = _embedding_table(cond_dim, n_tokens)
    tokens = np.stack([sum(table[(a, v)] for a, v in enumerate(s.as_tuple())) for s in specs])
    return Condition(torch.as_tensor(tokens, dtype=torch.float32))


def null_condition(batch: int = 1, cond_dim: int = 32, n_tokens: int = 4) -> Condition:
    return Condition(torch.zeros(batch, n_tokens, cond_dim), torch.ones(batch, dtype=torch.bool))


def gen_dataset(n: int, filter: Callable[[SceneSpec], bool] | None = None, img_size: int = 16,
                seed: int = 0, cond_dim: int = 32, n_tokens: int = 4) -> ConditionedBatch:
    if n < 1:
        raise ParameterError("n must be >= 1")
    space = [s for s in all_scenes() if filter is None or filter(s)]
    if not space:
        raise ParameterError("the filter admits no scenes")
    rng = np.random.default_rng(seed)
    picks = rng.integers(len(space), size=n)
    specs = [space[i] for i in picks]
    images = np.stack([render(s, img_size, rng) for s in specs]).astype(np.float32)
    return ConditionedBatch(torch.from_numpy(images), encode_conditions(specs, cond_dim, n_tokens),
                            specs)
