import numpy as np
import pytest
import torch

from afa.data import (COLORS, POSITIONS, SHAPES, SIZES, ConditionedBatch, SceneSpec, all_scenes,
                      encode_condition, encode_conditions, gen_dataset, null_condition, render,
                      shape_in)
from afa.errors import ParameterError


def test_scene_space():
    scenes = all_scenes()
    assert len(scenes) == len(SHAPES) * len(COLORS) * len(POSITIONS) * len(SIZES)
    assert len(set(scenes)) == len(scenes)


def test_slices_are_disjoint():
    a, b = shape_in("circle"), shape_in("square")
    assert not any(a(s) and b(s) for s in all_scenes())
    assert all(a(s) for s in gen_dataset(50, a, seed=0).scene_specs)


def test_render_range_and_background():
    rng = np.random.default_rng(0)
    img = render(SceneSpec("square", "red", "top-left", "large"), 16, rng)
    assert img.shape == (3, 16, 16)
    assert img.min() >= -1.0 and img.max() <= 1.0
    assert np.allclose(img[:, -1, -1], -0.5)
    assert np.allclose(img[:, 4, 4], [1.0, -1.0, -1.0])


def test_render_position():
    rng = np.random.default_rng(0)
    for pos in POSITIONS:
        img = render(SceneSpec("circle", "blue", pos, "large"), 16, rng)
        mass = img[2] + 0.5
        ys, xs = np.nonzero(mass > 0.25)
        assert (ys.mean() < 8) == pos.startswith("top")
        assert (xs.mean() < 8) == pos.endswith("left")


def test_shapes_differ_in_area():
    rng = np.random.default_rng(0)
    area = {s: (render(SceneSpec(s, "green", "top-left", "large"), 16, rng)[1] + 0.5).sum()
            for s in SHAPES}
    assert area["triangle"] < area["circle"] < area["square"] * 1.2
    assert len({round(v, 3) for v in area.values()}) == 3


def test_encoding_deterministic_and_distinct():
    a = encode_condition(SceneSpec("circle", "red", "top-left", "small"))
    b = encode_condition(SceneSpec("circle", "red", "top-left", "small"))
    c = encode_condition(SceneSpec("square", "red", "top-left", "small"))
    assert torch.equal(a.tokens, b.tokens)
    assert not torch.equal(a.tokens, c.tokens)
    assert a.tokens.shape == (1, 4, 32) and not a.null.any()
    many = encode_conditions([SceneSpec("circle", "red", "top-left", "small")] * 2, 8, 2)
    assert many.tokens.shape == (2, 2, 8)


def test_null_condition():
    n = null_condition(3, 8, 2)
    assert n.tokens.shape == (3, 2, 8) and n.is_null and n.null.all()
    assert torch.all(n.tokens == 0)


def test_gen_dataset_reproducible():
    a = gen_dataset(20, seed=5)
    b = gen_dataset(20, seed=5)
    assert torch.equal(a.images, b.images) and a.scene_specs == b.scene_specs
    assert not torch.equal(a.images, gen_dataset(20, seed=6).images)
    assert a.images.dtype == torch.float32 and a.images.shape == (20, 3, 16, 16)


def test_batch_subset_and_concat():
    a = gen_dataset(5, seed=0)
    b = gen_dataset(3, seed=1)
    ab = ConditionedBatch.concat([a, b])
    assert len(ab) == 8
    sub = ab.subset([5, 0])
    assert torch.equal(sub.images[0], b.images[0]) and sub.scene_specs[1] == a.scene_specs[0]


@pytest.mark.parametrize("bad", [lambda: SceneSpec("hexagon", "red", "top-left", "small"),
                                 lambda: shape_in("oval"),
                                 lambda: gen_dataset(0),
                                 lambda: gen_dataset(5, lambda s: False)])
def test_validation(bad):
    with pytest.raises(ParameterError):
        bad()
