import random

import pytest
import torch

from afa.unet import Condition, DenoiserSpec


def central_difference(loss_fn, param: torch.Tensor, index: tuple, h: float = 1e-6) -> float:
    """Central finite difference of ``loss_fn()`` w.r.t. one entry of ``param``."""
    with torch.no_grad():
        orig = param[index].item()
        param[index] = orig + h
        up = loss_fn().item()
        param[index] = orig - h
        down = loss_fn().item()
        param[index] = orig
    return (up - down) / (2 * h)


def rel_err(a: float, b: float, floor: float = 1e-8) -> float:
    return abs(a - b) / max(abs(a), abs(b), floor)


def random_entries(params: list[tuple[str, torch.Tensor]], k: int, seed: int):
    rng = random.Random(seed)
    picks = []
    for _ in range(k):
        name, p = rng.choice(params)
        idx = tuple(rng.randrange(s) for s in p.shape)
        picks.append((name, p, idx))
    return picks


def random_condition(batch: int, spec: DenoiserSpec, seed: int, dtype=torch.float32) -> Condition:
    g = torch.Generator().manual_seed(seed)
    return Condition(torch.randn(batch, spec.n_tokens, spec.cond_dim, generator=g, dtype=dtype))


SMALL_SPEC = DenoiserSpec(n_down=2, n_up=2, base_channels=8, channel_mults=(1, 2), cond_dim=8,
                          img_size=8, n_tokens=2)


@pytest.fixture
def small_spec():
    return SMALL_SPEC


# acceptance criteria record (number, passed, detail) here; printed after the run
ACCEPTANCE: dict[int, tuple[str, str]] = {}


def record(n: int, status: str, detail: str = ""):
    ACCEPTANCE[n] = (status, detail)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        status, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:2d}: {status:<6} {detail}")
