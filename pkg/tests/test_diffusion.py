import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from afa.diffusion import (CfgConfig, NoiseSchedule, NoisyState, PerfectEpsOracle, cfg_combine,
                           ddim_step, denoising_loss, make_schedule, predict_x0, q_sample, sample,
                           timestep_sequence)
from afa.errors import ParameterError, ShapeError


def test_schedule_single_step():
    sched = make_schedule(1, "linear-beta", 0.1, 0.2)
    np.testing.assert_allclose(sched.alpha_bar, [0.9])


def test_schedule_two_steps():
    sched = make_schedule(2, "linear-beta", 0.1, 0.2)
    np.testing.assert_allclose(sched.alpha_bar, [0.9, 0.72], rtol=1e-12)


def test_default_schedule_monotone():
    sched = make_schedule()
    ab = sched.alpha_bar
    manual = np.cumprod(1 - np.linspace(1e-4, 0.02, 1000))
    np.testing.assert_allclose(ab, manual, rtol=1e-12)
    assert np.all(np.diff(ab) < 0)
    assert ab[-1] < 0.05
    assert np.all((ab > 0) & (ab <= 1))


def test_cosine_schedule_valid():
    sched = make_schedule(1000, "cosine")
    assert np.all(np.diff(sched.alpha_bar) < 0)


@pytest.mark.parametrize("args", [(0, "linear-beta", 1e-4, 0.02), (10, "linear-beta", 0.2, 0.1),
                                  (10, "linear-beta", 0.0, 0.1), (10, "sigmoid", 0.1, 0.2)])
def test_schedule_rejects_bad_parameters(args):
    with pytest.raises(ParameterError):
        make_schedule(*args)


def test_schedule_invariants_enforced():
    with pytest.raises(ParameterError):
        NoiseSchedule(np.array([0.5, 0.7]))
    with pytest.raises(ParameterError):
        NoiseSchedule(np.array([1.2, 0.7]))


def test_q_sample_endpoints():
    sched = NoiseSchedule(np.array([1.0, 0.25, 1e-30]))
    x0 = torch.randn(2, 3, 4, 4, dtype=torch.float64)
    eps = torch.randn_like(x0)
    assert torch.equal(q_sample(x0, eps, 1, sched).x, x0)
    torch.testing.assert_close(q_sample(x0, eps, 3, sched).x, eps, atol=1e-14, rtol=0)
    half = q_sample(torch.ones(1, 3, 2, 2), torch.zeros(1, 3, 2, 2), 2, sched).x
    assert torch.all(half == 0.5)


def test_q_sample_per_sample_timesteps():
    sched = make_schedule()
    x0 = torch.randn(3, 3, 4, 4, dtype=torch.float64)
    eps = torch.randn_like(x0)
    t = torch.tensor([1, 500, 1000])
    batched = q_sample(x0, eps, t, sched).x
    for i in range(3):
        torch.testing.assert_close(batched[i:i + 1], q_sample(x0[i:i + 1], eps[i:i + 1], int(t[i]), sched).x)


def test_q_sample_shape_mismatch():
    with pytest.raises(ShapeError):
        q_sample(torch.zeros(1, 3, 4, 4), torch.zeros(1, 3, 4, 5), 1, make_schedule())


@settings(max_examples=30, deadline=None)
@given(a=st.floats(-5, 5), t=st.integers(1, 1000), seed=st.integers(0, 10_000))
def test_q_sample_linear(a, t, seed):
    g = torch.Generator().manual_seed(seed)
    x0 = torch.randn(1, 3, 4, 4, generator=g, dtype=torch.float64)
    eps = torch.randn(1, 3, 4, 4, generator=g, dtype=torch.float64)
    sched = make_schedule()
    torch.testing.assert_close(q_sample(a * x0, a * eps, t, sched).x, a * q_sample(x0, eps, t, sched).x)


def test_denoising_loss_trivial():
    eps = torch.randn(2, 3, 4, 4)
    assert denoising_loss(eps, eps).item() == 0.0
    assert denoising_loss(eps + 0.5, eps).item() == pytest.approx(0.25)


def test_denoising_loss_matches_loop():
    g = torch.Generator().manual_seed(3)
    pred = torch.randn(4, 4, generator=g, dtype=torch.float64)
    eps = torch.randn(4, 4, generator=g, dtype=torch.float64)
    total = 0.0
    for i in range(4):
        for j in range(4):
            total += (float(pred[i, j]) - float(eps[i, j])) ** 2
    assert abs(denoising_loss(pred, eps).item() - total / 16) < 1e-12


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_denoising_loss_nonnegative(seed):
    g = torch.Generator().manual_seed(seed)
    a, b = torch.randn(2, 3, 3, generator=g), torch.randn(2, 3, 3, generator=g)
    assert denoising_loss(a, b) > 0


def test_denoising_loss_shape_mismatch():
    with pytest.raises(ShapeError):
        denoising_loss(torch.zeros(3), torch.zeros(4))


def test_cfg_combine():
    e_c, e_uc = torch.randn(1, 3, 4, 4), torch.randn(1, 3, 4, 4)
    assert torch.equal(cfg_combine(e_c, e_uc, 0.0), e_uc)
    torch.testing.assert_close(cfg_combine(e_c, e_uc, 1.0), e_c)
    assert torch.all(cfg_combine(torch.ones(2, 2), torch.zeros(2, 2), 7.5) == 7.5)
    assert CfgConfig().beta_cfg == 7.5


@settings(max_examples=30, deadline=None)
@given(beta=st.floats(0, 20))
def test_cfg_combine_fixed_point(beta):
    e = torch.randn(1, 3, 2, 2)
    assert torch.equal(cfg_combine(e, e, beta), e)


def test_ddim_step_recovers_x0_with_true_noise():
    sched = make_schedule()
    x0 = torch.randn(2, 3, 4, 4, dtype=torch.float64)
    eps = torch.randn_like(x0)
    state = q_sample(x0, eps, 700, sched)
    out = ddim_step(NoisyState(state.x, 700), eps, 0, sched)
    torch.testing.assert_close(out.x, x0, atol=1e-6, rtol=0)


def test_ddim_step_simple_values():
    sched = NoiseSchedule(np.array([0.25]))
    out = ddim_step(NoisyState(torch.full((1, 1, 2, 2), 0.5), 1), torch.zeros(1, 1, 2, 2), 0, sched)
    assert torch.all(out.x == 1.0)


def test_ddim_step_literal_update_special_case():
    sched = make_schedule()
    x = torch.randn(1, 3, 4, 4, dtype=torch.float64)
    e = torch.randn_like(x)
    a = float(sched.alpha_bar[399])
    literal = x / np.sqrt(a) - np.sqrt(1 - a) / np.sqrt(a) * e
    torch.testing.assert_close(ddim_step(NoisyState(x, 400), e, 0, sched).x, literal)


def test_ddim_step_rejects_forward_step():
    with pytest.raises(ParameterError):
        ddim_step(NoisyState(torch.zeros(1, 3, 2, 2), 10), torch.zeros(1, 3, 2, 2), 10, make_schedule())


def test_ddim_x0_estimate_consistent():
    sched = make_schedule()
    x = torch.randn(1, 3, 4, 4, dtype=torch.float64)
    e = torch.randn_like(x)
    x0_hat = predict_x0(x, e, 800, sched)
    nxt = ddim_step(NoisyState(x, 800), e, 600, sched)
    torch.testing.assert_close(predict_x0(nxt.x, e, 600, sched), x0_hat)


def test_ten_step_oracle_trajectory():
    sched = make_schedule()
    x0 = torch.randn(1, 3, 4, 4, dtype=torch.float64)
    oracle = PerfectEpsOracle(sched, x0)
    ts = timestep_sequence(sched.T, 10)
    state = NoisyState(torch.randn(1, 3, 4, 4, dtype=torch.float64), ts[0])
    for i, t in enumerate(ts):
        t_next = ts[i + 1] if i + 1 < len(ts) else 0
        state = ddim_step(NoisyState(state.x, t), oracle(state.x, None, t), t_next, sched)
    torch.testing.assert_close(state.x, x0, atol=1e-4, rtol=0)


def test_timestep_sequence():
    ts = timestep_sequence(1000, 50)
    assert len(ts) == 50 and ts[0] == 1000 and ts[-1] == 20
    assert all(a > b for a, b in zip(ts, ts[1:]))
    assert len(set(np.diff(ts))) == 1
    assert timestep_sequence(1000, 1000) == list(range(1000, 0, -1))


def test_sample_deterministic_and_oracle():
    sched = make_schedule()
    x0 = torch.rand(2, 3, 4, 4, dtype=torch.float64) * 2 - 1
    oracle = PerfectEpsOracle(sched, x0)
    cfg = CfgConfig(7.5, 50)
    a = sample(oracle, None, None, cfg, sched, seed=7, shape=x0.shape, dtype=torch.float64)
    b = sample(oracle, None, None, cfg, sched, seed=7, shape=x0.shape, dtype=torch.float64)
    assert torch.equal(a, b)
    torch.testing.assert_close(a, x0, atol=1e-3, rtol=0)
    assert CfgConfig().steps == 50


def test_sample_rejects_bad_denoiser():
    with pytest.raises(ShapeError):
        sample(lambda x, c, t: x[:, :1], None, None, CfgConfig(1.0, 2), make_schedule(), 0, (1, 3, 4, 4))


def test_sample_rejects_too_many_steps():
    with pytest.raises(ParameterError):
        sample(lambda x, c, t: x, None, None, CfgConfig(1.0, 20), make_schedule(10), 0, (1, 3, 4, 4))
