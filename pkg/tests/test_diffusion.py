import json
import math
import random

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from diffalign.diffusion import (
    NoiseSchedule,
    ddim_step,
    eps_from_x0,
    make_schedule,
    q_sample,
    sigma_for_eta,
    x0_from_eps,
)
from diffalign.errors import ConfigError, ShapeError


def sched_with_alpha_bar(values):
    """Hand-built schedule whose cumulative products are exactly `values`."""
    ab = torch.tensor(values, dtype=torch.float64)
    prev = torch.cat([torch.ones(1, dtype=torch.float64), ab[:-1]])
    alpha = ab / prev
    return NoiseSchedule(T=len(values), kind="linear", beta_start=0.0, beta_end=0.0,
                         beta=1.0 - alpha, alpha=alpha, alpha_bar=ab)


# ---------------------------------------------------------------- schedule

def test_two_step_half_betas():
    s = make_schedule(2, beta_start=0.5, beta_end=0.5)
    assert torch.allclose(s.alpha_bar, torch.tensor([0.5, 0.25], dtype=torch.float64))


def test_single_step():
    s = make_schedule(1, beta_start=0.1, beta_end=0.1)
    assert torch.allclose(s.alpha_bar, torch.tensor([0.9], dtype=torch.float64))


def test_default_schedule_decays_below_one_percent():
    s = make_schedule(1000)
    # independent evaluation of the same product with numpy
    betas = np.linspace(1e-4, 0.02, 1000, dtype=np.float64)
    want = np.cumprod(1.0 - betas)
    assert np.allclose(s.alpha_bar.numpy(), want, rtol=1e-12)
    assert float(s.alpha_bar[-1]) < 0.01
    assert (s.alpha_bar[1:] < s.alpha_bar[:-1]).all()


def test_schedule_consistency_exact():
    s = make_schedule(1000)
    assert torch.equal(s.alpha_bar[1:], s.alpha_bar[:-1] * s.alpha[1:])
    assert torch.equal(s.alpha_bar[:1], s.alpha[:1])


def test_alpha_bar_at_zero_is_one():
    s = make_schedule(10)
    assert float(s.alpha_bar_at(0)) == 1.0
    t = torch.tensor([0, 1, 10])
    got = s.alpha_bar_at(t)
    assert float(got[0]) == 1.0
    assert float(got[1]) == float(s.alpha_bar[0])
    assert float(got[2]) == float(s.alpha_bar[9])


@pytest.mark.parametrize("kwargs", [
    dict(T=0),
    dict(T=10, beta_start=0.0),
    dict(T=10, beta_start=0.3, beta_end=0.2),
    dict(T=10, beta_end=1.0),
    dict(T=10, kind="cosine"),
])
def test_schedule_rejects_bad_config(kwargs):
    with pytest.raises(ConfigError):
        make_schedule(**kwargs)


def test_alpha_bar_at_rejects_out_of_range():
    s = make_schedule(10)
    with pytest.raises(ConfigError):
        s.alpha_bar_at(11)
    with pytest.raises(ConfigError):
        s.alpha_bar_at(torch.tensor([-1]))


def test_schedule_json_round_trip():
    s = make_schedule(50, beta_start=2e-4, beta_end=0.015)
    s2 = NoiseSchedule.from_json(s.to_json())
    assert torch.equal(s.alpha_bar, s2.alpha_bar)
    assert s.fingerprint() == s2.fingerprint()
    assert s.fingerprint() != make_schedule(51, beta_start=2e-4, beta_end=0.015).fingerprint()
    record = json.loads(s.to_json())
    assert set(record) == {"T", "kind", "beta_start", "beta_end"}


# ---------------------------------------------------------------- q_sample

def test_q_sample_pure_noise_component():
    s = sched_with_alpha_bar([0.25])
    out = q_sample(torch.zeros(4, 3), 1, torch.ones(4, 3), s)
    assert torch.allclose(out, torch.full((4, 3), math.sqrt(0.75)))


def test_q_sample_pure_signal_component():
    s = sched_with_alpha_bar([0.25])
    out = q_sample(torch.ones(4, 3), 1, torch.zeros(4, 3), s)
    assert torch.allclose(out, torch.full((4, 3), 0.5))


def test_q_sample_near_identity_at_tiny_beta():
    s = make_schedule(1000)
    x0 = torch.randn(8, 8)
    out = q_sample(x0, 1, torch.randn(8, 8), s)
    assert torch.allclose(out, x0, atol=0.05)


def test_q_sample_shape_mismatch():
    s = make_schedule(10)
    with pytest.raises(ShapeError):
        q_sample(torch.zeros(2, 3), 1, torch.zeros(3, 2), s)


def test_q_sample_per_sample_timesteps():
    s = make_schedule(100)
    g = torch.Generator().manual_seed(7)
    x0 = torch.randn(3, 2, 4, 4, generator=g)
    eps = torch.randn(3, 2, 4, 4, generator=g)
    t = torch.tensor([1, 50, 100])
    batched = q_sample(x0, t, eps, s)
    for i, ti in enumerate([1, 50, 100]):
        single = q_sample(x0[i], ti, eps[i], s)
        assert torch.allclose(batched[i], single)


def test_q_sample_variance_sanity():
    s = make_schedule(1000)
    t = 400
    ab = float(s.alpha_bar_at(t))
    n = 200_000
    g = torch.Generator().manual_seed(123)
    x0 = torch.full((n,), 0.7, dtype=torch.float64)
    eps = torch.randn(n, generator=g, dtype=torch.float64)
    draws = q_sample(x0, t, eps, s)
    want_mean = math.sqrt(ab) * 0.7
    want_var = 1.0 - ab
    se_mean = math.sqrt(want_var / n)
    se_var = want_var * math.sqrt(2.0 / (n - 1))
    assert abs(float(draws.mean()) - want_mean) < 3 * se_mean
    assert abs(float(draws.var(unbiased=True)) - want_var) < 3 * se_var


# ---------------------------------------------------------------- eps <-> x0

def test_eps_recovery_scaling():
    s = sched_with_alpha_bar([0.25])
    x_t = torch.randn(5, 5, dtype=torch.float64)
    got = eps_from_x0(x_t, x_t, 1, s)
    assert torch.allclose(got, x_t * 0.5773502691896258, atol=1e-12)


def test_eps_zero_in_zero_out():
    s = sched_with_alpha_bar([0.25])
    z = torch.zeros(3, 3)
    assert torch.equal(eps_from_x0(z, z, 1, s), z)


def test_eps_at_alpha_bar_one_is_undefined():
    s = make_schedule(10)
    with pytest.raises(ZeroDivisionError):
        eps_from_x0(torch.zeros(2), torch.zeros(2), 0, s)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), t=st.integers(1, 1000))
def test_inverse_identity(seed, t):
    s = make_schedule(1000)
    g = torch.Generator().manual_seed(seed)
    x0 = torch.randn(2, 3, 4, generator=g, dtype=torch.float64)
    eps = torch.randn(2, 3, 4, generator=g, dtype=torch.float64)
    x_t = q_sample(x0, t, eps, s)
    assert torch.allclose(eps_from_x0(x_t, x0, t, s), eps, atol=1e-10)
    assert torch.allclose(x0_from_eps(x_t, eps, t, s), x0, atol=1e-10)


def test_shape_guards_on_conversions():
    s = make_schedule(10)
    with pytest.raises(ShapeError):
        eps_from_x0(torch.zeros(2, 2), torch.zeros(4), 5, s)
    with pytest.raises(ShapeError):
        x0_from_eps(torch.zeros(2, 2), torch.zeros(4), 5, s)


# ---------------------------------------------------------------- ddim_step

def test_terminal_step_returns_clean_estimate_exactly():
    s = make_schedule(100)
    g = torch.Generator().manual_seed(0)
    x_t = torch.randn(2, 4, 4, generator=g)
    x0_hat = torch.randn(2, 4, 4, generator=g)
    out = ddim_step(x_t, x0_hat, 37, 0, 0.0, s)
    assert torch.equal(out, x0_hat)


def test_step_with_true_x0_matches_forward_draw():
    s = make_schedule(1000)
    g = torch.Generator().manual_seed(11)
    x0 = torch.randn(3, 2, 2, generator=g, dtype=torch.float64)
    eps = torch.randn(3, 2, 2, generator=g, dtype=torch.float64)
    x_t = q_sample(x0, 800, eps, s)
    out = ddim_step(x_t, x0, 800, 600, 0.0, s)
    assert torch.allclose(out, q_sample(x0, 600, eps, s), atol=1e-10)


def test_scalar_step_value():
    s = sched_with_alpha_bar([0.81, 0.25])
    x_t = torch.tensor([1.0], dtype=torch.float64)
    x0_hat = torch.tensor([0.4], dtype=torch.float64)
    eps_hat = eps_from_x0(x_t, x0_hat, 2, s)
    assert abs(float(eps_hat) - 0.9237604307034012) < 1e-12
    out = ddim_step(x_t, x0_hat, 2, 1, 0.0, s)
    want = 0.9 * 0.4 + math.sqrt(0.19) * 0.9237604307034012
    assert abs(float(out) - want) < 1e-12
    assert abs(float(out) - 0.76264) < 5e-5


def test_oracle_denoiser_reaches_x0_for_any_stride_pattern():
    s = make_schedule(1000)
    g = torch.Generator().manual_seed(42)
    x0 = torch.randn(1, 4, 4, generator=g)
    rng = random.Random(0)
    for _ in range(5):
        ts = sorted(rng.sample(range(1, 1001), rng.randint(2, 12)), reverse=True)
        x = torch.randn(1, 4, 4, generator=g)  # arbitrary start, any timestep
        steps = ts + [0]
        for t, t_prev in zip(steps[:-1], steps[1:]):
            x = ddim_step(x, x0, t, t_prev, 0.0, s)
        assert torch.equal(x, x0)


def test_step_rejects_bad_arguments():
    s = make_schedule(100)
    x = torch.zeros(2)
    with pytest.raises(ConfigError):
        ddim_step(x, x, 10, 10, 0.0, s)
    with pytest.raises(ConfigError):
        ddim_step(x, x, 10, 20, 0.0, s)
    with pytest.raises(ConfigError):
        ddim_step(x, x, 10, 5, -0.1, s)
    with pytest.raises(ConfigError):
        ddim_step(x, x, 100, 1, 1.5, s)  # sigma^2 > 1 - alpha_bar_prev
    with pytest.raises(ConfigError):
        ddim_step(x, x, 10, 5, 0.2, s)  # stochastic step without a noise draw


def test_stochastic_step_uses_supplied_noise():
    s = make_schedule(1000)
    g = torch.Generator().manual_seed(3)
    x_t = torch.randn(4, generator=g, dtype=torch.float64)
    x0_hat = torch.randn(4, generator=g, dtype=torch.float64)
    z = torch.randn(4, generator=g, dtype=torch.float64)
    sig = 0.05
    base = ddim_step(x_t, x0_hat, 500, 400, 0.0, s)
    noisy = ddim_step(x_t, x0_hat, 500, 400, sig, s, noise=z)
    ab_prev = float(s.alpha_bar_at(400))
    eps_hat = eps_from_x0(x_t, x0_hat, 500, s)
    drift = (math.sqrt(1 - ab_prev - sig**2) - math.sqrt(1 - ab_prev)) * eps_hat
    assert torch.allclose(noisy - base, drift + sig * z, atol=1e-10)


def test_eta_scaling():
    s = make_schedule(1000)
    assert sigma_for_eta(0.0, 500, 400, s) == 0.0
    sig = sigma_for_eta(1.0, 500, 400, s)
    assert sig > 0
    ab_prev = float(s.alpha_bar_at(400))
    assert sig**2 <= 1.0 - ab_prev
