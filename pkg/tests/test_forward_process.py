import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from coral.forward_process import noise_batch, q_sample, sample_timesteps
from coral.schedules import make_linear_schedule

SCHED = make_linear_schedule(100)


def test_identity_at_t0(rng):
    x0 = rng.standard_normal(5)
    np.testing.assert_array_equal(q_sample(x0, 0, rng.standard_normal(5), SCHED), x0)


def test_zero_noise_scales(rng):
    x0 = rng.standard_normal(5)
    out = q_sample(x0, 40, np.zeros(5), SCHED)
    np.testing.assert_allclose(out, np.sqrt(SCHED.alpha_bar[39]) * x0, rtol=0, atol=0)


def test_rejects_t_beyond_T(rng):
    with pytest.raises(ValueError):
        q_sample(np.zeros(3), 101, np.zeros(3), SCHED)


@pytest.mark.parametrize("t", [25, 50, 100])
def test_marginal_variance_monte_carlo(t):
    rng = np.random.default_rng(7)
    eps = rng.standard_normal((100_000, 2))
    x_t = q_sample(np.zeros((100_000, 2)), np.full(100_000, t), eps, SCHED)
    target = 1.0 - SCHED.alpha_bar[t - 1]
    assert np.all(np.abs(x_t.var(axis=0) / target - 1.0) < 0.02)


@given(seed=st.integers(0, 2**31), t=st.integers(0, 100), a=st.floats(-3, 3), b=st.floats(-3, 3))
def test_q_sample_is_linear(seed, t, a, b):
    r = np.random.default_rng(seed)
    x1, x2, e1, e2 = r.standard_normal((4, 6))
    lhs = q_sample(a * x1 + b * x2, t, a * e1 + b * e2, SCHED)
    rhs = a * q_sample(x1, t, e1, SCHED) + b * q_sample(x2, t, e2, SCHED)
    np.testing.assert_allclose(lhs, rhs, rtol=0, atol=1e-12)


def test_batched_matches_rowwise(rng):
    x0 = rng.standard_normal((4, 3))
    eps = rng.standard_normal((4, 3))
    t = np.array([1, 10, 55, 100])
    batched = q_sample(x0, t, eps, SCHED)
    for i in range(4):
        np.testing.assert_array_equal(batched[i], q_sample(x0[i], t[i], eps[i], SCHED))


def test_timesteps_singleton_support():
    assert np.all(sample_timesteps(50, 1, np.random.default_rng(0)) == 1)


def test_timesteps_deterministic():
    a = sample_timesteps(20, 100, np.random.default_rng(3))
    b = sample_timesteps(20, 100, np.random.default_rng(3))
    np.testing.assert_array_equal(a, b)


def test_timesteps_uniform_binomial_bound():
    n, T = 100_000, 100
    t = sample_timesteps(n, T, np.random.default_rng(11))
    assert t.min() == 1 and t.max() == T
    freq = np.bincount(t, minlength=T + 1)[1:]
    sd = np.sqrt(n * (1 / T) * (1 - 1 / T))
    assert np.all(np.abs(freq - n / T) < 4 * sd)


def test_noise_batch_invariant(rng):
    x0 = rng.standard_normal((8, 3))
    nb = noise_batch(x0, SCHED, rng)
    ab = SCHED.abar(nb.t)[:, None]
    np.testing.assert_allclose(nb.x_t, np.sqrt(ab) * x0 + np.sqrt(1 - ab) * nb.eps, atol=1e-15)
    assert np.all((nb.t >= 1) & (nb.t <= 100))
