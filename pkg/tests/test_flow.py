import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy import stats

from bagel_toy.errors import ConfigurationError, DimensionError, InputError, SamplingError
from bagel_toy.flow import (FlowBatch, cfg_combine, euler_sample, flow_loss, make_schedule, noise_latents,
                            sample_timestep, shift_timestep, shifted_cdf, velocity_target)
from bagel_toy.tensor import parameter


def test_endpoints_are_exact(rng):
    x0, eps = rng.standard_normal((3, 4)), rng.standard_normal((3, 4))
    np.testing.assert_array_equal(noise_latents(x0, eps, 0.0), x0)
    np.testing.assert_array_equal(noise_latents(x0, eps, 1.0), eps)


def test_noise_level_domain(rng):
    with pytest.raises(ConfigurationError):
        noise_latents(np.zeros(2), np.zeros(2), 1.5)
    with pytest.raises(DimensionError):
        noise_latents(np.zeros(2), np.zeros(3), 0.5)


@pytest.mark.parametrize("steps", [1, 3, 50])
def test_euler_recovers_data_under_constant_velocity(steps, rng):
    x0, eps = rng.standard_normal((2, 2, 4)), rng.standard_normal((2, 2, 4))
    v = velocity_target(x0, eps)
    out = euler_sample(lambda x, t: v, eps, make_schedule(steps))
    np.testing.assert_allclose(out, x0, rtol=0, atol=1e-12)


def test_euler_rejects_bad_schedules():
    with pytest.raises(ConfigurationError):
        euler_sample(lambda x, t: x, np.zeros(1), [0.0, 1.0])
    with pytest.raises(ConfigurationError):
        euler_sample(lambda x, t: x, np.zeros(1), [1.0])


def test_euler_reports_failing_step():
    with pytest.raises(SamplingError) as err:
        euler_sample(lambda x, t: np.full_like(x, np.inf) if t < 0.6 else x, np.ones(2), make_schedule(4))
    assert err.value.step == 2


def test_schedule_shape_and_shift():
    s = make_schedule(4)
    np.testing.assert_allclose(s, [1, 0.75, 0.5, 0.25, 0])
    shifted = make_schedule(4, shift=3.0)
    assert shifted[0] == 1.0 and shifted[-1] == 0.0 and np.all(shifted[1:-1] > s[1:-1])


@given(st.floats(0, 1), st.floats(1, 10))
def test_shift_is_monotone_bijection(u, s):
    t = shift_timestep(u, s)
    assert 0.0 <= t <= 1.0
    assert shifted_cdf(t, s) == pytest.approx(u, abs=1e-12)


@pytest.mark.parametrize("shift", [1.0, 4.0])
def test_timestep_distribution(shift):
    draws = sample_timestep(shift, np.random.default_rng(0), size=100_000)
    d = stats.kstest(draws, lambda t: shifted_cdf(t, shift)).statistic
    assert d < 0.01


def test_shift_below_one_rejected(rng):
    with pytest.raises(ConfigurationError):
        sample_timestep(0.5, rng)


def test_cfg_combine():
    c, u = np.array([2.0, 4.0]), np.array([1.0, 1.0])
    np.testing.assert_array_equal(cfg_combine(c, u, 1.0), c)
    np.testing.assert_array_equal(cfg_combine(c, u, 0.0), u)
    np.testing.assert_array_equal(cfg_combine(c, u, 3.0), [4.0, 10.0])
    with pytest.raises(ConfigurationError):
        cfg_combine(c, u, -1.0)


def test_flow_loss_ignores_unmasked_rows(rng):
    x0, eps = rng.standard_normal((4, 3)), rng.standard_normal((4, 3))
    pred = parameter(rng.standard_normal((4, 3)))
    mask = np.array([True, False, True, False])
    loss = flow_loss(pred, x0, eps, mask)
    want = np.mean((pred.data[mask] - (eps - x0)[mask]) ** 2)
    assert loss.item() == pytest.approx(want)
    loss.backward()
    assert np.all(pred.grad[~mask] == 0)
    with pytest.raises(InputError):
        flow_loss(pred, x0, eps, np.zeros(4, bool))


def test_flow_batch(rng):
    fb = FlowBatch.make([np.ones((2, 2))], [0.25], rng)
    np.testing.assert_allclose(fb.x_t[0], 0.75 + 0.25 * fb.eps[0])
    np.testing.assert_allclose(fb.v_target[0], fb.eps[0] - 1.0)
