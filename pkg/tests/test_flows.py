"""Schedules, steppers, score recovery, and the Gaussian transition density."""
import math

import numpy as np
import pytest

from flowsteer.autodiff import Tape, Tensor, finite_difference, relative_error
from flowsteer.flows import (NoiseSchedule, SdeStepRecord, interpolate,
                             normalize_schedule, ode_step, score_from_velocity,
                             sde_step, sde_transition_mean, transition_log_density)

RNG = np.random.default_rng(11)


def test_normalize_paper_schedule_exact():
    sch = normalize_schedule([1000, 755, 522, 0])
    assert list(sch.times) == [0.0, 0.245, 0.478, 1.0]
    assert sch.n_steps == 3


def test_normalize_two_point_schedule():
    sch = normalize_schedule([1000, 0])
    assert list(sch.times) == [0.0, 1.0]


def test_schedule_deltas():
    sch = normalize_schedule([1000, 500, 0])
    assert list(sch.dts) == [0.5, 0.5]


def test_denormalize_round_trip_identity():
    raw = (1000.0, 755.0, 522.0, 0.0)
    assert normalize_schedule(raw).denormalize() == raw


def test_schedule_rejects_non_monotone_and_bad_endpoints():
    with pytest.raises(ValueError, match="descending"):
        normalize_schedule([1000, 600, 700, 0])
    with pytest.raises(ValueError, match="start at 1000"):
        normalize_schedule([900, 500, 0])


def test_interpolate_scalar_case():
    s = interpolate(np.array(1.0), np.array(0.0), 0.5)
    assert float(s.x_t) == 0.5 and float(s.v_target) == 1.0


def test_interpolate_endpoints():
    data, noise = RNG.normal(size=4), RNG.normal(size=4)
    np.testing.assert_array_equal(interpolate(data, noise, 0.0).x_t, noise)
    np.testing.assert_array_equal(interpolate(data, noise, 1.0).x_t, data)


def test_interpolate_rejects_out_of_range_time():
    with pytest.raises(ValueError, match=r"\[0, 1\]"):
        interpolate(np.zeros(2), np.zeros(2), 1.5)


def test_ode_step_arithmetic():
    assert float(ode_step(np.array(0.0), np.array(1.0), 0.245)) == 0.245
    x = RNG.normal(size=5)
    np.testing.assert_array_equal(ode_step(x, np.zeros(5), 0.3), x)
    # linear field v(x) = -x from x=1 with dt=0.5
    assert float(ode_step(np.array(1.0), np.array(-1.0), 0.5)) == 0.5


def test_score_from_velocity_values():
    # score is forced to zero when x = t*v
    assert float(score_from_velocity(np.array(0.25), np.array(0.5), 0.5)) == 0.0
    assert float(score_from_velocity(np.array(1.0), np.array(0.0), 0.0)) == -1.0
    assert float(score_from_velocity(np.array(0.5), np.array(1.0), 0.5)) == 0.0


def test_score_singularity_clamp():
    with pytest.raises(ValueError, match="singularity"):
        score_from_velocity(np.zeros(2), np.zeros(2), 0.9995)


def test_sde_sigma_zero_is_ode_bit_exact():
    for i in range(200):
        rng = np.random.default_rng(i)
        x, v = rng.normal(size=8), rng.normal(size=8)
        t = rng.uniform(0, 0.99)
        dt = rng.uniform(0.01, 0.5)
        out, rec = sde_step(x, v, t, dt, 0.0, np.zeros(8), step_index=0)
        np.testing.assert_array_equal(out, ode_step(x, v, dt))
        assert rec.deterministic and rec.log_density is None


def test_sde_step_mean_and_scale():
    # with zero score contribution the mean is the Euler step
    x, v = np.array(0.0), np.array(1.0)
    out, rec = sde_step(x, v, 0.0, 0.245, 0.4, np.array(0.0), step_index=0)
    # score(0, 1, 0) = -(0 - 0)/1 = 0, so mean = 0 + 1*0.245
    assert float(rec.mean) == pytest.approx(0.245, abs=1e-15)
    assert float(out) == float(rec.mean)      # eps = 0
    assert rec.scale == pytest.approx(0.4 * math.sqrt(0.245), rel=1e-12)
    _, rec2 = sde_step(np.zeros(3), np.ones(3), 0.1, 0.25, 0.4, np.zeros(3))
    assert rec2.scale == pytest.approx(0.2, rel=1e-12)


def test_sde_record_log_density_consistency():
    x, v = RNG.normal(size=6), RNG.normal(size=6)
    out, rec = sde_step(x, v, 0.3, 0.2, 0.4, RNG.normal(size=6), step_index=1)
    assert rec.log_density == transition_log_density(rec.sample, rec.mean, rec.scale)
    np.testing.assert_array_equal(out, rec.sample)


def test_transition_log_density_values():
    assert transition_log_density(np.zeros(1), np.zeros(1), 1.0) == \
        pytest.approx(-0.9189385332046727, abs=1e-12)
    for d in (2, 5, 9):
        sigma = 0.37
        got = transition_log_density(np.zeros(d), np.zeros(d), sigma)
        assert got == pytest.approx(-0.5 * d * math.log(2 * math.pi * sigma ** 2), rel=1e-12)
    with pytest.raises(ValueError, match="positive"):
        transition_log_density(np.zeros(2), np.zeros(2), 0.0)


def test_transition_log_density_gradient_wrt_mean():
    x = RNG.normal(size=7)
    mean0 = RNG.normal(size=7)
    scale = 0.53
    tape = Tape()
    mean = Tensor(mean0, tape)
    out = transition_log_density(x, mean, scale)
    tape.backward(out)
    fd = finite_difference(
        lambda args: transition_log_density(x, args[0], scale), [mean0], 0, eps=1e-6)
    assert relative_error(mean.grad, fd) <= 1e-6
    # stationary at the mean
    tape = Tape()
    mean = Tensor(x.copy(), tape)
    tape.backward(transition_log_density(x, mean, scale))
    np.testing.assert_array_equal(mean.grad, np.zeros(7))


def test_transition_mean_matches_between_array_and_tensor_paths():
    x, v = RNG.normal(size=9), RNG.normal(size=9)
    t, dt, sigma = 0.245, 0.233, 0.4
    plain = sde_transition_mean(x, v, t, dt, sigma)
    tape = Tape()
    tracked = sde_transition_mean(Tensor(x, tape), Tensor(v, tape), t, dt, sigma)
    np.testing.assert_array_equal(plain, tracked.data)


def analytic_velocity(x, t):
    """Optimal velocity for N(0,1) data and N(0,1) noise under linear
    interpolation: from the joint-Gaussian conditional expectations,
    E[x1|x_t] = t x / var_t and E[x0|x_t] = (1-t) x / var_t with
    var_t = t^2 + (1-t)^2, so v*(x,t) = (2t - 1) x / var_t."""
    var = t * t + (1.0 - t) ** 2
    return (2.0 * t - 1.0) / var * x


def run_marginal_preservation(n_paths=20000, steps=64, t_end=0.98, sigma=0.4, seed=5):
    rng = np.random.default_rng(seed)
    x0 = rng.standard_normal(n_paths)
    dt = t_end / steps
    x_ode = x0.copy()
    x_sde = x0.copy()
    for k in range(steps):
        t = k * dt
        x_ode = ode_step(x_ode, analytic_velocity(x_ode, t), dt)
        v = analytic_velocity(x_sde, t)
        eps = rng.standard_normal(n_paths)
        x_sde, _ = sde_step(x_sde, v, t, dt, sigma, eps)
    return x_ode, x_sde


def test_sde_preserves_marginals_of_the_analytic_problem():
    x_ode, x_sde = run_marginal_preservation()
    assert abs(x_sde.mean() - x_ode.mean()) < 0.05
    assert abs(x_sde.std() - x_ode.std()) < 0.05
    # sanity: the ODE-transported std tracks the interpolant's closed form
    t = 0.98
    expected_std = math.sqrt(t * t + (1 - t) ** 2)
    assert abs(x_ode.std() - expected_std) < 0.05
