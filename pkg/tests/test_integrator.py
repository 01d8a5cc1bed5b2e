import math

import jax.numpy as jnp
import numpy as np
import pytest

from particle_shooting.integrator import DivergenceError, IntegratorSpec, integrate


def exp_rhs(t, y):
    return y, ()


def test_zero_field_keeps_state():
    y0 = {"a": jnp.array([1.0, -2.0]), "b": jnp.ones((2, 3))}
    log = integrate(lambda t, y: ({k: jnp.zeros_like(v) for k, v in y.items()}, ()), y0, IntegratorSpec("rk4", 0.1, 1.0))
    for k in y0:
        np.testing.assert_array_equal(log.final[k], y0[k])


def rk4_factor(h):
    return 1 + h + h**2 / 2 + h**3 / 6 + h**4 / 24


def test_rk4_exponential():
    log = integrate(exp_rhs, jnp.array(1.0), IntegratorSpec("rk4", 0.1, 1.0))
    # one rk4 step on x' = x multiplies by the degree-4 Taylor polynomial of exp(h)
    assert float(log.final) == pytest.approx(rk4_factor(0.1) ** 10, rel=0, abs=1e-14)
    # which leaves a global error of about 2.1e-6 at h = 0.1
    assert abs(float(log.final) - math.e) < 2.1e-6
    fine = integrate(exp_rhs, jnp.array(1.0), IntegratorSpec("rk4", 0.05, 1.0))
    assert abs(float(fine.final) - math.e) < 1e-6


def test_euler_exponential_is_compound_growth():
    log = integrate(exp_rhs, jnp.array(1.0), IntegratorSpec("euler", 0.1, 1.0))
    assert float(log.final) == pytest.approx(1.1**10, rel=0, abs=1e-12)
    assert float(log.final) == pytest.approx(2.5937424601, abs=1e-10)


def test_rk4_order_four():
    def err(h):
        log = integrate(exp_rhs, jnp.array(1.0), IntegratorSpec("rk4", h, 1.0))
        return abs(float(log.final) - math.e)

    ratio = err(0.1) / err(0.05)
    assert 12 <= ratio <= 20


def test_grid_and_shortened_last_step():
    spec = IntegratorSpec("rk4", 0.3, 1.0)
    np.testing.assert_allclose(spec.step_sizes(), [0.3, 0.3, 0.3, 0.1])
    assert spec.grid()[-1] == pytest.approx(1.0)
    log = integrate(exp_rhs, jnp.array(1.0), spec)
    assert float(log.final) == pytest.approx(rk4_factor(0.3) ** 3 * rk4_factor(0.1), rel=0, abs=1e-14)
    assert IntegratorSpec("rk4", 0.1, 1.0).n_steps == 10
    assert IntegratorSpec("rk4", 0.05, 0.25).n_steps == 5


def test_invalid_specs():
    with pytest.raises(ValueError):
        IntegratorSpec("rk4", 0.0, 1.0)
    with pytest.raises(ValueError):
        IntegratorSpec("midpoint", 0.1, 1.0)
    with pytest.raises(ValueError):
        IntegratorSpec("rk4", 0.1, -1.0)


def test_recording_and_side_channel():
    def rhs(t, y):
        return -y, {"t": t, "y": y}

    spec = IntegratorSpec("rk4", 0.25, 1.0)
    log = integrate(rhs, jnp.array([1.0, 2.0]), spec)
    assert log.states.shape == (5, 2)
    np.testing.assert_allclose(log.times, [0, 0.25, 0.5, 0.75, 1.0])
    # grid aux is the stage-0 evaluation, i.e. the state itself
    np.testing.assert_array_equal(log.aux["y"], log.states)
    np.testing.assert_allclose(log.aux["t"], log.times)
    assert log.stage_aux["y"].shape == (4, 4, 2)
    np.testing.assert_allclose(log.stage_times[0], [0, 0.125, 0.125, 0.25])


def test_divergence_names_step():
    def rhs(t, y):
        return y * y, ()

    # y' = y^2 from y=1 blows up at t = 1
    with pytest.raises(DivergenceError) as info:
        integrate(rhs, jnp.array(1.0), IntegratorSpec("euler", 0.5, 20.0))
    assert info.value.step >= 1
    assert f"step {info.value.step}" in str(info.value)


def test_deterministic():
    rng = np.random.default_rng(0)
    M = jnp.asarray(rng.normal(size=(4, 4)))
    y0 = jnp.asarray(rng.normal(size=4))
    rhs = lambda t, y: (jnp.tanh(M @ y), ())  # noqa: E731
    a = integrate(rhs, y0, IntegratorSpec("rk4", 0.01, 1.0))
    b = integrate(rhs, y0, IntegratorSpec("rk4", 0.01, 1.0))
    np.testing.assert_array_equal(a.states, b.states)
