import math

import jax
import jax.numpy as jnp
import numpy as np
import pytest

from particle_shooting.dynamics import UpDownField, UpDownTheta
from particle_shooting.integrator import IntegratorSpec
from particle_shooting.objective import (
    ObjectiveSpec,
    Readout,
    UndefinedMetricError,
    complexity_integrand,
    complexity_metric,
    data_loss,
    regularizer_integral,
    total_objective,
)
from particle_shooting.parameterizations import (
    AffineLift,
    DirectParams,
    ModelTrajectory,
    ModeSpec,
    ParticleParams,
    forward,
)


def constant_trajectory(theta: UpDownTheta, n_grid=11, T=1.0, x=None):
    times = jnp.linspace(0.0, T, n_grid)
    stacked = jax.tree_util.tree_map(lambda c: jnp.broadcast_to(c, (n_grid, *c.shape)), theta)
    return ModelTrajectory(times, x, times, stacked, None, None)


def zero_theta(d=1, alpha=2):
    return UpDownField(d, alpha).zero_theta()


def test_regularizer_of_zero_weights():
    model = UpDownField(1, 2)
    assert float(regularizer_integral(constant_trajectory(zero_theta()), model)) == 0.0


def test_regularizer_constant_integrand():
    model = UpDownField(1, 2, weights=(1, 1, 1, 1, 10))
    th = zero_theta()._replace(t1=jnp.array([[1.0, 1.0]]))  # squared norm 2
    assert float(regularizer_integral(constant_trajectory(th), model)) == pytest.approx(1.0, abs=1e-15)


def test_regularizer_rejects_empty_log():
    traj = ModelTrajectory(jnp.zeros(0), None, jnp.zeros(0), None, None, None)
    with pytest.raises(ValueError):
        regularizer_integral(traj, UpDownField(1, 2))


def _shooting_setup(weights=(1, 1, 1, 1, 10), activation="tanh", seed=0, K=4, scale=0.3):
    rng = np.random.default_rng(seed)
    spec = ModeSpec("dynamic_with_particles", 1, 3, K=K, activation=activation, weights=weights)
    S = spec.model.state_dim
    lift = AffineLift(jnp.asarray(rng.normal(size=(3, 1))), jnp.asarray(rng.normal(size=3)))
    params = ParticleParams(jnp.asarray(rng.normal(size=(K, S))), jnp.asarray(scale * rng.normal(size=(K, S))), lift)
    x0 = jnp.asarray(rng.normal(size=(5, 1)))
    return spec, params, x0


def test_regularizer_of_shooting_rollout_is_set_by_initial_hamiltonian():
    spec, params, x0 = _shooting_setup()
    traj = forward(params, x0, spec, IntegratorSpec("rk4", 0.01, 1.0))
    # at optimal weights H = R - p.f = -R, and H is conserved along the flow
    reg = float(regularizer_integral(traj, spec.model))
    assert reg == pytest.approx(-1.0 * float(traj.hamiltonian[0]), abs=1e-6)


def test_regularizer_refinement():
    spec, params, x0 = _shooting_setup(seed=1)
    vals = [
        float(regularizer_integral(forward(params, x0, spec, IntegratorSpec("rk4", h, 1.0)), spec.model))
        for h in (0.1, 0.05, 0.025)
    ]
    # successive refinements close in at least at second order
    assert abs(vals[0] - vals[1]) >= 4.0 * abs(vals[1] - vals[2])
    assert abs(vals[1] - vals[2]) < 1e-6


def test_regularizer_of_piecewise_constant_weights_is_exact():
    rng = np.random.default_rng(2)
    spec = ModeSpec("dynamic_direct", 1, 2, blocks=5)
    model = spec.model
    theta = UpDownTheta(*(jnp.asarray(rng.normal(size=(5, *c.shape))) for c in model.zero_theta()))
    lift = AffineLift(jnp.ones((2, 1)), jnp.zeros(2))
    traj = forward(DirectParams(theta, lift), jnp.zeros((1, 1)), spec, IntegratorSpec("rk4", 0.1, 1.0))
    exact = sum(0.2 * float(model.penalty(UpDownTheta(*(c[i] for c in theta)))) for i in range(5))
    assert float(regularizer_integral(traj, model)) == pytest.approx(exact, abs=1e-12)


def test_complexity_constant_norm_two():
    th = zero_theta()._replace(b1=jnp.array([2.0]))
    assert float(complexity_metric(constant_trajectory(th))) == pytest.approx(1.0, abs=1e-15)


def test_complexity_unit_norm():
    th = zero_theta()._replace(t3=jnp.array([[0.6, 0.0], [0.0, 0.8]]))
    assert float(complexity_metric(constant_trajectory(th))) == pytest.approx(0.0, abs=1e-15)


def test_complexity_uses_unweighted_concatenation():
    th = zero_theta()._replace(t1=jnp.array([[3.0, 0.0]]), b2=jnp.array([0.0, 4.0]))
    traj = constant_trajectory(th, T=2.0)
    assert float(complexity_metric(traj)) == pytest.approx(2 * math.log2(5.0), abs=1e-14)


def test_complexity_undefined_for_vanishing_weights():
    with pytest.raises(UndefinedMetricError):
        complexity_metric(constant_trajectory(zero_theta()))


def test_complexity_integrand_constant_along_equal_weight_shooting():
    spec, params, x0 = _shooting_setup(weights=(1, 1, 1, 1, 1), seed=3)
    traj = forward(params, x0, spec, IntegratorSpec("rk4", 0.01, 1.0))
    integrand = np.asarray(complexity_integrand(traj))
    assert integrand.max() - integrand.min() < 1e-5
    assert float(complexity_metric(traj)) == pytest.approx(integrand[0], abs=1e-5)


# -- losses and the total objective ------------------------------------------


def test_mse_single_sample():
    x = jnp.array([[[0.0]], [[1.1]]])  # grid of two points, one sample
    traj = ModelTrajectory(None, x, None, None, None, None)
    assert float(100 * data_loss(traj, jnp.array([[1.0]]), "mse", 1)) == pytest.approx(1.0, abs=1e-12)


def test_mse_trajectory_uses_every_intermediate_point():
    rng = np.random.default_rng(4)
    x = jnp.asarray(rng.normal(size=(6, 3, 4)))  # 5 steps, 3 samples, state dim 4, d = 2
    y = jnp.asarray(rng.normal(size=(3, 5, 2)))
    total, count = 0.0, 0
    for i in range(3):
        for k in range(5):
            for j in range(2):
                total += (float(x[k + 1, i, j]) - float(y[i, k, j])) ** 2
                count += 1
    traj = ModelTrajectory(None, x, None, None, None, None)
    assert float(data_loss(traj, y, "mse_trajectory", 2)) == pytest.approx(total / count, abs=1e-14)


def test_binary_cross_entropy_against_direct_formula():
    rng = np.random.default_rng(5)
    x = jnp.asarray(rng.normal(size=(2, 6, 5)))
    labels = jnp.array([0, 1, 1, 0, 1, 0])
    ro = Readout(jnp.array([1.5, -0.5]), jnp.array(0.2))
    z = np.asarray(x[-1, :, :2]) @ np.array([1.5, -0.5]) + 0.2
    prob = 1 / (1 + np.exp(-z))
    lab = np.asarray(labels)
    expected = -np.mean(lab * np.log(prob) + (1 - lab) * np.log(1 - prob))
    traj = ModelTrajectory(None, x, None, None, None, None)
    assert float(data_loss(traj, labels, "binary_cross_entropy", 2, ro)) == pytest.approx(expected, abs=1e-12)
    with pytest.raises(ValueError):
        data_loss(traj, labels, "binary_cross_entropy", 2)


def _direct_setup(seed):
    rng = np.random.default_rng(seed)
    spec = ModeSpec("static_direct", 1, 2)
    theta = UpDownTheta(*(jnp.asarray(0.5 * rng.normal(size=(1, *c.shape))) for c in spec.model.zero_theta()))
    lift = AffineLift(jnp.asarray(rng.normal(size=(2, 1))), jnp.asarray(rng.normal(size=2)))
    x0 = jnp.asarray(rng.normal(size=(7, 1)))
    y = jnp.asarray(rng.normal(size=(7, 1)))
    return spec, DirectParams(theta, lift), x0, y


def test_total_objective_perfect_fit_zero_weights():
    spec = ModeSpec("static_direct", 1, 2)
    theta = jax.tree_util.tree_map(lambda c: c[None], spec.model.zero_theta())
    params = DirectParams(theta, AffineLift(jnp.ones((2, 1)), jnp.zeros(2)))
    x0 = jnp.array([[0.3], [-1.0]])
    val = total_objective(params, x0, x0, spec, IntegratorSpec("rk4", 0.1, 1.0), ObjectiveSpec())
    assert float(val) == 0.0


def test_total_objective_is_sum_of_parts():
    spec, params, x0, y = _direct_setup(6)
    integ = IntegratorSpec("rk4", 0.1, 1.0)
    obj = ObjectiveSpec(gamma=37.0, reg_weight=0.3)
    traj = forward(params, x0, spec, integ)
    # independent recomputation: constant weights, so the integral is T * R
    R = 0.5 * sum(w * float(jnp.sum(c**2)) for w, c in zip(spec.model.weights, params.theta))
    mse = float(np.mean((np.asarray(traj.x[-1][:, :1]) - np.asarray(y)) ** 2))
    expected = 0.3 * R + 37.0 * mse
    assert float(total_objective(params, x0, y, spec, integ, obj)) == pytest.approx(expected, abs=1e-12)


def test_total_objective_without_regularizer_is_scaled_loss():
    spec, params, x0, y = _direct_setup(7)
    integ = IntegratorSpec("rk4", 0.1, 1.0)
    traj = forward(params, x0, spec, integ)
    loss = data_loss(traj, y, "mse", 1)
    val = total_objective(params, x0, y, spec, integ, ObjectiveSpec(gamma=100.0, reg_weight=0.0))
    assert float(val) == float(100.0 * loss)


@pytest.mark.parametrize("kwargs", [dict(loss="l1"), dict(gamma=0.0), dict(reg_weight=-1.0)])
def test_objective_spec_validation(kwargs):
    with pytest.raises(ValueError):
        ObjectiveSpec(**kwargs)
