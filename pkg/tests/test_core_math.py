import jax
import jax.numpy as jnp
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from particle_shooting.core_math import (
    ProvenanceError,
    ShapeError,
    activation,
    activation_derivative,
    grad,
    matmul,
    trapezoid,
    value_and_grad,
)


def triple_loop(a, b):
    m, k = a.shape
    n = b.shape[1]
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            s = 0.0
            for r in range(k):
                s += a[i, r] * b[r, j]
            out[i, j] = s
    return out


def central_diff(f, x, h=1e-5):
    x = np.asarray(x, dtype=float)
    g = np.zeros_like(x)
    for i in np.ndindex(*x.shape):
        e = np.zeros_like(x)
        e[i] = h
        g[i] = (f(x + e) - f(x - e)) / (2 * h)
    return g


def test_float64_is_enabled():
    assert jnp.zeros(1).dtype == jnp.float64


def test_matmul_identity():
    m = np.array([[1.0, 2.0], [3.0, 4.0]])
    np.testing.assert_array_equal(matmul(np.eye(2), m), m)


def test_matmul_rank_one_annihilation():
    out = matmul(np.array([[1.0, 0.0], [0.0, 0.0]]), np.array([[0.0], [5.0]]))
    np.testing.assert_array_equal(out, [[0.0], [0.0]])


def test_matmul_matches_triple_loop():
    rng = np.random.default_rng(3)
    a, b = rng.normal(size=(3, 3)), rng.normal(size=(3, 3))
    np.testing.assert_allclose(matmul(a, b), triple_loop(a, b), rtol=0, atol=1e-14)


def test_matmul_shape_error():
    with pytest.raises(ShapeError):
        matmul(np.ones((2, 3)), np.ones((2, 3)))
    with pytest.raises(ShapeError):
        matmul(np.ones(3), np.ones((3, 1)))


def test_relu_and_derivative_convention():
    x = jnp.array([-1.0, 0.0, 2.0])
    np.testing.assert_array_equal(activation(x, "relu"), [0.0, 0.0, 2.0])
    np.testing.assert_array_equal(activation_derivative(x, "relu"), [0.0, 0.0, 1.0])
    # the differentiation engine agrees with the stated convention at 0
    taped = jax.vmap(jax.grad(lambda z: activation(z, "relu")))(x)
    np.testing.assert_array_equal(taped, [0.0, 0.0, 1.0])


def test_tanh_is_odd():
    np.testing.assert_array_equal(activation(jnp.array([0.0]), "tanh"), [0.0])


def test_unknown_activation():
    with pytest.raises(ValueError):
        activation(jnp.zeros(2), "gelu")


def test_grad_of_quadratic():
    (g,) = grad(lambda x: x @ x, jnp.array([1.0, 2.0]))
    np.testing.assert_array_equal(g, [2.0, 4.0])


def test_grad_chain_rule_linear_region():
    (g,) = grad(lambda x: activation(3.0 * x, "relu"), jnp.asarray(2.0))
    assert float(g) == 3.0


def _composite(params, x):
    W1, W2 = params
    h = activation(matmul(W1, x[:, None]), "tanh")
    return jnp.sum(activation(matmul(W2, h), "relu") ** 2) + jnp.sum(jnp.tanh(x) * x)


def test_grad_matches_finite_differences_on_composite():
    rng = np.random.default_rng(0)
    W1 = jnp.asarray(rng.normal(size=(5, 6)))
    W2 = jnp.asarray(rng.normal(size=(4, 5)))
    x = rng.normal(size=6)
    (g,) = grad(lambda z: _composite((W1, W2), z), jnp.asarray(x))
    fd = central_diff(lambda z: float(_composite((W1, W2), jnp.asarray(z))), x, 1e-5)
    assert np.linalg.norm(np.asarray(g) - fd) / np.linalg.norm(fd) < 1e-6


def test_gradients_of_pytree_inputs():
    rng = np.random.default_rng(1)
    W1, W2 = jnp.asarray(rng.normal(size=(5, 6))), jnp.asarray(rng.normal(size=(4, 5)))
    x = jnp.asarray(rng.normal(size=6))
    gW1, gx = grad(lambda a, z: _composite((a, W2), z), W1, x)
    fd = central_diff(lambda a: float(_composite((jnp.asarray(a), W2), x)), np.asarray(W1))
    assert np.linalg.norm(np.asarray(gW1) - fd) / np.linalg.norm(fd) < 1e-6
    assert gx.shape == x.shape


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000), st.sampled_from(["matmul", "relu", "tanh"]))
def test_each_op_gradient_vs_finite_differences(seed, op):
    rng = np.random.default_rng(seed)
    A = rng.normal(size=(3, 4))
    x = rng.normal(size=4)
    if op == "relu":
        x = np.where(np.abs(x) < 0.05, 0.5, x)  # stay away from the kink
    c = rng.normal(size=3 if op == "matmul" else 4)

    def f(z):
        z = jnp.asarray(z)
        if op == "matmul":
            return jnp.dot(c, matmul(jnp.asarray(A), z[:, None])[:, 0])
        return jnp.dot(c, activation(z, op))

    (g,) = grad(f, jnp.asarray(x))
    fd = central_diff(lambda z: float(f(z)), x)
    scale = max(np.linalg.norm(fd), 1e-8)
    assert np.linalg.norm(np.asarray(g) - fd) / scale < 1e-5


def test_second_order_gradient_of_quadratic_form():
    rng = np.random.default_rng(2)
    M = jnp.asarray(rng.normal(size=(4, 4)))
    c = jnp.asarray(rng.normal(size=4))
    q0 = jnp.asarray(rng.normal(size=4))

    def inner(q):
        (g,) = grad(lambda z: z @ M @ z, q)
        return g @ c

    (outer,) = grad(inner, q0)
    np.testing.assert_allclose(outer, (M + M.T) @ c, rtol=0, atol=1e-14)


def test_forward_value_identical_with_and_without_differentiation():
    rng = np.random.default_rng(4)
    W1, W2 = jnp.asarray(rng.normal(size=(5, 6))), jnp.asarray(rng.normal(size=(4, 5)))
    x = jnp.asarray(rng.normal(size=6))
    plain = _composite((W1, W2), x)
    taped, _ = value_and_grad(lambda z: _composite((W1, W2), z), x)
    assert float(plain) == float(taped)


def test_grad_requires_scalar_output():
    with pytest.raises(ShapeError):
        grad(lambda x: x * 2, jnp.ones(3))


def test_grad_rejects_inputs_without_derivatives():
    with pytest.raises(ProvenanceError):
        grad(lambda n: jnp.sum(n * 1.0), jnp.arange(3))
    with pytest.raises(ProvenanceError):
        grad(lambda: jnp.zeros(()))


def test_trapezoid_constant_and_linear():
    t = jnp.linspace(0, 1, 11)
    assert float(trapezoid(jnp.full(11, 2.0), t)) == pytest.approx(2.0, abs=1e-15)
    assert float(trapezoid(t, t)) == pytest.approx(0.5, abs=1e-15)
