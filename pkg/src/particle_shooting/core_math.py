"""Dense float64 array primitives and reverse-mode differentiation.

Arrays are ``jax.Array`` values in 64-bit precision.  Differentiation is
functional: :func:`grad` takes the function to differentiate together with
the point, and the returned gradients can themselves be differentiated
again, which is how the shooting rollouts (whose right-hand side already
contains a gradient of the Hamiltonian) are trained.
"""
from __future__ import annotations

from typing import Callable, Sequence

import jax

jax.config.update("jax_enable_x64", True)

import jax.numpy as jnp  # noqa: E402
import numpy as np  # noqa: E402

DTYPE = jnp.float64
ACTIVATIONS = ("relu", "tanh")


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


class ProvenanceError(ValueError):
    """A requested derivative has no differentiable path to its input."""


def asarray(x) -> jax.Array:
    return jnp.asarray(x, dtype=DTYPE)


def matmul(a, b) -> jax.Array:
    """Matrix product of a ``(m, k)`` and a ``(k, n)`` array."""
    a = jnp.asarray(a)
    b = jnp.asarray(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects 2-d operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"inner dimensions differ: {a.shape} @ {b.shape}")
    return a @ b


def _check_kind(kind: str) -> None:
    if kind not in ACTIVATIONS:
        raise ValueError(f"unknown activation {kind!r}; expected one of {ACTIVATIONS}")


def activation(x, kind: str = "relu") -> jax.Array:
    """Componentwise activation.  ``relu'(0)`` is taken to be 0."""
    _check_kind(kind)
    if kind == "relu":
        return jax.nn.relu(x)
    return jnp.tanh(x)


def activation_derivative(x, kind: str = "relu") -> jax.Array:
    _check_kind(kind)
    x = jnp.asarray(x)
    if kind == "relu":
        return jnp.where(x > 0, 1.0, 0.0).astype(x.dtype)
    return 1.0 - jnp.tanh(x) ** 2


def _check_inputs(inputs: Sequence) -> None:
    for i, leaf in enumerate(jax.tree_util.tree_leaves(inputs)):
        dtype = leaf.dtype if hasattr(leaf, "dtype") else np.asarray(leaf).dtype
        if not jnp.issubdtype(dtype, jnp.floating):
            raise ProvenanceError(
                f"input leaf {i} has dtype {dtype}; only floating inputs carry derivatives"
            )


def value_and_grad(fn: Callable, *inputs):
    """Return ``(fn(*inputs), [d fn / d input for each input])``.

    ``fn`` must return a scalar.  Inputs may be arrays or pytrees of arrays.
    """
    if not inputs:
        raise ProvenanceError("no inputs to differentiate with respect to")
    _check_inputs(inputs)

    def scalar_fn(*args):
        out = fn(*args)
        if jnp.ndim(out) != 0:
            raise ShapeError(f"gradient needs a scalar output, got shape {jnp.shape(out)}")
        return out

    value, grads = jax.value_and_grad(scalar_fn, argnums=tuple(range(len(inputs))))(*inputs)
    return value, list(grads)


def grad(fn: Callable, *inputs) -> list:
    """Gradients of the scalar ``fn`` with respect to every input.

    The result is itself differentiable, so ``grad`` may be nested.
    """
    return value_and_grad(fn, *inputs)[1]


def frobenius_sq(x) -> jax.Array:
    return jnp.sum(jnp.square(x))


def trapezoid(values, times) -> jax.Array:
    values = jnp.asarray(values)
    times = jnp.asarray(times)
    if values.shape[0] != times.shape[0]:
        raise ShapeError(f"{values.shape[0]} values on a grid of {times.shape[0]} points")
    if values.shape[0] < 2:
        return jnp.zeros((), dtype=values.dtype)
    dt = jnp.diff(times)
    return jnp.sum(0.5 * dt * (values[1:] + values[:-1]))


def is_concrete(x) -> bool:
    """True when ``x`` holds actual values rather than a trace placeholder."""
    return not any(isinstance(leaf, jax.core.Tracer) for leaf in jax.tree_util.tree_leaves(x))
