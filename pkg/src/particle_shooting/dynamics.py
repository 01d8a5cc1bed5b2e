"""Vector fields, penalties, Hamiltonians and the particle shooting flow.

Two linear-in-parameter fields with quadratic penalties are provided:

* :class:`LinearField` -- ``f(x) = A act(x) + b`` with
  ``R = 1/2 tr(A^T M_A A) + 1/2 b^T M_b b``;
* :class:`UpDownField` -- states ``[x, v]`` with ``x`` in R^d and ``v`` in
  R^(alpha d), ``x' = t1 act(v) + b1`` and ``v' = t2 x + b2 + t3 act(v)``,
  penalised by a weighted squared Frobenius norm of every component.

State arrays are batches of row vectors with shape ``(rows, state_dim)``.
The Hamiltonian is ``H(q, p, theta) = R(theta) - sum_j p_j . f(q_j, theta)``;
``theta`` is its minimiser over the weights (the compatibility condition),
and particles move by ``q' = f(q, theta)``, ``p' = -(d_q f)^T p``.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import partial
from typing import Any, NamedTuple

import jax
import jax.numpy as jnp
import numpy as np
from jax.flatten_util import ravel_pytree

from .core_math import ShapeError, activation, is_concrete


class DegenerateEnsembleError(ValueError):
    pass


class UnsupportedModelError(ValueError):
    pass


class Ensemble(NamedTuple):
    """``K`` particles; ``q`` and ``p`` both have shape ``(K, state_dim)``."""

    q: Any
    p: Any


class LinearTheta(NamedTuple):
    A: Any
    b: Any


class UpDownTheta(NamedTuple):
    t1: Any  # (d, alpha d)
    b1: Any  # (d,)
    t2: Any  # (alpha d, d)
    b2: Any  # (alpha d,)
    t3: Any  # (alpha d, alpha d)


def _as_spd(m, d: int, name: str) -> tuple:
    arr = np.eye(d) * float(m) if np.ndim(m) == 0 else np.asarray(m, dtype=float)
    if arr.shape != (d, d):
        raise ShapeError(f"{name} must be {d}x{d}, got {arr.shape}")
    if not np.allclose(arr, arr.T):
        raise ValueError(f"{name} must be symmetric")
    if np.any(np.linalg.eigvalsh(arr) <= 0):
        raise ValueError(f"{name} must be positive definite")
    return tuple(map(tuple, arr.tolist()))


@dataclass(frozen=True)
class LinearField:
    d: int
    activation: str = "relu"
    penalty_A: Any = 1.0
    penalty_b: Any = 1.0

    def __post_init__(self):
        object.__setattr__(self, "penalty_A", _as_spd(self.penalty_A, self.d, "M_A"))
        object.__setattr__(self, "penalty_b", _as_spd(self.penalty_b, self.d, "M_b"))

    @property
    def state_dim(self) -> int:
        return self.d

    @property
    def M_A(self):
        return jnp.asarray(self.penalty_A)

    @property
    def M_b(self):
        return jnp.asarray(self.penalty_b)

    def zero_theta(self) -> LinearTheta:
        return LinearTheta(jnp.zeros((self.d, self.d)), jnp.zeros(self.d))

    def field(self, x, theta: LinearTheta):
        _check_rows(x, self.state_dim)
        return activation(x, self.activation) @ theta.A.T + theta.b

    def penalty(self, theta: LinearTheta):
        return 0.5 * jnp.trace(theta.A.T @ self.M_A @ theta.A) + 0.5 * theta.b @ self.M_b @ theta.b

    def solve_theta(self, ens: Ensemble) -> LinearTheta:
        _check_ensemble(ens, self.state_dim)
        s = activation(ens.q, self.activation)
        A = jnp.linalg.solve(self.M_A, ens.p.T @ s)
        b = jnp.linalg.solve(self.M_b, jnp.sum(ens.p, axis=0))
        return LinearTheta(A, b)


@dataclass(frozen=True)
class UpDownField:
    d: int
    alpha: int = 16
    activation: str = "relu"
    weights: tuple = (1.0, 1.0, 1.0, 1.0, 10.0)

    def __post_init__(self):
        if int(self.alpha) != self.alpha or self.alpha < 1:
            raise ValueError("inflation factor must be an integer >= 1")
        w = tuple(float(v) for v in self.weights)
        if len(w) != 5 or min(w) <= 0:
            raise ValueError("need five positive penalty weights (t1, b1, t2, b2, t3)")
        object.__setattr__(self, "weights", w)

    @property
    def hidden_dim(self) -> int:
        return self.alpha * self.d

    @property
    def state_dim(self) -> int:
        return (self.alpha + 1) * self.d

    def split(self, z):
        return z[..., : self.d], z[..., self.d :]

    def zero_theta(self) -> UpDownTheta:
        d, h = self.d, self.hidden_dim
        return UpDownTheta(
            jnp.zeros((d, h)), jnp.zeros(d), jnp.zeros((h, d)), jnp.zeros(h), jnp.zeros((h, h))
        )

    def field(self, z, theta: UpDownTheta):
        _check_rows(z, self.state_dim)
        x, v = self.split(z)
        s = activation(v, self.activation)
        dx = s @ theta.t1.T + theta.b1
        dv = x @ theta.t2.T + theta.b2 + s @ theta.t3.T
        return jnp.concatenate([dx, dv], axis=-1)

    def penalty(self, theta: UpDownTheta):
        return 0.5 * sum(w * jnp.sum(jnp.square(c)) for w, c in zip(self.weights, theta))

    def solve_theta(self, ens: Ensemble) -> UpDownTheta:
        _check_ensemble(ens, self.state_dim)
        x, v = self.split(ens.q)
        px, pv = self.split(ens.p)
        s = activation(v, self.activation)
        w1, wb1, w2, wb2, w3 = self.weights
        return UpDownTheta(
            px.T @ s / w1,
            jnp.sum(px, axis=0) / wb1,
            pv.T @ x / w2,
            jnp.sum(pv, axis=0) / wb2,
            pv.T @ s / w3,
        )


def _check_rows(z, dim: int) -> None:
    if jnp.ndim(z) != 2 or jnp.shape(z)[1] != dim:
        raise ShapeError(f"expected states of shape (rows, {dim}), got {jnp.shape(z)}")


def _check_ensemble(ens: Ensemble, dim: int) -> None:
    if jnp.shape(ens.q)[0] == 0:
        raise DegenerateEnsembleError("ensemble has no particles")
    if jnp.shape(ens.q) != jnp.shape(ens.p):
        raise ShapeError(f"positions {jnp.shape(ens.q)} and momenta {jnp.shape(ens.p)} differ")
    _check_rows(ens.q, dim)


def linear_field(x, theta: LinearTheta, kind: str = "relu"):
    """``A act(x) + b`` for a single state vector ``x``."""
    x = jnp.asarray(x)
    return LinearField(x.shape[-1], kind).field(x[None], theta)[0]


def updown_field(x, v, theta: UpDownTheta, kind: str = "relu"):
    """Return ``(x', v')`` of the UpDown system for a single state."""
    x = jnp.asarray(x)
    v = jnp.asarray(v)
    d = x.shape[-1]
    if v.shape[-1] % d:
        raise ShapeError(f"hidden size {v.shape[-1]} is not a multiple of {d}")
    model = UpDownField(d, v.shape[-1] // d, kind)
    out = model.field(jnp.concatenate([x, v])[None], theta)[0]
    return out[:d], out[d:]


def hamiltonian(ens: Ensemble, theta, model):
    """``R(theta) - sum_j p_j . f(q_j, theta)``."""
    return model.penalty(theta) - jnp.sum(ens.p * model.field(ens.q, theta))


def solve_theta(ens: Ensemble, model):
    return model.solve_theta(ens)


def theta_gradient(ens: Ensemble, theta, model):
    """``d_theta H``; zero exactly when ``theta`` satisfies compatibility."""
    return jax.grad(lambda th: hamiltonian(ens, th, model))(theta)


def compatibility_residual(ens: Ensemble, theta, model):
    flat, _ = ravel_pytree(theta_gradient(ens, theta, model))
    return jnp.max(jnp.abs(flat))


def auto_solve_theta(ens: Ensemble, model, check: bool = True):
    """Minimise ``H`` over the weights using derivatives of ``H`` only.

    ``d_theta H`` is affine in ``theta`` for the supported models, so its
    value at zero and its Jacobian define a linear system.  With ``check``
    the affine assumption and positive definiteness are verified on
    concrete inputs and :class:`UnsupportedModelError` is raised otherwise.
    """
    if jnp.shape(ens.q)[0] == 0:
        raise DegenerateEnsembleError("ensemble has no particles")
    _, unravel = ravel_pytree(model.zero_theta())
    g0, hess, sol, probe, at_probe = _affine_system(ens, model)
    if check and is_concrete(sol):
        _verify_quadratic(g0, hess, probe, at_probe)
    return unravel(sol)


@partial(jax.jit, static_argnums=1)
def _affine_system(ens: Ensemble, model):
    flat0, unravel = ravel_pytree(model.zero_theta())

    def dH(flat):
        return ravel_pytree(theta_gradient(ens, unravel(flat), model))[0]

    g0 = dH(flat0)
    hess = jax.jacfwd(dH)(flat0)
    sol = jnp.linalg.solve(hess, -g0)
    probe = jnp.linspace(-1.0, 1.0, flat0.shape[0]) + 0.5
    return g0, hess, sol, probe, dH(probe)


def _verify_quadratic(g0, hess, probe, at_probe) -> None:
    hess, g0 = np.asarray(hess), np.asarray(g0)
    n = hess.shape[0]
    scale = max(1.0, float(np.max(np.abs(hess))), float(np.max(np.abs(g0))))
    affine = g0 + hess @ np.asarray(probe)
    if np.max(np.abs(np.asarray(at_probe) - affine)) > 1e-8 * scale * max(1, n):
        raise UnsupportedModelError("H is not quadratic in the weights; nonlinear argmin unsupported")
    if not np.allclose(hess, hess.T, atol=1e-10 * scale):
        raise UnsupportedModelError("H has a non-symmetric weight Hessian")
    if np.min(np.linalg.eigvalsh(0.5 * (hess + hess.T))) <= 0:
        raise UnsupportedModelError("H is not strictly convex in the weights")


class ShootingState(NamedTuple):
    """Data states ``x`` (``(n, S)``, possibly ``n = 0``) and the particles."""

    x: Any
    q: Any
    p: Any


class ShootingAux(NamedTuple):
    theta: Any
    hamiltonian: Any


def momentum_rate(ens: Ensemble, theta, model):
    """``-(d_q f)^T p`` obtained by differentiating ``H`` in ``q`` at fixed weights."""
    return jax.grad(lambda q: hamiltonian(Ensemble(q, ens.p), theta, model))(ens.q)


def shooting_rhs(model):
    """Right-hand side of the shooting system for :func:`integrate`.

    Data rows and particle positions are pushed through the same field in a
    single evaluation, so a data state placed on a particle tracks it exactly.
    """

    def rhs(t, state: ShootingState):
        ens = Ensemble(state.q, state.p)
        theta = model.solve_theta(ens)
        n = state.x.shape[0]
        moved = model.field(jnp.concatenate([state.x, state.q]), theta)
        dp = momentum_rate(ens, theta, model)
        deriv = ShootingState(moved[:n], moved[n:], dp)
        return deriv, ShootingAux(theta, hamiltonian(ens, theta, model))

    return rhs
