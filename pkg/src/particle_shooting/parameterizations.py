"""The four UpDown parameterizations behind one ``forward`` interface.

``static_direct``           constant weights, optimised directly
``dynamic_direct``          piecewise-constant weights, one set per block
``static_with_particles``   constant weights induced by a particle ensemble at t=0
``dynamic_with_particles``  weights induced by the evolving (shooting) ensemble

Every mode lifts the data with a learned affine map ``v(0) = W x(0) + c``.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Any, NamedTuple

import jax
import jax.numpy as jnp
import numpy as np

from .core_math import ShapeError
from .dynamics import Ensemble, ShootingState, UpDownField, UpDownTheta, shooting_rhs
from .integrator import TABLEAUX, IntegratorSpec, integrate

MODES = ("static_direct", "static_with_particles", "dynamic_with_particles", "dynamic_direct")
PARTICLE_MODES = ("static_with_particles", "dynamic_with_particles")


@dataclass(frozen=True)
class ModeSpec:
    mode: str
    d: int
    alpha: int = 16
    K: int | None = None
    activation: str = "relu"
    weights: tuple = (1.0, 1.0, 1.0, 1.0, 10.0)
    blocks: int = 1

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}; expected one of {MODES}")
        if self.d < 1:
            raise ValueError("data dimension must be >= 1")
        if self.blocks < 1:
            raise ValueError("blocks must be a positive integer")
        if self.blocks != 1 and self.mode != "dynamic_direct":
            raise ValueError("only dynamic_direct uses more than one block")
        if self.uses_particles:
            if self.K is None or self.K < 1:
                raise ValueError(f"{self.mode} needs a particle count K >= 1")
        elif self.K is not None:
            raise ValueError(f"{self.mode} does not use particles; leave K unset")
        object.__setattr__(self, "weights", tuple(float(w) for w in self.weights))

    @property
    def uses_particles(self) -> bool:
        return self.mode in PARTICLE_MODES

    @property
    def model(self) -> UpDownField:
        return UpDownField(self.d, self.alpha, self.activation, self.weights)


class AffineLift(NamedTuple):
    weight: Any  # (alpha d, d)
    bias: Any  # (alpha d,)

    def __call__(self, x):
        return x @ self.weight.T + self.bias


class ParticleParams(NamedTuple):
    q: Any  # (K, (alpha + 1) d)
    p: Any
    lift: AffineLift


class DirectParams(NamedTuple):
    theta: UpDownTheta  # every component carries a leading block axis
    lift: AffineLift


class ModelTrajectory(NamedTuple):
    """Rollout of a batch through one parameterization.

    ``x`` holds the lifted data states ``[x, v]`` on the integration grid
    ``times``.  ``theta`` is recorded on ``theta_times``, which equals
    ``times`` except that block boundaries of ``dynamic_direct`` appear twice
    (left and right values), so quadrature over it is exact for piecewise
    constant weights.  ``stage_theta`` holds the weights used at every
    Runge-Kutta stage, enough to replay the data trajectory exactly.
    """

    times: Any
    x: Any
    theta_times: Any
    theta: Any
    stage_times: Any
    stage_theta: Any
    hamiltonian: Any = None
    particles: Any = None

    @property
    def outputs(self):
        """Data component ``x(T)`` of the final state."""
        d = self.theta.t1.shape[-2]
        return self.x[-1][:, :d]


def lift_states(x0, lift: AffineLift):
    x0 = jnp.asarray(x0)
    if x0.ndim != 2 or x0.shape[1] != lift.weight.shape[1]:
        raise ShapeError(f"inputs of shape {x0.shape} do not match lift {lift.weight.shape}")
    return jnp.concatenate([x0, lift(x0)], axis=1)


def _constant_rhs(model: UpDownField, theta: UpDownTheta):
    def rhs(t, z):
        return model.field(z, theta), theta

    return rhs


def _rollout_constant(model, theta, z0, integ: IntegratorSpec, t0: float = 0.0):
    log = integrate(_constant_rhs(model, theta), z0, integ, record=True, t0=t0)
    return log


def _block(theta: UpDownTheta, i: int) -> UpDownTheta:
    return UpDownTheta(*(c[i] for c in theta))


def forward(params, x0, spec: ModeSpec, integ: IntegratorSpec) -> ModelTrajectory:
    """Integrate the batch ``x0`` (shape ``(n, d)``) over ``[0, integ.horizon]``."""
    model = spec.model
    z0 = lift_states(x0, params.lift)

    if spec.mode == "dynamic_with_particles":
        log = integrate(shooting_rhs(model), ShootingState(z0, params.q, params.p), integ)
        return ModelTrajectory(
            times=log.times,
            x=log.states.x,
            theta_times=log.times,
            theta=log.aux.theta,
            stage_times=log.stage_times,
            stage_theta=log.stage_aux.theta,
            hamiltonian=log.aux.hamiltonian,
            particles=Ensemble(log.states.q, log.states.p),
        )

    if spec.mode == "static_with_particles":
        theta = model.solve_theta(Ensemble(params.q, params.p))
        return _static(model, theta, z0, integ)

    if spec.mode == "static_direct":
        return _static(model, _block(params.theta, 0), z0, integ)

    return _blocks(model, params.theta, z0, spec.blocks, integ)


def _static(model, theta, z0, integ) -> ModelTrajectory:
    log = _rollout_constant(model, theta, z0, integ)
    return ModelTrajectory(
        times=log.times,
        x=log.states,
        theta_times=log.times,
        theta=log.aux,
        stage_times=log.stage_times,
        stage_theta=log.stage_aux,
    )


def _blocks(model, theta, z0, blocks: int, integ: IntegratorSpec) -> ModelTrajectory:
    if blocks == 1:
        return _static(model, _block(theta, 0), z0, integ)
    length = integ.horizon / blocks
    sub = IntegratorSpec(integ.scheme, integ.step, length)
    if abs(sub.n_steps * integ.step - length) > 1e-12:
        raise ValueError(
            f"integrator step {integ.step} does not divide the block length {length}"
        )
    logs = []
    z = z0
    for i in range(blocks):
        log = _rollout_constant(model, _block(theta, i), z, sub, t0=i * length)
        logs.append(log)
        z = log.final

    def cat(trees, skip_first=False):
        parts = [trees[0]] + [
            jax.tree_util.tree_map(lambda a: a[1:], t) if skip_first else t for t in trees[1:]
        ]
        return jax.tree_util.tree_map(lambda *xs: jnp.concatenate(xs), *parts)

    return ModelTrajectory(
        times=cat([lg.times for lg in logs], skip_first=True),
        x=cat([lg.states for lg in logs], skip_first=True),
        theta_times=cat([lg.times for lg in logs]),
        theta=cat([lg.aux for lg in logs]),
        stage_times=cat([lg.stage_times for lg in logs]),
        stage_theta=cat([lg.stage_aux for lg in logs]),
    )


def replay(stage_theta: UpDownTheta, x0, lift: AffineLift, spec: ModeSpec, integ: IntegratorSpec):
    """Re-integrate data states from recorded per-stage weights.

    ``stage_theta`` components have leading shape ``(steps, stages)``.  The
    returned array has shape ``(steps + 1, n, state_dim)``.
    """
    model = spec.model
    c, a, b = TABLEAUX[integ.scheme]
    z = lift_states(x0, lift)
    n_steps = stage_theta.t1.shape[0]
    hs = _replay_steps(integ, n_steps, spec)
    out = [z]
    for k in range(n_steps):
        h = hs[k]
        ks = []
        for i in range(len(c)):
            zi = z
            for coef, kk in zip(a[i], ks):
                if coef != 0.0:
                    zi = zi + (h * coef) * kk
            th = UpDownTheta(*(comp[k, i] for comp in stage_theta))
            ks.append(model.field(zi, th))
        for coef, kk in zip(b, ks):
            if coef != 0.0:
                z = z + (h * coef) * kk
        out.append(z)
    return jnp.stack(out)


def _replay_steps(integ: IntegratorSpec, n_steps: int, spec: ModeSpec) -> np.ndarray:
    if spec.mode == "dynamic_direct" and spec.blocks > 1:
        sub = IntegratorSpec(integ.scheme, integ.step, integ.horizon / spec.blocks)
        hs = np.tile(sub.step_sizes(), spec.blocks)
    else:
        hs = integ.step_sizes()
    if len(hs) != n_steps:
        raise ShapeError(f"{n_steps} recorded steps but the integrator takes {len(hs)}")
    return hs


def count_parameters(spec: ModeSpec) -> int:
    """Number of learnable parameters, the affine lift included once."""
    d, a = spec.d, spec.alpha
    lift = a * d * (d + 1)
    if spec.uses_particles:
        return 2 * spec.K * (a + 1) * d + lift
    per_block = a * d * d + d + a * d * d + a * d + a * a * d * d
    return spec.blocks * per_block + lift
