"""Training objective and the weight-complexity measure."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Any, NamedTuple

import jax
import jax.numpy as jnp
import numpy as np

from .core_math import is_concrete, trapezoid
from .parameterizations import ModelTrajectory, ModeSpec, forward
from .integrator import IntegratorSpec

LOSSES = ("mse", "mse_trajectory", "binary_cross_entropy")


class UndefinedMetricError(ValueError):
    pass


@dataclass(frozen=True)
class ObjectiveSpec:
    loss: str = "mse"
    gamma: float = 100.0
    reg_weight: float = 1.0

    def __post_init__(self):
        if self.loss not in LOSSES:
            raise ValueError(f"unknown loss {self.loss!r}; expected one of {LOSSES}")
        if not self.gamma > 0:
            raise ValueError("loss weight gamma must be positive")
        if not self.reg_weight >= 0:
            raise ValueError("regularizer weight must be nonnegative")


class Readout(NamedTuple):
    """Affine map from the final data state to a logit."""

    weight: Any  # (d,)
    bias: Any  # ()

    def __call__(self, x):
        return x @ self.weight + self.bias


def _stacked_penalty(traj: ModelTrajectory, model):
    return jax.vmap(model.penalty)(traj.theta)


def regularizer_integral(traj: ModelTrajectory, model):
    """Trapezoid rule for the time integral of ``R(theta(t))``."""
    if traj.theta_times.shape[0] == 0:
        raise ValueError("empty trajectory")
    return trapezoid(_stacked_penalty(traj, model), traj.theta_times)


def complexity_integrand(traj: ModelTrajectory):
    """``log2`` of the Frobenius norm of all weight components, per grid point."""
    flat = jnp.concatenate(
        [c.reshape(c.shape[0], -1) for c in jax.tree_util.tree_leaves(traj.theta)], axis=1
    )
    norms = jnp.sqrt(jnp.sum(jnp.square(flat), axis=1))
    if is_concrete(norms) and np.any(np.asarray(norms) == 0):
        idx = int(np.flatnonzero(np.asarray(norms) == 0)[0])
        raise UndefinedMetricError(f"weights vanish at grid point {idx}; log-norm undefined")
    return jnp.log2(norms)


def complexity_metric(traj: ModelTrajectory):
    return trapezoid(complexity_integrand(traj), traj.theta_times)


def data_loss(traj: ModelTrajectory, targets, kind: str, d: int, readout: Readout | None = None):
    """Mean loss of the rollout against ``targets``.

    ``mse`` compares ``x(T)``; ``mse_trajectory`` compares every grid point
    after the initial one against ``targets`` of shape ``(n, steps, d)``;
    ``binary_cross_entropy`` scores ``readout(x(T))`` against labels in {0, 1}.
    """
    if kind == "mse":
        return jnp.mean(jnp.square(traj.x[-1][:, :d] - targets))
    if kind == "mse_trajectory":
        pred = jnp.swapaxes(traj.x[1:, :, :d], 0, 1)
        return jnp.mean(jnp.square(pred - targets))
    if kind == "binary_cross_entropy":
        if readout is None:
            raise ValueError("binary cross-entropy needs a readout")
        logits = readout(traj.x[-1][:, :d])
        labels = jnp.reshape(targets, logits.shape)
        return jnp.mean(jnp.logaddexp(0.0, logits) - labels * logits)
    raise ValueError(f"unknown loss {kind!r}")


def objective_parts(traj, targets, spec: ModeSpec, obj: ObjectiveSpec, readout=None):
    reg = regularizer_integral(traj, spec.model)
    loss = data_loss(traj, targets, obj.loss, spec.d, readout)
    return reg, loss


def total_objective(
    params,
    x0,
    targets,
    spec: ModeSpec,
    integ: IntegratorSpec,
    obj: ObjectiveSpec,
    readout: Readout | None = None,
):
    """``reg_weight * int R dt + gamma * loss``."""
    traj = forward(params, x0, spec, integ)
    reg, loss = objective_parts(traj, targets, spec, obj, readout)
    return obj.reg_weight * reg + obj.gamma * loss


def predict_labels(traj: ModelTrajectory, readout: Readout, d: int):
    return (readout(traj.x[-1][:, :d]) > 0).astype(jnp.int32)
