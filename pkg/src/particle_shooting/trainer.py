"""Minibatch Adam training of the learnable initial conditions."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Any, Callable, NamedTuple

import jax
import jax.numpy as jnp
import numpy as np

from .datasets import Dataset, rng
from .dynamics import UpDownTheta
from .integrator import IntegratorSpec
from .objective import (
    ObjectiveSpec,
    Readout,
    complexity_metric,
    data_loss,
    regularizer_integral,
)
from .parameterizations import AffineLift, DirectParams, ModeSpec, ParticleParams, forward

log = logging.getLogger(__name__)

SCHEDULERS = ("plateau", "cosine", "none")
INIT_STD = 0.1


class TrainingDivergence(FloatingPointError):
    def __init__(self, epoch: int, batch: int, value: float):
        self.epoch, self.batch, self.value = epoch, batch, value
        super().__init__(f"objective became {value} at epoch {epoch}, batch {batch}")


@dataclass(frozen=True)
class OptimSpec:
    lr: float = 0.01
    scheduler: str = "plateau"
    factor: float = 0.5
    patience: int = 10
    t_max: int | None = None
    eta_min: float = 0.0
    epochs: int = 500
    batch_size: int = 50
    freeze_epochs: int = 50
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if not self.lr > 0:
            raise ValueError("learning rate must be positive")
        if not 0 < self.factor < 1:
            raise ValueError("plateau factor must lie in (0, 1)")
        if self.scheduler not in SCHEDULERS:
            raise ValueError(f"unknown scheduler {self.scheduler!r}")
        if self.epochs < 0 or self.batch_size < 1 or self.freeze_epochs < 0:
            raise ValueError("epochs and freeze_epochs must be >= 0, batch_size >= 1")


class Params(NamedTuple):
    model: Any  # ParticleParams or DirectParams
    readout: Readout | None = None


class AdamState(NamedTuple):
    count: Any
    mu: Any
    nu: Any


def adam_init(params) -> AdamState:
    zeros = jax.tree_util.tree_map(jnp.zeros_like, params)
    return AdamState(jnp.zeros((), jnp.int32), zeros, zeros)


def adam_update(grads, state: AdamState, params, lr, b1=0.9, b2=0.999, eps=1e-8):
    count = state.count + 1
    mu = jax.tree_util.tree_map(lambda m, g: b1 * m + (1 - b1) * g, state.mu, grads)
    nu = jax.tree_util.tree_map(lambda v, g: b2 * v + (1 - b2) * g * g, state.nu, grads)
    c1 = 1 - b1 ** count.astype(jnp.float64)
    c2 = 1 - b2 ** count.astype(jnp.float64)
    new = jax.tree_util.tree_map(
        lambda p, m, v: p - lr * (m / c1) / (jnp.sqrt(v / c2) + eps), params, mu, nu
    )
    return new, AdamState(count, mu, nu)


class ReduceLROnPlateau:
    """Halve (by ``factor``) the rate after ``patience`` epochs without relative improvement."""

    def __init__(self, lr, factor=0.5, patience=10, threshold=1e-4, min_lr=0.0, eps=1e-8):
        self.lr = lr
        self.factor = factor
        self.patience = patience
        self.threshold = threshold
        self.min_lr = min_lr
        self.eps = eps
        self.best = math.inf
        self.bad_epochs = 0

    def step(self, metric: float) -> float:
        if metric < self.best * (1 - self.threshold):
            self.best = metric
            self.bad_epochs = 0
        else:
            self.bad_epochs += 1
        if self.bad_epochs > self.patience:
            new = max(self.lr * self.factor, self.min_lr)
            if self.lr - new > self.eps:
                self.lr = new
            self.bad_epochs = 0
        return self.lr


class CosineAnnealing:
    def __init__(self, lr, t_max, eta_min=0.0):
        self.base = lr
        self.t_max = t_max
        self.eta_min = eta_min
        self.epoch = 0
        self.lr = lr

    def step(self, metric=None) -> float:
        self.epoch += 1
        cos = math.cos(math.pi * self.epoch / self.t_max)
        self.lr = self.eta_min + (self.base - self.eta_min) * (1 + cos) / 2
        return self.lr


class ConstantRate:
    def __init__(self, lr):
        self.lr = lr

    def step(self, metric=None) -> float:
        return self.lr


def make_scheduler(optim: OptimSpec):
    if optim.scheduler == "plateau":
        return ReduceLROnPlateau(optim.lr, optim.factor, optim.patience)
    if optim.scheduler == "cosine":
        return CosineAnnealing(optim.lr, optim.t_max or max(optim.epochs, 1), optim.eta_min)
    return ConstantRate(optim.lr)


def init_parameters(spec: ModeSpec, data_range, seed: int, readout: bool = False) -> Params:
    """Draw initial parameters.

    Particle positions: data part uniform over ``data_range`` (a ``(low,
    high)`` pair of scalars or per-dimension arrays), hidden part normal.
    Momenta, the affine lift, direct weights and readout are normal with
    standard deviation 0.1.
    """
    gen = rng(seed)
    d, h = spec.d, spec.alpha * spec.d
    normal = lambda *shape: jnp.asarray(gen.normal(0.0, INIT_STD, size=shape))  # noqa: E731
    lift = AffineLift(normal(h, d), normal(h))
    if spec.uses_particles:
        low, high = (np.broadcast_to(np.asarray(b, dtype=float), (d,)) for b in data_range)
        qx = gen.uniform(low, high, size=(spec.K, d))
        q = jnp.concatenate([jnp.asarray(qx), normal(spec.K, h)], axis=1)
        p = normal(spec.K, d + h)
        model = ParticleParams(q, p, lift)
    else:
        B = spec.blocks
        theta = UpDownTheta(normal(B, d, h), normal(B, d), normal(B, h, d), normal(B, h), normal(B, h, h))
        model = DirectParams(theta, lift)
    ro = Readout(normal(d), jnp.zeros(())) if readout else None
    return Params(model, ro)


def count_learnables(params: Params) -> int:
    return sum(int(np.size(leaf)) for leaf in jax.tree_util.tree_leaves(params.model))


def _zero_positions(grads: Params, freeze) -> Params:
    model = grads.model
    if not isinstance(model, ParticleParams):
        return grads
    q = jnp.where(freeze, jnp.zeros_like(model.q), model.q)
    return grads._replace(model=model._replace(q=q))


class Experiment:
    """Jitted loss, training step and evaluation for one configuration."""

    def __init__(self, spec: ModeSpec, integ: IntegratorSpec, obj: ObjectiveSpec, optim: OptimSpec):
        self.spec, self.integ, self.obj, self.optim = spec, integ, obj, optim
        self._step = jax.jit(self._train_step)
        self._eval = jax.jit(self._evaluate)

    def objective(self, params: Params, x, y):
        traj = forward(params.model, x, self.spec, self.integ)
        reg = regularizer_integral(traj, self.spec.model)
        loss = data_loss(traj, y, self.obj.loss, self.spec.d, params.readout)
        return self.obj.reg_weight * reg + self.obj.gamma * loss

    def _train_step(self, params, opt_state, x, y, lr, freeze):
        value, grads = jax.value_and_grad(self.objective)(params, x, y)
        grads = _zero_positions(grads, freeze)
        o = self.optim
        params, opt_state = adam_update(grads, opt_state, params, lr, o.beta1, o.beta2, o.eps)
        return params, opt_state, value

    def _evaluate(self, params, x, y):
        traj = forward(params.model, x, self.spec, self.integ)
        reg = regularizer_integral(traj, self.spec.model)
        loss = data_loss(traj, y, self.obj.loss, self.spec.d, params.readout)
        out = {
            "objective": self.obj.reg_weight * reg + self.obj.gamma * loss,
            "data_loss": loss,
            "regularizer": reg,
            "complexity": complexity_metric(traj),
        }
        if params.readout is not None:
            pred = params.readout(traj.x[-1][:, : self.spec.d]) > 0
            out["accuracy"] = jnp.mean(pred == (jnp.reshape(y, pred.shape) > 0.5))
        return out

    def evaluate(self, params: Params, data: Dataset) -> dict:
        out = self._eval(params, jnp.asarray(data.inputs), jnp.asarray(data.targets))
        return {k: float(v) for k, v in out.items()}

    def train_step(self, params, opt_state, x, y, lr: float, freeze: bool):
        return self._step(params, opt_state, x, y, jnp.asarray(lr), jnp.asarray(freeze))


class FitResult(NamedTuple):
    params: Params
    history: list


def fit(
    params: Params,
    train: Dataset | Callable[[int], Dataset],
    val: Dataset,
    spec: ModeSpec,
    integ: IntegratorSpec,
    obj: ObjectiveSpec,
    optim: OptimSpec,
    seed: int = 0,
    experiment: Experiment | None = None,
) -> FitResult:
    """Run ``optim.epochs`` epochs of minibatch Adam.

    ``train`` is either a fixed dataset or a callable returning a fresh
    dataset for each epoch.  Particle positions receive no update during
    the first ``optim.freeze_epochs`` epochs.
    """
    exp = experiment or Experiment(spec, integ, obj, optim)
    gen = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, 1])))
    sched = make_scheduler(optim)
    lr = optim.lr
    opt_state = adam_init(params)
    history = []
    for epoch in range(optim.epochs):
        data = train(epoch) if callable(train) else train
        order = gen.permutation(len(data))
        freeze = epoch < optim.freeze_epochs
        values = []
        for b, start in enumerate(range(0, len(data), optim.batch_size)):
            idx = order[start : start + optim.batch_size]
            x = jnp.asarray(data.inputs[idx])
            y = jnp.asarray(data.targets[idx])
            params, opt_state, value = exp.train_step(params, opt_state, x, y, lr, freeze)
            value = float(value)
            if not math.isfinite(value):
                raise TrainingDivergence(epoch, b, value)
            values.append(value)
        metrics = exp.evaluate(params, val)
        if not math.isfinite(metrics["objective"]):
            raise TrainingDivergence(epoch, -1, metrics["objective"])
        history.append(
            {
                "epoch": epoch + 1,
                "train_loss": float(np.mean(values)),
                "val_loss": metrics["objective"],
                "lr": lr,
                "complexity": metrics["complexity"],
            }
        )
        lr = sched.step(metrics["objective"])
    return FitResult(params, history)
