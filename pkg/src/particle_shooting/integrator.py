"""Fixed-step explicit integration of pytree-valued states.

The right-hand side has signature ``rhs(t, y) -> (dy, aux)``.  ``aux`` is a
side channel (any pytree, possibly ``()``) the caller uses to emit
quantities such as the instantaneous weights or the Hamiltonian; it is
recorded at every stage evaluation and at every grid point.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Any, Callable, NamedTuple

import jax
import jax.numpy as jnp
import numpy as np

from .core_math import is_concrete

SCHEMES = ("euler", "rk4")

# (c_i, a_ij rows, b_i) for the explicit schemes
TABLEAUX = {
    "euler": ((0.0,), ((),), (1.0,)),
    "rk4": (
        (0.0, 0.5, 0.5, 1.0),
        ((), (0.5,), (0.0, 0.5), (0.0, 0.0, 1.0)),
        (1 / 6, 1 / 3, 1 / 3, 1 / 6),
    ),
}


class DivergenceError(FloatingPointError):
    def __init__(self, step: int, detail: str = ""):
        self.step = step
        msg = f"non-finite state at integration step {step}"
        super().__init__(f"{msg}: {detail}" if detail else msg)


@dataclass(frozen=True)
class IntegratorSpec:
    scheme: str = "rk4"
    step: float = 0.1
    horizon: float = 1.0

    def __post_init__(self):
        if self.scheme not in SCHEMES:
            raise ValueError(f"unknown scheme {self.scheme!r}")
        if not self.step > 0:
            raise ValueError("integrator step must be positive")
        if not self.horizon > 0:
            raise ValueError("integration horizon must be positive")

    @property
    def stages(self) -> int:
        return len(TABLEAUX[self.scheme][0])

    def step_sizes(self) -> np.ndarray:
        """Step lengths covering ``[0, horizon]``; the last one is shortened if needed."""
        n = round(self.horizon / self.step)
        if n >= 1 and abs(n * self.step - self.horizon) <= 1e-12:
            return np.full(n, self.step)
        n = math.floor(self.horizon / self.step)
        rest = self.horizon - n * self.step
        return np.concatenate([np.full(n, self.step), [rest]])

    def grid(self, t0: float = 0.0) -> np.ndarray:
        h = self.step_sizes()
        return t0 + np.concatenate([[0.0], np.cumsum(h)])

    @property
    def n_steps(self) -> int:
        return len(self.step_sizes())


class TrajectoryLog(NamedTuple):
    """Result of :func:`integrate`.

    ``states`` and ``aux`` are stacked over the ``N + 1`` grid points;
    ``stage_aux`` over ``(N, stages)`` and ``stage_times`` likewise.  They are
    ``None`` when the rollout was not recorded.
    """

    times: Any
    final: Any
    states: Any = None
    aux: Any = None
    stage_aux: Any = None
    stage_times: Any = None
    finite: Any = None


def _axpy(y, h, terms):
    out = y
    for coef, k in terms:
        if coef != 0.0:
            out = jax.tree_util.tree_map(lambda a, b, c=coef: a + (h * c) * b, out, k)
    return out


def _all_finite(tree) -> jax.Array:
    leaves = [jnp.all(jnp.isfinite(leaf)) for leaf in jax.tree_util.tree_leaves(tree)]
    if not leaves:
        return jnp.asarray(True)
    return jnp.all(jnp.stack(leaves))


def integrate(
    rhs: Callable,
    y0,
    spec: IntegratorSpec,
    record: bool = True,
    t0: float = 0.0,
) -> TrajectoryLog:
    """Integrate ``y' = rhs(t, y)`` over ``[t0, t0 + spec.horizon]``.

    Raises :class:`DivergenceError` naming the first step that produced a
    non-finite state, whenever the result is concrete (i.e. outside ``jit``).
    """
    c, a, b = TABLEAUX[spec.scheme]
    hs = jnp.asarray(spec.step_sizes())
    ts = jnp.asarray(spec.grid(t0)[:-1])

    def step(y, th):
        t, h = th
        ks, auxes = [], []
        for i in range(len(c)):
            yi = _axpy(y, h, zip(a[i], ks))
            k, aux = rhs(t + c[i] * h, yi)
            ks.append(k)
            auxes.append(aux)
        y_next = _axpy(y, h, zip(b, ks))
        stage_aux = jax.tree_util.tree_map(lambda *xs: jnp.stack(xs), *auxes)
        stage_t = t + jnp.asarray(c) * h
        out = (y, stage_aux, stage_t) if record else ()
        return y_next, (out, _all_finite(y_next))

    final, (out, finite) = jax.lax.scan(step, y0, (ts, hs))

    if is_concrete(finite):
        bad = np.flatnonzero(~np.asarray(finite))
        if bad.size:
            raise DivergenceError(int(bad[0]))

    times = jnp.asarray(spec.grid(t0))
    if not record:
        return TrajectoryLog(times=times, final=final, finite=finite)

    states, stage_aux, stage_times = out
    _, final_aux = rhs(times[-1], final)
    states = jax.tree_util.tree_map(
        lambda s, f: jnp.concatenate([s, f[None]]), states, final
    )
    grid_aux = jax.tree_util.tree_map(
        lambda s, f: jnp.concatenate([s[:, 0], jnp.asarray(f)[None]]), stage_aux, final_aux
    )
    return TrajectoryLog(
        times=times,
        final=final,
        states=states,
        aux=grid_aux,
        stage_aux=stage_aux,
        stage_times=stage_times,
        finite=finite,
    )
