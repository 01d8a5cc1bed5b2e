"""Seeded generators for the regression, spiral and concentric-circle tasks.

Randomness comes from ``numpy.random.Generator`` with the PCG64 bit
generator; the same seed always reproduces the same data.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

GENERATOR_KIND = "numpy.PCG64"

SPIRAL_A = np.array([[-0.1, 2.0], [-2.0, -0.1]])
SPIRAL_X0 = np.array([2.0, 0.0])
SPIRAL_HORIZON = 10.0
SPIRAL_STEP = 0.05


def rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(seed))


@dataclass
class Dataset:
    inputs: np.ndarray
    targets: np.ndarray
    split: str = "train"

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=float)
        self.targets = np.asarray(self.targets, dtype=float)
        if len(self.inputs) != len(self.targets):
            raise ValueError("inputs and targets are not row-aligned")

    def __len__(self) -> int:
        return len(self.inputs)


FUNCTIONS = {
    "quadratic_like": lambda x: x**2 + 3.0 / (1.0 + x**2),
    "cubic": lambda x: x**3,
}


def gen_function_1d(kind: str, n: int, range_=(-1.5, 1.5), seed: int = 0, split="train") -> Dataset:
    if kind not in FUNCTIONS:
        raise ValueError(f"unknown function {kind!r}")
    if n < 1:
        raise ValueError("need at least one sample")
    lo, hi = range_
    if not hi > lo:
        raise ValueError(f"empty range {range_}")
    x = rng(seed).uniform(lo, hi, size=(n, 1))
    return Dataset(x, FUNCTIONS[kind](x), split)


def spiral_field(x: np.ndarray) -> np.ndarray:
    """``A x^3`` with componentwise cubing; ``x`` has shape ``(..., 2)``."""
    return (x**3) @ SPIRAL_A.T


def _rk4(x, h, n):
    out = [x]
    for _ in range(n):
        x = _partial_rk4(x, h)
        out.append(x)
    return np.stack(out)


def spiral_reference(step: float = SPIRAL_STEP, horizon: float = SPIRAL_HORIZON):
    """Reference trajectory from ``[2, 0]``; returns ``(times, states)``."""
    n = int(round(horizon / step))
    return np.linspace(0.0, n * step, n + 1), _rk4(SPIRAL_X0.copy(), step, n)


def _partial_rk4(base, dt):
    k1 = spiral_field(base)
    k2 = spiral_field(base + 0.5 * dt * k1)
    k3 = spiral_field(base + 0.5 * dt * k2)
    k4 = spiral_field(base + dt * k3)
    return base + dt / 6 * (k1 + 2 * k2 + 2 * k3 + k4)


@dataclass
class SpiralSampler:
    """Draws trajectory snippets whose start points are uniform in arc length.

    The trace is the continuous extension of the rk4 reference: the state at
    time ``t`` is one rk4 step of size ``t - t_k`` from the preceding
    reference point, so it coincides with the reference on its grid.  Each
    snippet is integrated with the true dynamics for ``snippet_steps`` steps
    of ``step``; its targets are every state after the start.
    """

    snippet_steps: int = 5
    step: float = SPIRAL_STEP
    horizon: float = SPIRAL_HORIZON
    refine: int = 20
    _ref_t: np.ndarray = field(init=False, repr=False)
    _ref_x: np.ndarray = field(init=False, repr=False)
    _fine_t: np.ndarray = field(init=False, repr=False)
    _arc: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        if self.snippet_steps * self.step > self.horizon:
            raise ValueError("snippets longer than the trajectory")
        self._ref_t, self._ref_x = spiral_reference(self.step, self.horizon)
        self._fine_t = np.linspace(0.0, self._ref_t[-1], self.refine * (len(self._ref_t) - 1) + 1)
        fine_x = self.states_at(self._fine_t)
        seg = np.linalg.norm(np.diff(fine_x, axis=0), axis=1)
        self._arc = np.concatenate([[0.0], np.cumsum(seg)])
        self._max_start_t = self._ref_t[-1] - self.snippet_steps * self.step

    @property
    def snippet_length(self) -> float:
        return self.snippet_steps * self.step

    @property
    def max_start_arc(self) -> float:
        return float(np.interp(self._max_start_t, self._fine_t, self._arc))

    def arc_to_time(self, s: np.ndarray) -> np.ndarray:
        return np.interp(s, self._arc, self._fine_t)

    def states_at(self, t: np.ndarray) -> np.ndarray:
        t = np.asarray(t, dtype=float)
        idx = np.clip(np.floor(t / self.step + 1e-9).astype(int), 0, len(self._ref_t) - 1)
        dt = (t - self._ref_t[idx])[:, None]
        return _partial_rk4(self._ref_x[idx], dt)

    def sample_arcs(self, n: int, gen: np.random.Generator) -> np.ndarray:
        return gen.uniform(0.0, self.max_start_arc, size=n)

    def sample(self, n: int, gen: np.random.Generator, split: str = "train") -> Dataset:
        t0 = self.arc_to_time(self.sample_arcs(n, gen))
        starts = self.states_at(t0)
        path = _rk4(starts, self.step, self.snippet_steps)  # (steps + 1, n, 2)
        return Dataset(starts, np.swapaxes(path[1:], 0, 1), split)


def gen_spiral(n_snippets: int, snippet_len: float = 0.25, seed: int = 0, step=SPIRAL_STEP, split="train"):
    steps = int(round(snippet_len / step))
    if steps < 1 or snippet_len > SPIRAL_HORIZON:
        raise ValueError("snippet length must be between one step and the full horizon")
    return SpiralSampler(steps, step).sample(n_snippets, rng(seed), split)


def gen_concentric_circles(
    n_per_class: int,
    radii=((0.0, 1.0), (1.5, 2.5)),
    seed: int = 0,
    split: str = "train",
) -> Dataset:
    (a0, b0), (a1, b1) = radii
    if not (0 <= a0 < b0 and 0 <= a1 < b1):
        raise ValueError(f"radius intervals must be nonnegative and nonempty: {radii}")
    if not (b0 <= a1 or b1 <= a0):
        raise ValueError(f"radius intervals overlap: {radii}")
    gen = rng(seed)
    xs, ys = [], []
    for label, (lo, hi) in enumerate(radii):
        r = gen.uniform(lo, hi, size=n_per_class)
        phi = gen.uniform(0.0, 2 * np.pi, size=n_per_class)
        xs.append(np.stack([r * np.cos(phi), r * np.sin(phi)], axis=1))
        ys.append(np.full((n_per_class, 1), float(label)))
    return Dataset(np.concatenate(xs).reshape(-1, 2), np.concatenate(ys).reshape(-1, 1), split)


def write_csv(path, datasets) -> None:
    """Write point datasets as ``split,x0..,y0..`` rows."""
    datasets = list(datasets)
    d = datasets[0].inputs.shape[1]
    m = int(np.prod(datasets[0].targets.shape[1:]))
    with open(Path(path), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["split"] + [f"x{i}" for i in range(d)] + [f"y{i}" for i in range(m)])
        for ds in datasets:
            flat = ds.targets.reshape(len(ds), -1)
            for xi, yi in zip(ds.inputs, flat):
                w.writerow([ds.split] + [repr(float(v)) for v in xi] + [repr(float(v)) for v in yi])
