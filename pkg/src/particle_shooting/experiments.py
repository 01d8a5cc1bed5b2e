"""Running configured experiments and writing their artifacts.

Per seed, ``run_fit`` writes into ``<out>/seed_<n>/``:

``history.csv``     epoch, train_loss, val_loss, lr, complexity
``theta_t.csv``     step, stage, t, then every weight entry (``t1_i_j``, ``b1_i``, ...);
                    rows with ``stage == 0`` are the weights on the time grid, the
                    other stages make the rollout exactly replayable
``trajectory.csv``  sample, t, x0.., v0.. for the test inputs (on request)
``summary.json``    final metrics, parameter count, Hamiltonian drift, seed, config hash
``params.npz``      learned parameters, read back by ``eval``
``config.toml``     the fully resolved configuration
"""
from __future__ import annotations

import csv
import json
import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from functools import partial
from multiprocessing import get_context
from pathlib import Path
from typing import Callable

import jax
import jax.numpy as jnp
import numpy as np

from . import datasets as ds
from .config import ExperimentConfig, SweepConfig, write_config
from .dynamics import UpDownTheta
from .integrator import DivergenceError
from .objective import Readout
from .parameterizations import (
    AffineLift,
    DirectParams,
    ModelTrajectory,
    ParticleParams,
    count_parameters,
    forward,
)
from .trainer import Experiment, FitResult, Params, TrainingDivergence, fit, init_parameters

log = logging.getLogger(__name__)

THETA_NAMES = UpDownTheta._fields
HISTORY_COLUMNS = ("epoch", "train_loss", "val_loss", "lr", "complexity")


@dataclass
class TaskData:
    train: ds.Dataset | Callable[[int], ds.Dataset]
    val: ds.Dataset
    test: ds.Dataset
    data_range: tuple


def make_data(cfg: ExperimentConfig, seed: int) -> TaskData:
    """Datasets for a run.  Fixed splits depend on ``data_seed`` only."""
    seeds = np.random.SeedSequence(cfg.data_seed).spawn(3)
    dc = cfg.data
    if cfg.task in ("quadratic_like", "cubic"):
        make = partial(ds.gen_function_1d, cfg.task, range_=dc.range)
        return TaskData(
            make(dc.n_train, seed=seeds[0]),
            make(dc.n_val, seed=seeds[1], split="val"),
            make(dc.n_test, seed=seeds[2], split="test"),
            dc.range,
        )
    if cfg.task == "circles":
        make = partial(ds.gen_concentric_circles, radii=dc.radii)
        outer = max(r[1] for r in dc.radii)
        return TaskData(
            make(dc.n_train // 2, seed=seeds[0]),
            make(max(dc.n_val // 2, 1), seed=seeds[1], split="val"),
            make(max(dc.n_test // 2, 1), seed=seeds[2], split="test"),
            (-outer, outer),
        )
    sampler = ds.SpiralSampler(dc.snippet_steps, cfg.integrator.step)
    train_gen = ds.rng(np.random.SeedSequence([cfg.data_seed, seed, 7]))
    _, ref = ds.spiral_reference(cfg.integrator.step)
    lo, hi = ref.min(axis=0), ref.max(axis=0)
    return TaskData(
        lambda epoch: sampler.sample(dc.n_train, train_gen),
        sampler.sample(dc.n_val, ds.rng(seeds[1]), "val"),
        sampler.sample(dc.n_test, ds.rng(seeds[2]), "test"),
        (lo, hi),
    )


def hamiltonian_drift(traj: ModelTrajectory):
    if traj.hamiltonian is None:
        return None
    H = np.asarray(traj.hamiltonian)
    return float(np.max(np.abs(H - H[0])) / max(abs(H[0]), 1e-12))


def long_range_rollout(params, cfg: ExperimentConfig, x0=ds.SPIRAL_X0, horizon=ds.SPIRAL_HORIZON):
    """Paste short-horizon solutions: each segment starts where the last ended.

    Returns the data states on the concatenated grid, shape ``(steps + 1, d)``.
    """
    spec, integ = cfg.mode_spec, cfg.integrator
    segments = int(round(horizon / integ.horizon))

    @jax.jit
    def run(model_params, start):
        def seg(x, _):
            traj = forward(model_params, x[None], spec, integ)
            path = traj.x[1:, 0, : spec.d]
            return path[-1], path

        _, paths = jax.lax.scan(seg, start, None, length=segments)
        return jnp.concatenate([start[None], paths.reshape(-1, spec.d)])

    return np.asarray(run(params.model, jnp.asarray(x0, dtype=float)))


def spiral_long_range_error(params, cfg: ExperimentConfig) -> float:
    """Mean Euclidean distance between the pasted rollout and the reference trace."""
    pred = long_range_rollout(params, cfg)
    _, ref = ds.spiral_reference(cfg.integrator.step)
    return float(np.mean(np.linalg.norm(pred - ref[: len(pred)], axis=1)))


def _theta_columns(theta: UpDownTheta) -> list[str]:
    cols = []
    for name, comp in zip(THETA_NAMES, theta):
        shape = np.shape(comp)
        for idx in np.ndindex(*shape):
            cols.append("_".join([name, *map(str, idx)]))
    return cols


def write_theta_csv(path, traj: ModelTrajectory) -> None:
    stage_theta = [np.asarray(c) for c in traj.stage_theta]
    n_steps, stages = stage_theta[0].shape[:2]
    single = UpDownTheta(*(c[0, 0] for c in stage_theta))
    final = [np.asarray(c)[-1] for c in traj.theta]
    stage_t = np.asarray(traj.stage_times)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "stage", "t"] + _theta_columns(single))
        for k in range(n_steps):
            for s in range(stages):
                vals = np.concatenate([c[k, s].ravel() for c in stage_theta])
                w.writerow([k, s, repr(float(stage_t[k, s]))] + [repr(float(v)) for v in vals])
        vals = np.concatenate([c.ravel() for c in final])
        t_end = float(np.asarray(traj.theta_times)[-1])
        w.writerow([n_steps, 0, repr(t_end)] + [repr(float(v)) for v in vals])


def read_theta_csv(path, d: int, alpha: int, stages: int) -> UpDownTheta:
    """Per-stage weights from ``theta_t.csv``, shaped ``(steps, stages, ...)``."""
    h = alpha * d
    shapes = [(d, h), (d,), (h, d), (h,), (h, h)]
    rows = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    body = rows[:-1]  # the last row is theta(T) on the grid, not a stage value
    n_steps = len(body) // stages
    vals = body[:, 3:].reshape(n_steps, stages, -1)
    comps, start = [], 0
    for shape in shapes:
        size = int(np.prod(shape))
        comps.append(vals[..., start : start + size].reshape(n_steps, stages, *shape))
        start += size
    return UpDownTheta(*(jnp.asarray(c) for c in comps))


def write_trajectory_csv(path, traj: ModelTrajectory, d: int) -> None:
    x = np.asarray(traj.x)
    times = np.asarray(traj.times)
    S = x.shape[2]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["sample", "t"] + [f"x{i}" for i in range(d)] + [f"v{i}" for i in range(S - d)])
        for i in range(x.shape[1]):
            for k, t in enumerate(times):
                w.writerow([i, repr(float(t))] + [repr(float(v)) for v in x[k, i]])


def read_trajectory_csv(path):
    """Returns ``(times, states)`` with states shaped ``(steps + 1, n, S)``."""
    rows = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    n = int(rows[:, 0].max()) + 1
    per = len(rows) // n
    times = rows[:per, 1]
    states = rows[:, 2:].reshape(n, per, -1).swapaxes(0, 1)
    return times, states


def write_history_csv(path, history) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=HISTORY_COLUMNS)
        w.writeheader()
        for row in history:
            w.writerow({k: repr(float(row[k])) if isinstance(row[k], float) else row[k] for k in HISTORY_COLUMNS})


def save_params(path, params: Params) -> None:
    arrays = {}
    model = params.model
    arrays["lift_weight"], arrays["lift_bias"] = map(np.asarray, model.lift)
    if isinstance(model, ParticleParams):
        arrays["q"], arrays["p"] = np.asarray(model.q), np.asarray(model.p)
    else:
        for name, comp in zip(THETA_NAMES, model.theta):
            arrays[f"theta_{name}"] = np.asarray(comp)
    if params.readout is not None:
        arrays["readout_weight"], arrays["readout_bias"] = map(np.asarray, params.readout)
    np.savez(path, **arrays)


def load_params(path) -> Params:
    with np.load(path) as z:
        lift = AffineLift(jnp.asarray(z["lift_weight"]), jnp.asarray(z["lift_bias"]))
        if "q" in z:
            model = ParticleParams(jnp.asarray(z["q"]), jnp.asarray(z["p"]), lift)
        else:
            model = DirectParams(UpDownTheta(*(jnp.asarray(z[f"theta_{n}"]) for n in THETA_NAMES)), lift)
        readout = None
        if "readout_weight" in z:
            readout = Readout(jnp.asarray(z["readout_weight"]), jnp.asarray(z["readout_bias"]))
    return Params(model, readout)


def _metrics(exp: Experiment, params: Params, cfg: ExperimentConfig, data: TaskData) -> tuple[dict, ModelTrajectory]:
    test = exp.evaluate(params, data.test)
    traj = forward(params.model, jnp.asarray(data.test.inputs), cfg.mode_spec, cfg.integrator)
    out = {
        "test_loss": test["data_loss"],
        "test_objective": test["objective"],
        "complexity": test["complexity"],
        "h_drift": hamiltonian_drift(traj),
    }
    if "accuracy" in test:
        out["test_accuracy"] = test["accuracy"]
    return out, traj


def _summary(cfg, seed, params, exp, data, history) -> tuple[dict, ModelTrajectory]:
    metrics, traj = _metrics(exp, params, cfg, data)
    train = data.train(-1) if callable(data.train) else data.train
    train_eval = exp.evaluate(params, train)
    summary = {
        "task": cfg.task,
        "mode": cfg.mode,
        "alpha": cfg.alpha,
        "particles": cfg.mode_spec.K,
        "seed": seed,
        "epochs": len(history),
        **metrics,
        "train_loss": train_eval["data_loss"],
        "val_loss": history[-1]["val_loss"] if history else exp.evaluate(params, data.val)["objective"],
        "parameter_count": count_parameters(cfg.mode_spec),
        "config_hash": cfg.config_hash(),
        "generator": ds.GENERATOR_KIND,
    }
    if "accuracy" in train_eval:
        summary["train_accuracy"] = train_eval["accuracy"]
    if cfg.task == "spiral":
        summary["long_range_error"] = spiral_long_range_error(params, cfg)
    return summary, traj


def train_seed(cfg: ExperimentConfig, seed: int) -> tuple[FitResult, Experiment, TaskData]:
    spec = cfg.mode_spec
    data = make_data(cfg, seed)
    params = init_parameters(spec, data.data_range, seed, readout=cfg.task == "circles")
    exp = Experiment(spec, cfg.integrator, cfg.objective, cfg.optimizer)
    result = fit(params, data.train, data.val, spec, cfg.integrator, cfg.objective,
                 cfg.optimizer, seed, exp)
    return result, exp, data


def run_fit(cfg: ExperimentConfig, seed: int, out_dir, record_trajectory: bool = False) -> dict:
    """Train one seed and write its artifacts; returns the summary."""
    out = Path(out_dir)
    result, exp, data = train_seed(cfg, seed)
    out.mkdir(parents=True, exist_ok=True)
    summary, traj = _summary(cfg, seed, result.params, exp, data, result.history)
    write_history_csv(out / "history.csv", result.history)
    write_theta_csv(out / "theta_t.csv", traj)
    if record_trajectory or cfg.record_trajectory:
        write_trajectory_csv(out / "trajectory.csv", traj, cfg.d)
    save_params(out / "params.npz", result.params)
    write_config(cfg.with_(seeds=[seed]), out / "config.toml")
    (out / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    return summary


def run_eval(cfg: ExperimentConfig, seed: int, run_dir, record_trajectory: bool = False) -> dict:
    """Re-evaluate stored parameters on freshly generated splits."""
    run_dir = Path(run_dir)
    params = load_params(run_dir / "params.npz")
    data = make_data(cfg, seed)
    exp = Experiment(cfg.mode_spec, cfg.integrator, cfg.objective, cfg.optimizer)
    metrics, traj = _metrics(exp, params, cfg, data)
    metrics.update(seed=seed, config_hash=cfg.config_hash(), parameter_count=count_parameters(cfg.mode_spec))
    if cfg.task == "spiral":
        metrics["long_range_error"] = spiral_long_range_error(params, cfg)
    if record_trajectory:
        write_trajectory_csv(run_dir / "trajectory.csv", traj, cfg.d)
    (run_dir / "eval.json").write_text(json.dumps(metrics, indent=2) + "\n")
    return metrics


def iqr_outliers(values) -> list[bool]:
    """Flag values lying outside the interquartile range by at least 1.5 IQR."""
    v = np.asarray(values, dtype=float)
    ok = np.isfinite(v)
    flags = np.zeros(len(v), dtype=bool)
    if ok.sum() == 0:
        return flags.tolist()
    q1, q3 = np.percentile(v[ok], [25, 75])
    fence = 1.5 * (q3 - q1)
    flags[ok] = ((v[ok] > q3) & (v[ok] - q3 >= fence)) | ((v[ok] < q1) & (q1 - v[ok] >= fence))
    return flags.tolist()


SWEEP_COLUMNS = (
    "mode", "alpha", "seed", "status", "test_loss", "complexity", "param_count",
    "test_loss_outlier", "complexity_outlier", "error",
)


def _sweep_cell(cfg: ExperimentConfig, out_dir: str, cell) -> dict:
    mode, alpha, seed = cell
    cell_cfg = cfg.with_(mode=mode, alpha=alpha, seeds=[seed])
    row = {"mode": mode, "alpha": alpha, "seed": seed, "param_count": count_parameters(cell_cfg.mode_spec)}
    try:
        summary = run_fit(cell_cfg, seed, Path(out_dir) / f"{mode}_a{alpha}" / f"seed_{seed}")
    except (DivergenceError, TrainingDivergence, FloatingPointError) as exc:
        row.update(status="diverged", test_loss=math.nan, complexity=math.nan, error=str(exc))
        return row
    row.update(status="ok", test_loss=summary["test_loss"], complexity=summary["complexity"], error="")
    return row


def run_sweep(sweep: SweepConfig, out_dir, threads: int | None = None) -> list[dict]:
    """Run every (mode, alpha, seed) cell and write ``sweep.csv``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cells = list(sweep.cells())
    if threads is None:
        threads = int(os.environ.get("SHOOTING_NUM_THREADS", "1") or 1)
    work = partial(_sweep_cell, sweep.base, str(out))
    if threads > 1 and len(cells) > 1:
        with ProcessPoolExecutor(min(threads, len(cells)), mp_context=get_context("spawn")) as pool:
            rows = list(pool.map(work, cells))
    else:
        rows = [work(c) for c in cells]
    for mode in sweep.modes:
        for alpha in sweep.alphas:
            group = [r for r in rows if r["mode"] == mode and r["alpha"] == alpha]
            for key in ("test_loss", "complexity"):
                for r, flag in zip(group, iqr_outliers([r[key] for r in group])):
                    r[f"{key}_outlier"] = int(flag)
    write_sweep_csv(out / "sweep.csv", rows)
    return rows


def write_sweep_csv(path, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=SWEEP_COLUMNS)
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(float(r[k])) if isinstance(r.get(k), float) else r.get(k, "")) for k in SWEEP_COLUMNS})


def read_sweep_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))
