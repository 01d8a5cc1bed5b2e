"""Command-line entry point.

Exit codes: 0 success, 2 configuration error, 3 numerical divergence.
"""
from __future__ import annotations

import json
import logging
import sys
from pathlib import Path

import click

from . import config as config_mod
from . import datasets as ds
from .config import ConfigError
from .integrator import DivergenceError
from .parameterizations import MODES, count_parameters
from .trainer import TrainingDivergence

EXIT_CONFIG = 2
EXIT_DIVERGED = 3


def _fail(code: int, msg: str):
    click.echo(f"error: {msg}", err=True)
    sys.exit(code)


def _load(path, seed):
    try:
        cfg = config_mod.load(path)
        if seed is not None:
            cfg = cfg.with_(seeds=[seed])
    except ConfigError as exc:
        _fail(EXIT_CONFIG, str(exc))
    return cfg


@click.group()
@click.option("-v", "--verbose", is_flag=True, help="Log progress to stderr.")
def main(verbose):
    """Particle-ensemble shooting for continuous-depth networks."""
    logging.basicConfig(level=logging.INFO if verbose else logging.WARNING)


@main.command()
@click.option("--config", "config_path", required=True, type=click.Path())
@click.option("--seed", type=int, default=None, help="Run only this seed.")
@click.option("--out", type=click.Path(), default=None, help="Output directory (overrides output_dir).")
@click.option("--record-trajectory", is_flag=True, help="Also write trajectory.csv.")
def fit(config_path, seed, out, record_trajectory):
    """Train every configured seed and write per-seed artifacts."""
    from .experiments import run_fit

    cfg = _load(config_path, seed)
    out_dir = Path(out or cfg.output_dir)
    try:
        for s in cfg.seeds:
            summary = run_fit(cfg, s, out_dir / f"seed_{s}", record_trajectory)
            click.echo(json.dumps({k: summary[k] for k in ("seed", "test_loss", "complexity", "parameter_count")}))
    except (DivergenceError, TrainingDivergence) as exc:
        _fail(EXIT_DIVERGED, str(exc))


@main.command("eval")
@click.option("--config", "config_path", required=True, type=click.Path())
@click.option("--seed", type=int, default=None)
@click.option("--out", type=click.Path(), default=None, help="Directory holding the fit outputs.")
@click.option("--record-trajectory", is_flag=True)
def eval_(config_path, seed, out, record_trajectory):
    """Re-evaluate stored parameters of a previous fit."""
    from .experiments import run_eval

    cfg = _load(config_path, seed)
    out_dir = Path(out or cfg.output_dir)
    for s in cfg.seeds:
        run_dir = out_dir / f"seed_{s}"
        if not (run_dir / "params.npz").exists():
            _fail(EXIT_CONFIG, f"no fitted parameters in {run_dir}")
        try:
            metrics = run_eval(cfg, s, run_dir, record_trajectory)
        except DivergenceError as exc:
            _fail(EXIT_DIVERGED, str(exc))
        click.echo(json.dumps(metrics))


@main.command()
@click.option("--config", "config_path", required=True, type=click.Path())
@click.option("--out", type=click.Path(), default=None)
def sweep(config_path, out):
    """Run a modes x alphas x seeds grid and write sweep.csv."""
    from .experiments import run_sweep

    try:
        sw = config_mod.load_sweep(config_path)
    except ConfigError as exc:
        _fail(EXIT_CONFIG, str(exc))
    rows = run_sweep(sw, Path(out or sw.base.output_dir))
    ok = sum(r["status"] == "ok" for r in rows)
    click.echo(f"{ok}/{len(rows)} runs succeeded")
    if ok == 0:
        sys.exit(EXIT_DIVERGED)


@main.command("param-count")
@click.option("--mode", required=True, type=click.Choice(MODES))
@click.option("--d", "d", required=True, type=int)
@click.option("--alpha", required=True, type=int)
@click.option("--particles", "-K", "particles", type=int, default=None)
@click.option("--blocks", type=int, default=5, show_default=True, help="dynamic_direct only.")
def param_count(mode, d, alpha, particles, blocks):
    """Print the number of learnable parameters."""
    from .parameterizations import ModeSpec

    try:
        spec = ModeSpec(
            mode=mode,
            d=d,
            alpha=alpha,
            K=particles if mode.endswith("particles") else None,
            blocks=blocks if mode == "dynamic_direct" else 1,
        )
        if particles is not None and not spec.uses_particles:
            raise ValueError(f"{mode} does not take a particle count")
    except ValueError as exc:
        _fail(EXIT_CONFIG, str(exc))
    click.echo(count_parameters(spec))


@main.command("gen-data")
@click.option("--config", "config_path", required=True, type=click.Path())
@click.option("--seed", type=int, default=None, help="Overrides data_seed.")
@click.option("--out", type=click.Path(), default=None)
def gen_data(config_path, seed, out):
    """Write the task's datasets as CSV."""
    from .experiments import make_data

    cfg = _load(config_path, None)
    if seed is not None:
        cfg = cfg.with_(data_seed=seed)
    out_dir = Path(out or cfg.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    data = make_data(cfg, cfg.seeds[0])
    train = data.train(0) if callable(data.train) else data.train
    ds.write_csv(out_dir / "data.csv", [train, data.val, data.test])
    if cfg.task == "spiral":
        times, ref = ds.spiral_reference(cfg.integrator.step)
        with open(out_dir / "reference.csv", "w") as fh:
            fh.write("t,x0,x1\n")
            for t, x in zip(times, ref):
                fh.write(f"{float(t)!r},{float(x[0])!r},{float(x[1])!r}\n")
    click.echo(str(out_dir))


if __name__ == "__main__":
    main()
