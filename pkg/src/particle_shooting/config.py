"""Experiment configuration: TOML files resolved against per-task defaults.

A minimal file only needs ``task`` and ``mode``; every other value falls
back to the protocol defaults for that task (see ``TASK_DEFAULTS``).
"""
from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import asdict, dataclass
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .integrator import IntegratorSpec
from .objective import ObjectiveSpec
from .parameterizations import MODES, ModeSpec
from .trainer import OptimSpec

TASKS = ("quadratic_like", "cubic", "spiral", "circles")


class ConfigError(ValueError):
    pass


_REGRESSION = {
    "d": 1,
    "alpha": 16,
    "particles": 15,
    "blocks": 5,
    "activation": "relu",
    "penalty_weights": [1.0, 1.0, 1.0, 1.0, 10.0],
    "seeds": [0],
    "data_seed": 0,
    "output_dir": "runs",
    "record_trajectory": False,
    "integrator": {"scheme": "rk4", "step": 0.1, "horizon": 1.0},
    "optimizer": {
        "lr": 0.01,
        "scheduler": "plateau",
        "factor": 0.5,
        "patience": 10,
        "epochs": 500,
        "batch_size": 50,
        "freeze_epochs": 50,
    },
    "objective": {"loss": "mse", "gamma": 100.0, "reg_weight": 1.0},
    "data": {"n_train": 500, "n_val": 1000, "n_test": 1000, "range": [-1.5, 1.5]},
}


def _merged(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _merged(out[key], value)
        else:
            out[key] = copy.deepcopy(value)
    return out


TASK_DEFAULTS = {
    "quadratic_like": _REGRESSION,
    "cubic": _REGRESSION,
    "spiral": _merged(
        _REGRESSION,
        {
            "d": 2,
            "particles": 25,
            "integrator": {"step": 0.05, "horizon": 0.25},
            "optimizer": {"epochs": 1500, "batch_size": 100},
            "objective": {"loss": "mse_trajectory", "reg_weight": 0.01},
            "data": {"n_train": 100, "n_val": 100, "n_test": 1000, "snippet_steps": 5},
        },
    ),
    "circles": _merged(
        _REGRESSION,
        {
            "d": 2,
            "particles": 20,
            "optimizer": {"epochs": 100, "batch_size": 50, "freeze_epochs": 10},
            "objective": {"loss": "binary_cross_entropy"},
            "data": {
                "n_train": 100,
                "n_val": 100,
                "n_test": 500,
                "radii": [[0.0, 1.0], [1.5, 2.5]],
            },
        },
    ),
}

_TOP_KEYS = {
    "task", "mode", "modes", "alpha", "alphas", "particles", "blocks", "activation",
    "penalty_weights", "seeds", "data_seed", "output_dir", "record_trajectory",
    "integrator", "optimizer", "objective", "data", "d",
}
_DATA_KEYS = {"n_train", "n_val", "n_test", "range", "radii", "snippet_steps"}


@dataclass(frozen=True)
class DataSpec:
    n_train: int
    n_val: int
    n_test: int
    range: tuple = (-1.5, 1.5)
    radii: tuple = ((0.0, 1.0), (1.5, 2.5))
    snippet_steps: int = 5


@dataclass(frozen=True)
class ExperimentConfig:
    task: str
    mode: str
    d: int
    alpha: int
    particles: int
    blocks: int
    activation: str
    penalty_weights: tuple
    integrator: IntegratorSpec
    optimizer: OptimSpec
    objective: ObjectiveSpec
    data: DataSpec
    seeds: tuple
    data_seed: int
    output_dir: str
    record_trajectory: bool = False

    @property
    def mode_spec(self) -> ModeSpec:
        return mode_spec_for(self.mode, self.d, self.alpha, self.particles, self.blocks,
                             self.activation, self.penalty_weights)

    def to_dict(self) -> dict:
        return asdict(self)

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, default=list)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def with_(self, **changes) -> "ExperimentConfig":
        raw = self.to_dict()
        raw.update(changes)
        return _build(raw)


@dataclass(frozen=True)
class SweepConfig:
    base: ExperimentConfig
    modes: tuple
    alphas: tuple

    def cells(self):
        for mode in self.modes:
            for alpha in self.alphas:
                for seed in self.base.seeds:
                    yield mode, alpha, seed


def mode_spec_for(mode, d, alpha, particles, blocks, activation="relu", weights=(1, 1, 1, 1, 10)):
    return ModeSpec(
        mode=mode,
        d=d,
        alpha=alpha,
        K=particles if mode in ("static_with_particles", "dynamic_with_particles") else None,
        activation=activation,
        weights=tuple(weights),
        blocks=blocks if mode == "dynamic_direct" else 1,
    )


def _check_keys(raw: dict, allowed: set, where: str) -> None:
    unknown = set(raw) - allowed
    if unknown:
        raise ConfigError(f"unknown key(s) in {where}: {sorted(unknown)}")


def _build(raw: dict) -> ExperimentConfig:
    try:
        data = raw["data"]
        cfg = ExperimentConfig(
            task=raw["task"],
            mode=raw["mode"],
            d=int(raw["d"]),
            alpha=int(raw["alpha"]),
            particles=int(raw["particles"]),
            blocks=int(raw["blocks"]),
            activation=str(raw["activation"]),
            penalty_weights=tuple(float(w) for w in raw["penalty_weights"]),
            integrator=raw["integrator"] if isinstance(raw["integrator"], IntegratorSpec)
            else IntegratorSpec(**raw["integrator"]),
            optimizer=raw["optimizer"] if isinstance(raw["optimizer"], OptimSpec)
            else OptimSpec(**raw["optimizer"]),
            objective=raw["objective"] if isinstance(raw["objective"], ObjectiveSpec)
            else ObjectiveSpec(**raw["objective"]),
            data=data if isinstance(data, DataSpec) else DataSpec(
                n_train=int(data["n_train"]),
                n_val=int(data["n_val"]),
                n_test=int(data["n_test"]),
                range=tuple(float(v) for v in data.get("range", (-1.5, 1.5))),
                radii=tuple(tuple(float(v) for v in r) for r in data.get("radii", ((0.0, 1.0), (1.5, 2.5)))),
                snippet_steps=int(data.get("snippet_steps", 5)),
            ),
            seeds=tuple(int(s) for s in raw["seeds"]),
            data_seed=int(raw["data_seed"]),
            output_dir=str(raw["output_dir"]),
            record_trajectory=bool(raw.get("record_trajectory", False)),
        )
        _validate(cfg)
    except ConfigError:
        raise
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    return cfg


def _validate(cfg: ExperimentConfig) -> None:
    if cfg.task not in TASKS:
        raise ConfigError(f"unknown task {cfg.task!r}; expected one of {TASKS}")
    if cfg.mode not in MODES:
        raise ConfigError(f"unknown mode {cfg.mode!r}; expected one of {MODES}")
    expected_d = TASK_DEFAULTS[cfg.task]["d"]
    if cfg.d != expected_d:
        raise ConfigError(f"task {cfg.task} has data dimension {expected_d}, not {cfg.d}")
    if not cfg.seeds:
        raise ConfigError("at least one seed is required")
    if cfg.task != "spiral" and cfg.objective.loss == "mse_trajectory":
        raise ConfigError("mse_trajectory needs trajectory targets (spiral task)")
    if cfg.task == "circles" and cfg.objective.loss != "binary_cross_entropy":
        raise ConfigError("the circles task is scored with binary_cross_entropy")
    if cfg.task in ("quadratic_like", "cubic", "spiral") and cfg.objective.loss == "binary_cross_entropy":
        raise ConfigError(f"task {cfg.task} is a regression task")
    if min(cfg.data.n_train, cfg.data.n_val, cfg.data.n_test) < 1:
        raise ConfigError("every split needs at least one sample")
    lo, hi = cfg.data.range
    if not hi > lo:
        raise ConfigError(f"empty data range {cfg.data.range}")
    if cfg.task == "spiral":
        expected = cfg.data.snippet_steps * cfg.integrator.step
        if abs(expected - cfg.integrator.horizon) > 1e-9:
            raise ConfigError(
                "spiral horizon must equal snippet_steps * step "
                f"({cfg.data.snippet_steps} * {cfg.integrator.step} != {cfg.integrator.horizon})"
            )
    spec = cfg.mode_spec
    if spec.mode == "dynamic_direct" and spec.blocks > 1:
        length = cfg.integrator.horizon / spec.blocks
        n = round(length / cfg.integrator.step)
        if n < 1 or abs(n * cfg.integrator.step - length) > 1e-12:
            raise ConfigError(
                f"integrator step {cfg.integrator.step} must divide the block length {length}"
            )


def resolve(raw: dict) -> dict:
    """Merge a parsed file over the defaults of its task."""
    if not isinstance(raw, dict):
        raise ConfigError("configuration must be a table")
    _check_keys(raw, _TOP_KEYS, "configuration")
    for section in ("integrator", "optimizer", "objective"):
        if section in raw and not isinstance(raw[section], dict):
            raise ConfigError(f"[{section}] must be a table")
    if "data" in raw:
        if not isinstance(raw["data"], dict):
            raise ConfigError("[data] must be a table")
        _check_keys(raw["data"], _DATA_KEYS, "[data]")
    task = raw.get("task")
    if task not in TASKS:
        raise ConfigError(f"missing or unknown task {task!r}; expected one of {TASKS}")
    return _merged(TASK_DEFAULTS[task], raw)


def _read(path) -> dict:
    try:
        with open(path, "rb") as fh:
            return tomllib.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc}") from exc
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"malformed TOML in {path}: {exc}") from exc


def from_dict(raw: dict) -> ExperimentConfig:
    merged = resolve(raw)
    if "modes" in merged or "alphas" in merged:
        raise ConfigError("'modes'/'alphas' lists belong to sweep configurations")
    if "mode" not in merged:
        raise ConfigError("missing 'mode'")
    return _build(merged)


def load(path) -> ExperimentConfig:
    return from_dict(_read(path))


def sweep_from_dict(raw: dict) -> SweepConfig:
    merged = resolve(raw)
    modes = merged.pop("modes", None) or ([merged["mode"]] if "mode" in merged else None)
    if not modes:
        raise ConfigError("a sweep needs 'modes' (or a single 'mode')")
    alphas = merged.pop("alphas", None) or [merged["alpha"]]
    if isinstance(modes, str) or isinstance(alphas, (int, str)):
        raise ConfigError("'modes' and 'alphas' must be lists")
    merged["mode"] = modes[0]
    base = _build(merged)
    for mode in modes:
        for alpha in alphas:
            try:
                base.with_(mode=mode, alpha=int(alpha))
            except ConfigError as exc:
                raise ConfigError(f"invalid sweep cell ({mode}, alpha={alpha}): {exc}") from exc
    return SweepConfig(base, tuple(modes), tuple(int(a) for a in alphas))


def load_sweep(path) -> SweepConfig:
    return sweep_from_dict(_read(path))


def dump_toml(cfg: ExperimentConfig) -> str:
    """Render a resolved configuration back to TOML (used for run records)."""
    d = cfg.to_dict()
    lines = []
    for key, value in d.items():
        if not isinstance(value, dict):
            lines.append(f"{key} = {_toml_value(value)}")
    for key, value in d.items():
        if isinstance(value, dict):
            lines.append(f"\n[{key}]")
            for k, v in value.items():
                if v is not None:
                    lines.append(f"{k} = {_toml_value(v)}")
    return "\n".join(lines) + "\n"


def _toml_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (int, float)):
        return repr(v)
    if isinstance(v, str):
        return json.dumps(v)
    if isinstance(v, (list, tuple)):
        return "[" + ", ".join(_toml_value(x) for x in v) + "]"
    raise TypeError(f"cannot render {v!r}")


def write_config(cfg: ExperimentConfig, path) -> None:
    Path(path).write_text(dump_toml(cfg))
