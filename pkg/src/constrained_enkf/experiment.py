"""Experiment presets, configuration handling and CSV/JSON output."""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .constraints import (RepairError, quadratic_pairing_constraint, repair_ensemble,
                          repair_pairwise, symmetry_constraint)
from .dae import SolverConfig, run_filter
from .diagnostics import CSV_COLUMNS, RunRecord
from .discrete import run_discrete
from .ensemble import Ensemble, sample_brownian_bridge
from .forward import assemble_elliptic_operator, grid, synthesize_observation
from .meanfield import CounterexampleState, ScalarSystemParams, Trajectory, integrate_counterexample
from .multiplier import MultiplierError

log = logging.getLogger(__name__)

PRESETS = ("linear-symmetry", "quadratic-convex", "quadratic-nonconvex", "counterexample")
DEFAULT_J = {"linear-symmetry": 100, "quadratic-convex": 160, "quadratic-nonconvex": 40, "counterexample": 2}
DEFAULT_J_LIST = {"quadratic-convex": (40, 80, 160), "quadratic-nonconvex": (40, 80, 160, 320, 640)}
MAX_B_ATTEMPTS = 10
OUT_DIR_ENV = "CENKF_OUT_DIR"

EXIT_CODES = {"discrepancy": 0, "completed": 0, "max_steps": 2, "error": 3}
EXIT_CONFIG_ERROR = 4


class ConfigError(ValueError):
    """Invalid experiment configuration."""


@dataclass(frozen=True)
class ExperimentConfig:
    """One experiment run.

    ``J=None`` picks the preset default. ``T``, ``dt`` and ``u0``, ``v0``
    only affect the counterexample preset.
    """

    preset: str = "quadratic-convex"
    d: int = 256
    J: int | None = None
    gamma: float = 0.01
    seed_noise: int = 2
    seed_ensemble: int = 3
    seed_b: int = 1
    b_scale: float = 0.5
    out: str | None = None
    solver: SolverConfig = field(default_factory=SolverConfig)
    discrete_max_steps: int = 200
    T: float = 10.0
    dt: float = 0.01
    u0: float = 2.0
    v0: float = 0.0

    def __post_init__(self):
        if self.preset not in PRESETS:
            raise ConfigError(f"unknown preset {self.preset!r}; choose from {PRESETS}")
        if self.J is None:
            object.__setattr__(self, "J", DEFAULT_J[self.preset])
        if self.J < 2:
            raise ConfigError("J must be at least 2")
        if self.d < 2:
            raise ConfigError("d must be at least 2")
        if self.preset.startswith("quadratic") and self.d % 2:
            raise ConfigError("quadratic presets need an even d")
        if self.gamma <= 0:
            raise ConfigError("gamma must be positive")
        if self.preset == "counterexample" and (self.T <= 0 or self.dt <= 0):
            raise ConfigError("T and dt must be positive")

    @property
    def stem(self) -> str:
        return f"{self.preset}_J{self.J}"

    def to_dict(self) -> dict:
        out = dataclasses.asdict(self)
        out["solver"] = self.solver.to_dict()
        return out


_SOLVER_FIELDS = {f.name: f for f in dataclasses.fields(SolverConfig)}
_CONFIG_FIELDS = {f.name: f for f in dataclasses.fields(ExperimentConfig) if f.name != "solver"}


def _convert(name: str, raw: str, default):
    text = raw.strip()
    if isinstance(default, bool):
        return text.lower() in ("1", "true", "yes", "on")
    if isinstance(default, int) or name in ("J", "max_steps"):
        if text.lower() in ("none", ""):
            return None
        return int(text)
    if isinstance(default, float):
        return float(text)
    if text.lower() == "none":
        return None
    return text


def parse_config_text(text: str) -> dict:
    """Flat ``key = value`` lines; ``#`` starts a comment; dashes in keys allowed."""
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value")
        key, raw = (s.strip() for s in line.split("=", 1))
        key = key.replace("-", "_")
        if key in _CONFIG_FIELDS:
            default = _CONFIG_FIELDS[key].default
        elif key in _SOLVER_FIELDS:
            default = _SOLVER_FIELDS[key].default
        elif key == "J_list":
            values[key] = parse_j_list(raw)
            continue
        else:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        try:
            values[key] = _convert(key, raw, default)
        except ValueError as exc:
            raise ConfigError(f"line {lineno}: bad value for {key}: {raw!r}") from exc
    return values


def parse_j_list(raw) -> tuple[int, ...]:
    try:
        items = tuple(int(s) for s in str(raw).replace(",", " ").split())
    except ValueError as exc:
        raise ConfigError(f"bad J list {raw!r}") from exc
    if not items:
        raise ConfigError("empty J list")
    return items


def build_config(values: dict) -> ExperimentConfig:
    """ExperimentConfig from a flat mapping; unset keys keep their defaults."""
    solver_kw = {k: v for k, v in values.items() if k in _SOLVER_FIELDS and v is not None}
    exp_kw = {k: v for k, v in values.items() if k in _CONFIG_FIELDS and v is not None}
    try:
        solver = SolverConfig(**solver_kw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    try:
        return ExperimentConfig(solver=solver, **exp_kw)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


def config_from_dict(echo: dict) -> ExperimentConfig:
    """Rebuild a config from its ``to_dict`` echo (as stored in the JSON metadata)."""
    flat = {k: v for k, v in echo.items() if k != "solver"}
    flat.update(echo.get("solver", {}))
    return build_config(flat)


def output_dir(config: ExperimentConfig) -> Path | None:
    if config.out is not None:
        return Path(config.out)
    env = os.environ.get(OUT_DIR_ENV)
    return Path(env) if env else None


@dataclass
class ExperimentResult:
    config: ExperimentConfig
    record: RunRecord | None = None
    trajectory: Trajectory | None = None
    metadata: dict = field(default_factory=dict)
    csv_path: Path | None = None
    json_path: Path | None = None

    @property
    def termination(self) -> str:
        return self.metadata["termination"]

    @property
    def exit_code(self) -> int:
        return EXIT_CODES[self.termination]


def _setup_quadratic(config: ExperimentConfig, convex: bool):
    """Truth, b and initial ensemble; b is redrawn when repair fails."""
    x = grid(config.d)
    rng_b = np.random.default_rng(config.seed_b)
    last = None
    for attempt in range(1, MAX_B_ATTEMPTS + 1):
        b = config.b_scale * rng_b.standard_normal(config.d)
        constraint = quadratic_pairing_constraint(b, convex=convex)
        try:
            truth = repair_pairwise(np.sin(np.pi * x), constraint, adjust_partner=True)
            bridge = sample_brownian_bridge(config.d, config.J, config.seed_ensemble)
            members = repair_ensemble(bridge.members, constraint, adjust_partner=True)
        except RepairError as exc:
            last = exc
            log.info("repair failed with b draw %d: %s", attempt, exc)
            continue
        return constraint, truth, Ensemble(members), attempt
    raise RepairError(f"repair failed for {MAX_B_ATTEMPTS} draws of b: {last}")


def _run_counterexample(config: ExperimentConfig) -> ExperimentResult:
    params = ScalarSystemParams()
    meta = {"config": config.to_dict(), "params": dataclasses.asdict(params)}
    try:
        traj = integrate_counterexample(params, CounterexampleState(config.u0, config.v0),
                                        config.T, config.dt, tol=config.solver.newton_tol,
                                        max_iter=config.solver.newton_max_iter)
    except MultiplierError as exc:
        meta.update(termination="error", error=str(exc))
        return ExperimentResult(config, metadata=meta)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    meta["termination"] = "completed"
    return ExperimentResult(config, trajectory=traj, metadata=meta)


def run_experiment(config: ExperimentConfig, write: bool = True) -> ExperimentResult:
    """Run one preset; writes ``<preset>_J<J>.csv`` and ``.json`` when an output directory is set.

    Raises
    ------
    RepairError
        If no draw of b out of ``MAX_B_ATTEMPTS`` admits a feasible setup.
    """
    if config.preset == "counterexample":
        result = _run_counterexample(config)
    else:
        model = assemble_elliptic_operator(config.d)
        x = grid(config.d)
        meta = {"config": config.to_dict(),
                "seeds": {"noise": config.seed_noise, "ensemble": config.seed_ensemble, "b": config.seed_b}}
        if config.preset == "linear-symmetry":
            constraint = symmetry_constraint(config.d)
            truth = np.sin(3 * x)
            bridge = sample_brownian_bridge(config.d, config.J, config.seed_ensemble).members
            # projection onto the symmetric subspace makes the start feasible
            initial = Ensemble(0.5 * (bridge + bridge[:, ::-1]))
        else:
            constraint, truth, initial, attempts = _setup_quadratic(config, config.preset == "quadratic-convex")
            meta["b_attempts"] = attempts
            meta["truth_feasibility"] = float(abs(constraint.evaluate(truth)[0]))
        obs = synthesize_observation(model, truth, config.gamma, config.seed_noise)
        meta["eta_norm_sq"] = obs.eta_norm_sq
        meta["eta_source"] = "realized"
        if config.preset == "linear-symmetry":
            record = run_discrete(initial, obs.model, obs.y, obs.eta_norm_sq, constraint,
                                  max_steps=config.discrete_max_steps, truth=truth, metadata=meta)
        else:
            record = run_filter(initial, obs.model, obs.y, obs.eta_norm_sq, constraint,
                                config.solver, truth=truth, metadata=meta)
            lam_min = record.column("lambda_min")[1:]
            meta["lambda_min_positive"] = bool(np.all(lam_min > 0))
        meta["termination"] = record.termination
        if record.error:
            meta["error"] = record.error
        meta["steps"] = len(record) - 1
        result = ExperimentResult(config, record=record, metadata=meta)
    directory = output_dir(config)
    if write and directory is not None:
        directory.mkdir(parents=True, exist_ok=True)
        result.csv_path = directory / f"{config.stem}.csv"
        result.json_path = directory / f"{config.stem}.json"
        if result.record is not None:
            emit_csv(result.record, result.csv_path)
        elif result.trajectory is not None:
            result.trajectory.to_csv(result.csv_path)
        write_metadata(result.metadata, result.json_path)
    return result


def _fmt(x) -> str:
    return format(float(x), ".17g")


def emit_csv(record: RunRecord, path) -> Path:
    """Write one row per recorded step with 17 significant digits."""
    path = Path(path)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(CSV_COLUMNS)
        for row in record.rows:
            writer.writerow([_fmt(v) for v in row.as_tuple()])
    return path


def read_csv(path) -> dict[str, np.ndarray]:
    with Path(path).open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        data = [[float(v) for v in row] for row in reader]
    arr = np.array(data, dtype=float).reshape(-1, len(header))
    return {name: arr[:, i] for i, name in enumerate(header)}


def _json_default(obj):
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    raise TypeError(f"not serializable: {type(obj)}")


def write_metadata(metadata: dict, path) -> Path:
    path = Path(path)
    # dt_max may be inf, written as the Infinity token Python's json reads back
    text = json.dumps(metadata, indent=2, sort_keys=True, default=_json_default, allow_nan=True)
    path.write_text(text + "\n")
    return path
