"""Experiment orchestration: tuning, seed batches, grid search, report files."""

from __future__ import annotations

import configparser
import csv
import json
import math
import time
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .decoherence import RngBatch
from .samplers import ALGORITHMS, ChainResult, SamplerConfig, run
from .targets import TARGET_NAMES, TargetDistribution, make_target
from .tuning import VARE_TARGET, TuningReport, autotune

TUNE_MODES = ("auto", "grid", "none")
CSV_COLUMNS = ("step", "grad_evals", "b1", "sigma", "b2", "varE_per_d", "divergences")


class ConfigError(ValueError):
    """Invalid experiment configuration."""


def _floats(text) -> tuple:
    if isinstance(text, (list, tuple)):
        return tuple(float(v) for v in text)
    return tuple(float(v) for v in str(text).replace(",", " ").split())


@dataclass
class ExperimentConfig:
    target: str = "gaussian"
    d: Optional[int] = None
    kappa: float = 100.0
    Q: float = 0.1
    returns_csv: Optional[str] = None
    algorithm: str = "mclmc"
    integrator: str = "leapfrog"
    eps: Optional[float] = None
    L: float = math.inf
    steps: int = 10000
    seeds: int = 1
    seed: int = 0
    tune: str = "none"
    out: Optional[str] = None
    eps_grid: tuple = ()
    L_grid: tuple = ()
    checkpoint_start: float = 100.0
    checkpoint_ratio: float = 1.1
    varE_target: float = VARE_TARGET
    refine_steps: Optional[int] = None

    def __post_init__(self):
        if self.target not in TARGET_NAMES:
            raise ConfigError(f"unknown target {self.target!r}; choose from {', '.join(TARGET_NAMES)}")
        if self.algorithm not in ALGORITHMS:
            raise ConfigError(f"unknown algorithm {self.algorithm!r}; choose from {', '.join(ALGORITHMS)}")
        if self.tune not in TUNE_MODES:
            raise ConfigError(f"unknown tuning mode {self.tune!r}; choose from {', '.join(TUNE_MODES)}")
        if self.seeds < 1:
            raise ConfigError("need at least one seed")
        if self.steps < 1:
            raise ConfigError("need at least one step")
        if self.tune == "none" and self.eps is None:
            raise ConfigError("a step size is required when tuning is off")
        if self.tune == "grid" and not (self.eps_grid and self.L_grid):
            raise ConfigError("grid tuning needs non-empty eps_grid and L_grid")
        if self.tune == "auto" and self.algorithm not in ("mchmc", "mclmc"):
            raise ConfigError("automatic tuning supports mchmc and mclmc only")
        if self.refine_steps is not None and self.refine_steps < 50:
            raise ConfigError("refine_steps must be at least 50")
        if self.target == "sv" and not self.returns_csv:
            raise ConfigError("the sv target needs returns_csv")
        self.eps_grid = _floats(self.eps_grid)
        self.L_grid = _floats(self.L_grid)

    def sampler_config(self, eps=None, L=None) -> SamplerConfig:
        try:
            return SamplerConfig(
                algorithm=self.algorithm,
                integrator=self.integrator,
                eps=self.eps if eps is None else eps,
                L=self.L if L is None else L,
                steps=self.steps,
                seed=self.seed,
                checkpoint_start=self.checkpoint_start,
                checkpoint_ratio=self.checkpoint_ratio,
            )
        except ValueError as err:
            raise ConfigError(str(err)) from err

    def make_target(self) -> TargetDistribution:
        try:
            return make_target(self.target, d=self.d, kappa=self.kappa, Q=self.Q,
                               returns_csv=self.returns_csv)
        except (OSError, ValueError) as err:
            raise ConfigError(str(err)) from err

    def seed_list(self) -> list:
        return [self.seed + i for i in range(self.seeds)]


_TYPES = {f.name: f.type for f in fields(ExperimentConfig)}


def _coerce(key: str, value):
    if value is None:
        return None
    kind = _TYPES[key]
    if key in ("eps_grid", "L_grid"):
        return _floats(value)
    if "int" in kind:
        return int(value)
    if "float" in kind:
        return float(value)
    return str(value)


def read_config_file(path) -> dict:
    """Parses ``key = value`` lines (``#`` comments allowed) into config fields."""
    text = Path(path).read_text()
    parser = configparser.ConfigParser(inline_comment_prefixes=("#",))
    parser.optionxform = str
    parser.read_string("[experiment]\n" + text)
    out = {}
    for key, value in parser["experiment"].items():
        if key not in _TYPES:
            raise ConfigError(f"unknown configuration key {key!r}")
        out[key] = _coerce(key, value)
    return out


def build_config(file_values: Optional[dict] = None, **overrides) -> ExperimentConfig:
    """File values first, then non-None overrides on top."""
    values = dict(file_values or {})
    values.update({k: _coerce(k, v) for k, v in overrides.items() if v is not None})
    try:
        return ExperimentConfig(**values)
    except TypeError as err:
        raise ConfigError(str(err)) from err


@dataclass
class GridResult:
    eps_grid: np.ndarray
    L_grid: np.ndarray
    ess: np.ndarray  # (n_eps, n_L, seeds)
    best_eps: float
    best_L: float
    best_result: Optional[ChainResult]
    converged: bool

    @property
    def mean_ess(self) -> np.ndarray:
        return self.ess.mean(axis=-1)


def grid_search(target: TargetDistribution, config: SamplerConfig, eps_grid: Sequence[float],
                L_grid: Sequence[float], seeds: Sequence[int], truth=None) -> GridResult:
    """Full factorial search maximizing the seed-averaged ESS.

    Tuning cost is not part of these ESS values. ``converged`` is False when
    every cell has zero ESS; ``best_*`` then point at the first cell.
    """
    eps_grid = np.asarray(eps_grid, dtype=float)
    L_grid = np.asarray(L_grid, dtype=float)
    if eps_grid.size == 0 or L_grid.size == 0:
        raise ValueError("grid search needs non-empty grids")
    ess = np.zeros((eps_grid.size, L_grid.size, len(seeds)))
    best, best_val, best_idx = None, -1.0, (0, 0)
    for i, e in enumerate(eps_grid):
        for j, l in enumerate(L_grid):
            res = run(target, replace(config, eps=float(e), L=float(l)), RngBatch.from_seeds(seeds),
                      truth=truth)
            ess[i, j] = np.nan_to_num(res.ess(include_tuning=False))
            if ess[i, j].mean() > best_val:
                best, best_val, best_idx = res, ess[i, j].mean(), (i, j)
    converged = best_val > 0
    return GridResult(eps_grid, L_grid, ess, float(eps_grid[best_idx[0]]), float(L_grid[best_idx[1]]),
                      best, bool(converged))


def log_quadratic_peak(x, y) -> float:
    """Location of the maximum of a parabola in ``log x`` through the best
    grid point and its neighbours; the best point itself at a grid edge."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    i = int(np.argmax(y))
    if i == 0 or i == x.size - 1:
        return float(x[i])
    lx = np.log(x[i - 1:i + 2])
    a, b, _ = np.polyfit(lx, y[i - 1:i + 2], 2)
    if a >= 0:
        return float(x[i])
    return float(np.exp(np.clip(-b / (2 * a), lx[0], lx[-1])))


@dataclass
class ExperimentReport:
    config: ExperimentConfig
    result: ChainResult
    seeds: list
    eps: np.ndarray
    L: np.ndarray
    ess: np.ndarray
    tuning_cost: np.ndarray
    tuning: Optional[TuningReport] = None
    grid: Optional[GridResult] = None
    wall_time: float = 0.0
    grad_evals: float = 0.0
    converged: bool = True

    @property
    def ess_mean(self) -> float:
        return float(np.mean(self.ess))

    @property
    def ess_std(self) -> float:
        return float(np.std(self.ess))

    def summary(self) -> dict:
        return {
            "target": self.config.target,
            "algorithm": self.config.algorithm,
            "integrator": self.result_integrator(),
            "eps": [float(v) for v in self.eps],
            "L": [float(v) for v in self.L],
            "ess_mean": self.ess_mean,
            "ess_std": self.ess_std,
            "ess": [float(v) for v in self.ess],
            "tuning_cost": [float(v) for v in self.tuning_cost],
            "seeds": list(self.seeds),
        }

    def result_integrator(self) -> str:
        return self.config.sampler_config(eps=1.0).integrator


def run_experiment(config: ExperimentConfig) -> ExperimentReport:
    """Tunes (if asked), samples one chain per seed and aggregates ESS."""
    t0 = time.perf_counter()
    target = config.make_target()
    seeds = config.seed_list()
    k = len(seeds)
    grid = tuning = None
    tuning_cost = np.zeros(k)
    if config.tune == "auto":
        rng = RngBatch.from_seeds(seeds)
        base = config.sampler_config(eps=1.0)
        tuned = autotune(target, base, rng, target_varE=config.varE_target,
                         refine_steps=config.refine_steps)
        tuning = tuned.report
        sc = config.sampler_config(eps=tuning.eps, L=tuning.L)
        result = run(target, sc, rng, state=tuned.state)
        tuning_cost = tuning.grad_evals.copy()
        result.tuning_cost = tuning_cost
    elif config.tune == "grid":
        grid = grid_search(target, config.sampler_config(eps=1.0), config.eps_grid, config.L_grid, seeds)
        result = grid.best_result
    else:
        result = run(target, config.sampler_config(), RngBatch.from_seeds(seeds))
    ess = np.nan_to_num(result.ess(include_tuning=True))
    eps = np.broadcast_to(np.asarray(result.eps, dtype=float), (k,)).copy()
    L = np.broadcast_to(np.asarray(result.L, dtype=float), (k,)).copy()
    grads = float(np.sum(tuning_cost) + k * result.grad_evals)
    report = ExperimentReport(config=config, result=result, seeds=seeds, eps=eps, L=L, ess=ess,
                              tuning_cost=tuning_cost, tuning=tuning, grid=grid,
                              wall_time=time.perf_counter() - t0, grad_evals=grads,
                              converged=bool(np.any(ess > 0)))
    if config.out:
        emit_report(report, config.out)
    return report


def _fmt(v) -> str:
    return repr(float(v)) if isinstance(v, (float, np.floating)) else str(int(v))


def write_curve_csv(path, result: Optional[ChainResult], chain: int = 0) -> None:
    """Convergence curve of one chain; header only when there is no data."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CSV_COLUMNS)
        if result is None:
            return
        rep = result.report
        for r in range(rep.steps.size):
            w.writerow([_fmt(rep.steps[r]), _fmt(rep.grad_evals[r]), _fmt(rep.b1[r, chain]),
                        _fmt(rep.sigma[r, chain]), _fmt(rep.b2[r, chain]),
                        _fmt(rep.varE_per_d[r, chain]), _fmt(rep.divergences[r, chain])])


def read_curve_csv(path) -> dict:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return {c: np.array([float(r[c]) for r in rows]) for c in CSV_COLUMNS}


def emit_report(report: ExperimentReport, out, formats: Sequence[str] = ("csv", "json")) -> list:
    """Writes ``curve_seed<seed>.csv`` per seed and ``summary.json`` into ``out``."""
    out = Path(out)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as err:
        raise OSError(f"cannot create output directory {out}: {err}") from err
    written = []
    if "csv" in formats:
        for i, s in enumerate(report.seeds):
            path = out / f"curve_seed{s}.csv"
            write_curve_csv(path, report.result, i)
            written.append(path)
    if "json" in formats:
        path = out / "summary.json"
        path.write_text(json.dumps(report.summary(), indent=2) + "\n")
        written.append(path)
    return written


def load_summary(path) -> dict:
    return json.loads(Path(path).read_text())
