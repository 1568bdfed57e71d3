"""Sampling loops: MCHMC with bounces, MCLMC, the q = 2 variant and
unadjusted HMC.

Every loop runs a batch of ``k`` independent chains in lock step. Chain ``i``
draws randomness from ``rng.streams[i]`` only, so its trajectory is the same
whether it runs alone or in a batch. Step sizes and decoherence lengths may be
scalars or one value per chain.

All integration points are used as samples. For q = 0 they carry the energy
conservation weight ``exp(-(L - L_ref) / d)``; the other variants use unit
weights.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import NamedTuple, Optional

import numpy as np

from .decoherence import RngBatch, RngStream, full_bounce, nu_coefficient, partial_refresh
from ._kernels import ecw_weights, welford_rows
from .dynamics import (
    INTEGRATOR_ALIASES,
    INTEGRATORS,
    SamplerState,
    _col,
    diverged,
    initial_state,
)
from .estimators import (
    B2_THRESHOLD,
    ENTROPY_THRESHOLD,
    MomentAccumulator,
    entropy_bias_cauchy,
    ess_from_curve,
    second_moment_bias,
)
from .targets import TargetDistribution

ALGORITHMS = ("mchmc", "mclmc", "q2", "uhmc")
DIVERGENCE_ALARM = 0.1


@dataclass
class SamplerConfig:
    """Hyperparameters of one sampling run.

    ``L`` is the decoherence length. MCHMC, q = 2 and unadjusted HMC bounce
    (resample) every ``K = round(L / eps)`` steps; ``L = inf`` disables
    decoherence.
    """

    algorithm: str = "mclmc"
    integrator: str = "leapfrog"
    eps: object = 1.0
    L: object = math.inf
    steps: int = 1000
    seed: int = 0
    checkpoint_start: float = 100.0
    checkpoint_ratio: float = 1.1

    def __post_init__(self):
        if self.algorithm not in ALGORITHMS:
            raise ValueError(f"unknown algorithm {self.algorithm!r}; choose from {ALGORITHMS}")
        if self.integrator not in INTEGRATOR_ALIASES:
            raise ValueError(f"unknown integrator {self.integrator!r}")
        self.integrator = INTEGRATOR_ALIASES[self.integrator]
        if np.any(np.asarray(self.eps) <= 0):
            raise ValueError("step size must be positive")
        if np.any(np.asarray(self.L) <= 0):
            raise ValueError("decoherence length must be positive")
        if self.steps < 1:
            raise ValueError("need at least one step")

    @property
    def grads_per_step(self) -> int:
        if self.algorithm in ("q2", "uhmc"):
            return 1
        return INTEGRATORS[self.integrator][1]

    def bounce_interval(self):
        """Steps between bounces, ``max(1, round(L / eps))`` (inf when L is)."""
        ratio = np.asarray(self.L, dtype=float) / np.asarray(self.eps, dtype=float)
        return np.where(np.isfinite(ratio), np.maximum(1.0, np.round(ratio)), np.inf)


def checkpoint_steps(steps: int, grads_per_step: int, start: float = 100.0,
                     ratio: float = 1.1) -> np.ndarray:
    """Step indices at geometrically spaced gradient-evaluation counts."""
    total = steps * grads_per_step
    grads = [start]
    while grads[-1] * ratio < total:
        grads.append(grads[-1] * ratio)
    s = np.unique(np.clip(np.ceil(np.asarray(grads) / grads_per_step).astype(int), 1, steps))
    if s[-1] != steps:
        s = np.append(s, steps)
    return s


@dataclass
class ConvergenceReport:
    """Bias and energy statistics at each checkpoint; columns are chains."""

    steps: np.ndarray
    grad_evals: np.ndarray
    b1: np.ndarray
    sigma: np.ndarray
    b2: np.ndarray
    varE_per_d: np.ndarray
    divergences: np.ndarray
    metric: str = "b2"
    threshold: float = B2_THRESHOLD

    def curve(self, chain: int = 0) -> np.ndarray:
        return np.column_stack([self.grad_evals, self.b2[:, chain]])

    def ess(self, chain: int = 0, extra_cost: float = 0.0) -> float:
        if not np.all(np.isfinite(self.b2[:, chain])):
            return float("nan")
        return ess_from_curve(self.curve(chain), self.threshold, extra_cost)


@dataclass
class ChainResult:
    accumulator: MomentAccumulator
    report: ConvergenceReport
    grad_evals: int
    divergences: np.ndarray
    energy_mean: np.ndarray
    energy_var: np.ndarray
    final_state: object
    eps: object
    L: object
    tuning_cost: np.ndarray = field(default_factory=lambda: np.zeros(0))
    energy_trace: Optional[np.ndarray] = None
    samples: Optional[np.ndarray] = None
    flagged: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=bool))

    @property
    def n_chains(self) -> int:
        return self.report.b2.shape[1]

    def ess(self, include_tuning: bool = True) -> np.ndarray:
        cost = self.tuning_cost if include_tuning and self.tuning_cost.size else np.zeros(self.n_chains)
        return np.array([self.report.ess(i, cost[i]) for i in range(self.n_chains)])


def _as_batch(rng) -> RngBatch:
    if isinstance(rng, RngBatch):
        return rng
    if isinstance(rng, RngStream):
        return RngBatch([rng])
    if isinstance(rng, (list, tuple)):
        return RngBatch([r if isinstance(r, RngStream) else RngStream(r) for r in rng])
    return RngBatch([RngStream(rng)])


def _per_chain(value, k: int) -> np.ndarray:
    return np.broadcast_to(np.asarray(value, dtype=float), (k,)).copy()


def initial_positions(target: TargetDistribution, rng: RngBatch) -> np.ndarray:
    """Prior draw for each chain (standard normal unless the target overrides)."""
    return np.stack([target.initial_position(s.generator) for s in rng.streams])


class _Monitor:
    """Accumulates samples, running energy variance and checkpoint rows."""

    def __init__(self, target, k, config, truth, ckpts, keep_energy, keep_samples, weighted,
                 sample_space="x"):
        self.target = target
        self.d = target.d
        self.k = k
        self.weighted = weighted
        self.gps = config.grads_per_step
        self.truth = target.truth_second_moments if truth is None else np.asarray(truth, dtype=float)
        self.metric = target.metric
        self.acc = MomentAccumulator(self.d, (k,))
        self.L_ref = None
        self.e_n = 0
        self.e_mean = np.zeros(k)
        self.e_m2 = np.zeros(k)
        self.ckpts = ckpts
        self.next_ck = 0
        self.rows = []
        self.divergences = np.zeros(k, dtype=int)
        self.energy_trace = np.empty((config.steps, k)) if keep_energy else None
        # keep_samples may be a bool or an index array selecting coordinates
        self.sample_idx = None if isinstance(keep_samples, bool) else np.asarray(keep_samples, dtype=int)
        width = self.d if self.sample_idx is None else self.sample_idx.size
        keep = keep_samples if isinstance(keep_samples, bool) else True
        self.samples = np.empty((config.steps, k, width)) if keep else None
        if sample_space not in ("x", "eval"):
            raise ValueError(f"unknown sample space {sample_space!r}")
        self.sample_space = sample_space

    def observe(self, n, x, L, dE):
        # n is the 1-based step count
        if self.weighted:
            if self.L_ref is None:
                self.L_ref = L.copy()
            w = ecw_weights(L, self.L_ref, self.acc.W, float(self.d))
        else:
            w = np.ones(self.k)
        y = self.target.to_eval(x)
        self.acc.accumulate(y, w)

        self.e_n += 1
        welford_rows(self.e_n, self.e_mean, self.e_m2, dE)
        if self.energy_trace is not None:
            self.energy_trace[n - 1] = dE
        if self.samples is not None:
            v = x if self.sample_space == "x" else y
            self.samples[n - 1] = v if self.sample_idx is None else v[:, self.sample_idx]

        if self.next_ck < len(self.ckpts) and n == self.ckpts[self.next_ck]:
            self.next_ck += 1
            self.rows.append(self._checkpoint(n))

    def _checkpoint(self, n):
        nan = np.full(self.k, np.nan)
        if self.metric == "entropy":
            b1, sigma, b2 = nan, nan, entropy_bias_cauchy(self.acc)
        elif self.truth is not None:
            b1, sigma, b2 = second_moment_bias(self.acc, self.truth)
        else:
            b1, sigma, b2 = nan, nan, nan
        return (n, n * self.gps, b1, sigma, b2, self.energy_var() / self.d, self.divergences.copy())

    def energy_var(self):
        return self.e_m2 / max(self.e_n, 1)

    def report(self) -> ConvergenceReport:
        cols = list(zip(*self.rows)) if self.rows else [[]] * 7
        stack = lambda c: np.array(c).reshape(len(self.rows), self.k)
        return ConvergenceReport(
            steps=np.array(cols[0], dtype=int),
            grad_evals=np.array(cols[1], dtype=float),
            b1=stack(cols[2]),
            sigma=stack(cols[3]),
            b2=stack(cols[4]),
            varE_per_d=stack(cols[5]),
            divergences=stack(cols[6]).astype(int),
            metric=self.metric,
            threshold=ENTROPY_THRESHOLD if self.metric == "entropy" else B2_THRESHOLD,
        )


def _revert(old: SamplerState, new: SamplerState, bad: np.ndarray) -> SamplerState:
    col = bad[:, None]
    return SamplerState(
        np.where(col, old.x, new.x),
        np.where(col, old.u, new.u),
        np.where(bad, old.log_r, new.log_r),
        np.where(bad, old.L_x, new.L_x),
        np.where(col, old.g_x, new.g_x),
    )


def _q0_start(target, config, rng, x0, state):
    k = len(rng)
    if state is not None:
        return state
    x = initial_positions(target, rng) if x0 is None else np.broadcast_to(
        np.asarray(x0, dtype=float), (k, target.d)).copy()
    return initial_state(target, x, rng.unit_vector(target.d))


def _run_q0(target, config, rng, refresh, x0=None, state=None, truth=None,
            keep_energy=False, keep_samples=False, sample_space="x") -> ChainResult:
    rng = _as_batch(rng)
    k = len(rng)
    state = _q0_start(target, config, rng, x0, state)
    eps = _per_chain(config.eps, k)
    L = _per_chain(config.L, k)
    step, gps = INTEGRATORS[config.integrator]
    K = np.broadcast_to(np.inf if refresh else config.bounce_interval(), (k,))
    bounces = np.any(np.isfinite(K))
    do_refresh = refresh and np.any(np.isfinite(L))
    d = target.d
    nu = nu_coefficient(eps, L, d)

    L0 = state.L_x.copy()
    mon = _Monitor(target, k, config, truth,
                   checkpoint_steps(config.steps, gps, config.checkpoint_start, config.checkpoint_ratio),
                   keep_energy, keep_samples, weighted=True, sample_space=sample_space)
    log_r0 = state.log_r.copy()
    for n in range(config.steps):
        if bounces and n > 0:
            due = (n % K) == 0
            if np.any(due):
                state = full_bounce(state, rng, due)
        new = step(state, eps, target)
        bad = diverged(new)
        if np.any(bad):
            mon.divergences += bad
            new = full_bounce(_revert(state, new, bad), rng, bad)
        if do_refresh:
            new = partial_refresh(new, eps, L, rng, nu=nu)
        state = new
        mon.observe(n + 1, state.x, state.L_x, d * (state.log_r - log_r0) + state.L_x - L0)

    flagged = mon.divergences > DIVERGENCE_ALARM * config.steps
    return ChainResult(
        accumulator=mon.acc,
        report=mon.report(),
        grad_evals=config.steps * gps,
        divergences=mon.divergences,
        energy_mean=mon.e_mean.copy(),
        energy_var=mon.energy_var(),
        final_state=state,
        eps=eps,
        L=L,
        energy_trace=mon.energy_trace,
        samples=mon.samples,
        flagged=flagged,
    )


def run_mchmc(target: TargetDistribution, config: SamplerConfig, rng, **kw) -> ChainResult:
    """MCHMC: integrate, and every ``K`` steps bounce ``u`` isotropically.

    Keyword arguments: ``x0`` (initial positions), ``state`` (continue from a
    previous state), ``truth`` (override reference second moments),
    ``keep_energy`` / ``keep_samples`` (store full traces; ``keep_samples`` may
    be an index array of coordinates), ``sample_space`` ("x" or "eval": raw
    positions or evaluation coordinates).
    """
    if config.algorithm != "mchmc":
        raise ValueError("run_mchmc needs algorithm='mchmc'")
    return _run_q0(target, config, rng, refresh=False, **kw)


def run_mclmc(target: TargetDistribution, config: SamplerConfig, rng, **kw) -> ChainResult:
    """MCLMC: every step is an integrator step followed by a partial refresh.

    Keyword arguments as for :func:`run_mchmc`.
    """
    if config.algorithm != "mclmc":
        raise ValueError("run_mclmc needs algorithm='mclmc'")
    return _run_q0(target, config, rng, refresh=True, **kw)


# ---------------------------------------------------------------------------
# q = 2: standard kinetic energy with a target-tuned potential


class MomentumState(NamedTuple):
    """Position, full momentum vector and cached target evaluation."""

    x: np.ndarray
    p: np.ndarray
    L_x: np.ndarray
    g_x: np.ndarray


def _q2_force(L, g, L_shift, d):
    scale = np.exp(-2.0 * (L - L_shift) / (d - 2)) / (d - 2)
    return -g * scale[..., None]


def q2_energy(state: MomentumState, L_shift, d: int):
    """``|p|^2 / 2 - exp(-2 (L - L_shift) / (d - 2)) / 2``."""
    return 0.5 * np.sum(state.p**2, axis=-1) - 0.5 * np.exp(-2.0 * (state.L_x - L_shift) / (d - 2))


def q2_step(state: MomentumState, eps, target: TargetDistribution, L_shift=0.0) -> MomentumState:
    """Leapfrog on ``dx/dt = p``, ``dp/dt = -∇L exp(-2L/(d-2)) / (d-2)``.

    ``L_shift`` offsets ``L`` inside the potential; at zero energy this only
    rescales time and keeps the exponential in range.
    """
    d = target.d
    if d <= 2:
        raise ValueError("the q = 2 Hamiltonian needs d > 2")
    e = _col(eps)
    p = state.p + 0.5 * e * _q2_force(state.L_x, state.g_x, L_shift, d)
    x = state.x + e * p
    L, g = target.value_and_grad(x)
    L = np.asarray(L, dtype=float)
    bad = ~(np.isfinite(L) & np.all(np.isfinite(g), axis=-1))
    if np.any(bad):
        L = np.where(bad, np.nan, L)
        g = np.where(bad[..., None], 0.0, g)
    p = p + 0.5 * e * _q2_force(L, g, L_shift, d)
    return MomentumState(x, p, L, g)


def _revert_m(old, new, bad):
    col = bad[:, None]
    return MomentumState(np.where(col, old.x, new.x), np.where(col, old.p, new.p),
                         np.where(bad, old.L_x, new.L_x), np.where(col, old.g_x, new.g_x))


def _momentum_loop(target, config, rng, kind, x0=None, truth=None, keep_energy=False,
                   keep_samples=False) -> ChainResult:
    rng = _as_batch(rng)
    k = len(rng)
    d = target.d
    if kind == "q2" and d <= 2:
        raise ValueError("the q = 2 Hamiltonian needs d > 2")
    x = initial_positions(target, rng) if x0 is None else np.broadcast_to(
        np.asarray(x0, dtype=float), (k, d)).copy()
    L, g = target.value_and_grad(x)
    L = np.asarray(L, dtype=float)
    eps = _per_chain(config.eps, k)
    K = np.broadcast_to(config.bounce_interval(), (k,))
    mon = _Monitor(target, k, config, truth,
                   checkpoint_steps(config.steps, 1, config.checkpoint_start, config.checkpoint_ratio),
                   keep_energy, keep_samples, weighted=False)

    if kind == "q2":
        L_shift = L.copy()
        # zero total energy: |p| = exp(-(L - L_shift) / (d - 2)) = 1
        p = rng.unit_vector(d) * np.exp(-(L - L_shift) / (d - 2))[:, None]
        state = MomentumState(x, p, L, g)
        energy = lambda s: q2_energy(s, L_shift, d)
        step = lambda s: q2_step(s, eps, target, L_shift)
    else:
        state = MomentumState(x, rng.normal(d), L, g)
        energy = lambda s: 0.5 * np.sum(s.p**2, axis=-1) + s.L_x
        step = lambda s: _hmc_leapfrog(s, eps, target)

    def resample(s, rows_mask):
        rows = np.flatnonzero(rows_mask)
        if rows.size == 0:
            return s
        p = s.p.copy()
        if kind == "q2":
            # keep |p|, draw a new direction
            p[rows] = rng.unit_vector(d, rows) * np.linalg.norm(p[rows], axis=-1, keepdims=True)
        else:
            p[rows] = rng.normal(d, rows)
        return s._replace(p=p)

    E_ref = energy(state)
    for n in range(config.steps):
        if n > 0:
            due = (n % K) == 0
            if np.any(due):
                state = resample(state, due)
                if kind == "uhmc":
                    E_ref = np.where(due, energy(state), E_ref)
        new = step(state)
        bad = ~np.isfinite(new.L_x)
        if np.any(bad):
            mon.divergences += bad
            new = resample(_revert_m(state, new, bad), bad)
            if kind == "uhmc":
                E_ref = np.where(bad, energy(new), E_ref)
        state = new
        mon.observe(n + 1, state.x, state.L_x, energy(state) - E_ref)

    return ChainResult(
        accumulator=mon.acc,
        report=mon.report(),
        grad_evals=config.steps,
        divergences=mon.divergences,
        energy_mean=mon.e_mean.copy(),
        energy_var=mon.energy_var(),
        final_state=state,
        eps=eps,
        L=_per_chain(config.L, k),
        energy_trace=mon.energy_trace,
        samples=mon.samples,
        flagged=mon.divergences > DIVERGENCE_ALARM * config.steps,
    )


def run_q2(target: TargetDistribution, config: SamplerConfig, rng, **kw) -> ChainResult:
    """q = 2 Hamiltonian with direction-only bounces every ``K`` steps.

    Samples are unweighted; the initial momentum magnitude sets the total
    energy to zero.
    """
    if config.algorithm != "q2":
        raise ValueError("run_q2 needs algorithm='q2'")
    return _momentum_loop(target, config, rng, "q2", **kw)


def _hmc_leapfrog(state: MomentumState, eps, target) -> MomentumState:
    e = _col(eps)
    p = state.p - 0.5 * e * state.g_x
    x = state.x + e * p
    L, g = target.value_and_grad(x)
    L = np.asarray(L, dtype=float)
    bad = ~(np.isfinite(L) & np.all(np.isfinite(g), axis=-1))
    if np.any(bad):
        L = np.where(bad, np.nan, L)
        g = np.where(bad[..., None], 0.0, g)
    return MomentumState(x, p - 0.5 * e * g, L, g)


def run_uhmc(target: TargetDistribution, config: SamplerConfig, rng, **kw) -> ChainResult:
    """Unadjusted HMC: leapfrog on ``|p|^2/2 + L``, Gaussian momentum
    resampling every ``K`` steps, no accept/reject."""
    if config.algorithm != "uhmc":
        raise ValueError("run_uhmc needs algorithm='uhmc'")
    return _momentum_loop(target, config, rng, "uhmc", **kw)


RUNNERS = {"mchmc": run_mchmc, "mclmc": run_mclmc, "q2": run_q2, "uhmc": run_uhmc}


def run(target: TargetDistribution, config: SamplerConfig, rng, **kw) -> ChainResult:
    return RUNNERS[config.algorithm](target, config, rng, **kw)
