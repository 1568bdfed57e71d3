"""Automatic step size and decoherence length selection.

Stage one targets a fixed energy error per dimension: after each short run the
step size is rescaled by ``(c d / Var[E])^{1/4}``, using ``Var[E] ∝ eps^4``.
Stage two sets ``L`` from the typical-set width ``sigma_eff sqrt(d)`` and then
refines it from the autocorrelation length of a preliminary run.

Every chain of a batch is tuned independently (its own step size, length and
cost), in lock step.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

from .dynamics import SamplerState
from .estimators import autocorr_neff
from .samplers import SamplerConfig, _as_batch, _q0_start, _run_q0
from .targets import TargetDistribution

EPS0 = 0.5
ROUNDS = 3
ROUND_STEPS = 300
BURN_FRACTION = 0.1
VARE_TARGET = 0.0005
VARE_TARGET_STRICT = 0.0003
L_FACTOR = 0.4
MAX_RETRIES = 10
MAX_TRACKED_COORDS = 128
REFINE_MIN_STEPS = 100
REFINE_GROWTH = 1.5
REFINE_MAX_STEPS = 20000


@dataclass(frozen=True)
class TuningReport:
    """Tuned hyperparameters, one entry per chain."""

    eps: np.ndarray
    L: np.ndarray
    sigma_eff: np.ndarray
    varE_per_d: np.ndarray
    grad_evals: np.ndarray
    neff: Optional[np.ndarray]
    L_initial: np.ndarray
    refined: np.ndarray


@dataclass
class TuningResult:
    report: TuningReport
    state: SamplerState


def _rows(state: SamplerState, mask: np.ndarray, other: SamplerState) -> SamplerState:
    """Rows of ``state`` where ``mask``; rows of ``other`` elsewhere."""
    col = mask[:, None]
    return SamplerState(
        np.where(col, state.x, other.x),
        np.where(col, state.u, other.u),
        np.where(mask, state.log_r, other.log_r),
        np.where(mask, state.L_x, other.L_x),
        np.where(col, state.g_x, other.g_x),
    )


def step_size_update(eps, varE, d: int, target_varE: float = VARE_TARGET):
    """``eps (target_varE d / Var[E])^{1/4}``."""
    return np.asarray(eps, dtype=float) * (target_varE * d / np.asarray(varE, dtype=float)) ** 0.25


def tune_step_size(target: TargetDistribution, config: SamplerConfig, rng, state=None, *,
                   eps0: float = EPS0, rounds: int = ROUNDS, steps: int = ROUND_STEPS,
                   burn: float = BURN_FRACTION, target_varE: float = VARE_TARGET,
                   max_retries: int = MAX_RETRIES):
    """Energy-fluctuation step size search.

    Returns ``(eps, sigma_eff, varE_per_d, grad_evals, state)``, arrays over
    chains. ``L`` during the search is ``sigma_eff sqrt(d)``, starting at
    ``sigma_eff = 1`` and updated after every round. A round with a
    non-finite or vanishing energy variance, or with a divergence, halves the
    step size of that chain and is repeated, at most ``max_retries`` times.
    """
    if config.algorithm not in ("mchmc", "mclmc"):
        raise ValueError(f"automatic tuning supports mchmc and mclmc, not {config.algorithm!r}")
    rng = _as_batch(rng)
    k, d = len(rng), target.d
    eps = np.full(k, float(eps0))
    sigma_eff = np.ones(k)
    varE_d = np.full(k, np.nan)
    done = np.zeros(k, dtype=int)
    retries = np.zeros(k, dtype=int)
    cost = np.zeros(k)
    gps = config.grads_per_step
    start = int(burn * steps)
    if state is None:
        state = _q0_start(target, config, rng, None, None)
    while np.any(done < rounds):
        active = done < rounds
        cfg = replace(config, eps=eps.copy(), L=sigma_eff * math.sqrt(d), steps=steps)
        res = _run_q0(target, cfg, rng, refresh=config.algorithm == "mclmc", state=state,
                      keep_energy=True, keep_samples=True)
        cost += np.where(active, steps * gps, 0)
        varE = np.var(res.energy_trace[start:], axis=0)
        var_x = np.var(res.samples[start:], axis=0).mean(axis=-1)
        ok = np.isfinite(varE) & (varE > 0) & (res.divergences == 0) & np.isfinite(var_x)
        good = active & ok
        bad = active & ~ok
        if np.any(bad & (retries >= max_retries)):
            raise RuntimeError("step size tuning kept diverging; the target may be unstable")
        eps = np.where(good, step_size_update(eps, varE, d, target_varE), eps)
        eps = np.where(bad, 0.5 * eps, eps)
        sigma_eff = np.where(good, np.sqrt(var_x), sigma_eff)
        varE_d = np.where(good, varE / d, varE_d)
        retries += bad
        done += good
        # failed chains restart the round from where it began
        state = _rows(res.final_state, good | ~active, state)
    return eps, sigma_eff, varE_d, cost, state


def initial_decoherence_length(sigma_eff, d: int):
    """``L = sigma_eff sqrt(d)``."""
    sigma_eff = np.asarray(sigma_eff, dtype=float)
    if np.any(sigma_eff <= 0):
        raise ValueError("sigma_eff must be positive")
    return sigma_eff * math.sqrt(d)


def length_from_neff(eps, neff_over_n):
    """Distance between effective samples ``l = eps / <n_eff / n>``."""
    return np.asarray(eps, dtype=float) / np.asarray(neff_over_n, dtype=float)


def tracked_coordinates(d: int, limit: int = MAX_TRACKED_COORDS) -> np.ndarray:
    """Evenly spaced coordinate subset used for the autocorrelation estimate."""
    if d <= limit:
        return np.arange(d)
    return np.unique(np.linspace(0, d - 1, limit).round().astype(int))


def refine_decoherence_length(target: TargetDistribution, config: SamplerConfig, n: int, rng,
                              state=None, *, factor: float = L_FACTOR, growth: float = REFINE_GROWTH,
                              max_steps: int = REFINE_MAX_STEPS):
    """Autocorrelation refinement of ``L``.

    Runs ``n`` steps with ``config`` (its ``L`` is the initial guess), computes
    ``n_eff`` for each parameter (at most 128 of them, evenly spaced) and sets
    ``L = factor * eps / <n_eff / n>``. While some chain violates
    ``n > 10 l / eps`` (equivalently ``<n_eff> > 10``) the run is extended by
    the factor ``growth``, up to ``max_steps``. Each chain keeps the estimate
    from the first length at which it satisfied the condition; chains that
    never do use the last estimate, and chains without a usable estimate keep
    the initial ``L``. Every chain is charged the full preliminary run.
    Returns ``(L, neff, refined, grad_evals, state)``.
    """
    rng = _as_batch(rng)
    k, d = len(rng), target.d
    eps = np.broadcast_to(np.asarray(config.eps, dtype=float), (k,))
    L = np.broadcast_to(np.asarray(config.L, dtype=float), (k,)).copy()
    idx = tracked_coordinates(d)
    refresh = config.algorithm == "mclmc"
    n = max(int(n), 50)
    chunks, total = [], 0
    neff = np.full((k, idx.size), np.nan)
    frozen = np.zeros(k, dtype=bool)
    usable = np.zeros(k, dtype=bool)
    while True:
        # extend the run to ``n`` steps in total, reusing earlier samples
        res = _run_q0(target, replace(config, steps=n - total), rng, refresh=refresh, state=state,
                      keep_samples=idx)
        chunks.append(res.samples)
        total = n
        state = res.final_state
        samples = np.concatenate(chunks, axis=0)
        for i in np.flatnonzero(~frozen):
            try:
                est = autocorr_neff(samples[:, i, :])
            except ValueError:
                continue
            mean = float(np.mean(est))
            if not (np.isfinite(mean) and mean > 0):
                continue
            neff[i] = est
            usable[i] = True
            L[i] = factor * length_from_neff(eps[i], mean / n)
            frozen[i] = mean > 10
        nxt = int(math.ceil(growth * n))
        if np.all(frozen) or nxt > max_steps:
            break
        n = nxt
    cost = np.full(k, float(n * config.grads_per_step))
    return L, neff, usable, cost, state


def autotune(target: TargetDistribution, config: SamplerConfig, rng, state=None, *,
             refine: bool = True, target_varE: float = VARE_TARGET,
             refine_steps: Optional[int] = None) -> TuningResult:
    """Step size search followed by the decoherence length estimate.

    The preliminary run for the length estimate starts at ``refine_steps``
    steps, by default ``10 L_init / eps`` clipped to ``[100, 2000]``. Heavy
    tailed targets profit from a longer one, since the scale it measures keeps
    growing with the run length.

    The returned state continues where tuning stopped, so sampling needs no
    further burn-in.
    """
    rng = _as_batch(rng)
    d = target.d
    eps, sigma_eff, varE_d, cost, state = tune_step_size(target, config, rng, state,
                                                         target_varE=target_varE)
    L_init = initial_decoherence_length(sigma_eff, d)
    L, neff, refined = L_init.copy(), None, np.zeros(len(rng), dtype=bool)
    if refine:
        if refine_steps is None:
            n = int(np.clip(np.max(10 * L_init / eps), REFINE_MIN_STEPS, 2000))
        else:
            n = int(refine_steps)
        cfg = replace(config, eps=eps, L=L_init)
        L, neff, refined, extra, state = refine_decoherence_length(target, cfg, n, rng, state)
        cost = cost + extra
    report = TuningReport(eps=eps, L=L, sigma_eff=sigma_eff, varE_per_d=varE_d,
                          grad_evals=cost, neff=neff, L_initial=L_init, refined=refined)
    return TuningResult(report, state)
