"""Variable-mass (q = 0) microcanonical dynamics in rescaled time.

In the natural parameter ``s`` (arc length along the trajectory) the equations
of motion are

    dx/ds = u
    du/ds = -(I - u u^T) ∇L(x) / d
    d log(w)/ds = -u · ∇L(x) / d

with ``u`` the unit momentum direction. The state tracks ``log_r``, the
accumulated log of the relative momentum magnitude, so that the energy
``d * log_r + L(x)`` can be monitored.

All functions accept a single chain (``x`` of shape ``(d,)``) or a batch of
chains (``(k, d)``); the step size may be a scalar or one value per chain.
"""

from __future__ import annotations

from typing import NamedTuple

import numpy as np

from ._kernels import kick_rows
from .targets import TargetDistribution

MN_LAMBDA = 0.19318
"""Minimal Norm splitting coefficient."""


class SamplerState(NamedTuple):
    x: np.ndarray
    u: np.ndarray
    log_r: np.ndarray
    L_x: np.ndarray
    g_x: np.ndarray


def initial_state(target: TargetDistribution, x: np.ndarray, u: np.ndarray) -> SamplerState:
    x = np.array(x, dtype=float)
    L, g = target.value_and_grad(x)
    return SamplerState(x, normalize(np.asarray(u, dtype=float)), np.zeros(np.shape(L)), np.asarray(L), g)


def normalize(v: np.ndarray) -> np.ndarray:
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


def _col(eps):
    eps = np.asarray(eps, dtype=float)
    return eps[..., None] if eps.ndim else eps


def position_update(state: SamplerState, eps) -> SamplerState:
    """Drift ``x <- x + eps * u``. Cached ``L_x`` and ``g_x`` become stale."""
    return state._replace(x=state.x + _col(eps) * state.u)


def _kick(u, log_r, eps, g):
    # Exact rotation in a stable form: numerator and denominator of the
    # textbook map are divided by cosh(delta), so large delta cannot overflow.
    if u.ndim == 1:
        u2, lr = kick_rows(u[None, :], np.atleast_1d(np.asarray(log_r, dtype=float)),
                           np.atleast_1d(np.asarray(eps, dtype=float)), g[None, :])
        return u2[0], lr[0]
    k = u.shape[0]
    if not (isinstance(eps, np.ndarray) and eps.shape == (k,)):
        eps = np.broadcast_to(np.asarray(eps, dtype=float), (k,))
    return kick_rows(u, log_r, eps, g)


def momentum_update(state: SamplerState, eps, grad=None) -> SamplerState:
    """Rotates ``u`` towards ``-grad`` over a rescaled time ``eps``.

    With ``delta = eps |grad| / d`` and ``e = -grad / |grad|``::

        u <- (u + (sinh δ + e·u (cosh δ - 1)) e) / (cosh δ + e·u sinh δ)
        log_r <- log_r + log(cosh δ + e·u sinh δ)

    ``grad`` defaults to the cached gradient of the state.
    """
    g = state.g_x if grad is None else np.asarray(grad, dtype=float)
    if not np.all(np.isfinite(g)):
        raise ValueError("momentum update with a non-finite gradient")
    u, log_r = _kick(state.u, state.log_r, eps, g)
    return state._replace(u=u, log_r=log_r)


def _refresh(state: SamplerState, target: TargetDistribution) -> SamplerState:
    L, g = target.value_and_grad(state.x)
    L = np.asarray(L, dtype=float)
    bad = ~(np.isfinite(L) & np.all(np.isfinite(g), axis=-1))
    if np.any(bad):
        # flag divergent chains with L = nan and freeze their momentum
        L = np.where(bad, np.nan, L)
        g = np.where(bad[..., None], 0.0, g)
    return state._replace(L_x=L, g_x=g)


def leapfrog_step(state: SamplerState, eps, target: TargetDistribution) -> SamplerState:
    """Velocity leapfrog: half kick, drift, half kick. One gradient evaluation.

    A non-finite density at the new position leaves ``L_x = nan`` in the
    returned state; see :func:`diverged`.
    """
    half = 0.5 * np.asarray(eps)
    u, log_r = _kick(state.u, state.log_r, half, state.g_x)
    state = _refresh(SamplerState(state.x + _col(eps) * u, u, log_r, state.L_x, state.g_x), target)
    u, log_r = _kick(state.u, state.log_r, half, state.g_x)
    return state._replace(u=u, log_r=log_r)


def minimal_norm_step(state: SamplerState, eps, target: TargetDistribution,
                      lam: float = MN_LAMBDA) -> SamplerState:
    """Minimal Norm splitting ``V(λε) T(ε/2) V((1-2λ)ε) T(ε/2) V(λε)``.

    Two gradient evaluations per step.
    """
    eps = np.asarray(eps)
    half = _col(0.5 * eps)
    u, log_r = _kick(state.u, state.log_r, lam * eps, state.g_x)
    state = _refresh(SamplerState(state.x + half * u, u, log_r, state.L_x, state.g_x), target)
    u, log_r = _kick(state.u, state.log_r, (1.0 - 2.0 * lam) * eps, state.g_x)
    state = _refresh(SamplerState(state.x + half * u, u, log_r, state.L_x, state.g_x), target)
    u, log_r = _kick(state.u, state.log_r, lam * eps, state.g_x)
    return state._replace(u=u, log_r=log_r)


INTEGRATORS = {
    "leapfrog": (leapfrog_step, 1),
    "minimal_norm": (minimal_norm_step, 2),
}
INTEGRATOR_ALIASES = {"lf": "leapfrog", "mn": "minimal_norm",
                      "leapfrog": "leapfrog", "minimal_norm": "minimal_norm"}


def grads_per_step(integrator: str) -> int:
    return INTEGRATORS[INTEGRATOR_ALIASES[integrator]][1]


def diverged(state: SamplerState) -> np.ndarray:
    return ~np.isfinite(state.L_x)


def energy_deviation(state: SamplerState, L0) -> np.ndarray:
    """``d * log_r + L(x) - L0``: deviation from the initial energy."""
    d = state.x.shape[-1]
    return d * state.log_r + state.L_x - L0


def sample_weight(L_x, L_ref, d: int):
    """Energy-conservation weight ``exp(-(L_x - L_ref) / d)``.

    ``L_ref`` is any reference level (the running minimum keeps the weights
    bounded by one); it cancels once weights are normalized.
    """
    return np.exp(-(np.asarray(L_x) - L_ref) / d)
