"""Compiled row-wise kernels for the per-step hot path.

Inputs are 2-d ``(chains, d)`` float64 arrays; callers reshape single chains.
"""

import math

import numpy as np
from numba import njit


@njit(cache=True)
def kick_rows(u, log_r, eps, g):
    k, d = u.shape
    u_new = np.empty_like(u)
    lr = np.empty_like(log_r)
    for i in range(k):
        # scaled norm so that huge gradients do not overflow
        gmax = 0.0
        for j in range(d):
            gmax = max(gmax, abs(g[i, j]))
        if gmax == 0.0:
            for j in range(d):
                u_new[i, j] = u[i, j]
            lr[i] = log_r[i]
            continue
        gg = 0.0
        for j in range(d):
            gg += (g[i, j] / gmax) ** 2
        g_norm = gmax * math.sqrt(gg)
        delta = eps[i] * g_norm / d
        eu = 0.0
        for j in range(d):
            eu -= (g[i, j] / g_norm) * u[i, j]
        eu = min(1.0, max(-1.0, eu))
        zeta = math.exp(-2.0 * delta)
        ed = math.exp(-delta)
        a = 0.5 * (1.0 + eu)
        b = 0.5 * (1.0 - eu)
        den = a + b * zeta
        coef = 0.5 * (1.0 - zeta) + eu * (0.5 * (1.0 + zeta) - ed)
        nn = 0.0
        for j in range(d):
            v = ed * u[i, j] - coef * (g[i, j] / g_norm)
            u_new[i, j] = v
            nn += v * v
        if nn > 0.0:
            inv = 1.0 / math.sqrt(nn)
            for j in range(d):
                u_new[i, j] *= inv
        else:
            # u = -e exactly: an (unstable) fixed point of the rotation
            for j in range(d):
                u_new[i, j] = u[i, j]
        if den > 0.0:
            lr[i] = log_r[i] + delta + math.log(den)
        else:
            lr[i] = log_r[i] - delta + math.log(b)
    return u_new, lr


@njit(cache=True)
def refresh_rows(u, nu, z):
    """Returns normalized ``u + nu z`` and a mask of degenerate rows."""
    k, d = u.shape
    out = np.empty_like(u)
    bad = np.zeros(k, dtype=np.bool_)
    for i in range(k):
        nn = 0.0
        for j in range(d):
            v = u[i, j] + nu[i] * z[i, j]
            out[i, j] = v
            nn += v * v
        if nn == 0.0:
            bad[i] = True
            continue
        inv = 1.0 / math.sqrt(nn)
        for j in range(d):
            out[i, j] *= inv
    return out, bad


@njit(cache=True)
def accumulate_rows(W, m1, m2, y, w):
    """In-place weighted running means of ``y`` and ``y^2``."""
    k, d = y.shape
    for i in range(k):
        W_new = W[i] + w[i]
        a = W[i] / W_new
        b = w[i] / W_new
        for j in range(d):
            yy = y[i, j]
            m1[i, j] = a * m1[i, j] + b * yy
            m2[i, j] = a * m2[i, j] + b * yy * yy
        W[i] = W_new


@njit(cache=True)
def ecw_weights(L, L_ref, W, d):
    """Energy-conservation weights against a running minimum reference.

    Lowers ``L_ref`` in place when a new minimum appears and rescales the
    accumulated weight ``W`` so earlier samples stay consistent.
    """
    k = L.shape[0]
    w = np.empty(k)
    for i in range(k):
        if L[i] < L_ref[i]:
            W[i] *= math.exp((L[i] - L_ref[i]) / d)
            L_ref[i] = L[i]
        w[i] = math.exp(-(L[i] - L_ref[i]) / d)
    return w


@njit(cache=True)
def welford_rows(n, mean, m2, x):
    for i in range(x.shape[0]):
        delta = x[i] - mean[i]
        mean[i] += delta / n
        m2[i] += delta * (x[i] - mean[i])
