"""Streaming moments, bias metrics and effective sample size."""

from __future__ import annotations

import math
from typing import NamedTuple, Sequence

import numpy as np

from ._kernels import accumulate_rows
from .targets import CAUCHY_ENTROPY, CAUCHY_LOGC_VARIANCE

B2_THRESHOLD = 0.1
ESS_SAMPLES = 200
ENTROPY_THRESHOLD = CAUCHY_LOGC_VARIANCE / ESS_SAMPLES
"""``b_L^2`` reached by 200 effective samples of ``-log C``: about 0.0165."""


class MomentAccumulator:
    """Weighted running means of ``y`` and ``y^2`` in Kalman-filter form.

    ``W`` has the batch shape (one entry per chain), ``m1`` and ``m2`` the
    batch shape plus the dimension. Each update is

        W <- W + w
        m <- (W_old / W) m + (w / W) f(y)
    """

    def __init__(self, d: int, batch_shape: tuple = ()):
        self.W = np.zeros(batch_shape)
        self.m1 = np.zeros(batch_shape + (d,))
        self.m2 = np.zeros(batch_shape + (d,))
        self.count = 0

    @property
    def d(self) -> int:
        return self.m1.shape[-1]

    def accumulate(self, y, w=1.0) -> "MomentAccumulator":
        y = np.asarray(y, dtype=float)
        w = np.asarray(w, dtype=float)
        if np.any(w <= 0):
            raise ValueError("sample weights must be positive")
        if self.W.ndim == 1 and y.ndim == 2:
            accumulate_rows(self.W, self.m1, self.m2, y, np.broadcast_to(w, self.W.shape))
            self.count += 1
            return self
        W_new = self.W + w
        keep = (self.W / W_new)[..., None]
        frac = (w / W_new)[..., None]
        self.m1 = keep * self.m1 + frac * y
        self.m2 = keep * self.m2 + frac * (y * y)
        self.W = W_new
        self.count += 1
        return self

    def rescale_weight(self, factor) -> None:
        """Multiplies the total weight, e.g. after the weight reference moves."""
        self.W = self.W * factor

    def merge(self, other: "MomentAccumulator") -> "MomentAccumulator":
        out = MomentAccumulator(self.d, np.broadcast_shapes(self.W.shape, other.W.shape))
        out.W = self.W + other.W
        a = (self.W / out.W)[..., None]
        b = (other.W / out.W)[..., None]
        out.m1 = a * self.m1 + b * other.m1
        out.m2 = a * self.m2 + b * other.m2
        out.count = self.count + other.count
        return out

    def pooled(self) -> "MomentAccumulator":
        """Collapses the batch axis into one accumulator (chains merged)."""
        if self.W.ndim == 0:
            return self
        out = MomentAccumulator(self.d)
        out.W = np.sum(self.W)
        frac = (self.W / out.W)[:, None]
        out.m1 = np.sum(frac * self.m1, axis=0)
        out.m2 = np.sum(frac * self.m2, axis=0)
        out.count = self.count * self.W.shape[0]
        return out

    def row(self, i: int) -> "MomentAccumulator":
        out = MomentAccumulator(self.d)
        out.W, out.m1, out.m2, out.count = self.W[i], self.m1[i].copy(), self.m2[i].copy(), self.count
        return out

    def variance(self) -> np.ndarray:
        return np.maximum(self.m2 - self.m1**2, 0.0)


def accumulate(acc: MomentAccumulator, x, w=1.0) -> MomentAccumulator:
    return acc.accumulate(x, w)


class BiasSummary(NamedTuple):
    b1: np.ndarray
    sigma: np.ndarray
    b2: np.ndarray


def second_moment_bias(acc, truth) -> BiasSummary:
    """Dimension-averaged relative error of the second moments.

    With ``z_i = (E_sampler[y_i^2] - E_truth[y_i^2]) / E_truth[y_i^2]``:
    ``b1 = <z>``, ``sigma^2 = <(z - b1)^2>``, ``b2^2 = <z^2>``.
    Accepts an accumulator or an array of second moments.
    """
    truth = np.asarray(truth, dtype=float)
    if np.any(truth <= 0):
        raise ValueError("truth second moments must be strictly positive")
    m2 = acc.m2 if isinstance(acc, MomentAccumulator) else np.asarray(acc, dtype=float)
    z = (m2 - truth) / truth
    b1 = np.mean(z, axis=-1)
    sigma = np.sqrt(np.mean((z - b1[..., None]) ** 2, axis=-1))
    b2 = np.sqrt(np.mean(z * z, axis=-1))
    return BiasSummary(b1, sigma, b2)


def entropy_bias_cauchy(acc, d: int | None = None) -> np.ndarray:
    """``b_L^2 = <(E_sampler[-log C(x_i)] - log 4π)^2>`` over dimensions.

    ``acc`` must have been fed the per-dimension values ``-log C(x_i)``.
    """
    m1 = acc.m1 if isinstance(acc, MomentAccumulator) else np.asarray(acc, dtype=float)
    if d is not None and m1.shape[-1] != d:
        raise ValueError(f"accumulator has {m1.shape[-1]} dimensions, expected {d}")
    return np.mean((m1 - CAUCHY_ENTROPY) ** 2, axis=-1)


def _autocorrelation(chain: np.ndarray) -> np.ndarray:
    n = chain.shape[0]
    centered = chain - chain.mean(axis=0)
    size = 1 << (2 * n - 1).bit_length()
    f = np.fft.rfft(centered, n=size, axis=0)
    acov = np.fft.irfft(f * np.conj(f), n=size, axis=0)[:n] / n
    with np.errstate(invalid="ignore", divide="ignore"):
        return acov / acov[0]


def autocorr_neff(chain) -> np.ndarray:
    """Per-coordinate effective sample size ``n / (1 + 2 sum_k rho_k)``.

    The autocorrelation sum is truncated with Geyer's initial positive
    sequence: pairs ``rho_{2m} + rho_{2m+1}`` are summed while positive.
    ``chain`` has shape ``(n,)`` or ``(n, d)``.
    """
    chain = np.asarray(chain, dtype=float)
    squeeze = chain.ndim == 1
    if squeeze:
        chain = chain[:, None]
    n = chain.shape[0]
    if n < 50:
        raise ValueError(f"need at least 50 samples for an autocorrelation estimate, got {n}")
    if np.any(np.ptp(chain, axis=0) == 0):
        raise ValueError("constant chain: effective sample size undefined")
    rho = _autocorrelation(chain)
    m = n // 2
    pairs = rho[: 2 * m : 2] + rho[1 : 2 * m : 2]
    positive = pairs > 0
    # index of the first non-positive pair per coordinate
    stop = np.where(positive.all(axis=0), m, np.argmin(positive, axis=0))
    mask = np.arange(m)[:, None] < stop[None, :]
    tau = -1.0 + 2.0 * np.sum(np.where(mask, pairs, 0.0), axis=0)
    neff = n / np.maximum(tau, 1.0 / n)
    return neff[0] if squeeze else neff


def ess_from_curve(curve, threshold: float = B2_THRESHOLD, extra_cost: float = 0.0,
                   n_samples: int = ESS_SAMPLES) -> float:
    """ESS ``= 200 / n`` at the first crossing of ``threshold``.

    ``curve`` is a sequence of ``(grad_evals, b)`` pairs. The crossing is
    interpolated linearly in ``b`` against ``log(grad_evals)``. ``extra_cost``
    (tuning gradient evaluations) is added to ``n``. Returns 0 if the curve
    never reaches the threshold.
    """
    pts = np.asarray(curve, dtype=float).reshape(-1, 2)
    if pts.shape[0] == 0:
        raise ValueError("empty convergence curve")
    n, b = pts[:, 0], pts[:, 1]
    if np.any(np.diff(n) < 0):
        raise ValueError("curve must be ordered by gradient evaluations")
    hits = np.flatnonzero(b <= threshold)
    if hits.size == 0:
        return 0.0
    i = hits[0]
    if i == 0 or b[i] == b[i - 1]:
        n_cross = n[i]
    else:
        t = (b[i - 1] - threshold) / (b[i - 1] - b[i])
        n_cross = math.exp(math.log(n[i - 1]) + t * (math.log(n[i]) - math.log(n[i - 1])))
    return n_samples / (n_cross + extra_cost)


def crossing_point(curve, threshold: float = B2_THRESHOLD) -> float:
    """Gradient evaluations at the interpolated crossing, or ``inf``."""
    ess = ess_from_curve(curve, threshold)
    return math.inf if ess == 0 else ESS_SAMPLES / ess
