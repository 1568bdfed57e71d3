"""Energy-conserving momentum randomization.

Both operations touch only the momentum direction ``u``; position and
``log_r`` are left alone, so the energy is unchanged exactly.
"""

from __future__ import annotations

from typing import Optional, Sequence

import numpy as np

from ._kernels import refresh_rows
from .dynamics import SamplerState


class RngStream:
    """Seeded random stream owned by exactly one chain."""

    def __init__(self, seed):
        if isinstance(seed, np.random.SeedSequence):
            self.seed_seq = seed
        else:
            self.seed_seq = np.random.SeedSequence(seed)
        self.generator = np.random.Generator(np.random.PCG64(self.seed_seq))

    def normal(self, d: int) -> np.ndarray:
        return self.generator.standard_normal(d)

    def unit_vector(self, d: int) -> np.ndarray:
        v = self.generator.standard_normal(d)
        return v / np.linalg.norm(v)

    def spawn(self, n: int) -> list["RngStream"]:
        return [RngStream(s) for s in self.seed_seq.spawn(n)]


class RngBatch:
    """One independent :class:`RngStream` per chain of a batch.

    Row ``i`` of every draw comes from stream ``i`` alone, so a chain's random
    sequence does not depend on which other chains share the batch.
    """

    def __init__(self, streams: Sequence[RngStream]):
        self.streams = list(streams)

    @classmethod
    def from_seeds(cls, seeds: Sequence[int]) -> "RngBatch":
        return cls([RngStream(s) for s in seeds])

    def __len__(self):
        return len(self.streams)

    def normal(self, d: int, rows: Optional[np.ndarray] = None) -> np.ndarray:
        streams = self.streams if rows is None else [self.streams[i] for i in rows]
        out = np.empty((len(streams), d))
        for i, s in enumerate(streams):
            s.generator.standard_normal(out=out[i])
        return out

    def unit_vector(self, d: int, rows: Optional[np.ndarray] = None) -> np.ndarray:
        v = self.normal(d, rows)
        return v / np.linalg.norm(v, axis=-1, keepdims=True)


def full_bounce(state: SamplerState, rng, mask: Optional[np.ndarray] = None) -> SamplerState:
    """Replaces ``u`` by an isotropic unit vector (on the masked chains only)."""
    d = state.u.shape[-1]
    if isinstance(rng, RngStream):
        return state._replace(u=rng.unit_vector(d))
    if mask is None:
        return state._replace(u=rng.unit_vector(d))
    rows = np.flatnonzero(mask)
    if rows.size == 0:
        return state
    u = state.u.copy()
    u[rows] = rng.unit_vector(d, rows)
    return state._replace(u=u)


def nu_coefficient(eps, L, d: int):
    """Refreshment strength ``sqrt((exp(2 eps / L) - 1) / d)``; zero for ``L = inf``."""
    return np.sqrt(np.expm1(2.0 * np.asarray(eps, dtype=float) / np.asarray(L, dtype=float)) / d)


def partial_refresh(state: SamplerState, eps, L, rng, nu=None) -> SamplerState:
    """``u <- (u + nu z) / |u + nu z|`` with ``z`` standard normal.

    Correlations decay as ``<u_n . u_0> = exp(-n eps / L)``. A precomputed
    ``nu`` skips the coefficient evaluation.
    """
    d = state.u.shape[-1]
    if nu is None:
        nu = nu_coefficient(eps, L, d)
    if not np.any(nu > 0):
        return state
    z = rng.normal(d)
    if state.u.ndim == 1:
        v, bad = refresh_rows(state.u[None, :], np.atleast_1d(nu), z[None, :])
        if bad[0]:
            return full_bounce(state, rng)
        return state._replace(u=v[0])
    v, bad = refresh_rows(state.u, np.broadcast_to(np.asarray(nu, dtype=float), state.u.shape[:1]), z)
    if np.any(bad):
        # probability-zero draw: fall back to a full bounce
        v[bad] = rng.unit_vector(d, np.flatnonzero(bad))
    return state._replace(u=v)
