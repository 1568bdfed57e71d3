"""Benchmark target distributions.

Every target is described by its negative log-density ``L(x) = -log p(x)``
(up to a constant) and the analytic gradient. Both accept a single point of
shape ``(d,)`` or a batch of shape ``(..., d)``.

Bias metrics are computed in *evaluation coordinates*: the target may carry
an ``eval_transform`` that maps raw samples into a frame where the ground
truth second moments are known (eigenbasis of a rotated Gaussian, Gaussianized
funnel coordinates, ...).
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.special import digamma, gammaln

Array = np.ndarray

CAUCHY_ENTROPY = math.log(4.0 * math.pi)
"""Entropy of the standard Cauchy distribution, ``E[-log C(x)]``."""

CAUCHY_LOGC_VARIANCE = math.pi**2 / 3.0
"""Variance of ``-log C(x)`` under the standard Cauchy distribution."""


@dataclass(frozen=True)
class TargetDistribution:
    """A differentiable target density ``p(x) ∝ exp(-L(x))``.

    Attributes:
        d: Dimension.
        value_and_grad: Returns ``(L(x), ∇L(x))``. One call is one gradient
            evaluation for cost accounting.
        name: Identifier used by the CLI and in reports.
        truth_second_moments: ``E[y_i^2]`` in evaluation coordinates, or None
            when unknown or infinite.
        eval_transform: Map from raw samples to evaluation coordinates.
        metric: ``"b2"`` (relative second-moment error) or ``"entropy"``
            (per-dimension entropy bias, used for heavy tails).
        init: Draws an initial position from a ``numpy.random.Generator``.
            Defaults to a standard normal draw.
        exact_sampler: ``(n, rng) -> (n, d)`` draws from the generative
            process, where one exists.
        params: Construction parameters, for reports.
    """

    d: int
    value_and_grad: Callable[[Array], tuple[Array, Array]]
    name: str
    truth_second_moments: Optional[Array] = None
    eval_transform: Optional[Callable[[Array], Array]] = None
    metric: str = "b2"
    init: Optional[Callable[[np.random.Generator], Array]] = None
    exact_sampler: Optional[Callable[[int, np.random.Generator], Array]] = None
    params: dict = field(default_factory=dict)

    def neg_log_density(self, x: Array) -> Array:
        return self.value_and_grad(x)[0]

    def grad(self, x: Array) -> Array:
        return self.value_and_grad(x)[1]

    def to_eval(self, x: Array) -> Array:
        if self.eval_transform is None:
            return x
        return self.eval_transform(x)

    def initial_position(self, rng: np.random.Generator) -> Array:
        if self.init is not None:
            return np.asarray(self.init(rng), dtype=float)
        return rng.standard_normal(self.d)

    def exact_samples(self, n: int, rng: np.random.Generator) -> Array:
        """Draws ``n`` exact samples from the generative process, if known."""
        if self.exact_sampler is None:
            raise NotImplementedError(f"no exact sampler for target {self.name!r}")
        return self.exact_sampler(n, rng)


def make_standard_gaussian(d: int) -> TargetDistribution:
    if d < 1:
        raise ValueError(f"d must be >= 1, got {d}")

    def value_and_grad(x):
        return 0.5 * np.sum(x * x, axis=-1), x.copy()

    return TargetDistribution(
        d=d,
        value_and_grad=value_and_grad,
        name="gaussian",
        truth_second_moments=np.ones(d),
        params={"d": d},
        exact_sampler=lambda n, rng: rng.standard_normal((n, d)),
    )


def random_rotation(d: int, seed: int) -> Array:
    """Orthonormalizes a seeded matrix of independent unit Gaussians."""
    rng = np.random.default_rng(seed)
    q, r = np.linalg.qr(rng.standard_normal((d, d)))
    # sign fix makes the rotation Haar distributed
    return q * np.sign(np.diag(r))


def ill_conditioned_eigenvalues(d: int, kappa: float, spacing: str = "log") -> Array:
    """Covariance eigenvalues with condition number ``kappa``.

    ``"log"`` spacing covers ``[1/sqrt(kappa), sqrt(kappa)]`` including both
    endpoints; ``"linear"`` covers ``[1/kappa, 1]``.
    """
    if kappa < 1:
        raise ValueError(f"condition number must be >= 1, got {kappa}")
    if spacing == "log":
        return np.logspace(-0.5 * np.log10(kappa), 0.5 * np.log10(kappa), d)
    if spacing == "linear":
        return np.linspace(1.0 / kappa, 1.0, d)
    raise ValueError(f"unknown eigenvalue spacing {spacing!r}")


def make_ill_conditioned_gaussian(
    d: int, kappa: float, seed: int = 0, spacing: str = "log"
) -> TargetDistribution:
    """Randomly rotated Gaussian with condition number ``kappa``.

    Evaluation coordinates are the eigenbasis of the covariance, in which the
    truth second moments are the eigenvalues.
    """
    if d < 1:
        raise ValueError(f"d must be >= 1, got {d}")
    lam = ill_conditioned_eigenvalues(d, kappa, spacing)
    rot = random_rotation(d, seed)
    inv_lam = 1.0 / lam

    def to_eigen(x):
        return x @ rot

    def value_and_grad(x):
        y = x @ rot
        return 0.5 * np.sum(y * y * inv_lam, axis=-1), (y * inv_lam) @ rot.T

    def exact(n, rng):
        return (rng.standard_normal((n, d)) * np.sqrt(lam)) @ rot.T

    return TargetDistribution(
        d=d,
        value_and_grad=value_and_grad,
        name="icg",
        truth_second_moments=lam.copy(),
        eval_transform=to_eigen,
        params={"d": d, "kappa": kappa, "seed": seed, "spacing": spacing,
                "rotation": rot, "eigenvalues": lam},
        exact_sampler=exact,
    )


def covariance_matrix(target: TargetDistribution) -> Array:
    """Reconstructs ``R diag(lambda) R^T`` for an ill-conditioned Gaussian."""
    rot = target.params["rotation"]
    return (rot * target.params["eigenvalues"]) @ rot.T


BIMODAL_WEIGHTS = (0.8, 0.2)
BIMODAL_SEPARATION = 8.0


def make_bimodal_mixture(d: int, separation: float = BIMODAL_SEPARATION) -> TargetDistribution:
    """80%/20% mixture of two unit Gaussians at ``0`` and ``separation * e_1``."""
    if d < 1:
        raise ValueError(f"d must be >= 1, got {d}")
    w0, w1 = BIMODAL_WEIGHTS
    mu = np.zeros(d)
    mu[0] = separation
    log_w = np.log([w0, w1])

    def value_and_grad(x):
        a0 = log_w[0] - 0.5 * np.sum(x * x, axis=-1)
        diff = x - mu
        a1 = log_w[1] - 0.5 * np.sum(diff * diff, axis=-1)
        lse = np.logaddexp(a0, a1)
        resp1 = np.exp(a1 - lse)
        return -lse, x - resp1[..., None] * mu

    def exact(n, rng):
        x = rng.standard_normal((n, d))
        x[rng.random(n) < w1] += mu
        return x

    truth = np.ones(d)
    truth[0] = w0 * 1.0 + w1 * (1.0 + separation**2)
    return TargetDistribution(
        d=d,
        value_and_grad=value_and_grad,
        name="bimodal",
        truth_second_moments=truth,
        params={"d": d, "separation": separation, "mean_x1": w1 * separation},
        exact_sampler=exact,
    )


def make_rosenbrock(d: int = 36, Q: float = 0.1) -> TargetDistribution:
    """Product of ``d/2`` independent 2-d bananas.

    Layout is ``(x_1..x_{d/2}, y_1..y_{d/2})`` with ``x_i ~ N(1, 1)`` and
    ``y_i | x_i ~ N(x_i^2, Q)`` (``Q`` is the variance).
    """
    if d < 2 or d % 2:
        raise ValueError(f"Rosenbrock dimension must be even and positive, got {d}")
    if Q <= 0:
        raise ValueError(f"Q must be positive, got {Q}")
    half = d // 2

    def value_and_grad(x):
        a = x[..., :half]
        b = x[..., half:]
        r = b - a * a
        value = 0.5 * np.sum((a - 1.0) ** 2, axis=-1) + 0.5 * np.sum(r * r, axis=-1) / Q
        g = np.concatenate([(a - 1.0) - 2.0 * a * r / Q, r / Q], axis=-1)
        return value, g

    def exact(n, rng):
        a = 1.0 + rng.standard_normal((n, half))
        b = a * a + math.sqrt(Q) * rng.standard_normal((n, half))
        return np.concatenate([a, b], axis=1)

    # E[x^4] = 10 for x ~ N(1, 1), so E[y^2] = 10 + Q
    truth = np.concatenate([np.full(half, 2.0), np.full(half, 10.0 + Q)])
    return TargetDistribution(
        d=d,
        value_and_grad=value_and_grad,
        name="rosenbrock",
        truth_second_moments=truth,
        params={"d": d, "Q": Q},
        exact_sampler=exact,
    )


FUNNEL_THETA_SCALE = 3.0


def make_funnel(d: int = 20) -> TargetDistribution:
    """Neal's funnel: ``theta ~ N(0, 3)``, ``z_i ~ N(0, exp(theta/2))``.

    Coordinates are ``(theta, z_1..z_{d-1})``. Evaluation coordinates are the
    Gaussianized ``(theta/3, z_i exp(-theta/2))``, each standard normal.
    """
    if d < 2:
        raise ValueError(f"funnel needs d >= 2, got {d}")
    s2 = FUNNEL_THETA_SCALE**2
    m = d - 1

    def value_and_grad(x):
        theta = x[..., 0]
        z = x[..., 1:]
        zz = np.sum(z * z, axis=-1)
        e = np.exp(-theta)
        value = 0.5 * theta**2 / s2 + 0.5 * m * theta + 0.5 * zz * e
        g = np.empty_like(x)
        g[..., 0] = theta / s2 + 0.5 * m - 0.5 * zz * e
        g[..., 1:] = z * e[..., None]
        return value, g

    def gaussianize(x):
        y = np.empty_like(x)
        theta = x[..., 0]
        y[..., 0] = theta / FUNNEL_THETA_SCALE
        y[..., 1:] = x[..., 1:] * np.exp(-0.5 * theta)[..., None]
        return y

    def exact(n, rng):
        theta = FUNNEL_THETA_SCALE * rng.standard_normal(n)
        z = rng.standard_normal((n, m)) * np.exp(0.5 * theta)[:, None]
        return np.concatenate([theta[:, None], z], axis=1)

    return TargetDistribution(
        d=d,
        value_and_grad=value_and_grad,
        name="funnel",
        truth_second_moments=np.ones(d),
        eval_transform=gaussianize,
        params={"d": d},
        exact_sampler=exact,
    )


def funnel_raw_second_moments(d: int) -> Array:
    """Second moments in the raw funnel coordinates: 9 and ``E[exp(theta)] = e^{4.5}``."""
    out = np.full(d, math.exp(0.5 * FUNNEL_THETA_SCALE**2))
    out[0] = FUNNEL_THETA_SCALE**2
    return out


def make_cauchy(d: int = 1000) -> TargetDistribution:
    """Product of independent standard Cauchy variables.

    All moments diverge, so the evaluation coordinates are the per-dimension
    negative log-densities ``-log C(x_i)``, whose expectation is the entropy.
    """
    if d < 1:
        raise ValueError(f"d must be >= 1, got {d}")
    log_pi = math.log(math.pi)

    def value_and_grad(x):
        x2 = x * x
        return np.sum(np.log1p(x2), axis=-1) + d * log_pi, 2.0 * x / (1.0 + x2)

    def neg_log_c(x):
        return np.log1p(x * x) + log_pi

    return TargetDistribution(
        d=d,
        value_and_grad=value_and_grad,
        name="cauchy",
        eval_transform=neg_log_c,
        metric="entropy",
        params={"d": d},
        exact_sampler=lambda n, rng: rng.standard_cauchy((n, d)),
    )


# ---------------------------------------------------------------------------
# stochastic volatility


SV_RATE_NU = 1.0 / 10.0
SV_RATE_SIGMA = 1.0 / 0.02


@dataclass(frozen=True)
class ReturnsSeries:
    values: Array

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.ndim != 1 or v.size < 1:
            raise ValueError("need a one-dimensional, non-empty series of returns")
        if not np.all(np.isfinite(v)):
            raise ValueError("returns must be finite")
        object.__setattr__(self, "values", v)

    def __len__(self):
        return self.values.size


def load_returns_csv(path) -> ReturnsSeries:
    """Reads one numeric value per row; a non-numeric first row is a header."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"returns file not found: {path}")
    values = []
    with path.open(newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if not row or not row[0].strip():
                continue
            try:
                values.append(float(row[0]))
            except ValueError:
                if lineno == 1:
                    continue
                raise ValueError(f"{path}:{lineno}: non-numeric value {row[0]!r}") from None
    if not values:
        raise ValueError(f"{path}: no returns found")
    return ReturnsSeries(np.asarray(values))


def write_returns_csv(path, values: Sequence[float], header: str = "returns") -> None:
    with open(path, "w", newline="") as fh:
        fh.write(header + "\n")
        for v in values:
            fh.write(f"{float(v)!r}\n")


def simulate_returns(n: int, seed: int, nu: float = 10.0, sigma: float = 0.02,
                     log_r0: float = -4.5) -> ReturnsSeries:
    """Generates a synthetic returns series from the volatility model."""
    rng = np.random.default_rng(seed)
    s = log_r0 + np.cumsum(sigma * rng.standard_normal(n))
    return ReturnsSeries(np.exp(s) * rng.standard_t(nu, size=n))


def make_stochastic_volatility(series: ReturnsSeries) -> TargetDistribution:
    """Posterior of the Student-t stochastic volatility model.

    Parameters are ``(s_1..s_N, a, b)`` with ``s_n = log R_n``,
    ``a = log(lambda_nu * nu)`` and ``b = log(lambda_sigma * sigma)``.
    ``s_1 ~ N(0, sigma)`` starts the random walk.
    """
    r = np.asarray(series.values, dtype=float)
    n = r.size
    if n < 2:
        raise ValueError(f"need at least 2 returns, got {n}")
    r2 = r * r
    d = n + 2
    half_log_pi = 0.5 * math.log(math.pi)

    def value_and_grad(x):
        s = x[..., :n]
        a = x[..., n]
        b = x[..., n + 1]
        nu = np.exp(a) / SV_RATE_NU
        sigma = np.exp(b) / SV_RATE_SIGMA
        nu_ = nu[..., None]

        # Student-t likelihood of r_n with scale exp(s_n)
        q = r2 * np.exp(-2.0 * s) / nu_
        log1q = np.log1p(q)
        loglik = (
            n * (gammaln(0.5 * (nu + 1.0)) - gammaln(0.5 * nu) - 0.5 * np.log(nu) - half_log_pi)
            - np.sum(s, axis=-1)
            - 0.5 * (nu + 1.0) * np.sum(log1q, axis=-1)
        )
        frac = q / (1.0 + q)
        dlik_ds = -1.0 + (nu_ + 1.0) * frac
        dlik_dnu = (
            0.5 * n * (digamma(0.5 * (nu + 1.0)) - digamma(0.5 * nu))
            - 0.5 * n / nu
            - 0.5 * np.sum(log1q, axis=-1)
            + 0.5 * (nu + 1.0) / nu * np.sum(frac, axis=-1)
        )

        # Gaussian random walk on s with step sigma, started at 0
        ds = np.diff(s, axis=-1)
        sq = s[..., 0] ** 2 + np.sum(ds * ds, axis=-1)
        inv_s2 = 1.0 / sigma**2
        logrw = -n * np.log(sigma) - 0.5 * sq * inv_s2
        drw = np.zeros_like(s)
        drw[..., 0] = -s[..., 0]
        drw[..., :-1] += ds
        drw[..., 1:] -= ds
        drw *= inv_s2[..., None]
        dlogrw_db = -n + sq * inv_s2

        # Exp priors, written in the log-rate variables: p(a) ∝ exp(a - e^a)
        logprior = a - np.exp(a) + b - np.exp(b)

        value = -(loglik + logrw + logprior)
        g = np.empty_like(x)
        g[..., :n] = -(dlik_ds + drw)
        g[..., n] = -(nu * dlik_dnu + 1.0 - np.exp(a))
        g[..., n + 1] = -(dlogrw_db + 1.0 - np.exp(b))
        return value, g

    log_scale = math.log(float(np.std(r)) + 1e-12)

    def init(rng):
        x = np.empty(d)
        x[:n] = log_scale + 0.1 * rng.standard_normal(n)
        x[n:] = 0.1 * rng.standard_normal(2)
        return x

    return TargetDistribution(
        d=d,
        value_and_grad=value_and_grad,
        name="sv",
        init=init,
        params={"N": n},
    )


TARGET_NAMES = ("gaussian", "icg", "bimodal", "rosenbrock", "funnel", "cauchy", "sv")


def make_target(name: str, d: Optional[int] = None, kappa: float = 100.0,
                Q: float = 0.1, seed: int = 0, returns_csv=None,
                spacing: str = "log") -> TargetDistribution:
    """Builds a target from its CLI identifier with the benchmark defaults."""
    if name == "gaussian":
        return make_standard_gaussian(d or 100)
    if name == "icg":
        return make_ill_conditioned_gaussian(d or 100, kappa, seed, spacing)
    if name == "bimodal":
        return make_bimodal_mixture(d or 50)
    if name == "rosenbrock":
        return make_rosenbrock(d or 36, Q)
    if name == "funnel":
        return make_funnel(d or 20)
    if name == "cauchy":
        return make_cauchy(d or 1000)
    if name == "sv":
        if returns_csv is None:
            raise ValueError("target 'sv' requires a returns CSV")
        return make_stochastic_volatility(load_returns_csv(returns_csv))
    raise ValueError(f"unknown target {name!r}; choose from {', '.join(TARGET_NAMES)}")
