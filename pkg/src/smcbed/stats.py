"""Numerically stable probability primitives shared across the package.

All weight arithmetic happens in log space: unnormalized log-weights are
normalized through :func:`log_sum_exp`, never by exponentiating first.
Covariance factorizations go through :func:`cholesky_with_jitter`, which
retries with escalating diagonal jitter before giving up, because running
posterior covariances can become near-singular as information accumulates.

Every sampling routine takes an explicit ``numpy.random.Generator``.  Streams
are splittable (``rng.spawn(k)``), so callers that fan work out across
particles or chains can hand each unit of work its own independent stream.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "DegenerateWeightsError",
    "LogWeights",
    "GaussianSpec",
    "LogNormalSpec",
    "log_sum_exp",
    "normalize_log_weights",
    "ess",
    "multinomial_resample",
    "cholesky_with_jitter",
    "gaussian_logpdf",
    "gaussian_sample",
    "lognormal_logpdf",
    "lognormal_sample",
    "weighted_mean_cov",
]

_LOG_2PI = float(np.log(2.0 * np.pi))


class DegenerateWeightsError(RuntimeError):
    """Raised when every log-weight in a set is -inf (no support left)."""


def log_sum_exp(values, axis=-1):
    """log(sum(exp(values))) computed by shifting by the maximum.

    Raises :class:`DegenerateWeightsError` if every entry along ``axis`` is
    -inf, since the result would be the log of an empty measure.
    """
    values = np.asarray(values, dtype=float)
    vmax = np.max(values, axis=axis, keepdims=True)
    if not np.all(np.isfinite(vmax)):
        raise DegenerateWeightsError("all log-weights are -inf")
    out = np.log(np.sum(np.exp(values - vmax), axis=axis)) + np.squeeze(vmax, axis=axis)
    return float(out) if np.ndim(out) == 0 else out


def normalize_log_weights(log_weights, axis=-1):
    """Shift log-weights so they exponentiate to a probability vector."""
    lw = np.asarray(log_weights, dtype=float)
    total = log_sum_exp(lw, axis=axis)
    if lw.ndim == 1:
        return lw - total
    return lw - np.expand_dims(total, axis)


@dataclass(frozen=True)
class LogWeights:
    """Unnormalized log-weights over a particle set."""

    values: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "values", np.asarray(self.values, dtype=float))

    def normalized(self) -> np.ndarray:
        """Probability weights in [0, 1] summing to one."""
        w = np.exp(self.values - log_sum_exp(self.values))
        return w / np.sum(w)

    def __len__(self) -> int:
        return self.values.shape[-1]


def ess(weights):
    """Effective sample size 1 / sum(w^2) of normalized weights.

    Lies in [1, M]; invariant under permutation of the weights.  Reduces over
    the trailing axis, so stacked weight rows give a vector of sizes.
    """
    w = np.asarray(weights, dtype=float)
    out = 1.0 / np.sum(w * w, axis=-1)
    return float(out) if np.ndim(out) == 0 else out


def multinomial_resample(weights, count: int, rng: np.random.Generator) -> np.ndarray:
    """i.i.d. categorical ancestor indices drawn from normalized ``weights``."""
    w = np.asarray(weights, dtype=float)
    cum = np.cumsum(w)
    cum[-1] = 1.0  # guard against round-off in the final bin
    u = rng.random(count)
    return np.searchsorted(cum, u, side="right").astype(np.intp)


def cholesky_with_jitter(matrix: np.ndarray, start: float = 1e-10, stop: float = 1e-6):
    """Lower Cholesky factor, retrying with jitter start..stop (x10 steps).

    The first attempt uses no jitter.  Raises ``numpy.linalg.LinAlgError``
    once the ladder is exhausted.
    """
    matrix = np.asarray(matrix, dtype=float)
    try:
        return np.linalg.cholesky(matrix)
    except np.linalg.LinAlgError:
        pass
    eye = np.eye(matrix.shape[-1])
    jitter = start
    while jitter <= stop:
        try:
            return np.linalg.cholesky(matrix + jitter * eye)
        except np.linalg.LinAlgError:
            jitter *= 10.0
    raise np.linalg.LinAlgError(
        f"matrix not positive definite even with jitter up to {stop:g}"
    )


@dataclass(frozen=True)
class GaussianSpec:
    """Multivariate normal with mean vector and (symmetric PSD) covariance."""

    mean: np.ndarray
    covariance: np.ndarray

    def __post_init__(self):
        mean = np.atleast_1d(np.asarray(self.mean, dtype=float))
        cov = np.atleast_2d(np.asarray(self.covariance, dtype=float))
        if not np.allclose(cov, cov.T, atol=1e-12):
            raise ValueError("covariance must be symmetric")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "covariance", cov)

    @property
    def dim(self) -> int:
        return self.mean.shape[0]


@dataclass(frozen=True)
class LogNormalSpec:
    """Componentwise-positive vector whose log is Gaussian(location, covariance)."""

    location: np.ndarray
    covariance: np.ndarray

    def __post_init__(self):
        loc = np.atleast_1d(np.asarray(self.location, dtype=float))
        cov = np.atleast_2d(np.asarray(self.covariance, dtype=float))
        if not np.allclose(cov, cov.T, atol=1e-12):
            raise ValueError("covariance must be symmetric")
        object.__setattr__(self, "location", loc)
        object.__setattr__(self, "covariance", cov)

    @property
    def dim(self) -> int:
        return self.location.shape[0]


def gaussian_logpdf(x, spec: GaussianSpec) -> float:
    """Exact multivariate normal log-density at ``x``."""
    from scipy.linalg import solve_triangular

    x = np.atleast_1d(np.asarray(x, dtype=float))
    chol = cholesky_with_jitter(spec.covariance)
    alpha = solve_triangular(chol, x - spec.mean, lower=True)
    logdet = 2.0 * np.sum(np.log(np.diag(chol)))
    return float(-0.5 * (spec.dim * _LOG_2PI + logdet + alpha @ alpha))


def gaussian_sample(spec: GaussianSpec, rng: np.random.Generator, size=None) -> np.ndarray:
    """Draw from the Gaussian; ``size`` adds leading sample dimensions."""
    chol = cholesky_with_jitter(spec.covariance)
    shape = (spec.dim,) if size is None else (size, spec.dim)
    eps = rng.standard_normal(shape)
    return spec.mean + eps @ chol.T


def lognormal_logpdf(theta, spec: LogNormalSpec) -> float:
    """Log-density of a multivariate log-normal, including the -sum(log theta) Jacobian."""
    theta = np.atleast_1d(np.asarray(theta, dtype=float))
    if np.any(theta <= 0.0):
        raise ValueError("log-normal density requires strictly positive components")
    log_theta = np.log(theta)
    base = gaussian_logpdf(log_theta, GaussianSpec(spec.location, spec.covariance))
    return float(base - np.sum(log_theta))


def lognormal_sample(spec: LogNormalSpec, rng: np.random.Generator, size=None) -> np.ndarray:
    return np.exp(
        gaussian_sample(GaussianSpec(spec.location, spec.covariance), rng, size=size)
    )


def weighted_mean_cov(particles, weights):
    """Weighted mean and weighted central covariance of a particle cloud.

    ``particles`` has shape (M, d); ``weights`` are normalized.
    """
    x = np.atleast_2d(np.asarray(particles, dtype=float))
    w = np.asarray(weights, dtype=float)
    mean = w @ x
    centered = x - mean
    cov = (centered * w[:, None]).T @ centered
    return mean, cov
