"""Running parameter posteriors.

Two interchangeable representations are maintained along a trajectory:

* a weighted particle cloud updated by iterated batch importance sampling
  (reweight by the newest transition likelihood, resample-move on weight
  degeneracy), and
* a Gaussian ``(m, P)`` posterior updated in closed form, available whenever
  the environment is conditionally linear with a Gaussian prior.

The resample-move kernel is Metropolis-Hastings targeting the full-data
posterior p(theta) * prod_s f(x_s | x_{s-1}, xi_{s-1}, theta); the policy
density is a theta-free factor of the marginal likelihood and cancels in
weight normalization, so it never appears here.  The move target is
recomputed over the whole trajectory per move, an O(t) cost that is
acceptable for the short horizons this package targets.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import stats
from .models import EnvironmentSpec, Trajectory, transition_logpdf
from .stats import DegenerateWeightsError, GaussianSpec, LogNormalSpec

__all__ = [
    "ThetaParticleSet",
    "ConjugatePosterior",
    "MhConfig",
    "conjugate_update",
    "conjugate_marginal_logpdf",
    "particle_marginal_logpdf",
    "mh_move",
    "ibis_step",
    "trajectory_loglik",
]

_LOG_2PI = float(np.log(2.0 * np.pi))


@dataclass(frozen=True)
class ThetaParticleSet:
    """Weighted particles approximating the parameter posterior.

    ``particles`` has shape (M, theta_dim); ``log_weights`` shape (M,),
    kept normalized (log-sum-exp zero) by the constructors here.
    """

    particles: np.ndarray
    log_weights: np.ndarray

    def __post_init__(self):
        object.__setattr__(
            self, "particles", np.atleast_2d(np.asarray(self.particles, dtype=float))
        )
        lw = np.asarray(self.log_weights, dtype=float)
        object.__setattr__(self, "log_weights", stats.normalize_log_weights(lw))

    @property
    def size(self) -> int:
        return self.particles.shape[0]

    def weights(self) -> np.ndarray:
        return np.exp(self.log_weights)

    def ess(self) -> float:
        return stats.ess(self.weights())

    def mean_cov(self):
        return stats.weighted_mean_cov(self.particles, self.weights())

    @staticmethod
    def from_prior(env: EnvironmentSpec, size: int, rng: np.random.Generator):
        particles = env.prior_sample(rng, size=size)
        return ThetaParticleSet(particles, np.zeros(size))


@dataclass(frozen=True)
class ConjugatePosterior:
    """Gaussian parameter posterior (mean, covariance)."""

    mean: np.ndarray
    covariance: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "mean", np.atleast_1d(np.asarray(self.mean, dtype=float)))
        cov = np.atleast_2d(np.asarray(self.covariance, dtype=float))
        object.__setattr__(self, "covariance", 0.5 * (cov + cov.T))

    @staticmethod
    def from_prior(prior: GaussianSpec) -> "ConjugatePosterior":
        return ConjugatePosterior(prior.mean, prior.covariance)


@dataclass(frozen=True)
class MhConfig:
    """Random-walk Metropolis-Hastings settings for particle rejuvenation.

    ``step_scale`` is the proposal covariance scale c in N(theta, cI) for the
    Gaussian walk, or on log(theta) for the multiplicative (log-normal) walk.
    """

    step_scale: float = 0.1
    num_moves: int = 1
    proposal_family: str = "gaussian-walk"

    def __post_init__(self):
        if self.step_scale <= 0:
            raise ValueError("step_scale must be positive")
        if self.num_moves < 1:
            raise ValueError("num_moves must be at least 1")
        if self.proposal_family not in ("gaussian-walk", "lognormal-walk"):
            raise ValueError(f"unknown proposal family {self.proposal_family!r}")


def conjugate_update(post: ConjugatePosterior, observation, H, noise_cov) -> ConjugatePosterior:
    """Kalman-style Bayes update for y = H theta + noise.

    Returns the posterior after observing ``observation`` with design matrix
    ``H`` (obs_dim x theta_dim) and observation covariance ``noise_cov``.
    """
    y = np.atleast_1d(np.asarray(observation, dtype=float))
    H = np.atleast_2d(np.asarray(H, dtype=float))
    R = np.atleast_2d(np.asarray(noise_cov, dtype=float))
    P = post.covariance
    S = H @ P @ H.T + R
    gain = np.linalg.solve(S.T, H @ P).T
    mean = post.mean + gain @ (y - H @ post.mean)
    cov = P - gain @ H @ P
    return ConjugatePosterior(mean, cov)


def conjugate_marginal_logpdf(post: ConjugatePosterior, observation, H, noise_cov) -> float:
    """log N(observation | H m, H P H^T + noise_cov)."""
    y = np.atleast_1d(np.asarray(observation, dtype=float))
    H = np.atleast_2d(np.asarray(H, dtype=float))
    R = np.atleast_2d(np.asarray(noise_cov, dtype=float))
    S = H @ post.covariance @ H.T + R
    return stats.gaussian_logpdf(y, GaussianSpec(H @ post.mean, S))


def particle_marginal_logpdf(theta_set: ThetaParticleSet, env, x_next, x, xi) -> float:
    """log of the particle-mixture transition density sum_m W_m f(x_next | x, xi, theta_m)."""
    loglik = transition_logpdf(env, x_next, x, xi, theta_set.particles, validate=False)
    return float(stats.log_sum_exp(theta_set.log_weights + loglik))


def _prior_logpdf_batch(prior, thetas: np.ndarray) -> np.ndarray:
    """Vectorized prior log-density over leading dimensions of ``thetas``."""
    thetas = np.asarray(thetas, dtype=float)
    if isinstance(prior, LogNormalSpec):
        with np.errstate(divide="ignore", invalid="ignore"):
            log_t = np.log(thetas)
        base = _gaussian_logpdf_batch(log_t, prior.location, prior.covariance)
        out = base - np.sum(log_t, axis=-1)
        return np.where(np.all(thetas > 0.0, axis=-1), out, -np.inf)
    return _gaussian_logpdf_batch(thetas, prior.mean, prior.covariance)


def _gaussian_logpdf_batch(x: np.ndarray, mean: np.ndarray, cov: np.ndarray) -> np.ndarray:
    chol = stats.cholesky_with_jitter(cov)
    diff = x - mean
    # solve L a = diff^T for each row via broadcasting on the inverse factor
    inv_chol = np.linalg.inv(chol)
    alpha = diff @ inv_chol.T
    logdet = 2.0 * np.sum(np.log(np.diag(chol)))
    return -0.5 * (x.shape[-1] * _LOG_2PI + logdet + np.sum(alpha * alpha, axis=-1))


def trajectory_loglik(env, thetas: np.ndarray, outcomes: np.ndarray, designs: np.ndarray) -> np.ndarray:
    """sum_s log f(x_s | x_{s-1}, xi_{s-1}, theta) over the trajectory.

    ``thetas`` may carry leading batch dimensions; outcomes (t+1, dx) and
    designs (t, d_xi) describe a single trajectory.
    """
    thetas = np.asarray(thetas, dtype=float)
    total = np.zeros(thetas.shape[:-1])
    for s in range(designs.shape[0]):
        total = total + transition_logpdf(
            env, outcomes[s + 1], outcomes[s], designs[s], thetas, validate=False
        )
    return total


def mh_move(theta, target_logpdf: Callable, mh: MhConfig, rng: np.random.Generator):
    """One random-walk Metropolis-Hastings move; returns (theta', accepted).

    The Gaussian walk is symmetric.  The multiplicative walk proposes
    theta' = theta * exp(eps) with eps ~ N(0, cI); its Hastings correction is
    sum(log theta' - log theta), included so detailed balance holds exactly.
    """
    theta = np.atleast_1d(np.asarray(theta, dtype=float))
    current = float(target_logpdf(theta))
    if not np.isfinite(current):
        raise ValueError("target log-density must be finite at the current point")
    scale = np.sqrt(mh.step_scale)
    eps = scale * rng.standard_normal(theta.shape)
    if mh.proposal_family == "gaussian-walk":
        proposal = theta + eps
        correction = 0.0
    else:
        proposal = theta * np.exp(eps)
        correction = float(np.sum(np.log(proposal) - np.log(theta)))
    log_alpha = float(target_logpdf(proposal)) - current + correction
    if np.log(rng.random()) < log_alpha:
        return proposal, True
    return theta, False


def _propose_batch(thetas: np.ndarray, mh: MhConfig, rng: np.random.Generator):
    """Batched proposals and their Hastings corrections (zero when symmetric)."""
    eps = np.sqrt(mh.step_scale) * rng.standard_normal(thetas.shape)
    if mh.proposal_family == "gaussian-walk":
        return thetas + eps, np.zeros(thetas.shape[:-1])
    proposal = thetas * np.exp(eps)
    return proposal, np.sum(np.log(proposal) - np.log(thetas), axis=-1)


def _mh_sweeps_batch(
    env,
    thetas: np.ndarray,
    cum_loglik: np.ndarray,
    outcomes: np.ndarray,
    designs: np.ndarray,
    mh: MhConfig,
    rng: np.random.Generator,
):
    """``num_moves`` MH sweeps over a particle batch sharing one trajectory.

    ``cum_loglik`` caches each particle's trajectory log-likelihood so only
    proposals pay the O(t) recomputation.  Returns updated (thetas,
    cum_loglik, accepted_count, proposal_count).
    """
    prior_lp = _prior_logpdf_batch(env.prior, thetas)
    accepted = 0
    total = int(np.prod(thetas.shape[:-1])) * mh.num_moves
    for _ in range(mh.num_moves):
        proposal, correction = _propose_batch(thetas, mh, rng)
        prop_prior = _prior_logpdf_batch(env.prior, proposal)
        prop_ll = trajectory_loglik(env, proposal, outcomes, designs)
        log_alpha = (prop_prior + prop_ll) - (prior_lp + cum_loglik) + correction
        accept = np.log(rng.random(log_alpha.shape)) < log_alpha
        accepted += int(np.count_nonzero(accept))
        thetas = np.where(accept[..., None], proposal, thetas)
        cum_loglik = np.where(accept, prop_ll, cum_loglik)
        prior_lp = np.where(accept, prop_prior, prior_lp)
    return thetas, cum_loglik, accepted, total


def ibis_step(
    trajectory: Trajectory,
    theta_set: ThetaParticleSet,
    env: EnvironmentSpec,
    mh: MhConfig,
    ess_threshold: float = 0.75,
    rng: np.random.Generator = None,
) -> ThetaParticleSet:
    """One iterated-batch-importance-sampling step.

    ``theta_set`` approximates the posterior given everything but the last
    transition of ``trajectory``; the step reweights by that transition's
    likelihood and, if the effective sample size drops below
    ``ess_threshold * M``, resamples and applies ``mh.num_moves`` MH moves
    targeting the full-data posterior, resetting weights to uniform.
    """
    if not 0.0 <= ess_threshold <= 1.0:
        raise ValueError("ess_threshold must lie in [0, 1]")
    outcomes = trajectory.outcomes()
    designs = trajectory.designs()
    if designs.shape[0] == 0:
        raise ValueError("trajectory carries no transition to assimilate")
    loglik_inc = transition_logpdf(
        env, outcomes[-1], outcomes[-2], designs[-1], theta_set.particles, validate=False
    )
    log_w = theta_set.log_weights + loglik_inc
    if not np.any(np.isfinite(log_w)):
        raise DegenerateWeightsError(
            "trajectory is impossible under every parameter particle"
        )
    new_set = ThetaParticleSet(theta_set.particles, log_w)
    if ess_threshold > 0.0 and new_set.ess() < ess_threshold * new_set.size:
        if rng is None:
            raise ValueError("rng is required when resample-move can trigger")
        ancestors = stats.multinomial_resample(new_set.weights(), new_set.size, rng)
        thetas = new_set.particles[ancestors]
        cum_ll = trajectory_loglik(env, thetas, outcomes, designs)
        thetas, _, _, _ = _mh_sweeps_batch(env, thetas, cum_ll, outcomes, designs, mh, rng)
        new_set = ThetaParticleSet(thetas, np.zeros(new_set.size))
    return new_set
