"""Policy evaluation metrics.

Three complementary views of a design policy's quality:

* :func:`estimate_eig` -- Monte Carlo expected-information-gain estimate:
  roll N trajectories from the policy-induced marginal dynamics (outer
  resampling off, so draws are independent and equally weighted) and average
  the per-trajectory sums of untempered information increments.
* :func:`info_gain_trace_exact` -- the same increments accumulated per step in
  closed form for conditionally linear environments, giving the per-experiment
  information-gain curve.
* :func:`spce_bound` -- sequential prior-contrastive lower bound: roll under a
  prior-drawn ground-truth parameter, then contrast the trajectory likelihood
  against L extra prior draws.  Each sample is hard-capped at log(L+1), so
  the bound saturates there no matter how informative the policy is.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import models
from .models import EnvironmentSpec
from .smc import PotentialConfig, as_rollout_policy, run_filter
from .posterior import MhConfig

__all__ = [
    "EigEstimate",
    "SpceEstimate",
    "estimate_eig",
    "info_gain_trace_exact",
    "spce_bound",
    "rollout_known_theta",
]


@dataclass(frozen=True)
class EigEstimate:
    value: float
    std_error: float
    n_outer: int
    m_inner: Optional[int]


@dataclass(frozen=True)
class SpceEstimate:
    value: float
    std_error: float
    contrastive: int
    n_outer: int


_EVAL_POTENTIAL = PotentialConfig(eta=1.0, slew_penalty=0.0, reward_form="general")


def estimate_eig(
    env: EnvironmentSpec,
    policy,
    n_outer: int,
    m_inner: Optional[int],
    mode: str,
    rng: np.random.Generator,
    mean_only: bool = False,
    mh: Optional[MhConfig] = None,
    ess_threshold: float = 0.75,
    horizon: Optional[int] = None,
) -> EigEstimate:
    """Monte Carlo estimate of the expected information gain in nats.

    Trajectories are independent marginal-dynamics draws (no outer
    resampling), each contributing the sum of its stage information
    increments; the estimate is their mean with standard error
    std / sqrt(N).  ``mode`` selects particle ("ibis") or closed-form
    ("exact") inner posteriors.
    """
    if mode == "ibis" and mh is None:
        mh = _default_mh(env)
    filt = run_filter(
        env,
        policy,
        n_outer,
        m_inner if mode == "ibis" else None,
        _EVAL_POTENTIAL,
        mh if mode == "ibis" else None,
        rng,
        mode=mode,
        resampling=False,
        ess_threshold=ess_threshold,
        horizon=horizon,
        mean_only=mean_only,
    )
    totals = filt.rewards.sum(axis=1)
    value = float(np.mean(totals))
    std_error = float(np.std(totals, ddof=1) / np.sqrt(n_outer)) if n_outer > 1 else 0.0
    return EigEstimate(value, std_error, n_outer, m_inner if mode == "ibis" else None)


def _default_mh(env: EnvironmentSpec) -> MhConfig:
    from .stats import LogNormalSpec

    if isinstance(env.prior, LogNormalSpec):
        return MhConfig(step_scale=0.05, num_moves=1, proposal_family="lognormal-walk")
    return MhConfig(step_scale=0.1, num_moves=1, proposal_family="gaussian-walk")


def info_gain_trace_exact(
    env: EnvironmentSpec,
    policy,
    n_rollouts: int,
    rng: np.random.Generator,
    mean_only: bool = False,
    horizon: Optional[int] = None,
):
    """Per-experiment cumulative information gain, closed form, over rollouts.

    Returns (times, mean, std): arrays of length T where entry k aggregates
    the cumulative gain after k+1 experiments over ``n_rollouts`` independent
    realizations (the cumulative gain at time zero is identically zero and is
    not emitted).
    """
    filt = run_filter(
        env,
        policy,
        n_rollouts,
        None,
        _EVAL_POTENTIAL,
        None,
        rng,
        mode="exact",
        resampling=False,
        horizon=horizon,
        mean_only=mean_only,
    )
    cumulative = np.cumsum(filt.rewards, axis=1)
    times = np.arange(1, cumulative.shape[1] + 1)
    return times, cumulative.mean(axis=0), cumulative.std(axis=0, ddof=1)


def rollout_known_theta(
    env: EnvironmentSpec,
    policy,
    thetas: np.ndarray,
    rng: np.random.Generator,
    mean_only: bool = False,
    horizon: Optional[int] = None,
):
    """Roll one trajectory per ground-truth parameter row under the policy.

    Returns (outcomes (n, T+1, dx), designs (n, T, d_xi)).
    """
    thetas = np.atleast_2d(np.asarray(thetas, dtype=float))
    n = thetas.shape[0]
    T = env.horizon if horizon is None else horizon
    rollout = as_rollout_policy(policy, mean_only=mean_only)
    carry = rollout.reset(n)
    outcomes = np.zeros((n, T + 1, env.state_dim))
    outcomes[:, 0] = env.x0
    designs = np.zeros((n, T, env.design_dim))
    xi_prev = np.zeros((n, env.design_dim))
    for t in range(T):
        xi, _, carry = rollout.sample(carry, outcomes[:, t], xi_prev, rng)
        eps = rng.standard_normal((n, env.diffusion.shape[1]))
        outcomes[:, t + 1] = models.em_step(env, outcomes[:, t], xi, thetas, noise=eps)
        designs[:, t] = xi
        xi_prev = xi
    return outcomes, designs


def _contrastive_values(
    env: EnvironmentSpec,
    outcomes: np.ndarray,
    designs: np.ndarray,
    theta_true: np.ndarray,
    theta_contrast: np.ndarray,
) -> np.ndarray:
    """Per-rollout contrastive values g for fixed trajectories.

    ``theta_true`` is (n, d); ``theta_contrast`` is (n, L, d).  The true
    parameter is included in the denominator average, which caps every value
    at log(L+1).
    """
    n, L = theta_contrast.shape[0], theta_contrast.shape[1]
    all_thetas = np.concatenate([theta_true[:, None, :], theta_contrast], axis=1)
    loglik = np.zeros((n, L + 1))
    for t in range(designs.shape[1]):
        loglik += models.transition_logpdf(
            env,
            outcomes[:, t + 1][:, None, :],
            outcomes[:, t][:, None, :],
            designs[:, t][:, None, :],
            all_thetas,
            validate=False,
        )
    shift = loglik.max(axis=1, keepdims=True)
    log_denom = np.log(np.mean(np.exp(loglik - shift), axis=1)) + shift[:, 0]
    return loglik[:, 0] - log_denom


def spce_bound(
    env: EnvironmentSpec,
    policy,
    contrastive: int,
    n_outer: int,
    rng: np.random.Generator,
    mean_only: bool = False,
    horizon: Optional[int] = None,
    return_samples: bool = False,
):
    """Sequential prior-contrastive lower bound on the expected information gain.

    For each of ``n_outer`` rollouts: draw a ground-truth parameter from the
    prior, roll the trajectory under it with the policy, then contrast its
    log-likelihood against ``contrastive`` fresh prior draws.  Policy density
    terms are common to numerator and denominator and cancel.  Every sample
    satisfies g <= log(contrastive + 1) exactly.
    """
    if contrastive < 1:
        raise ValueError("need at least one contrastive sample")
    theta_true = np.atleast_2d(env.prior_sample(rng, size=n_outer))
    outcomes, designs = rollout_known_theta(
        env, policy, theta_true, rng, mean_only=mean_only, horizon=horizon
    )
    theta_contrast = env.prior_sample(rng, size=n_outer * contrastive).reshape(
        n_outer, contrastive, env.theta_dim
    )
    samples = _contrastive_values(env, outcomes, designs, theta_true, theta_contrast)
    value = float(np.mean(samples))
    std_error = float(np.std(samples, ddof=1) / np.sqrt(n_outer)) if n_outer > 1 else 0.0
    estimate = SpceEstimate(value, std_error, contrastive, n_outer)
    return (estimate, samples) if return_samples else estimate
