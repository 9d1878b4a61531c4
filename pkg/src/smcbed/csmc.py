"""Conditional variant of the nested filter: a Markov kernel on trajectories.

Given a reference trajectory together with the parameter-posterior snapshots
that produced it, one kernel application reruns the filter with the reference
pinned in slot one of the particle system: its states, designs and posterior
snapshots are replayed verbatim at every step and the slot is exempt from
resampling, while the remaining slots evolve as usual.  A terminal multinomial
draw over the final weights returns the new reference.  The kernel leaves the
filter's target distribution invariant, which is what makes it usable inside
stochastic-approximation training loops.

Snapshots are replayed, never recomputed: the reference stores, for every step
t, the cloud (or Gaussian) that conditioned on the first t transitions, plus
each particle's cumulative transition log-likelihood so that rejuvenation
moves in slots that copied the reference stay O(1) to warm-start.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .models import EnvironmentSpec, Trajectory
from .posterior import ConjugatePosterior, MhConfig, ThetaParticleSet
from .smc import ConfigurationError, PotentialConfig, _ReferenceData, run_filter

__all__ = ["ReferenceTrajectory", "csmc_kernel", "initial_reference"]


@dataclass
class ReferenceTrajectory:
    """A trajectory plus the per-step posterior snapshots needed to replay it.

    Snapshot t conditions on the first t transitions (t = 0 is the prior) and
    is the posterior the filter used to generate outcome t+1.  Exactly one of
    the particle or Gaussian snapshot groups is populated, matching ``mode``.
    """

    mode: str
    outcomes: np.ndarray
    designs: np.ndarray
    presquash: np.ndarray
    theta_snapshots: Optional[np.ndarray] = None
    theta_log_w_snapshots: Optional[np.ndarray] = None
    cum_loglik_snapshots: Optional[np.ndarray] = None
    mean_snapshots: Optional[np.ndarray] = None
    cov_snapshots: Optional[np.ndarray] = None

    @property
    def horizon(self) -> int:
        return self.designs.shape[0]

    def trajectory(self) -> Trajectory:
        return Trajectory.from_arrays(self.outcomes, self.designs, self.presquash)

    def theta_posterior(self, t: int):
        """Snapshot posterior at time t (conditions on z_{0:t})."""
        if self.mode == "exact":
            return ConjugatePosterior(self.mean_snapshots[t], self.cov_snapshots[t])
        return ThetaParticleSet(self.theta_snapshots[t], self.theta_log_w_snapshots[t])

    def _data(self) -> _ReferenceData:
        return _ReferenceData(
            outcomes=self.outcomes,
            designs=self.designs,
            presquash=self.presquash,
            theta_snapshots=self.theta_snapshots,
            theta_log_w_snapshots=self.theta_log_w_snapshots,
            cum_loglik_snapshots=self.cum_loglik_snapshots,
            mean_snapshots=self.mean_snapshots,
            cov_snapshots=self.cov_snapshots,
        )

    @staticmethod
    def _from_data(mode: str, data: _ReferenceData) -> "ReferenceTrajectory":
        return ReferenceTrajectory(
            mode=mode,
            outcomes=data.outcomes,
            designs=data.designs,
            presquash=data.presquash,
            theta_snapshots=data.theta_snapshots,
            theta_log_w_snapshots=data.theta_log_w_snapshots,
            cum_loglik_snapshots=data.cum_loglik_snapshots,
            mean_snapshots=data.mean_snapshots,
            cov_snapshots=data.cov_snapshots,
        )


def _check_reference(ref: ReferenceTrajectory, env: EnvironmentSpec, horizon: int):
    if ref.horizon != horizon:
        raise ConfigurationError(
            f"reference horizon {ref.horizon} does not match requested {horizon}"
        )
    if ref.outcomes.shape[1] != env.state_dim or ref.designs.shape[1] != env.design_dim:
        raise ConfigurationError("reference dimensions do not match the environment")
    snaps = (
        ref.mean_snapshots if ref.mode == "exact" else ref.theta_snapshots
    )
    if snaps is None or snaps.shape[0] != horizon:
        raise ConfigurationError("reference must carry one posterior snapshot per step")


def csmc_kernel(
    ref: ReferenceTrajectory,
    env: EnvironmentSpec,
    policy,
    n_outer: int,
    m_inner: Optional[int],
    cfg: PotentialConfig,
    mh: Optional[MhConfig],
    rng: np.random.Generator,
    ess_threshold: float = 0.75,
    horizon: Optional[int] = None,
) -> ReferenceTrajectory:
    """One application of the conditional kernel; returns the new reference.

    ``N = 1`` degenerates to returning the reference unchanged (the only slot
    is the pinned one).  The kernel resamples every step, as the unconditional
    filter does.
    """
    T = env.horizon if horizon is None else horizon
    _check_reference(ref, env, T)
    kernels, _ = csmc_kernel_batch(
        [ref], env, policy, n_outer, m_inner, cfg, mh, rng,
        ess_threshold=ess_threshold, horizon=T,
    )
    return kernels[0]


def csmc_kernel_batch(
    refs,
    env: EnvironmentSpec,
    policy,
    n_outer: int,
    m_inner: Optional[int],
    cfg: PotentialConfig,
    mh: Optional[MhConfig],
    rng: np.random.Generator,
    ess_threshold: float = 0.75,
    horizon: Optional[int] = None,
):
    """Run one conditional pass per reference, stacked into a single filter.

    Blocks never mix: resampling and the terminal selection are per block, so
    the result is distributionally identical to independent kernel calls while
    sharing the batched policy forward passes.  Returns (references, info)
    with rejuvenation acceptance counters in ``info``.
    """
    T = env.horizon if horizon is None else horizon
    mode = refs[0].mode
    for ref in refs:
        _check_reference(ref, env, T)
        if ref.mode != mode:
            raise ConfigurationError("all references must share one mode")
    filt = run_filter(
        env,
        policy,
        n_outer,
        m_inner,
        cfg,
        mh,
        rng,
        mode=mode,
        resampling=True,
        ess_threshold=ess_threshold,
        n_blocks=len(refs),
        horizon=T,
        record_snapshots=True,
        references=[ref._data() for ref in refs],
    )
    rows = filt.select_rows()
    out = [
        ReferenceTrajectory._from_data(mode, filt.extract_reference(int(row)))
        for row in rows
    ]
    return out, {"accepted": filt.accepted, "proposed": filt.proposed}


def initial_reference(
    env: EnvironmentSpec,
    policy,
    n_outer: int,
    m_inner: Optional[int],
    cfg: PotentialConfig,
    mh: Optional[MhConfig],
    rng: np.random.Generator,
    mode: str,
    ess_threshold: float = 0.75,
    horizon: Optional[int] = None,
    n_blocks: int = 1,
):
    """Warm-start references: unconditional filter passes plus terminal selection."""
    filt = run_filter(
        env,
        policy,
        n_outer,
        m_inner,
        cfg,
        mh,
        rng,
        mode=mode,
        resampling=True,
        ess_threshold=ess_threshold,
        n_blocks=n_blocks,
        horizon=horizon,
        record_snapshots=True,
    )
    rows = filt.select_rows()
    return [
        ReferenceTrajectory._from_data(mode, filt.extract_reference(int(row)))
        for row in rows
    ]
