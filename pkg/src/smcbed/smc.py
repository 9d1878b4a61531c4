"""Nested filter over design trajectories with per-trajectory parameter posteriors.

The filter propagates N outer particles, each carrying a full outcome/design
history, a running parameter posterior (particle cloud or closed-form
Gaussian), and a recurrent policy state.  Per step it

1. multinomially resamples the outer particles by the current potentials
   (skippable, which turns the filter into a plain marginal-dynamics sampler),
2. rejuvenates degenerate inner particle clouds by resample-move,
3. samples a design from the policy and an outcome from the particle-mixture
   (or closed-form) marginal dynamics, and
4. scores the step: the information increment r = alpha + beta, where alpha
   is the posterior expectation of the transition log-likelihood and beta the
   negative log marginal likelihood of the outcome.

Outer weights use exp(eta * r - slew * ||dxi||^2) with r either the full
increment or, for constant-noise dynamics, just the beta term (the alpha term
is constant in expectation there and only adds variance).  The reward history
always records the untempered, unpenalized increments so downstream
information-gain estimates are independent of eta and the slew penalty.

Everything is laid out struct-of-arrays and vectorized across outer particles;
several independent filters (training chains) can run stacked in one pass as
"blocks".  A block may pin a reference trajectory in its first slot, which is
what the conditional kernel builds on.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import models, posterior, stats
from .models import EnvironmentSpec, Trajectory
from .policy import PolicyParameters, RandomPolicy, RecurrentPolicy
from .posterior import ConjugatePosterior, MhConfig, ThetaParticleSet
from .stats import DegenerateWeightsError, GaussianSpec

__all__ = [
    "ConfigurationError",
    "DegeneracyError",
    "PotentialConfig",
    "WeightedTrajectorySet",
    "stage_reward",
    "potential_log",
    "io_smc2",
    "io_smc2_exact",
    "run_filter",
    "as_rollout_policy",
    "write_rollout_csv",
]

_LOG_2PI = float(np.log(2.0 * np.pi))


class ConfigurationError(ValueError):
    """Incompatible environment / algorithm configuration."""


class DegeneracyError(DegenerateWeightsError):
    """Every parameter particle of some trajectory has zero likelihood."""

    def __init__(self, message: str, step: int):
        super().__init__(f"{message} (step {step})")
        self.step = step


@dataclass(frozen=True)
class PotentialConfig:
    """Potential shaping: tempering, slew-rate penalty, reward form.

    ``reward_form`` selects what enters the outer weights: "general" uses the
    full information increment, "constant-noise" only its marginal-likelihood
    part, valid when the dynamics noise is state-independent.
    """

    eta: float = 1.0
    slew_penalty: float = 0.0
    reward_form: str = "constant-noise"

    def __post_init__(self):
        if self.eta < 0.0:
            raise ValueError("eta must be non-negative")
        if self.slew_penalty < 0.0:
            raise ValueError("slew penalty must be non-negative")
        if self.reward_form not in ("constant-noise", "general"):
            raise ValueError(f"unknown reward form {self.reward_form!r}")


def potential_log(r_hat, xi_t, xi_prev, cfg: PotentialConfig):
    """Log potential eta * r_hat - slew * ||xi_t - xi_prev||^2.

    ``xi_prev`` of None marks the first experiment, which has no slew term.
    Broadcasts over leading dimensions.
    """
    r_hat = np.asarray(r_hat, dtype=float)
    out = cfg.eta * r_hat
    if xi_prev is not None and cfg.slew_penalty > 0.0:
        delta = np.asarray(xi_t, dtype=float) - np.asarray(xi_prev, dtype=float)
        out = out - cfg.slew_penalty * np.sum(delta * delta, axis=-1)
    return out


def stage_reward(
    theta_set: ThetaParticleSet,
    env: EnvironmentSpec,
    x_next,
    x,
    xi,
    reward_form: str = "general",
):
    """Information increment of one transition and the Bayes-reweighted cloud.

    Returns (r_hat, set_after) where set_after carries the reweighted (never
    resampled) weights for the posterior including ``x_next``.  The general
    form is  sum_m W'_m log f_m - log sum_m W_m f_m; the constant-noise form
    keeps only the second term.
    """
    loglik = models.transition_logpdf(
        env, x_next, x, xi, theta_set.particles, validate=False
    )
    alpha, beta, log_w_new = _reward_terms(theta_set.log_weights, loglik)
    set_after = ThetaParticleSet(theta_set.particles, log_w_new)
    r_hat = alpha + beta if reward_form == "general" else beta
    return float(r_hat), set_after


def _reward_terms(log_w: np.ndarray, loglik: np.ndarray):
    """alpha, beta and reweighted normalized log-weights, batched over rows.

    ``log_w`` must be normalized along the last axis.
    """
    joint = log_w + loglik
    log_marginal = np.asarray(stats.log_sum_exp(joint, axis=-1))
    log_w_new = joint - log_marginal[..., None]
    alpha = np.sum(np.exp(log_w_new) * loglik, axis=-1)
    beta = -log_marginal
    return alpha, beta, log_w_new


def as_rollout_policy(policy, mean_only: bool = False):
    """Accept PolicyParameters, RecurrentPolicy or RandomPolicy uniformly."""
    if isinstance(policy, PolicyParameters):
        return RecurrentPolicy(policy, mean_only=mean_only)
    if isinstance(policy, RecurrentPolicy) and mean_only and not policy.mean_only:
        return RecurrentPolicy(policy.params, mean_only=True)
    return policy


@dataclass
class WeightedTrajectorySet:
    """Output of one filter pass: N trajectories with weights and posteriors.

    Histories are stored as stacked arrays; ``trajectory(i)`` materializes a
    :class:`Trajectory` view.  ``reward_history`` holds the untempered
    information increments, one column per experiment.
    """

    env: EnvironmentSpec
    mode: str
    outcomes: np.ndarray
    designs: np.ndarray
    presquash: np.ndarray
    log_weights: np.ndarray
    reward_history: np.ndarray
    theta_particles: Optional[np.ndarray] = None
    theta_log_weights: Optional[np.ndarray] = None
    conj_means: Optional[np.ndarray] = None
    conj_covs: Optional[np.ndarray] = None

    def __len__(self) -> int:
        return self.outcomes.shape[0]

    def weights(self) -> np.ndarray:
        return np.exp(stats.normalize_log_weights(self.log_weights))

    def trajectory(self, i: int) -> Trajectory:
        return Trajectory.from_arrays(self.outcomes[i], self.designs[i], self.presquash[i])

    def theta_posterior(self, i: int):
        if self.mode == "exact":
            return ConjugatePosterior(self.conj_means[i], self.conj_covs[i])
        return ThetaParticleSet(self.theta_particles[i], self.theta_log_weights[i])

    def total_rewards(self) -> np.ndarray:
        """Per-trajectory summed information increments."""
        return np.sum(self.reward_history, axis=1)


class _ReferenceData:
    """Array bundle a conditional pass pins into slot one of a block."""

    __slots__ = (
        "outcomes",
        "designs",
        "presquash",
        "theta_snapshots",
        "theta_log_w_snapshots",
        "cum_loglik_snapshots",
        "mean_snapshots",
        "cov_snapshots",
    )

    def __init__(self, **kw):
        for name in self.__slots__:
            setattr(self, name, kw.get(name))


class _Filter:
    """Batched nested filter over ``n_blocks`` independent particle systems."""

    def __init__(
        self,
        env: EnvironmentSpec,
        policy,
        n_outer: int,
        m_inner: Optional[int],
        cfg: PotentialConfig,
        mh: Optional[MhConfig],
        mode: str,
        resampling: bool,
        ess_threshold: float,
        rng: np.random.Generator,
        n_blocks: int = 1,
        horizon: Optional[int] = None,
        record_snapshots: bool = False,
        references: Optional[Sequence[_ReferenceData]] = None,
    ):
        if mode not in ("ibis", "exact"):
            raise ConfigurationError(f"unknown filter mode {mode!r}")
        if mode == "exact":
            if env.conditionally_linear is None or not isinstance(env.prior, GaussianSpec):
                raise ConfigurationError(
                    "exact mode needs a conditionally linear environment with a Gaussian prior"
                )
        if mode == "ibis" and (m_inner is None or m_inner < 1):
            raise ConfigurationError("ibis mode needs at least one inner particle")
        if n_outer < 1:
            raise ConfigurationError("need at least one outer particle")
        if references is not None and len(references) != n_blocks:
            raise ConfigurationError("one reference per block is required")
        self.env = env
        self.policy = policy
        self.N = n_outer
        self.M = m_inner
        self.cfg = cfg
        self.mh = mh
        self.mode = mode
        self.resampling = resampling
        self.ess_threshold = ess_threshold
        self.rng = rng
        self.n_blocks = n_blocks
        self.R = n_blocks * n_outer
        self.T = env.horizon if horizon is None else horizon
        self.record_snapshots = record_snapshots
        self.references = references
        self.ref_rows = (
            np.arange(n_blocks) * n_outer if references is not None else None
        )
        self.noise_var = float(env.noise_cov[0, 0]) if len(env.noisy_components) == 1 else None
        self.accepted = 0
        self.proposed = 0
        self._alloc()

    # ------------------------------------------------------------------ setup

    def _alloc(self):
        R, T, env = self.R, self.T, self.env
        self.x_hist = np.zeros((R, T + 1, env.state_dim))
        self.x_hist[:, 0] = env.x0
        self.xi_hist = np.zeros((R, T, env.design_dim))
        self.s_hist = np.zeros((R, T, env.design_dim))
        self.rewards = np.zeros((R, T))
        self.log_w = np.zeros(R)
        self.carry = self.policy.reset(R)
        if self.mode == "ibis":
            self.theta = self.env.prior_sample(self.rng, size=R * self.M).reshape(
                R, self.M, env.theta_dim
            )
            self.log_w_theta = np.full((R, self.M), -np.log(self.M))
            self.cum_ll = np.zeros((R, self.M))
        else:
            prior = self.env.prior
            self.conj_m = np.broadcast_to(prior.mean, (R, env.theta_dim)).copy()
            self.conj_P = np.broadcast_to(
                prior.covariance, (R, env.theta_dim, env.theta_dim)
            ).copy()
        if self.references is not None:
            self._replay_reference_posteriors(0)
        self.ancestors = np.empty((T, R), dtype=np.intp)
        self.snap_theta = [] if self.record_snapshots else None
        self.snap_w = [] if self.record_snapshots else None
        self.snap_cum = [] if self.record_snapshots else None
        self.snap_m = [] if self.record_snapshots else None
        self.snap_P = [] if self.record_snapshots else None

    def _replay_reference_posteriors(self, t: int):
        rows = self.ref_rows
        for b, ref in enumerate(self.references):
            r = rows[b]
            if self.mode == "ibis":
                self.theta[r] = ref.theta_snapshots[t]
                self.log_w_theta[r] = ref.theta_log_w_snapshots[t]
                self.cum_ll[r] = ref.cum_loglik_snapshots[t]
            else:
                self.conj_m[r] = ref.mean_snapshots[t]
                self.conj_P[r] = ref.cov_snapshots[t]

    # ------------------------------------------------------------ resampling

    def _block_multinomial(self, weights: np.ndarray, draws: int) -> np.ndarray:
        """Per-block categorical draws; returns global row indices (n_blocks, draws)."""
        cum = np.cumsum(weights, axis=1)
        cum[:, -1] = 1.0
        offs = 2.0 * np.arange(self.n_blocks)[:, None]
        flat_cum = (cum + offs).ravel()
        u = self.rng.random((self.n_blocks, draws))
        flat_u = (u + offs).ravel()
        idx = np.searchsorted(flat_cum, flat_u, side="right").reshape(self.n_blocks, draws)
        local = idx - np.arange(self.n_blocks)[:, None] * self.N
        return local + np.arange(self.n_blocks)[:, None] * self.N

    def _resample_outer(self, t: int):
        lw = self.log_w.reshape(self.n_blocks, self.N)
        w = np.exp(stats.normalize_log_weights(lw, axis=1))
        anc = self._block_multinomial(w, self.N)
        if self.references is not None:
            anc[:, 0] = self.ref_rows  # the reference survives in slot one
        anc = anc.ravel()
        self.ancestors[t] = anc
        # rows sharing an ancestor are bitwise copies until fresh noise enters;
        # record the structure so the policy forward can skip the duplicates
        _, first, inverse = np.unique(anc, return_index=True, return_inverse=True)
        self._duplicates = (first, inverse)
        self.x_hist[:, : t + 1] = self.x_hist[anc, : t + 1]
        self.xi_hist[:, :t] = self.xi_hist[anc, :t]
        self.s_hist[:, :t] = self.s_hist[anc, :t]
        self.rewards[:, :t] = self.rewards[anc, :t]
        if self.carry is not None:
            self.carry = self.carry.take(anc)
        if self.mode == "ibis":
            self.theta = self.theta[anc]
            self.log_w_theta = self.log_w_theta[anc]
            self.cum_ll = self.cum_ll[anc]
        else:
            self.conj_m = self.conj_m[anc]
            self.conj_P = self.conj_P[anc]

    # ------------------------------------------------------- inner rejuvenation

    def _rejuvenate(self, t: int):
        """Resample-move the rows whose inner cloud is degenerate."""
        w = np.exp(self.log_w_theta)
        ess = 1.0 / np.sum(w * w, axis=1)
        trigger = ess < self.ess_threshold * self.M
        if self.references is not None:
            trigger[self.ref_rows] = False  # reference posteriors are replayed
        rows = np.nonzero(trigger)[0]
        if rows.size == 0:
            return
        # per-row multinomial resampling of the inner clouds
        cum = np.cumsum(w[rows], axis=1)
        cum[:, -1] = 1.0
        offs = 2.0 * np.arange(rows.size)[:, None]
        flat_cum = (cum + offs).ravel()
        u = self.rng.random((rows.size, self.M))
        flat_u = (u + offs).ravel()
        local = (
            np.searchsorted(flat_cum, flat_u, side="right").reshape(rows.size, self.M)
            - np.arange(rows.size)[:, None] * self.M
        )
        thetas = self.theta[rows[:, None], local]
        cum_ll = self.cum_ll[rows[:, None], local]
        outcomes = self.x_hist[rows, : t + 1]
        designs = self.xi_hist[rows, :t]
        thetas, cum_ll, acc, tot = self._mh_sweeps_rows(thetas, cum_ll, outcomes, designs)
        self.accepted += acc
        self.proposed += tot
        self.theta[rows] = thetas
        self.cum_ll[rows] = cum_ll
        self.log_w_theta[rows] = -np.log(self.M)

    def _mh_sweeps_rows(self, thetas, cum_ll, outcomes, designs):
        """MH sweeps where every row has its own trajectory (K, t+1, dx)."""
        env, mh = self.env, self.mh
        prior_lp = posterior._prior_logpdf_batch(env.prior, thetas)
        accepted = 0
        total = int(np.prod(thetas.shape[:-1])) * mh.num_moves
        for _ in range(mh.num_moves):
            proposal, correction = posterior._propose_batch(thetas, mh, self.rng)
            prop_prior = posterior._prior_logpdf_batch(env.prior, proposal)
            prop_ll = self._loglik_rows(proposal, outcomes, designs)
            log_alpha = (prop_prior + prop_ll) - (prior_lp + cum_ll) + correction
            accept = np.log(self.rng.random(log_alpha.shape)) < log_alpha
            accepted += int(np.count_nonzero(accept))
            thetas = np.where(accept[..., None], proposal, thetas)
            cum_ll = np.where(accept, prop_ll, cum_ll)
            prior_lp = np.where(accept, prop_prior, prior_lp)
        return thetas, cum_ll, accepted, total

    def _loglik_rows(self, thetas, outcomes, designs):
        total = np.zeros(thetas.shape[:-1])
        for s in range(designs.shape[1]):
            total = total + models.transition_logpdf(
                self.env,
                outcomes[:, s + 1][:, None, :],
                outcomes[:, s][:, None, :],
                designs[:, s][:, None, :],
                thetas,
                validate=False,
            )
        return total

    # ------------------------------------------------------------- propagate

    def _record_snapshots(self):
        if not self.record_snapshots:
            return
        if self.mode == "ibis":
            self.snap_theta.append(self.theta.copy())
            self.snap_w.append(self.log_w_theta.copy())
            self.snap_cum.append(self.cum_ll.copy())
        else:
            self.snap_m.append(self.conj_m.copy())
            self.snap_P.append(self.conj_P.copy())

    def _sample_designs(self, t: int):
        x = self.x_hist[:, t]
        xi_prev = (
            self.xi_hist[:, t - 1]
            if t > 0
            else np.zeros((self.R, self.env.design_dim))
        )
        xi, s, self.carry = self.policy.sample(
            self.carry, x, xi_prev, self.rng, duplicates=self._duplicates
        )
        if self.references is not None:
            for b, ref in enumerate(self.references):
                r = self.ref_rows[b]
                xi[r] = ref.designs[t]
                s[r] = ref.presquash[t]
        return xi, s

    def _propagate_ibis(self, t: int, xi: np.ndarray) -> np.ndarray:
        w = np.exp(self.log_w_theta)
        cum = np.cumsum(w, axis=1)
        cum[:, -1] = 1.0
        u = self.rng.random(self.R)
        pick = np.sum(u[:, None] >= cum, axis=1)
        theta_sel = self.theta[np.arange(self.R), pick]
        eps = self.rng.standard_normal((self.R, self.env.diffusion.shape[1]))
        return models.em_step(self.env, self.x_hist[:, t], xi, theta_sel, noise=eps)

    def _propagate_exact(self, t: int, xi: np.ndarray) -> np.ndarray:
        env = self.env
        x = self.x_hist[:, t]
        h, offset, var = models.linear_observation(env, x, xi)
        Ph = np.einsum("rij,rj->ri", self.conj_P, h)
        S = np.einsum("ri,ri->r", h, Ph) + var
        mean = offset + np.einsum("ri,ri->r", h, self.conj_m)
        y = mean + np.sqrt(S) * self.rng.standard_normal(self.R)
        # theta-free components advance deterministically
        mu = env.drift(x, xi, self.conj_m)
        x_next = x + mu * env.dt
        x_next[:, env.noisy_components[0]] = y
        return x_next

    def _score_ibis(self, t: int, xi: np.ndarray, x_next: np.ndarray):
        loglik = models.transition_logpdf(
            self.env,
            x_next[:, None, :],
            self.x_hist[:, t][:, None, :],
            xi[:, None, :],
            self.theta,
            validate=False,
        )
        try:
            alpha, beta, log_w_new = _reward_terms(self.log_w_theta, loglik)
        except DegenerateWeightsError as err:
            raise DegeneracyError(str(err), step=t + 1) from err
        self.log_w_theta = log_w_new
        self.cum_ll = self.cum_ll + loglik
        return alpha, beta

    def _score_exact(self, t: int, xi: np.ndarray, x_next: np.ndarray):
        env = self.env
        x = self.x_hist[:, t]
        y = x_next[:, env.noisy_components[0]]
        h, offset, var = models.linear_observation(env, x, xi)
        Ph = np.einsum("rij,rj->ri", self.conj_P, h)
        S = np.einsum("ri,ri->r", h, Ph) + var
        innov = y - offset - np.einsum("ri,ri->r", h, self.conj_m)
        beta = 0.5 * (_LOG_2PI + np.log(S) + innov * innov / S)
        gain = Ph / S[:, None]
        m_new = self.conj_m + gain * innov[:, None]
        P_new = self.conj_P - gain[:, :, None] * Ph[:, None, :]
        P_new = 0.5 * (P_new + np.transpose(P_new, (0, 2, 1)))
        resid = y - offset - np.einsum("ri,ri->r", h, m_new)
        hPh_new = np.einsum("ri,rij,rj->r", h, P_new, h)
        alpha = -0.5 * (_LOG_2PI + np.log(var) + (resid * resid + hPh_new) / var)
        self.conj_m = m_new
        self.conj_P = P_new
        return alpha, beta

    # ------------------------------------------------------------------- run

    def run(self):
        for t in range(self.T):
            if t == 0:
                # every row starts from the same state, carry and padding design
                self._duplicates = (np.zeros(1, dtype=np.intp), np.zeros(self.R, dtype=np.intp))
            if t > 0:
                if self.resampling:
                    self._resample_outer(t)
                else:
                    self.ancestors[t] = np.arange(self.R)
                    self._duplicates = None
                if self.mode == "ibis" and self.ess_threshold > 0.0:
                    self._rejuvenate(t)
                if self.references is not None:
                    self._replay_reference_posteriors(t)
            self._record_snapshots()
            xi, s = self._sample_designs(t)
            if self.mode == "ibis":
                x_next = self._propagate_ibis(t, xi)
            else:
                x_next = self._propagate_exact(t, xi)
            if self.references is not None:
                for b, ref in enumerate(self.references):
                    x_next[self.ref_rows[b]] = ref.outcomes[t + 1]
            alpha, beta = (
                self._score_ibis(t, xi, x_next)
                if self.mode == "ibis"
                else self._score_exact(t, xi, x_next)
            )
            self.rewards[:, t] = alpha + beta
            r_for_weight = alpha + beta if self.cfg.reward_form == "general" else beta
            xi_prev = self.xi_hist[:, t - 1] if t > 0 else None
            self.log_w = potential_log(r_for_weight, xi, xi_prev, self.cfg)
            self.xi_hist[:, t] = xi
            self.s_hist[:, t] = s
            self.x_hist[:, t + 1] = x_next
        return self

    # ------------------------------------------------------------- extraction

    def acceptance_rate(self) -> float:
        return self.accepted / self.proposed if self.proposed else -1.0

    def result(self) -> WeightedTrajectorySet:
        out = WeightedTrajectorySet(
            env=self.env,
            mode=self.mode,
            outcomes=self.x_hist,
            designs=self.xi_hist,
            presquash=self.s_hist,
            log_weights=stats.normalize_log_weights(
                self.log_w.reshape(self.n_blocks, self.N), axis=1
            ).ravel(),
            reward_history=self.rewards,
        )
        if self.mode == "ibis":
            out.theta_particles = self.theta
            out.theta_log_weights = self.log_w_theta
        else:
            out.conj_means = self.conj_m
            out.conj_covs = self.conj_P
        return out

    def select_rows(self) -> np.ndarray:
        """Terminal multinomial selection, one row per block."""
        lw = self.log_w.reshape(self.n_blocks, self.N)
        w = np.exp(stats.normalize_log_weights(lw, axis=1))
        return self._block_multinomial(w, 1)[:, 0]

    def lineage(self, row: int) -> np.ndarray:
        """Row index occupied by ``row``'s ancestry at each step."""
        rows = np.empty(self.T, dtype=np.intp)
        r = row
        for t in range(self.T - 1, 0, -1):
            rows[t] = r
            r = self.ancestors[t][r]
        rows[0] = r
        return rows

    def extract_reference(self, row: int) -> _ReferenceData:
        """Reference bundle (trajectory plus posterior snapshots) for a final row."""
        if not self.record_snapshots:
            raise RuntimeError("filter ran without snapshot recording")
        rows = self.lineage(row)
        data = dict(
            outcomes=self.x_hist[row].copy(),
            designs=self.xi_hist[row].copy(),
            presquash=self.s_hist[row].copy(),
        )
        if self.mode == "ibis":
            data["theta_snapshots"] = np.stack(
                [self.snap_theta[t][rows[t]] for t in range(self.T)]
            )
            data["theta_log_w_snapshots"] = np.stack(
                [self.snap_w[t][rows[t]] for t in range(self.T)]
            )
            data["cum_loglik_snapshots"] = np.stack(
                [self.snap_cum[t][rows[t]] for t in range(self.T)]
            )
        else:
            data["mean_snapshots"] = np.stack(
                [self.snap_m[t][rows[t]] for t in range(self.T)]
            )
            data["cov_snapshots"] = np.stack(
                [self.snap_P[t][rows[t]] for t in range(self.T)]
            )
        return _ReferenceData(**data)


def run_filter(
    env: EnvironmentSpec,
    policy,
    n_outer: int,
    m_inner: Optional[int],
    cfg: PotentialConfig,
    mh: Optional[MhConfig],
    rng: np.random.Generator,
    mode: str,
    resampling: bool = True,
    ess_threshold: float = 0.75,
    n_blocks: int = 1,
    horizon: Optional[int] = None,
    record_snapshots: bool = False,
    references=None,
    mean_only: bool = False,
) -> _Filter:
    """Construct and run the batched filter; returns the finished engine."""
    rollout = as_rollout_policy(policy, mean_only=mean_only)
    filt = _Filter(
        env,
        rollout,
        n_outer,
        m_inner,
        cfg,
        mh,
        mode,
        resampling,
        ess_threshold,
        rng,
        n_blocks=n_blocks,
        horizon=horizon,
        record_snapshots=record_snapshots,
        references=references,
    )
    return filt.run()


def io_smc2(
    env: EnvironmentSpec,
    policy,
    n_outer: int,
    m_inner: int,
    cfg: PotentialConfig,
    mh: MhConfig,
    rng: np.random.Generator,
    resampling: bool = True,
    ess_threshold: float = 0.75,
    horizon: Optional[int] = None,
) -> WeightedTrajectorySet:
    """Nested filter with inner particle posteriors (the general algorithm).

    With ``resampling`` off the outer particles never interact and the pass
    reduces to N independent draws from the policy-induced marginal dynamics,
    which is the configuration the information-gain estimator uses.
    """
    return run_filter(
        env,
        policy,
        n_outer,
        m_inner,
        cfg,
        mh,
        rng,
        mode="ibis",
        resampling=resampling,
        ess_threshold=ess_threshold,
        horizon=horizon,
    ).result()


def io_smc2_exact(
    env: EnvironmentSpec,
    policy,
    n_outer: int,
    cfg: PotentialConfig,
    rng: np.random.Generator,
    resampling: bool = True,
    horizon: Optional[int] = None,
) -> WeightedTrajectorySet:
    """Filter variant with closed-form Gaussian parameter posteriors.

    Requires a conditionally linear environment with a Gaussian prior; raises
    :class:`ConfigurationError` otherwise.
    """
    return run_filter(
        env,
        policy,
        n_outer,
        None,
        cfg,
        None,
        rng,
        mode="exact",
        resampling=resampling,
        horizon=horizon,
    ).result()


_DUMP_SCHEMA_VERSION = 1


def write_rollout_csv(path, trajectories: WeightedTrajectorySet, index: int) -> None:
    """Dump one rollout: t, state components, design, stage reward, outer weight.

    Row t carries the design that produced x_t and the information increment
    scored at that transition; both are zero-padded at t=0.  The trajectory's
    normalized outer weight is repeated on every row.
    """
    env = trajectories.env
    weight = trajectories.weights()[index]
    lines = [f"# rollout schema v{_DUMP_SCHEMA_VERSION}"]
    header = ["t", *env.state_labels, "design", "stage_reward", "outer_weight"]
    lines.append(",".join(header))
    T = trajectories.designs.shape[1]
    for t in range(T + 1):
        x = trajectories.outcomes[index, t]
        design = 0.0 if t == 0 else float(trajectories.designs[index, t - 1, 0])
        reward = 0.0 if t == 0 else float(trajectories.reward_history[index, t - 1])
        cells = [str(t), *(repr(float(v)) for v in x), repr(design), repr(reward), repr(float(weight))]
        lines.append(",".join(cells))
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")
