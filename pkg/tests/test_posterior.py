import numpy as np
import pytest
from scipy import stats as sps

from smcbed import models
from smcbed.models import Trajectory, linear_observation
from smcbed.posterior import (
    ConjugatePosterior,
    MhConfig,
    ThetaParticleSet,
    conjugate_marginal_logpdf,
    conjugate_update,
    ibis_step,
    mh_move,
    particle_marginal_logpdf,
    trajectory_loglik,
)
from smcbed.stats import DegenerateWeightsError, GaussianSpec, gaussian_logpdf
from tests.conftest import make_theta_free_env, rollout_random


def grid_posterior_1d(prior_mean, prior_var, observations, hs, noise_var, lo=-30, hi=30, n=200_001):
    """Dense-grid Bayes rule for y_k = h_k * theta + noise; returns (mean, var)."""
    theta = np.linspace(lo, hi, n)
    log_post = -0.5 * (theta - prior_mean) ** 2 / prior_var
    for y, h in zip(observations, hs):
        log_post += -0.5 * (y - h * theta) ** 2 / noise_var
    log_post -= log_post.max()
    w = np.exp(log_post)
    w /= np.trapezoid(w, theta)
    mean = np.trapezoid(w * theta, theta)
    var = np.trapezoid(w * (theta - mean) ** 2, theta)
    return mean, var


class TestConjugateUpdate:
    def test_scalar_kalman_half_gain(self):
        post = ConjugatePosterior(np.zeros(1), np.ones((1, 1)))
        for y in (-1.3, 0.0, 2.4):
            out = conjugate_update(post, y, np.ones((1, 1)), np.ones((1, 1)))
            assert out.mean[0] == pytest.approx(y / 2)
            assert out.covariance[0, 0] == pytest.approx(0.5)

    def test_certain_prior_never_moves(self):
        post = ConjugatePosterior(np.array([1.7]), np.zeros((1, 1)))
        out = conjugate_update(post, 5.0, np.ones((1, 1)), np.ones((1, 1)))
        assert out.mean[0] == pytest.approx(1.7)
        assert out.covariance[0, 0] == pytest.approx(0.0)

    def test_matches_grid_bayes_1d(self):
        rng = np.random.default_rng(0)
        post = ConjugatePosterior(np.array([1.0]), np.array([[2.0]]))
        ys, hs = [], []
        noise_var = 0.5
        for _ in range(6):
            h = rng.uniform(0.3, 1.5)
            y = rng.normal(0.8 * h, np.sqrt(noise_var))
            post = conjugate_update(post, y, np.array([[h]]), np.array([[noise_var]]))
            ys.append(y)
            hs.append(h)
        g_mean, g_var = grid_posterior_1d(1.0, 2.0, ys, hs, noise_var)
        assert post.mean[0] == pytest.approx(g_mean, abs=1e-3)
        assert post.covariance[0, 0] == pytest.approx(g_var, rel=1e-3)

    def test_sequential_equals_stacked(self):
        rng = np.random.default_rng(1)
        post0 = ConjugatePosterior(rng.standard_normal(3), np.eye(3) * 1.5)
        H = rng.standard_normal((2, 3))
        y = rng.standard_normal(2)
        noise = np.diag([0.3, 0.7])
        seq = conjugate_update(post0, y[0], H[0:1], noise[0:1, 0:1])
        seq = conjugate_update(seq, y[1], H[1:2], noise[1:2, 1:2])
        stacked = conjugate_update(post0, y, H, noise)
        assert np.allclose(seq.mean, stacked.mean, atol=1e-10)
        assert np.allclose(seq.covariance, stacked.covariance, atol=1e-10)

    def test_covariance_shrinks_in_loewner_order(self):
        rng = np.random.default_rng(2)
        post = ConjugatePosterior(np.zeros(3), np.eye(3))
        for _ in range(10):
            H = rng.standard_normal((1, 3))
            y = rng.standard_normal(1)
            new = conjugate_update(post, y, H, np.array([[0.2]]))
            eigs = np.linalg.eigvalsh(post.covariance - new.covariance)
            assert eigs.min() >= -1e-10
            post = new


class TestConjugateMarginal:
    def test_certain_prior_reduces_to_noise_density(self):
        post = ConjugatePosterior(np.array([0.5]), np.zeros((1, 1)))
        got = conjugate_marginal_logpdf(post, 1.2, np.array([[2.0]]), np.array([[0.3]]))
        expected = gaussian_logpdf(np.array([1.2]), GaussianSpec(np.array([1.0]), np.array([[0.3]])))
        assert got == pytest.approx(expected)

    def test_unit_case_value(self):
        post = ConjugatePosterior(np.zeros(1), np.ones((1, 1)))
        got = conjugate_marginal_logpdf(post, 0.0, np.ones((1, 1)), np.ones((1, 1)))
        assert got == pytest.approx(-0.5 * np.log(4 * np.pi))

    def test_matches_quadrature(self):
        # log integral N(y | h theta, s) N(theta | m, p) dtheta on a dense grid
        m, p, h, s, y = 0.4, 1.3, 0.8, 0.6, 1.1
        theta = np.linspace(-20, 20, 400_001)
        integrand = (
            np.exp(-0.5 * (y - h * theta) ** 2 / s)
            / np.sqrt(2 * np.pi * s)
            * np.exp(-0.5 * (theta - m) ** 2 / p)
            / np.sqrt(2 * np.pi * p)
        )
        expected = np.log(np.trapezoid(integrand, theta))
        post = ConjugatePosterior(np.array([m]), np.array([[p]]))
        got = conjugate_marginal_logpdf(post, y, np.array([[h]]), np.array([[s]]))
        assert got == pytest.approx(expected, abs=1e-6)


class TestParticleMarginal:
    def test_single_particle_equals_transition(self):
        env = models.make_pendulum_linear()
        rng = np.random.default_rng(3)
        theta = env.prior_sample(rng)
        x = np.array([0.1, 0.2])
        xi = np.array([1.0])
        nxt = models.em_step(env, x, xi, theta, rng)
        tset = ThetaParticleSet(theta[None, :], np.zeros(1))
        assert particle_marginal_logpdf(tset, env, nxt, x, xi) == pytest.approx(
            float(models.transition_logpdf(env, nxt, x, xi, theta))
        )

    def test_equal_likelihood_particles(self):
        env = make_theta_free_env()
        rng = np.random.default_rng(4)
        x = np.zeros(1)
        xi = np.array([0.5])
        nxt = models.em_step(env, x, xi, np.zeros(1), rng)
        tset = ThetaParticleSet(rng.standard_normal((2, 1)), np.zeros(2))
        single = ThetaParticleSet(np.zeros((1, 1)), np.zeros(1))
        assert particle_marginal_logpdf(tset, env, nxt, x, xi) == pytest.approx(
            particle_marginal_logpdf(single, env, nxt, x, xi)
        )

    def test_prior_cloud_matches_conjugate_marginal(self):
        env = models.make_pendulum_linear()
        x = np.array([0.3, -0.5])
        xi = np.array([1.2])
        rng = np.random.default_rng(5)
        nxt = models.em_step(env, x, xi, env.prior.mean, rng)
        H, offset, var = linear_observation(env, x, xi)
        post = ConjugatePosterior.from_prior(env.prior)
        expected = conjugate_marginal_logpdf(post, nxt[1] - offset, H[None, :], np.array([[var]]))
        # Monte Carlo standard error estimated by splitting into groups
        groups = []
        for g in range(16):
            tset = ThetaParticleSet.from_prior(env, 4096, rng)
            groups.append(particle_marginal_logpdf(tset, env, nxt, x, xi))
        groups = np.asarray(groups)
        se = groups.std(ddof=1) / np.sqrt(len(groups))
        assert abs(groups.mean() - expected) < 3 * se + 1e-9


class TestMhMove:
    def test_flat_target_always_accepts(self):
        mh = MhConfig(step_scale=0.01, num_moves=1)
        rng = np.random.default_rng(6)
        theta = np.zeros(2)
        for _ in range(200):
            theta, accepted = mh_move(theta, lambda th: 0.0, mh, rng)
            assert accepted

    def test_long_run_moments_on_standard_normal(self):
        mh = MhConfig(step_scale=5.8, num_moves=1)  # near-optimal scale in 1-d
        rng = np.random.default_rng(7)
        target = lambda th: float(-0.5 * th @ th)
        theta = np.zeros(1)
        samples = np.empty(100_000)
        for i in range(samples.size):
            theta, _ = mh_move(theta, target, mh, rng)
            samples[i] = theta[0]
        assert abs(samples.mean()) < 0.02
        assert abs(samples.var() - 1.0) < 0.05

    def test_chain_matches_direct_samples_ks(self):
        mh = MhConfig(step_scale=5.8, num_moves=1)
        rng = np.random.default_rng(8)
        target = lambda th: float(-0.5 * th @ th)
        theta = np.zeros(1)
        chain = np.empty(4000)
        for i in range(40_000):
            theta, _ = mh_move(theta, target, mh, rng)
            if i % 10 == 9:
                chain[i // 10] = theta[0]
        direct = rng.standard_normal(4000)
        assert sps.ks_2samp(chain, direct).pvalue > 0.01

    def test_lognormal_walk_preserves_lognormal_target(self):
        # the Hastings correction is what keeps this invariant; without it the
        # chain drifts toward small values
        mh = MhConfig(step_scale=1.0, num_moves=1, proposal_family="lognormal-walk")
        rng = np.random.default_rng(9)
        mu, sig2 = 0.3, 0.5

        def target(th):
            lt = np.log(th[0])
            return float(-0.5 * (lt - mu) ** 2 / sig2 - lt)

        theta = np.ones(1)
        chain = np.empty(5000)
        for i in range(50_000):
            theta, _ = mh_move(theta, target, mh, rng)
            if i % 10 == 9:
                chain[i // 10] = theta[0]
        direct = np.exp(mu + np.sqrt(sig2) * rng.standard_normal(5000))
        assert sps.ks_2samp(chain, direct).pvalue > 0.01

    def test_infinite_start_rejected(self):
        mh = MhConfig(step_scale=0.1)
        with pytest.raises(ValueError):
            mh_move(np.array([0.0]), lambda th: -np.inf, mh, np.random.default_rng(0))


class TestIbisStep:
    def test_constant_likelihood_keeps_weights(self):
        env = make_theta_free_env()
        rng = np.random.default_rng(10)
        traj = rollout_random(env, np.zeros(1), 3, rng)
        lw = np.log(np.array([0.1, 0.2, 0.3, 0.4]))
        tset = ThetaParticleSet(rng.standard_normal((4, 1)), lw)
        out = ibis_step(traj, tset, env, MhConfig(0.1), 0.75, rng)
        assert np.allclose(out.weights(), tset.weights(), atol=1e-12)

    def test_two_point_bayes(self):
        # likelihood ratio e between two particles -> weights e/(1+e), 1/(1+e)
        from tests.conftest import make_scalar_linear_env

        env = make_scalar_linear_env()
        var = 0.01 * env.dt
        theta_hi = np.sqrt(2 * var) / env.dt
        states = (
            models.AugmentedState(np.zeros(1)),
            models.AugmentedState(np.zeros(1), np.array([0.0])),
        )
        traj = Trajectory(states)
        tset = ThetaParticleSet(np.array([[0.0], [theta_hi]]), np.zeros(2))
        out = ibis_step(traj, tset, env, MhConfig(0.1), 0.75, np.random.default_rng(11))
        e = np.e
        assert out.weights()[0] == pytest.approx(e / (1 + e))
        assert out.weights()[1] == pytest.approx(1 / (1 + e))

    def test_threshold_zero_reproduces_plain_importance_weights(self):
        env = models.make_pendulum_linear()
        rng = np.random.default_rng(12)
        theta_true = env.prior_sample(rng)
        traj = rollout_random(env, theta_true, 8, rng)
        tset = ThetaParticleSet.from_prior(env, 256, rng)
        expected = tset.log_weights + trajectory_loglik(
            env, tset.particles, traj.outcomes(), traj.designs()
        )
        expected = expected - np.log(np.sum(np.exp(expected - expected.max()))) - expected.max()
        running = tset
        for t in range(1, 9):
            sub = Trajectory(traj.states[: t + 1])
            running = ibis_step(sub, running, env, MhConfig(0.1), 0.0, rng)
        assert np.allclose(running.log_weights, expected, atol=1e-10)
        assert np.array_equal(running.particles, tset.particles)

    def test_tracks_conjugate_posterior(self):
        env = models.make_pendulum_linear()
        mh = MhConfig(0.05, 5, "gaussian-walk")
        rng = np.random.default_rng(13)
        theta_true = env.prior_sample(rng)
        traj = rollout_random(env, theta_true, 10, rng)
        post = ConjugatePosterior.from_prior(env.prior)
        for t in range(10):
            H, off, var = linear_observation(env, traj.states[t].x, traj.states[t + 1].design)
            post = conjugate_update(post, traj.states[t + 1].x[1] - off, H, var)
        tset = ThetaParticleSet.from_prior(env, 2048, rng)
        for t in range(1, 11):
            tset = ibis_step(Trajectory(traj.states[: t + 1]), tset, env, mh, 0.75, rng)
        mean, cov = tset.mean_cov()
        assert np.max(np.abs(mean - post.mean)) < 0.1
        assert np.linalg.norm(cov - post.covariance) < 0.15 * np.linalg.norm(post.covariance)

    def test_impossible_trajectory_raises_degeneracy(self):
        # drift so steep that every particle's prediction overflows the
        # residual: the trajectory is impossible under the whole cloud
        from smcbed.models import EnvironmentSpec
        from smcbed.stats import GaussianSpec

        env = EnvironmentSpec(
            name="steep",
            state_dim=1,
            design_dim=1,
            theta_dim=1,
            dt=0.05,
            horizon=2,
            x0=np.zeros(1),
            drift=lambda x, xi, th: 1e200 * th[..., :1] * np.ones_like(x),
            diffusion=np.array([[0.1]]),
            noisy_components=(0,),
            theta_free_components=(),
            prior=GaussianSpec(np.zeros(1), np.eye(1)),
            design_scale=1.0,
            design_shift=0.0,
            state_labels=("y",),
        )
        rng = np.random.default_rng(14)
        traj = rollout_random(env, np.zeros(1), 2, rng)
        tset = ThetaParticleSet(np.ones((3, 1)), np.zeros(3))
        with pytest.raises(DegenerateWeightsError):
            ibis_step(traj, tset, env, MhConfig(0.1), 0.75, rng)


class TestAcceptanceBand:
    def test_default_step_scale_lands_in_band(self):
        # mean rejuvenation acceptance across a full pass on the linear
        # pendulum with the shipped default scale
        from smcbed.config import default_config
        from smcbed.policy import RandomPolicy
        from smcbed.smc import PotentialConfig, run_filter

        cfg = default_config("pendulum_linear")
        env = models.make_pendulum_linear()
        rates = []
        for seed in range(3):
            filt = run_filter(
                env,
                RandomPolicy(env),
                64,
                64,
                PotentialConfig(eta=0.5, slew_penalty=0.1),
                cfg.train.mh,
                np.random.default_rng(seed),
                mode="ibis",
            )
            rates.append(filt.acceptance_rate())
        assert 0.15 <= np.mean(rates) <= 0.4
