"""Amortized Bayesian experimental design for dynamical systems.

The package trains a recurrent stochastic design policy by score ascent over
a conditional nested particle filter, and evaluates policies with Monte Carlo
information-gain estimates and the prior-contrastive lower bound.
"""

from .csmc import ReferenceTrajectory, csmc_kernel
from .evaluation import (
    EigEstimate,
    SpceEstimate,
    estimate_eig,
    info_gain_trace_exact,
    spce_bound,
)
from .models import (
    AugmentedState,
    EnvironmentSpec,
    InconsistentTrajectoryError,
    Trajectory,
    em_step,
    environment_by_name,
    make_cartpole,
    make_pendulum_linear,
    make_pendulum_nonlinear,
    transition_logpdf,
)
from .policy import (
    PolicyParameters,
    PolicyState,
    RandomPolicy,
    RecurrentPolicy,
    load_policy,
    policy_init,
    policy_logpdf,
    policy_logpdf_grad,
    policy_sample,
    policy_step,
    random_policy_sample,
    save_policy,
)
from .posterior import (
    ConjugatePosterior,
    MhConfig,
    ThetaParticleSet,
    conjugate_marginal_logpdf,
    conjugate_update,
    ibis_step,
    mh_move,
    particle_marginal_logpdf,
)
from .smc import (
    ConfigurationError,
    DegeneracyError,
    PotentialConfig,
    WeightedTrajectorySet,
    io_smc2,
    io_smc2_exact,
    potential_log,
    stage_reward,
)
from .stats import (
    DegenerateWeightsError,
    GaussianSpec,
    LogNormalSpec,
    LogWeights,
    ess,
    gaussian_logpdf,
    gaussian_sample,
    log_sum_exp,
    lognormal_logpdf,
    lognormal_sample,
    multinomial_resample,
    weighted_mean_cov,
)
from .training import TrainConfig, TrainState, msc_step, score_estimate, train

__version__ = "0.1.0"
