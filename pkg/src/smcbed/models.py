"""Environment abstraction: SDE dynamics discretized by Euler-Maruyama.

An environment couples a drift field, a constant diffusion matrix, a parameter
prior and design constraints.  The diffusion matrices used here are degenerate
(noise enters a single state component), so transition densities are evaluated
over the noisy components only; the remaining components are deterministic
given the previous state.  Components whose deterministic update does not
depend on the parameters (``theta_free_components``) are checked against their
prediction to reject trajectories that were not produced by these dynamics.
Deterministic components that do depend on the parameters (the cart-pole pole
velocity) are excluded from both the density and the check, otherwise
evaluating the likelihood of a trajectory under a different parameter value
would always fail.

All drift functions broadcast over leading batch dimensions, so a single call
evaluates e.g. N trajectories against M parameter particles each.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence, Union

import numpy as np

from .stats import GaussianSpec, LogNormalSpec

__all__ = [
    "InconsistentTrajectoryError",
    "AugmentedState",
    "Trajectory",
    "ConditionallyLinearMap",
    "EnvironmentSpec",
    "em_step",
    "transition_logpdf",
    "linear_observation",
    "make_pendulum_linear",
    "make_pendulum_nonlinear",
    "make_cartpole",
    "environment_by_name",
    "ENVIRONMENT_NAMES",
]

_LOG_2PI = float(np.log(2.0 * np.pi))

GRAVITY = 9.81


class InconsistentTrajectoryError(ValueError):
    """A state pair violates the deterministic part of the dynamics."""


@dataclass(frozen=True)
class AugmentedState:
    """State/design pair: the outcome x_t together with the design that produced it.

    ``design`` is absent at t=0.  ``presquash`` optionally carries the
    pre-squash value of the design for policies that squash through tanh;
    storing it keeps log-density gradients exact when the squash saturates in
    floating point.
    """

    x: np.ndarray
    design: Optional[np.ndarray] = None
    presquash: Optional[np.ndarray] = None

    def __post_init__(self):
        object.__setattr__(self, "x", np.atleast_1d(np.asarray(self.x, dtype=float)))
        if self.design is not None:
            object.__setattr__(
                self, "design", np.atleast_1d(np.asarray(self.design, dtype=float))
            )
        if self.presquash is not None:
            object.__setattr__(
                self, "presquash", np.atleast_1d(np.asarray(self.presquash, dtype=float))
            )


@dataclass(frozen=True)
class Trajectory:
    """History z_{0:t}: states[0] has no design, all later states do."""

    states: tuple

    def __post_init__(self):
        states = tuple(self.states)
        if not states:
            raise ValueError("trajectory must contain at least the initial state")
        if states[0].design is not None:
            raise ValueError("initial state must not carry a design")
        if any(s.design is None for s in states[1:]):
            raise ValueError("non-initial states must carry designs")
        object.__setattr__(self, "states", states)

    def __len__(self) -> int:
        return len(self.states)

    @property
    def horizon(self) -> int:
        """Number of transitions (designs) in the trajectory."""
        return len(self.states) - 1

    def outcomes(self) -> np.ndarray:
        """Stacked states x_{0:t}, shape (t+1, state_dim)."""
        return np.stack([s.x for s in self.states])

    def designs(self) -> np.ndarray:
        """Stacked designs xi_{0:t-1}, shape (t, design_dim)."""
        return np.stack([s.design for s in self.states[1:]])

    def presquash_values(self) -> Optional[np.ndarray]:
        vals = [s.presquash for s in self.states[1:]]
        if any(v is None for v in vals):
            return None
        return np.stack(vals)

    @staticmethod
    def from_arrays(outcomes, designs, presquash=None) -> "Trajectory":
        outcomes = np.asarray(outcomes, dtype=float)
        designs = np.asarray(designs, dtype=float)
        states = [AugmentedState(outcomes[0])]
        for t in range(designs.shape[0]):
            s = None if presquash is None else presquash[t]
            states.append(AugmentedState(outcomes[t + 1], designs[t], s))
        return Trajectory(tuple(states))


@dataclass(frozen=True)
class ConditionallyLinearMap:
    """Marks the noisy-component drift as features(x, xi) . theta.

    Environments carrying this map admit closed-form Gaussian parameter
    posteriors; all non-noisy drift components must then be theta-free.
    """

    features: Callable[[np.ndarray, np.ndarray], np.ndarray]


@dataclass(frozen=True)
class EnvironmentSpec:
    name: str
    state_dim: int
    design_dim: int
    theta_dim: int
    dt: float
    horizon: int
    x0: np.ndarray
    drift: Callable[[np.ndarray, np.ndarray, np.ndarray], np.ndarray]
    diffusion: np.ndarray
    noisy_components: tuple
    theta_free_components: tuple
    prior: Union[GaussianSpec, LogNormalSpec]
    design_scale: float
    design_shift: float
    state_labels: tuple
    conditionally_linear: Optional[ConditionallyLinearMap] = None
    # optional fast path: drift of the single noisy component only, used in the
    # inner likelihood loops where the full state stack would be wasted work
    noisy_drift: Optional[Callable[[np.ndarray, np.ndarray, np.ndarray], np.ndarray]] = None

    def __post_init__(self):
        object.__setattr__(self, "x0", np.asarray(self.x0, dtype=float))
        object.__setattr__(self, "diffusion", np.asarray(self.diffusion, dtype=float))
        if self.dt <= 0:
            raise ValueError("dt must be positive")
        if self.design_scale <= 0:
            raise ValueError("design scale must be positive")
        rows_with_noise = tuple(
            int(i) for i in np.nonzero(np.any(self.diffusion != 0.0, axis=1))[0]
        )
        if rows_with_noise != tuple(sorted(self.noisy_components)):
            raise ValueError("diffusion rows must be nonzero exactly at noisy_components")
        full = self.diffusion @ self.diffusion.T * self.dt
        idx = np.asarray(self.noisy_components, dtype=np.intp)
        object.__setattr__(self, "_noise_cov", full[np.ix_(idx, idx)])

    @property
    def design_low(self) -> float:
        return self.design_shift - self.design_scale

    @property
    def design_high(self) -> float:
        return self.design_shift + self.design_scale

    @property
    def noise_cov(self) -> np.ndarray:
        """Transition covariance (L L^T dt) restricted to the noisy components."""
        return self._noise_cov

    def prior_sample(self, rng: np.random.Generator, size=None) -> np.ndarray:
        from . import stats

        if isinstance(self.prior, LogNormalSpec):
            return stats.lognormal_sample(self.prior, rng, size=size)
        return stats.gaussian_sample(self.prior, rng, size=size)

    def prior_logpdf(self, theta: np.ndarray) -> float:
        from . import stats

        if isinstance(self.prior, LogNormalSpec):
            return stats.lognormal_logpdf(theta, self.prior)
        return stats.gaussian_logpdf(theta, self.prior)


def _validate_design(env: EnvironmentSpec, xi: np.ndarray):
    if np.any(xi < env.design_low - 1e-12) or np.any(xi > env.design_high + 1e-12):
        raise ValueError(
            f"design outside [{env.design_low}, {env.design_high}] for {env.name}"
        )


def em_step(env, x, xi, theta, rng=None, noise=None):
    """One Euler-Maruyama transition x' = x + drift dt + L sqrt(dt) eps.

    ``noise`` overrides the standard-normal increment (useful for
    deterministic checks); otherwise it is drawn from ``rng``.  Broadcasts
    over leading dimensions of (x, xi, theta).
    """
    x = np.asarray(x, dtype=float)
    xi = np.asarray(xi, dtype=float)
    theta = np.asarray(theta, dtype=float)
    _validate_design(env, xi)
    with np.errstate(divide="ignore", invalid="ignore"):
        mu = env.drift(x, xi, theta)
    if not np.all(np.isfinite(mu)):
        raise ValueError("drift is not finite at the given (x, xi, theta)")
    if noise is None:
        if rng is None:
            raise ValueError("either rng or noise must be supplied")
        noise = rng.standard_normal(x.shape[:-1] + (env.diffusion.shape[1],))
    noise = np.asarray(noise, dtype=float)
    return x + mu * env.dt + np.sqrt(env.dt) * noise @ env.diffusion.T


def transition_logpdf(env, x_next, x, xi, theta, validate: bool = True):
    """Gaussian log-density of the noisy components of ``x_next``.

    The mean is the Euler-Maruyama prediction and the covariance is
    (L L^T dt) restricted to the noisy components.  With ``validate`` on, the
    theta-free deterministic components must match their prediction to 1e-9,
    otherwise :class:`InconsistentTrajectoryError` is raised.  Broadcasts over
    leading dimensions.
    """
    x_next = np.asarray(x_next, dtype=float)
    x = np.asarray(x, dtype=float)
    xi = np.asarray(xi, dtype=float)
    theta = np.asarray(theta, dtype=float)
    cov = env.noise_cov
    if not validate and env.noisy_drift is not None and cov.shape == (1, 1):
        comp = env.noisy_components[0]
        pred_n = x[..., comp] + env.noisy_drift(x, xi, theta) * env.dt
        r = x_next[..., comp] - pred_n
        var = cov[0, 0]
        return -0.5 * (_LOG_2PI + np.log(var) + r * r / var)
    mu = env.drift(x, xi, theta)
    pred = x + mu * env.dt
    if validate and env.theta_free_components:
        idx = list(env.theta_free_components)
        mismatch = np.abs(x_next[..., idx] - pred[..., idx])
        if np.any(mismatch > 1e-9):
            raise InconsistentTrajectoryError(
                "deterministic state components do not match the dynamics "
                f"(max error {float(np.max(mismatch)):.3e})"
            )
    noisy = list(env.noisy_components)
    resid = x_next[..., noisy] - pred[..., noisy]
    if cov.shape == (1, 1):
        var = cov[0, 0]
        r = resid[..., 0]
        return -0.5 * (_LOG_2PI + np.log(var) + r * r / var)
    sign, logdet = np.linalg.slogdet(cov)
    sol = np.linalg.solve(cov, np.moveaxis(resid, -1, 0).reshape(len(noisy), -1))
    quad = np.sum(resid * np.moveaxis(sol.reshape((len(noisy),) + resid.shape[:-1]), 0, -1), axis=-1)
    return -0.5 * (len(noisy) * _LOG_2PI + logdet + quad)


def linear_observation(env, x, xi):
    """Conjugate observation model for a conditionally linear environment.

    The noisy component obeys y = offset + H theta + noise with
    H = dt * features(x, xi), offset the current value of the component, and
    noise variance (L L^T dt) on that component.  Returns (H, offset, var).
    """
    if env.conditionally_linear is None:
        raise ValueError(f"{env.name} is not conditionally linear")
    if len(env.noisy_components) != 1:
        raise ValueError("conjugate updates support a single noisy component")
    h = env.conditionally_linear.features(np.asarray(x, dtype=float), np.asarray(xi, dtype=float))
    comp = env.noisy_components[0]
    offset = np.asarray(x, dtype=float)[..., comp]
    var = float(env.noise_cov[0, 0])
    return env.dt * h, offset, var


def _pendulum_linear_features(x, xi):
    q = x[..., 0]
    dq = x[..., 1]
    u = xi[..., 0]
    return np.stack([-np.sin(q), -dq, u], axis=-1)


def _pendulum_linear_drift(x, xi, theta):
    dq = x[..., 1]
    h = _pendulum_linear_features(x, xi)
    accel = np.sum(h * theta, axis=-1)
    dq_b, accel_b = np.broadcast_arrays(dq, accel)
    return np.stack([dq_b, accel_b], axis=-1)


def _pendulum_linear_noisy_drift(x, xi, theta):
    q = x[..., 0]
    dq = x[..., 1]
    u = xi[..., 0]
    return -np.sin(q) * theta[..., 0] - dq * theta[..., 1] + u * theta[..., 2]


def make_pendulum_linear() -> EnvironmentSpec:
    """Torque-driven pendulum written so the velocity drift is linear in theta.

    theta collects the three lumped coefficients multiplying
    (-sin q, -q_dot, xi); the position equation dq = q_dot dt carries no
    parameters.  Gaussian prior keeps the model conjugate.
    """
    return EnvironmentSpec(
        name="pendulum_linear",
        state_dim=2,
        design_dim=1,
        theta_dim=3,
        dt=0.05,
        horizon=50,
        x0=np.zeros(2),
        drift=_pendulum_linear_drift,
        diffusion=np.array([[0.0], [0.1]]),
        noisy_components=(1,),
        theta_free_components=(0,),
        prior=GaussianSpec(np.array([10.0, 0.0, 5.0]), np.eye(3)),
        design_scale=2.5,
        design_shift=0.0,
        state_labels=("q", "q_dot"),
        conditionally_linear=ConditionallyLinearMap(_pendulum_linear_features),
        noisy_drift=_pendulum_linear_noisy_drift,
    )


_PENDULUM_DRAG = 1e-3


def _pendulum_nonlinear_noisy_drift(x, xi, theta):
    q = x[..., 0]
    dq = x[..., 1]
    u = xi[..., 0]
    m = theta[..., 0]
    length = theta[..., 1]
    return -1.5 * GRAVITY / length * np.sin(q) + (u - _PENDULUM_DRAG * dq) / (
        m * length**2
    )


def _pendulum_nonlinear_drift(x, xi, theta):
    dq = x[..., 1]
    accel = _pendulum_nonlinear_noisy_drift(x, xi, theta)
    dq_b, accel_b = np.broadcast_arrays(dq, accel)
    return np.stack([dq_b, accel_b], axis=-1)


def make_pendulum_nonlinear() -> EnvironmentSpec:
    """Pendulum parameterized directly by mass and length, log-normal prior."""
    return EnvironmentSpec(
        name="pendulum_nonlinear",
        state_dim=2,
        design_dim=1,
        theta_dim=2,
        dt=0.05,
        horizon=50,
        x0=np.zeros(2),
        drift=_pendulum_nonlinear_drift,
        diffusion=np.array([[0.0], [0.1]]),
        noisy_components=(1,),
        theta_free_components=(0,),
        prior=LogNormalSpec(np.zeros(2), 0.25 * np.eye(2)),
        design_scale=2.5,
        design_shift=0.0,
        state_labels=("q", "q_dot"),
        noisy_drift=_pendulum_nonlinear_noisy_drift,
    )


_CART_MASS = 2.0


def _cartpole_noisy_drift(x, xi, theta):
    q = x[..., 1]
    dq = x[..., 3]
    u = xi[..., 0]
    m_p = theta[..., 0]
    length = theta[..., 1]
    sin_q = np.sin(q)
    denom = _CART_MASS + m_p * sin_q**2
    return (u + m_p * sin_q * (length * dq**2 + GRAVITY * np.cos(q))) / denom


def _cartpole_drift(x, xi, theta):
    q = x[..., 1]
    ds = x[..., 2]
    dq = x[..., 3]
    u = xi[..., 0]
    m_p = theta[..., 0]
    length = theta[..., 1]
    sin_q = np.sin(q)
    cos_q = np.cos(q)
    denom = _CART_MASS + m_p * sin_q**2
    cart_accel = (u + m_p * sin_q * (length * dq**2 + GRAVITY * cos_q)) / denom
    pole_accel = (
        -u * cos_q
        - m_p * length * dq**2 * cos_q * sin_q
        - (_CART_MASS + m_p) * GRAVITY * sin_q
    ) / (length * denom)
    ds_b, dq_b, ca, pa = np.broadcast_arrays(ds, dq, cart_accel, pole_accel)
    return np.stack([ds_b, dq_b, ca, pa], axis=-1)


def make_cartpole() -> EnvironmentSpec:
    """Force-driven cart-pole with noise in the cart acceleration.

    Unknowns are the pole mass and length; the pole velocity update depends on
    them, so it is deliberately excluded from the deterministic consistency
    check (see module docstring).
    """
    return EnvironmentSpec(
        name="cartpole",
        state_dim=4,
        design_dim=1,
        theta_dim=2,
        dt=0.05,
        horizon=50,
        x0=np.zeros(4),
        drift=_cartpole_drift,
        diffusion=np.array([[0.0], [0.0], [0.1], [0.0]]),
        noisy_components=(2,),
        theta_free_components=(0, 1),
        prior=LogNormalSpec(np.array([0.2, 0.2]), 0.04 * np.eye(2)),
        design_scale=5.0,
        design_shift=0.0,
        state_labels=("s", "q", "s_dot", "q_dot"),
        noisy_drift=_cartpole_noisy_drift,
    )


ENVIRONMENT_NAMES = ("pendulum_linear", "pendulum_nonlinear", "cartpole")


def environment_by_name(name: str) -> EnvironmentSpec:
    factory = {
        "pendulum_linear": make_pendulum_linear,
        "pendulum_nonlinear": make_pendulum_nonlinear,
        "cartpole": make_cartpole,
    }.get(name)
    if factory is None:
        raise KeyError(
            f"unknown environment {name!r}; expected one of {', '.join(ENVIRONMENT_NAMES)}"
        )
    return factory()
