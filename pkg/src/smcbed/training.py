"""Policy training by stochastic score ascent over the conditional kernel.

Each step advances B reference trajectories through the conditional filter
kernel at the current parameters, evaluates the exact policy score of each
reference (the gradient of its summed design log-density; dynamics and prior
carry no policy parameters, so nothing else contributes), averages the scores
and applies an Adam ascent update.  The per-epoch metric is the
information-gain estimate of the mean policy (sampling variance clamped to
its minimum).

Single-threaded runs are bit-reproducible from the seed: the kernel passes for
all chains are stacked into one array pass with per-chain blocks, and all
randomness flows through one generator stored in the train state, whose state
is checkpointed alongside the parameters and optimizer moments.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import evaluation, policy as policy_mod
from .csmc import ReferenceTrajectory, csmc_kernel_batch, initial_reference
from .models import EnvironmentSpec
from .policy import (
    LOG_VAR_MAX,
    LOG_VAR_MIN,
    PolicyParameters,
    policy_logpdf_grad,
)
from .posterior import MhConfig
from .smc import ConfigurationError, PotentialConfig

__all__ = [
    "TrainConfig",
    "TrainState",
    "EpochRecord",
    "score_estimate",
    "msc_step",
    "train",
    "save_train_state",
    "load_train_state",
]


@dataclass(frozen=True)
class TrainConfig:
    """Everything one training run depends on besides the environment."""

    mode: str = "ibis"
    epochs: int = 15
    steps_per_epoch: int = 50
    chains: int = 8
    learning_rate: float = 1e-3
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    n_outer: int = 256
    m_inner: int = 64
    potential: PotentialConfig = field(default_factory=PotentialConfig)
    mh: MhConfig = field(default_factory=MhConfig)
    ess_threshold: float = 0.75
    init_scale: float = 1.0
    eval_n_outer: Optional[int] = None
    eval_m_inner: Optional[int] = None
    seed: int = 0

    def __post_init__(self):
        if self.learning_rate < 0:
            raise ValueError("learning rate must be non-negative")
        if self.epochs < 0 or self.steps_per_epoch < 1 or self.chains < 1:
            raise ValueError("epochs >= 0, steps_per_epoch >= 1 and chains >= 1 required")
        if self.mode not in ("ibis", "exact"):
            raise ValueError(f"unknown training mode {self.mode!r}")


@dataclass
class TrainState:
    params: PolicyParameters
    adam_m: dict
    adam_v: dict
    references: list
    iteration: int
    rng: np.random.Generator


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    eig_estimate: float
    eig_std_error: float
    mean_acceptance_rate: float
    wall_clock_seconds: float


def score_estimate(ref: ReferenceTrajectory, params: PolicyParameters) -> dict:
    """Exact score of one reference: gradient of its summed design log-density."""
    return policy_logpdf_grad(params, ref.trajectory())


def _score_estimate_batch(refs, params: PolicyParameters) -> dict:
    """Mean score over references, computed in one batched tape."""
    B = len(refs)
    T = refs[0].horizon
    inputs = np.zeros((T, B, params.input_dim))
    s_obs = np.zeros((T, B, params.design_dim))
    for b, ref in enumerate(refs):
        inputs[:, b, : params.state_dim] = ref.outcomes[:-1]
        inputs[1:, b, params.state_dim :] = ref.designs[:-1]
        s_obs[:, b] = ref.presquash
    tape = policy_mod._forward_tape(params.arrays, inputs)
    log_var = params.log_var()
    _, d_mean = policy_mod._gaussian_score_terms(s_obs, tape["mean"], log_var)
    grads = policy_mod._backward_tape(params.arrays, tape, d_mean)
    diff = s_obs - tape["mean"]
    grads["log_var"] = np.sum(-0.5 + 0.5 * diff * diff * np.exp(-log_var), axis=(0, 1))
    return {k: v / B for k, v in grads.items()}


def init_state(env: EnvironmentSpec, config: TrainConfig, rng: np.random.Generator) -> TrainState:
    """Fresh parameters plus warm-start references from one unconditional pass."""
    params = policy_mod.policy_init(env, rng, init_scale=config.init_scale)
    refs = initial_reference(
        env,
        params,
        config.n_outer,
        config.m_inner if config.mode == "ibis" else None,
        config.potential,
        config.mh if config.mode == "ibis" else None,
        rng,
        mode=config.mode,
        ess_threshold=config.ess_threshold,
        n_blocks=config.chains,
    )
    zeros = policy_mod.zero_gradient(params)
    return TrainState(
        params=params,
        adam_m=zeros,
        adam_v={k: v.copy() for k, v in zeros.items()},
        references=refs,
        iteration=0,
        rng=rng,
    )


def _adam_ascent(state: TrainState, grads: dict, config: TrainConfig) -> PolicyParameters:
    k = state.iteration + 1
    b1, b2, eps = config.adam_beta1, config.adam_beta2, config.adam_eps
    corr1 = 1.0 - b1**k
    corr2 = 1.0 - b2**k
    new_params = state.params.copy()
    for name, g in grads.items():
        m = state.adam_m[name] = b1 * state.adam_m[name] + (1.0 - b1) * g
        v = state.adam_v[name] = b2 * state.adam_v[name] + (1.0 - b2) * g * g
        step = config.learning_rate * (m / corr1) / (np.sqrt(v / corr2) + eps)
        new_params.arrays[name] = new_params.arrays[name] + step
    # keep the raw log-variance inside its clamp so its gradient stays live
    np.clip(new_params.arrays["log_var"], LOG_VAR_MIN, LOG_VAR_MAX, out=new_params.arrays["log_var"])
    return new_params


def msc_step(state: TrainState, env: EnvironmentSpec, config: TrainConfig, rng=None):
    """One ascent step: advance every chain's reference, score, update.

    Returns (new_state, info); info carries rejuvenation acceptance counts.
    The references advance even at zero learning rate.
    """
    rng = state.rng if rng is None else rng
    refs, info = csmc_kernel_batch(
        state.references,
        env,
        state.params,
        config.n_outer,
        config.m_inner if config.mode == "ibis" else None,
        config.potential,
        config.mh if config.mode == "ibis" else None,
        rng,
        ess_threshold=config.ess_threshold,
    )
    grads = _score_estimate_batch(refs, state.params)
    new_params = _adam_ascent(state, grads, config)
    new_state = TrainState(
        params=new_params,
        adam_m=state.adam_m,
        adam_v=state.adam_v,
        references=refs,
        iteration=state.iteration + 1,
        rng=rng,
    )
    return new_state, info


def train(env: EnvironmentSpec, config: TrainConfig, rng: np.random.Generator):
    """Full training run; returns (params, epoch records, final state).

    Per epoch, runs ``steps_per_epoch`` ascent steps and then estimates the
    information gain of the mean policy (resampling off, untempered rewards).
    """
    import time

    state = init_state(env, config, rng)
    records = []
    eval_n = config.eval_n_outer or config.n_outer
    eval_m = config.eval_m_inner or config.m_inner
    for epoch in range(1, config.epochs + 1):
        tic = time.perf_counter()
        accepted = proposed = 0
        for _ in range(config.steps_per_epoch):
            state, info = msc_step(state, env, config)
            accepted += info["accepted"]
            proposed += info["proposed"]
        estimate = evaluation.estimate_eig(
            env,
            state.params,
            eval_n,
            eval_m,
            mode=config.mode,
            rng=state.rng,
            mean_only=True,
        )
        records.append(
            EpochRecord(
                epoch=epoch,
                eig_estimate=estimate.value,
                eig_std_error=estimate.std_error,
                mean_acceptance_rate=accepted / proposed if proposed else -1.0,
                wall_clock_seconds=time.perf_counter() - tic,
            )
        )
    return state.params, records, state


# ------------------------------------------------------------- checkpointing

_STATE_VERSION = 1


def save_train_state(state: TrainState, config: TrainConfig, env_name: str, path) -> None:
    """Serialize the full optimizer state; resuming replays bit-identically."""
    payload = {}
    for name, arr in state.params.arrays.items():
        payload[f"param/{name}"] = arr
        payload[f"adam_m/{name}"] = state.adam_m[name]
        payload[f"adam_v/{name}"] = state.adam_v[name]
    mode = state.references[0].mode
    for b, ref in enumerate(state.references):
        payload[f"ref{b}/outcomes"] = ref.outcomes
        payload[f"ref{b}/designs"] = ref.designs
        payload[f"ref{b}/presquash"] = ref.presquash
        if mode == "ibis":
            payload[f"ref{b}/theta_snapshots"] = ref.theta_snapshots
            payload[f"ref{b}/theta_log_w_snapshots"] = ref.theta_log_w_snapshots
            payload[f"ref{b}/cum_loglik_snapshots"] = ref.cum_loglik_snapshots
        else:
            payload[f"ref{b}/mean_snapshots"] = ref.mean_snapshots
            payload[f"ref{b}/cov_snapshots"] = ref.cov_snapshots
    meta = {
        "version": _STATE_VERSION,
        "environment": env_name,
        "mode": mode,
        "iteration": state.iteration,
        "chains": len(state.references),
        "scale": state.params.scale,
        "shift": state.params.shift,
        "state_dim": state.params.state_dim,
        "design_dim": state.params.design_dim,
        "rng_state": state.rng.bit_generator.state,
    }
    payload["__meta__"] = np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8)
    np.savez(path, **payload)


def load_train_state(path) -> tuple:
    """Returns (TrainState, env_name)."""
    with np.load(path) as data:
        meta = json.loads(bytes(data["__meta__"]).decode())
        if meta.get("version") != _STATE_VERSION:
            raise ConfigurationError(f"unsupported checkpoint version {meta.get('version')}")
        arrays, adam_m, adam_v = {}, {}, {}
        for key in data.files:
            if key.startswith("param/"):
                arrays[key[6:]] = data[key].copy()
            elif key.startswith("adam_m/"):
                adam_m[key[7:]] = data[key].copy()
            elif key.startswith("adam_v/"):
                adam_v[key[7:]] = data[key].copy()
        refs = []
        mode = meta["mode"]
        for b in range(meta["chains"]):
            kw = dict(
                mode=mode,
                outcomes=data[f"ref{b}/outcomes"].copy(),
                designs=data[f"ref{b}/designs"].copy(),
                presquash=data[f"ref{b}/presquash"].copy(),
            )
            if mode == "ibis":
                kw["theta_snapshots"] = data[f"ref{b}/theta_snapshots"].copy()
                kw["theta_log_w_snapshots"] = data[f"ref{b}/theta_log_w_snapshots"].copy()
                kw["cum_loglik_snapshots"] = data[f"ref{b}/cum_loglik_snapshots"].copy()
            else:
                kw["mean_snapshots"] = data[f"ref{b}/mean_snapshots"].copy()
                kw["cov_snapshots"] = data[f"ref{b}/cov_snapshots"].copy()
            refs.append(ReferenceTrajectory(**kw))
    params = PolicyParameters(
        arrays,
        scale=float(meta["scale"]),
        shift=float(meta["shift"]),
        state_dim=int(meta["state_dim"]),
        design_dim=int(meta["design_dim"]),
    )
    rng = np.random.default_rng()
    rng.bit_generator.state = meta["rng_state"]
    state = TrainState(
        params=params,
        adam_m=adam_m,
        adam_v=adam_v,
        references=refs,
        iteration=int(meta["iteration"]),
        rng=rng,
    )
    return state, meta["environment"]
