"""Stochastic design policy: recurrent network with a tanh-squashed Gaussian head.

Each augmented state enters as the concatenation (x_t, xi_{t-1}), with a zero
design padded at t=0.  An encoder (dense 256-256-64, rectified linear) feeds
two stacked LSTM layers of hidden size 64, whose output passes through a
dense 256-256-design_dim head to give the Gaussian mean; a learned per-output
log-variance (clamped to [-10, 3]) completes the pre-squash distribution.
Designs are xi = scale * tanh(s) + shift with s drawn from that Gaussian, so
samples always lie strictly inside the design range.

Log-density gradients with respect to every parameter are computed by
reverse-mode accumulation over a recorded forward tape (backpropagation
through time).  No gradient estimator is involved: the designs in a
trajectory are observed, so the score is a deterministic function of the
parameters and the trajectory.  All arithmetic is float64 numpy; the forward
pass is batched over particles, which is where virtually all the compute of
the enclosing filters goes.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .models import AugmentedState, EnvironmentSpec, Trajectory


def _sigmoid(x):
    # logistic via tanh; identical function, faster vector path than expit here
    return 0.5 * np.tanh(0.5 * x) + 0.5

__all__ = [
    "ENC_HIDDEN",
    "ENC_OUT",
    "LSTM_HIDDEN",
    "HEAD_HIDDEN",
    "LOG_VAR_MIN",
    "LOG_VAR_MAX",
    "PolicyParameters",
    "PolicyState",
    "policy_init",
    "policy_step",
    "policy_sample",
    "policy_logpdf",
    "trajectory_logpdf",
    "policy_logpdf_grad",
    "random_policy_sample",
    "RecurrentPolicy",
    "RandomPolicy",
    "save_policy",
    "load_policy",
    "zero_gradient",
]

ENC_HIDDEN = 256
ENC_OUT = 64
LSTM_HIDDEN = 64
HEAD_HIDDEN = 256
NUM_LSTM_LAYERS = 2
LOG_VAR_MIN = -10.0
LOG_VAR_MAX = 3.0

_LOG_2PI = float(np.log(2.0 * np.pi))
_CHECKPOINT_VERSION = 1


@dataclass
class PolicyParameters:
    """All learnable arrays plus the fixed squash constants.

    ``arrays`` maps parameter-group names to float64 ndarrays; gradients and
    optimizer state mirror the same mapping.  ``scale``/``shift`` are the
    squash constants (a, b) and are not learned.
    """

    arrays: dict
    scale: float
    shift: float
    state_dim: int
    design_dim: int

    @property
    def input_dim(self) -> int:
        return self.state_dim + self.design_dim

    def copy(self) -> "PolicyParameters":
        return PolicyParameters(
            {k: v.copy() for k, v in self.arrays.items()},
            self.scale,
            self.shift,
            self.state_dim,
            self.design_dim,
        )

    def log_var(self) -> np.ndarray:
        """Effective (clamped) log-variance of the pre-squash Gaussian."""
        return np.clip(self.arrays["log_var"], LOG_VAR_MIN, LOG_VAR_MAX)

    def mean_policy(self) -> "PolicyParameters":
        """Copy with the sampling variance clamped to its minimum."""
        out = self.copy()
        out.arrays["log_var"] = np.full(self.design_dim, LOG_VAR_MIN)
        return out


@dataclass
class PolicyState:
    """Recurrent carry: hidden and cell arrays, shape (layers, batch, hidden)."""

    h: np.ndarray
    c: np.ndarray

    @staticmethod
    def zeros(batch: int) -> "PolicyState":
        shape = (NUM_LSTM_LAYERS, batch, LSTM_HIDDEN)
        return PolicyState(np.zeros(shape), np.zeros(shape))

    def copy(self) -> "PolicyState":
        return PolicyState(self.h.copy(), self.c.copy())

    def take(self, idx) -> "PolicyState":
        """Reindex the batch dimension (used after trajectory resampling)."""
        return PolicyState(self.h[:, idx], self.c[:, idx])


def _layer_sizes(input_dim: int, design_dim: int):
    sizes = {
        "enc_w1": (input_dim, ENC_HIDDEN),
        "enc_b1": (ENC_HIDDEN,),
        "enc_w2": (ENC_HIDDEN, ENC_HIDDEN),
        "enc_b2": (ENC_HIDDEN,),
        "enc_w3": (ENC_HIDDEN, ENC_OUT),
        "enc_b3": (ENC_OUT,),
        "head_w1": (LSTM_HIDDEN, HEAD_HIDDEN),
        "head_b1": (HEAD_HIDDEN,),
        "head_w2": (HEAD_HIDDEN, HEAD_HIDDEN),
        "head_b2": (HEAD_HIDDEN,),
        "head_w3": (HEAD_HIDDEN, design_dim),
        "head_b3": (design_dim,),
        "log_var": (design_dim,),
    }
    in_dim = ENC_OUT
    for layer in range(NUM_LSTM_LAYERS):
        sizes[f"lstm_w{layer}"] = (in_dim + LSTM_HIDDEN, 4 * LSTM_HIDDEN)
        sizes[f"lstm_b{layer}"] = (4 * LSTM_HIDDEN,)
        in_dim = LSTM_HIDDEN
    return sizes


def policy_init(env: EnvironmentSpec, rng: np.random.Generator, init_scale: float = 1.0) -> PolicyParameters:
    """Fresh parameters: fan-in-scaled zero-mean weights, zero biases and log-variance."""
    arrays = {}
    for name, shape in _layer_sizes(env.state_dim + env.design_dim, env.design_dim).items():
        if name == "log_var" or "_b" in name:
            arrays[name] = np.zeros(shape)
        else:
            fan_in = shape[0]
            arrays[name] = (init_scale / np.sqrt(fan_in)) * rng.standard_normal(shape)
    return PolicyParameters(
        arrays,
        scale=env.design_scale,
        shift=env.design_shift,
        state_dim=env.state_dim,
        design_dim=env.design_dim,
    )


def _encode_input(params: PolicyParameters, z: AugmentedState) -> np.ndarray:
    xi_prev = (
        np.zeros(params.design_dim) if z.design is None else np.asarray(z.design, dtype=float)
    )
    return np.concatenate([np.asarray(z.x, dtype=float), xi_prev])[None, :]


def _forward_step(arrays: dict, state: PolicyState, inp: np.ndarray):
    """One batched forward step; returns (mean, new_state).  ``inp`` is (B, din).

    This is the rollout hot path: gate sigmoids go through tanh (markedly
    faster than exp-based forms in this numpy build) and intermediates are
    updated in place to limit large temporaries.
    """
    e = inp @ arrays["enc_w1"]
    e += arrays["enc_b1"]
    np.maximum(e, 0.0, out=e)
    e2 = e @ arrays["enc_w2"]
    e2 += arrays["enc_b2"]
    np.maximum(e2, 0.0, out=e2)
    x = e2 @ arrays["enc_w3"]
    x += arrays["enc_b3"]
    h_new = np.empty_like(state.h)
    c_new = np.empty_like(state.c)
    for layer in range(NUM_LSTM_LAYERS):
        zcat = np.concatenate([x, state.h[layer]], axis=1)
        pre = zcat @ arrays[f"lstm_w{layer}"]
        pre += arrays[f"lstm_b{layer}"]
        gi = _sigmoid(pre[:, :LSTM_HIDDEN])
        gf = _sigmoid(pre[:, LSTM_HIDDEN : 2 * LSTM_HIDDEN])
        gg = np.tanh(pre[:, 2 * LSTM_HIDDEN : 3 * LSTM_HIDDEN])
        go = _sigmoid(pre[:, 3 * LSTM_HIDDEN :])
        c = c_new[layer]
        np.multiply(gf, state.c[layer], out=c)
        gi *= gg
        c += gi
        h = h_new[layer]
        np.tanh(c, out=h)
        h *= go
        x = h
    a1 = x @ arrays["head_w1"]
    a1 += arrays["head_b1"]
    np.maximum(a1, 0.0, out=a1)
    a2 = a1 @ arrays["head_w2"]
    a2 += arrays["head_b2"]
    np.maximum(a2, 0.0, out=a2)
    mean = a2 @ arrays["head_w3"]
    mean += arrays["head_b3"]
    return mean, PolicyState(h_new, c_new)


def policy_step(params: PolicyParameters, state: Optional[PolicyState], z: AugmentedState):
    """Deterministic mean of the pre-squash Gaussian at the next step.

    ``state`` is the carry from the previous step (None resets to zeros at
    t=0).  Returns (mean, new_state); feeding states one at a time matches a
    batch re-run from scratch exactly.
    """
    if state is None:
        state = PolicyState.zeros(1)
    mean, new_state = _forward_step(params.arrays, state, _encode_input(params, z))
    return mean[0], new_state


def policy_sample(
    params: PolicyParameters,
    state: Optional[PolicyState],
    z: AugmentedState,
    rng: np.random.Generator,
):
    """Draw a design: returns (xi, presquash value, new_state)."""
    mean, new_state = policy_step(params, state, z)
    std = np.exp(0.5 * params.log_var())
    s = mean + std * rng.standard_normal(params.design_dim)
    xi = params.scale * np.tanh(s) + params.shift
    return xi, s, new_state


def _squash_log_jacobian(s: np.ndarray, scale: float) -> np.ndarray:
    # log d(xi)/d(s) = log(a (1 - tanh^2 s)), written in the overflow-safe form
    return np.log(scale) + 2.0 * (np.log(2.0) - s - np.logaddexp(0.0, -2.0 * s))


def _presquash_from_design(design: np.ndarray, scale: float, shift: float) -> np.ndarray:
    u = (np.asarray(design, dtype=float) - shift) / scale
    if np.any(np.abs(u) >= 1.0):
        raise ValueError("design lies on or outside the squash boundary")
    return np.arctanh(u)


def _gaussian_score_terms(s: np.ndarray, mean: np.ndarray, log_var: np.ndarray):
    inv_var = np.exp(-log_var)
    diff = s - mean
    logp = -0.5 * (_LOG_2PI + log_var + diff * diff * inv_var)
    return logp, diff * inv_var


def policy_logpdf(
    params: PolicyParameters,
    history: Trajectory,
    design,
    presquash=None,
) -> float:
    """Exact log-density of taking ``design`` after observing ``history``.

    The density is the squashed-Gaussian law: Gaussian in the pre-squash
    variable minus the tanh Jacobian.  ``presquash`` may supply the exact
    pre-squash value when the caller has it; otherwise it is recovered as
    atanh((xi - shift)/scale), which fails on boundary designs.
    """
    state = None
    for z in history.states:
        mean, state = policy_step(params, state, z)
    if presquash is None:
        s = _presquash_from_design(design, params.scale, params.shift)
    else:
        s = np.atleast_1d(np.asarray(presquash, dtype=float))
    logp, _ = _gaussian_score_terms(s, mean, params.log_var())
    return float(np.sum(logp) - np.sum(_squash_log_jacobian(s, params.scale)))


def trajectory_logpdf(params: PolicyParameters, trajectory: Trajectory) -> float:
    """Sum of per-step design log-densities over a whole trajectory."""
    state = None
    total = 0.0
    log_var = params.log_var()
    stored = trajectory.presquash_values()
    for t, z in enumerate(trajectory.states[:-1]):
        mean, state = policy_step(params, state, z)
        nxt = trajectory.states[t + 1]
        if stored is None:
            s = _presquash_from_design(nxt.design, params.scale, params.shift)
        else:
            s = stored[t]
        logp, _ = _gaussian_score_terms(s, mean, log_var)
        total += float(np.sum(logp) - np.sum(_squash_log_jacobian(s, params.scale)))
    return total


def _forward_tape(arrays: dict, inputs: np.ndarray):
    """Forward pass over (T, B, din) inputs recording everything backward needs."""
    T, B, _ = inputs.shape
    state = PolicyState.zeros(B)
    tape = {
        "inputs": inputs,
        "e1": np.empty((T, B, ENC_HIDDEN)),
        "e2": np.empty((T, B, ENC_HIDDEN)),
        "enc_out": np.empty((T, B, ENC_OUT)),
        "head_in": np.empty((T, B, LSTM_HIDDEN)),
        "a1": np.empty((T, B, HEAD_HIDDEN)),
        "a2": np.empty((T, B, HEAD_HIDDEN)),
        "mean": np.empty((T, B, arrays["head_w3"].shape[1])),
        "lstm": [],
    }
    for _ in range(NUM_LSTM_LAYERS):
        tape["lstm"].append(
            {
                k: np.empty((T, B, LSTM_HIDDEN))
                for k in ("x", "h_prev", "c_prev", "i", "f", "g", "o", "c", "tanh_c")
            }
        )
    for t in range(T):
        e1 = np.maximum(inputs[t] @ arrays["enc_w1"] + arrays["enc_b1"], 0.0)
        e2 = np.maximum(e1 @ arrays["enc_w2"] + arrays["enc_b2"], 0.0)
        x = e2 @ arrays["enc_w3"] + arrays["enc_b3"]
        tape["e1"][t], tape["e2"][t], tape["enc_out"][t] = e1, e2, x
        for layer in range(NUM_LSTM_LAYERS):
            rec = tape["lstm"][layer]
            rec["x"][t] = x
            rec["h_prev"][t] = state.h[layer]
            rec["c_prev"][t] = state.c[layer]
            zcat = np.concatenate([x, state.h[layer]], axis=1)
            pre = zcat @ arrays[f"lstm_w{layer}"] + arrays[f"lstm_b{layer}"]
            gi = _sigmoid(pre[:, :LSTM_HIDDEN])
            gf = _sigmoid(pre[:, LSTM_HIDDEN : 2 * LSTM_HIDDEN])
            gg = np.tanh(pre[:, 2 * LSTM_HIDDEN : 3 * LSTM_HIDDEN])
            go = _sigmoid(pre[:, 3 * LSTM_HIDDEN :])
            c = gf * state.c[layer] + gi * gg
            tanh_c = np.tanh(c)
            h = go * tanh_c
            rec["i"][t], rec["f"][t], rec["g"][t], rec["o"][t] = gi, gf, gg, go
            rec["c"][t], rec["tanh_c"][t] = c, tanh_c
            state.h[layer] = h
            state.c[layer] = c
            x = h
        tape["head_in"][t] = x
        a1 = np.maximum(x @ arrays["head_w1"] + arrays["head_b1"], 0.0)
        a2 = np.maximum(a1 @ arrays["head_w2"] + arrays["head_b2"], 0.0)
        tape["a1"][t], tape["a2"][t] = a1, a2
        tape["mean"][t] = a2 @ arrays["head_w3"] + arrays["head_b3"]
    return tape


def zero_gradient(params: PolicyParameters) -> dict:
    return {k: np.zeros_like(v) for k, v in params.arrays.items()}


def _backward_tape(arrays: dict, tape: dict, d_mean: np.ndarray) -> dict:
    """Reverse-mode sweep over the tape for upstream gradients d_mean (T, B, d)."""
    T, B, _ = d_mean.shape
    grads = {k: np.zeros_like(v) for k, v in arrays.items()}
    d_enc_out = np.empty((T, B, ENC_OUT))
    dh_next = [np.zeros((B, LSTM_HIDDEN)) for _ in range(NUM_LSTM_LAYERS)]
    dc_next = [np.zeros((B, LSTM_HIDDEN)) for _ in range(NUM_LSTM_LAYERS)]
    for t in range(T - 1, -1, -1):
        dm = d_mean[t]
        grads["head_w3"] += tape["a2"][t].T @ dm
        grads["head_b3"] += dm.sum(axis=0)
        da2 = (dm @ arrays["head_w3"].T) * (tape["a2"][t] > 0.0)
        grads["head_w2"] += tape["a1"][t].T @ da2
        grads["head_b2"] += da2.sum(axis=0)
        da1 = (da2 @ arrays["head_w2"].T) * (tape["a1"][t] > 0.0)
        grads["head_w1"] += tape["head_in"][t].T @ da1
        grads["head_b1"] += da1.sum(axis=0)
        dx = da1 @ arrays["head_w1"].T
        for layer in range(NUM_LSTM_LAYERS - 1, -1, -1):
            rec = tape["lstm"][layer]
            dh = dx + dh_next[layer]
            dc = dc_next[layer] + dh * rec["o"][t] * (1.0 - rec["tanh_c"][t] ** 2)
            do_pre = dh * rec["tanh_c"][t] * rec["o"][t] * (1.0 - rec["o"][t])
            df_pre = dc * rec["c_prev"][t] * rec["f"][t] * (1.0 - rec["f"][t])
            di_pre = dc * rec["g"][t] * rec["i"][t] * (1.0 - rec["i"][t])
            dg_pre = dc * rec["i"][t] * (1.0 - rec["g"][t] ** 2)
            dpre = np.concatenate([di_pre, df_pre, dg_pre, do_pre], axis=1)
            zcat = np.concatenate([rec["x"][t], rec["h_prev"][t]], axis=1)
            grads[f"lstm_w{layer}"] += zcat.T @ dpre
            grads[f"lstm_b{layer}"] += dpre.sum(axis=0)
            dzcat = dpre @ arrays[f"lstm_w{layer}"].T
            in_dim = rec["x"][t].shape[1]
            dx = dzcat[:, :in_dim]
            dh_next[layer] = dzcat[:, in_dim:]
            dc_next[layer] = dc * rec["f"][t]
        d_enc_out[t] = dx
    # encoder has no recurrence: fold time into the batch and do it in one pass
    flat = lambda a: a.reshape(T * B, -1)
    de = flat(d_enc_out)
    grads["enc_w3"] += flat(tape["e2"]).T @ de
    grads["enc_b3"] += de.sum(axis=0)
    de2 = (de @ arrays["enc_w3"].T) * (flat(tape["e2"]) > 0.0)
    grads["enc_w2"] += flat(tape["e1"]).T @ de2
    grads["enc_b2"] += de2.sum(axis=0)
    de1 = (de2 @ arrays["enc_w2"].T) * (flat(tape["e1"]) > 0.0)
    grads["enc_w1"] += flat(tape["inputs"]).T @ de1
    grads["enc_b1"] += de1.sum(axis=0)
    return grads


def trajectory_inputs(params: PolicyParameters, trajectory: Trajectory) -> np.ndarray:
    """(T, 1, din) network inputs for a single trajectory."""
    steps = []
    for z in trajectory.states[:-1]:
        steps.append(_encode_input(params, z))
    return np.stack(steps)


def policy_logpdf_grad(params: PolicyParameters, trajectory: Trajectory) -> dict:
    """Exact parameter gradient of the summed design log-density of a trajectory.

    Returns a mapping with the same keys and shapes as ``params.arrays``,
    including the log-variance entry.  The tanh Jacobian term carries no
    parameter dependence (the pre-squash values are determined by the data),
    so it contributes to the value but not the gradient.
    """
    if trajectory.horizon == 0:
        return zero_gradient(params)
    inputs = trajectory_inputs(params, trajectory)
    stored = trajectory.presquash_values()
    if stored is None:
        stored = np.stack(
            [
                _presquash_from_design(z.design, params.scale, params.shift)
                for z in trajectory.states[1:]
            ]
        )
    s = stored[:, None, :]
    tape = _forward_tape(params.arrays, inputs)
    log_var = params.log_var()
    _, d_mean = _gaussian_score_terms(s, tape["mean"], log_var)
    grads = _backward_tape(params.arrays, tape, d_mean)
    diff = s - tape["mean"]
    grads["log_var"] = np.sum(-0.5 + 0.5 * diff * diff * np.exp(-log_var), axis=(0, 1))
    return grads


def random_policy_sample(env: EnvironmentSpec, rng: np.random.Generator) -> np.ndarray:
    """Baseline design draw: uniform over the design range, i.i.d. per step."""
    return rng.uniform(env.design_low, env.design_high, size=env.design_dim)


class RecurrentPolicy:
    """Batched rollout adapter around :class:`PolicyParameters`.

    ``mean_only`` rollouts clamp the sampling variance to its minimum, which
    is how evaluation-time "mean policy" runs are performed.
    """

    def __init__(self, params: PolicyParameters, mean_only: bool = False):
        self.params = params
        self.mean_only = mean_only

    @property
    def design_dim(self) -> int:
        return self.params.design_dim

    def reset(self, batch: int) -> PolicyState:
        return PolicyState.zeros(batch)

    def sample(
        self,
        state: PolicyState,
        x: np.ndarray,
        xi_prev: np.ndarray,
        rng: np.random.Generator,
        duplicates=None,
    ):
        """Sample designs for a batch of rows.

        ``duplicates`` is an optional (first_occurrence, inverse) index pair
        marking rows that are exact copies of each other (as produced by
        resampling); the deterministic network forward then runs only on the
        unique rows and is scattered back.  Sampling noise stays per-row.
        """
        if duplicates is not None and duplicates[0].shape[0] < x.shape[0]:
            first, inverse = duplicates
            inp = np.concatenate([x[first], xi_prev[first]], axis=1)
            mean_u, state_u = _forward_step(self.params.arrays, state.take(first), inp)
            mean = mean_u[inverse]
            new_state = state_u.take(inverse)
        else:
            inp = np.concatenate([x, xi_prev], axis=1)
            mean, new_state = _forward_step(self.params.arrays, state, inp)
        log_var = (
            np.full(self.params.design_dim, LOG_VAR_MIN)
            if self.mean_only
            else self.params.log_var()
        )
        s = mean + np.exp(0.5 * log_var) * rng.standard_normal(mean.shape)
        xi = self.params.scale * np.tanh(s) + self.params.shift
        return xi, s, new_state


class RandomPolicy:
    """Uniform-design baseline with the same rollout interface."""

    def __init__(self, env: EnvironmentSpec):
        self.low = env.design_low
        self.high = env.design_high
        self.scale = env.design_scale
        self.shift = env.design_shift
        self.design_dim = env.design_dim

    def reset(self, batch: int):
        return None

    def sample(self, state, x, xi_prev, rng: np.random.Generator, duplicates=None):
        xi = rng.uniform(self.low, self.high, size=(x.shape[0], self.design_dim))
        # bookkeeping pre-squash value; never used for gradients
        u = np.clip((xi - self.shift) / self.scale, -1.0 + 1e-12, 1.0 - 1e-12)
        return xi, np.arctanh(u), None


def save_policy(params: PolicyParameters, path, environment: Optional[str] = None) -> None:
    """Serialize parameters; round-trips bit-exactly through :func:`load_policy`."""
    meta = {
        "version": _CHECKPOINT_VERSION,
        "scale": params.scale,
        "shift": params.shift,
        "state_dim": params.state_dim,
        "design_dim": params.design_dim,
        "environment": environment,
    }
    np.savez(path, __meta__=np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8), **params.arrays)


def read_policy_meta(path) -> dict:
    """Checkpoint metadata (shape constants, squash constants, environment name)."""
    with np.load(path) as data:
        return json.loads(bytes(data["__meta__"]).decode())


def load_policy(path) -> PolicyParameters:
    with np.load(path) as data:
        meta = json.loads(bytes(data["__meta__"]).decode())
        if meta.get("version") != _CHECKPOINT_VERSION:
            raise ValueError(f"unsupported policy checkpoint version {meta.get('version')}")
        arrays = {k: data[k].copy() for k in data.files if k != "__meta__"}
    return PolicyParameters(
        arrays,
        scale=float(meta["scale"]),
        shift=float(meta["shift"]),
        state_dim=int(meta["state_dim"]),
        design_dim=int(meta["design_dim"]),
    )
