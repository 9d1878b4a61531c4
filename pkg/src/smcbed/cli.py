"""Command-line interface: train, eval, simulate.

Exit codes: 0 on success, 2 on configuration problems, 3 on a runtime
particle degeneracy.  ``--threads 1`` pins the BLAS pool to one thread and is
the bit-reproducibility reference; thread limits are applied before numpy is
imported, so the heavy modules are imported lazily inside the commands.

Output locations: ``--out`` wins, then the SMCBED_OUTPUT_DIR environment
variable, then ``./smcbed_runs``.
"""

from __future__ import annotations

import argparse
import os
import sys

OUTPUT_DIR_ENV = "SMCBED_OUTPUT_DIR"

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DEGENERACY = 3


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="smcbed",
        description="Train and evaluate amortized experimental-design policies "
        "for stochastic dynamical systems.",
    )
    parser.add_argument("--seed", type=int, default=None, help="master random seed")
    parser.add_argument(
        "--threads",
        type=int,
        default=None,
        help="BLAS thread budget; 1 is the reproducibility reference",
    )
    parser.add_argument("--out", default=None, help="output directory")
    sub = parser.add_subparsers(dest="command", required=True)

    train = sub.add_parser("train", help="train a design policy")
    train.add_argument("--env", default=None, help="environment name")
    train.add_argument("--mode", choices=("ibis", "exact"), default=None)
    train.add_argument("--config", default=None, help="YAML configuration file")
    train.add_argument("--epochs", type=int, default=None)
    train.add_argument("--steps-per-epoch", type=int, default=None)
    train.add_argument("--chains", type=int, default=None)
    train.add_argument("--n-outer", type=int, default=None)
    train.add_argument("--m-inner", type=int, default=None)
    train.add_argument("--lr", type=float, default=None)
    train.add_argument("--init-scale", type=float, default=None)
    train.add_argument("--ess-threshold", type=float, default=None)
    train.add_argument("--eta", type=float, default=None, help="tempering")
    train.add_argument("--slew", type=float, default=None, help="slew-rate penalty")
    train.add_argument("--reward-form", choices=("constant-noise", "general"), default=None)
    train.add_argument("--mh-step", type=float, default=None)
    train.add_argument("--ibis-moves", type=int, default=None)

    ev = sub.add_parser("eval", help="evaluate a policy checkpoint")
    ev.add_argument("--checkpoint", required=True, help="policy .npz file, or 'random'")
    ev.add_argument("--env", default=None, help="environment (required with 'random')")
    ev.add_argument("--mode", choices=("ibis", "exact"), default=None)
    ev.add_argument("--metric", choices=("eig", "spce", "ig-trace"), default="eig")
    ev.add_argument("--reps", type=int, default=None)
    ev.add_argument("--n-outer", type=int, default=None)
    ev.add_argument("--m-inner", type=int, default=None)
    ev.add_argument("--L", type=int, default=None, dest="contrastive", help="contrastive samples")
    ev.add_argument("--rollouts", type=int, default=None)
    ev.add_argument(
        "--stochastic",
        action="store_true",
        help="sample the full policy instead of the mean policy",
    )
    ev.add_argument("--report", default=None, help="report CSV path")

    sim = sub.add_parser("simulate", help="roll out trajectories to CSV")
    sim.add_argument("--checkpoint", required=True, help="policy .npz file, or 'random'")
    sim.add_argument("--env", default=None)
    sim.add_argument("--count", type=int, default=1)
    sim.add_argument("--stochastic", action="store_true")
    return parser


def _limit_threads(threads):
    if threads is None:
        return
    if threads < 1:
        raise SystemExit("--threads must be a positive integer")
    for var in (
        "OMP_NUM_THREADS",
        "OPENBLAS_NUM_THREADS",
        "MKL_NUM_THREADS",
        "NUMEXPR_NUM_THREADS",
    ):
        os.environ[var] = str(threads)


def _output_dir(args, config_dir=None) -> str:
    path = args.out or config_dir or os.environ.get(OUTPUT_DIR_ENV) or "smcbed_runs"
    os.makedirs(path, exist_ok=True)
    return path


def _float_cell(x) -> str:
    return repr(float(x))


def _write_csv(path, header, rows):
    with open(path, "w") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(row) + "\n")


def _cmd_train(args) -> int:
    from . import config as config_mod
    from . import training
    from .models import environment_by_name
    from .policy import save_policy

    import numpy as np

    file_data = config_mod.load_config_file(args.config) if args.config else None
    cfg = config_mod.resolve_config(
        file_data,
        environment=args.env,
        mode=args.mode,
        seed=args.seed,
        output_dir=args.out,
        train_overrides={
            "epochs": args.epochs,
            "steps_per_epoch": args.steps_per_epoch,
            "chains": args.chains,
            "n_outer": args.n_outer,
            "m_inner": args.m_inner,
            "learning_rate": args.lr,
            "init_scale": args.init_scale,
            "ess_threshold": args.ess_threshold,
        },
        potential_overrides={
            "eta": args.eta,
            "slew_penalty": args.slew,
            "reward_form": args.reward_form,
        },
        mh_overrides={"step_scale": args.mh_step, "num_moves": args.ibis_moves},
    )
    out_dir = _output_dir(args, cfg.output_dir)
    env = environment_by_name(cfg.environment)
    rng = np.random.default_rng(cfg.seed)
    params, records, state = training.train(env, cfg.train, rng)

    save_policy(params, os.path.join(out_dir, "policy.npz"), environment=cfg.environment)
    training.save_train_state(
        state, cfg.train, cfg.environment, os.path.join(out_dir, "checkpoint.npz")
    )
    _write_csv(
        os.path.join(out_dir, "metrics.csv"),
        ["epoch", "eig_estimate", "eig_std_error", "mean_acceptance_rate"],
        [
            [
                str(r.epoch),
                _float_cell(r.eig_estimate),
                _float_cell(r.eig_std_error),
                _float_cell(r.mean_acceptance_rate),
            ]
            for r in records
        ],
    )
    # wall-clock timings are non-deterministic, so they live outside metrics.csv
    _write_csv(
        os.path.join(out_dir, "timings.csv"),
        ["epoch", "wall_clock_seconds"],
        [[str(r.epoch), _float_cell(r.wall_clock_seconds)] for r in records],
    )
    config_mod.dump_config(cfg, os.path.join(out_dir, "config_resolved.yaml"))
    for r in records:
        print(
            f"epoch {r.epoch}: eig {r.eig_estimate:.3f} +- {r.eig_std_error:.3f} "
            f"(acceptance {r.mean_acceptance_rate:.3f}, {r.wall_clock_seconds:.1f}s)"
        )
    print(f"wrote {out_dir}/policy.npz, metrics.csv, checkpoint.npz")
    return EXIT_OK


def _load_eval_policy(args):
    """Resolve (--checkpoint, --env) into (policy object, env, label)."""
    from .config import ConfigFileError
    from .models import environment_by_name
    from .policy import RandomPolicy, load_policy, read_policy_meta

    if args.checkpoint == "random":
        if not args.env:
            raise ConfigFileError("--env is required when evaluating the random policy")
        env = environment_by_name(args.env)
        return RandomPolicy(env), env, "random"
    if not os.path.exists(args.checkpoint):
        raise ConfigFileError(f"checkpoint not found: {args.checkpoint}")
    meta = read_policy_meta(args.checkpoint)
    env_name = args.env or meta.get("environment")
    if not env_name:
        raise ConfigFileError(
            "checkpoint does not record its environment; pass --env explicitly"
        )
    env = environment_by_name(env_name)
    if meta["state_dim"] != env.state_dim or meta["design_dim"] != env.design_dim:
        raise ConfigFileError(
            f"checkpoint dimensions do not match environment {env_name!r}"
        )
    params = load_policy(args.checkpoint)
    return params, env, os.path.basename(args.checkpoint)


def _cmd_eval(args) -> int:
    from . import evaluation
    from .config import default_config
    from .policy import RandomPolicy

    import numpy as np

    policy, env, label = _load_eval_policy(args)
    defaults = default_config(env.name, args.mode)
    mode = args.mode or defaults.mode
    seed = args.seed if args.seed is not None else 0
    reps = args.reps or defaults.eval.reps
    n_outer = args.n_outer or defaults.eval.n_outer
    m_inner = args.m_inner or defaults.eval.m_inner
    contrastive = args.contrastive or defaults.eval.contrastive
    rollouts = args.rollouts or defaults.eval.rollouts
    mean_only = not args.stochastic and not isinstance(policy, RandomPolicy)
    out_dir = _output_dir(args)
    root = np.random.default_rng(seed)
    streams = root.spawn(reps)

    metric = args.metric
    report_path = args.report or os.path.join(out_dir, f"report_{metric.replace('-', '_')}.csv")
    if metric == "ig-trace":
        times, mean, std = evaluation.info_gain_trace_exact(
            env, policy, rollouts, root, mean_only=mean_only
        )
        _write_csv(
            report_path,
            ["t", "mean", "std"],
            [
                [str(int(t)), _float_cell(m), _float_cell(s)]
                for t, m, s in zip(times, mean, std)
            ],
        )
        print(f"terminal information gain {mean[-1]:.3f} +- {std[-1]:.3f} ({rollouts} rollouts)")
        print(f"wrote {report_path}")
        return EXIT_OK

    header = [
        "policy_id", "env", "metric", "rep", "value", "std_error",
        "n_outer", "m_inner", "contrastive", "seed",
    ]
    rows = []
    values = []
    for rep, stream in enumerate(streams):
        if metric == "eig":
            est = evaluation.estimate_eig(
                env, policy, n_outer, m_inner, mode=mode, rng=stream,
                mean_only=mean_only, mh=defaults.train.mh,
                ess_threshold=defaults.train.ess_threshold,
            )
            value, se, m_col, l_col = est.value, est.std_error, est.m_inner or 0, 0
            n_col = est.n_outer
        else:
            est = evaluation.spce_bound(
                env, policy, contrastive, defaults.eval.spce_outer, stream,
                mean_only=mean_only,
            )
            value, se = est.value, est.std_error
            n_col, m_col, l_col = est.n_outer, 0, est.contrastive
        values.append(value)
        rows.append(
            [
                label, env.name, metric, str(rep), _float_cell(value), _float_cell(se),
                str(n_col), str(m_col), str(l_col), str(seed),
            ]
        )
    values = np.asarray(values)
    spread = float(np.std(values, ddof=1)) if reps > 1 else 0.0
    rows.append(
        [
            label, env.name, metric, "-1", _float_cell(float(np.mean(values))),
            _float_cell(spread), str(n_outer if metric == "eig" else defaults.eval.spce_outer),
            str(m_inner if metric == "eig" else 0),
            str(0 if metric == "eig" else contrastive), str(seed),
        ]
    )
    _write_csv(report_path, header, rows)
    print(f"{metric}: {np.mean(values):.3f} +- {spread:.3f} over {reps} repetitions")
    print(f"wrote {report_path}")
    return EXIT_OK


def _cmd_simulate(args) -> int:
    from .policy import RandomPolicy
    from .smc import as_rollout_policy

    import numpy as np

    policy, env, label = _load_eval_policy(args)
    seed = args.seed if args.seed is not None else 0
    out_dir = _output_dir(args)
    rng = np.random.default_rng(seed)
    mean_only = not args.stochastic and not isinstance(policy, RandomPolicy)
    rollout = as_rollout_policy(policy, mean_only=mean_only)

    n = args.count
    carry = rollout.reset(n)
    T = env.horizon
    outcomes = np.zeros((n, T + 1, env.state_dim))
    outcomes[:, 0] = env.x0
    designs = np.zeros((n, T, env.design_dim))
    xi_prev = np.zeros((n, env.design_dim))
    # designs drive the real dynamics at a prior-drawn ground truth per rollout
    thetas = np.atleast_2d(env.prior_sample(rng, size=n))
    from .models import em_step

    for t in range(T):
        xi, _, carry = rollout.sample(carry, outcomes[:, t], xi_prev, rng)
        eps = rng.standard_normal((n, env.diffusion.shape[1]))
        outcomes[:, t + 1] = em_step(env, outcomes[:, t], xi, thetas, noise=eps)
        designs[:, t] = xi
        xi_prev = xi

    header = ["t", *env.state_labels, "xi"]
    paths = []
    for i in range(n):
        rows = []
        for t in range(T + 1):
            xi_cell = 0.0 if t == 0 else float(designs[i, t - 1, 0])
            rows.append(
                [str(t), *(_float_cell(v) for v in outcomes[i, t]), _float_cell(xi_cell)]
            )
        path = os.path.join(out_dir, f"trajectory_{label}_{i:03d}.csv")
        _write_csv(path, header, rows)
        paths.append(path)
    print(f"wrote {len(paths)} trajectory files to {out_dir}")
    return EXIT_OK


def main(argv=None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        _limit_threads(args.threads)
    except SystemExit as err:
        print(str(err), file=sys.stderr)
        return EXIT_CONFIG

    from .smc import ConfigurationError
    from .stats import DegenerateWeightsError

    commands = {"train": _cmd_train, "eval": _cmd_eval, "simulate": _cmd_simulate}
    try:
        return commands[args.command](args)
    except ConfigurationError as err:
        print(f"configuration error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except KeyError as err:
        print(f"configuration error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except DegenerateWeightsError as err:
        print(f"degeneracy: {err}", file=sys.stderr)
        return EXIT_DEGENERACY


if __name__ == "__main__":
    sys.exit(main())
