"""Command-line interface.

Subcommands: run (experiment sweeps from a config file), coloring (sampling
plans for a scheme), bound (sufficient sample size), mbqvi / vrql (single
algorithm runs against an MDPv1 oracle file), plotdata (per-figure curve
files from a results CSV).  Exit codes: 0 success, 2 configuration error,
3 runtime error.
"""
from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from .environments import TabularEnv
from .errors import ConfigError
from .experiments import (ExperimentConfig, coloring_report, emit_plotdata,
                          parse_config, run_experiment)
from .factorization import load_scheme_v1
from .mdp import FactoredSpace, exact_value_iteration, load_mdp_v1, q_error
from .model_based import MbqviConfig, mbqvi, sample_bound
from .model_free import VrqlConfig, epoch_schedule, vrql_af
from .sampling import plan_for_scheme


def _load_scheme(path: str):
    with open(path) as fp:
        return load_scheme_v1(fp)


def _load_mdp(path: str):
    with open(path) as fp:
        return load_mdp_v1(fp)


def _dims(text: str) -> list[int]:
    return [int(v) for v in text.split(",") if v.strip()]


def cmd_run(args) -> int:
    with open(args.config) as fp:
        config = parse_config(fp.read())
    if args.seed is not None:
        config.master_seed = args.seed
    if args.out is not None:
        config.out_dir = args.out
    path = run_experiment(config)
    print(path)
    return 0


def cmd_coloring(args) -> int:
    scheme = _load_scheme(args.scheme)
    space = FactoredSpace(_dims(args.state_dims), _dims(args.action_dims))
    sys.stdout.write(coloring_report(scheme, space))
    return 0


def cmd_bound(args) -> int:
    scheme = _load_scheme(args.scheme)
    space = FactoredSpace(_dims(args.state_dims), _dims(args.action_dims))
    plan = plan_for_scheme(scheme, space)
    bound = sample_bound(scheme, space, plan, args.eps, args.delta, args.gamma)
    print(f"D_omega {bound.total:.17g}")
    print(f"kernel_term {bound.kernel_term:.17g}")
    print(f"reward_term {bound.reward_term}")
    return 0


def cmd_mbqvi(args) -> int:
    mdp = _load_mdp(args.mdp)
    scheme = _load_scheme(args.scheme)
    env = TabularEnv(mdp)
    config = MbqviConfig(scheme=scheme, n_replicates=args.replicates,
                         rng_seed=args.seed, iterations=args.iterations,
                         eps=args.eps, oracle_reward=args.oracle_reward)
    result = mbqvi(env, mdp.space, config)
    os.makedirs(args.out, exist_ok=True)
    diag_path = os.path.join(args.out, "mbqvi_diagnostics.csv")
    with open(diag_path, "w") as fp:
        fp.write("iter,residual\n")
        for i, res in enumerate(result.diagnostics["residuals"], start=1):
            fp.write(f"{i},{res:.17g}\n")
    oracle = exact_value_iteration(mdp, tol=1e-9)
    err = q_error(result.q, oracle)
    print(f"n_entries {result.diagnostics['n_entries']}")
    print(f"samples_total {result.diagnostics['samples_total']}")
    print(f"q_error {err:.17g}")
    print(diag_path)
    return 0


def cmd_vrql(args) -> int:
    mdp = _load_mdp(args.mdp)
    scheme = _load_scheme(args.scheme)
    env = TabularEnv(mdp)
    if args.epochs is not None and args.inner is not None:
        epochs, inner = args.epochs, args.inner
        nref = [max(1, args.nref_base * 4 ** tau) for tau in range(1, epochs + 1)]
    else:
        schedule = epoch_schedule(args.eps or 0.1, args.delta, mdp.gamma, scheme,
                                  mdp.space, c1=args.c1, c2=args.c2, c3=args.c3)
        epochs, inner = schedule.epochs, schedule.inner
        nref = [schedule.nref(tau) for tau in range(1, epochs + 1)]
    config = VrqlConfig(scheme=scheme, epochs=epochs, inner=inner, nref=nref,
                        rng_seed=args.seed, oracle_reward=args.oracle_reward)
    oracle = exact_value_iteration(mdp, tol=1e-9)
    q, diag = vrql_af(env, mdp.space, config, oracle_q=oracle)
    os.makedirs(args.out, exist_ok=True)
    out_path = os.path.join(args.out, "vrql_epochs.csv")
    with open(out_path, "w") as fp:
        fp.write("epoch,q_error,samples_cumulative\n")
        for tau, (err, used) in enumerate(zip(diag["epoch_errors"],
                                              diag["samples_cumulative"]), start=1):
            fp.write(f"{tau},{err:.17g},{used}\n")
    print(f"n_entries {diag['n_entries']}")
    print(f"samples_total {diag['samples_total']}")
    print(f"q_error {q_error(q, oracle):.17g}")
    print(out_path)
    return 0


def cmd_plotdata(args) -> int:
    for path in emit_plotdata(args.results, args.out):
        print(path)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="afmdp",
                                     description="Approximate-factorization RL toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run an experiment sweep from a config file")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int, default=None, help="override master_seed")
    p.add_argument("--out", default=None, help="override out_dir")
    p.set_defaults(fn=cmd_run)

    p = sub.add_parser("coloring", help="sampling plans for a scheme")
    p.add_argument("--scheme", required=True, help="SCHEMEv1 file")
    p.add_argument("--state-dims", required=True, help="comma list, e.g. 5,5,5")
    p.add_argument("--action-dims", required=True, help="comma list, e.g. 5")
    p.set_defaults(fn=cmd_coloring)

    p = sub.add_parser("bound", help="sufficient sample size for a scheme")
    p.add_argument("--scheme", required=True)
    p.add_argument("--state-dims", required=True)
    p.add_argument("--action-dims", required=True)
    p.add_argument("--eps", type=float, required=True)
    p.add_argument("--delta", type=float, required=True)
    p.add_argument("--gamma", type=float, default=0.9)
    p.set_defaults(fn=cmd_bound)

    p = sub.add_parser("mbqvi", help="model-based Q-value iteration on an MDPv1 file")
    p.add_argument("--mdp", required=True)
    p.add_argument("--scheme", required=True)
    p.add_argument("--replicates", type=int, required=True)
    p.add_argument("--iterations", type=int, default=None)
    p.add_argument("--eps", type=float, default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--oracle-reward", action="store_true")
    p.add_argument("--out", default=".")
    p.set_defaults(fn=cmd_mbqvi)

    p = sub.add_parser("vrql", help="variance-reduced Q-learning on an MDPv1 file")
    p.add_argument("--mdp", required=True)
    p.add_argument("--scheme", required=True)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--inner", type=int, default=None)
    p.add_argument("--nref-base", type=int, default=1)
    p.add_argument("--c1", type=float, default=1.0)
    p.add_argument("--c2", type=float, default=1.0)
    p.add_argument("--c3", type=float, default=1.0)
    p.add_argument("--eps", type=float, default=None)
    p.add_argument("--delta", type=float, default=0.05)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--oracle-reward", action="store_true")
    p.add_argument("--out", default=".")
    p.set_defaults(fn=cmd_vrql)

    p = sub.add_parser("plotdata", help="emit per-figure plot data from results.csv")
    p.add_argument("--results", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_plotdata)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 2
    except (ValueError, OSError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
