"""Experiment harness: seeded trial sweeps producing deterministic CSVs.

Cells are (algorithm, scheme, budget, trial); rows append to a crash-safe
partial file and the final CSV is sorted by cell key, so output bytes do not
depend on scheduling or on resuming after an interruption.  Timing is logged
to stderr only: the wall_ms column is fixed to 0 because measured time would
break the byte-determinism contract of the harness outputs.
"""
from __future__ import annotations

import io
import math
import os
import sys
import time
from dataclasses import dataclass
from importlib import resources
from typing import Callable, Optional

import numpy as np

from . import rng as rngmod
from .environments import (ImperfectSynthetic, PerfectSynthetic, SyntheticSpec,
                           WindEnv, WindStorage, gen_imperfect_mdp,
                           gen_perfect_mdp, load_series_csv,
                           wind_spec_from_series, wind_storage_mdp)
from .errors import ConfigError
from .factorization import (FactorizationScheme, load_scheme_v1, trivial_scheme)
from .mdp import FactoredSpace, exact_value_iteration, greedy_policy, q_error
from .model_based import MbqviConfig, mbqvi
from .model_free import VrqlConfig, vrql_af
from .sampling import (CountingEnv, build_conflict_graph, color_exact,
                       color_greedy, plan_for_scheme, reduce_inclusive,
                       reward_query_count, EXACT_COLORING_GUARD)

ALGORITHMS = ("mb-af", "mb-vanilla", "vrql-af", "vrql-vanilla")
EXPERIMENTS = ("synthetic-perfect", "synthetic-imperfect", "windfarm",
               "coloring", "bound")
_SCHEME_IDS = {"af": 0, "K1": 1, "K2": 2, "K3": 3, "K4": 4}
_FAMILY_IDS = {"mb": 0, "vrql": 1}

DEFAULT_ENV_SEED = 20200101
VI_TRUNCATION_FACTOR = 1e-3
MIN_INNER_STEPS = 16
MAX_EPOCHS = 3

RESULT_HEADER = "experiment,algorithm,scheme,budget,trial,q_error,wall_ms,samples_used"


@dataclass
class ExperimentConfig:
    experiment: str
    trials: int = 1
    budgets: tuple[int, ...] = ()
    algorithms: tuple[str, ...] = ("mb-af", "mb-vanilla")
    schemes: tuple[str, ...] = ()
    master_seed: int = 0
    out_dir: str = "."
    coupling: float = 0.15
    env_seed: int = DEFAULT_ENV_SEED
    price_csv: Optional[str] = None
    mismatch_csv: Optional[str] = None
    scheme_file: Optional[str] = None
    state_dims: tuple[int, ...] = ()
    action_dims: tuple[int, ...] = ()
    eps: float = 0.1
    delta: float = 0.05
    gamma: float = 0.9

    def validate(self) -> None:
        if self.experiment not in EXPERIMENTS:
            raise ConfigError(f"unknown experiment {self.experiment!r}")
        if self.experiment in ("coloring", "bound"):
            if self.scheme_file is None or not self.state_dims or not self.action_dims:
                raise ConfigError(f"{self.experiment} needs scheme_file, state_dims, "
                                  "and action_dims")
            return
        if self.trials < 1:
            raise ConfigError("trials must be >= 1")
        if not self.budgets:
            raise ConfigError("at least one budget is required")
        if any(b2 <= b1 for b1, b2 in zip(self.budgets, self.budgets[1:])):
            raise ConfigError("budgets must be strictly increasing")
        for algo in self.algorithms:
            if algo not in ALGORITHMS:
                raise ConfigError(f"unknown algorithm {algo!r}")


def _parse_int_list(text: str) -> tuple[int, ...]:
    return tuple(int(v.strip()) for v in text.split(",") if v.strip())


def _parse_str_list(text: str) -> tuple[str, ...]:
    return tuple(v.strip() for v in text.split(",") if v.strip())


_CONFIG_PARSERS: dict[str, Callable[[str], object]] = {
    "experiment": str,
    "trials": int,
    "budgets": _parse_int_list,
    "algorithms": _parse_str_list,
    "schemes": _parse_str_list,
    "master_seed": int,
    "out_dir": str,
    "coupling": float,
    "env_seed": int,
    "price_csv": str,
    "mismatch_csv": str,
    "scheme_file": str,
    "state_dims": _parse_int_list,
    "action_dims": _parse_int_list,
    "eps": float,
    "delta": float,
    "gamma": float,
}


def parse_config(text: str) -> ExperimentConfig:
    """Parse the line-oriented `key = value` experiment configuration."""
    values: dict[str, object] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ConfigError(f"config line {lineno}: expected 'key = value'")
        key = key.strip()
        parser = _CONFIG_PARSERS.get(key)
        if parser is None:
            raise ConfigError(f"config line {lineno}: unknown key {key!r}")
        try:
            values[key] = parser(value.strip())
        except ValueError as exc:
            raise ConfigError(f"config line {lineno}: {exc}") from exc
    if "experiment" not in values:
        raise ConfigError("config must set 'experiment'")
    config = ExperimentConfig(**values)  # type: ignore[arg-type]
    if not config.schemes:
        config.schemes = _default_schemes(config.experiment)
    config.validate()
    return config


def _default_schemes(experiment: str) -> tuple[str, ...]:
    return {
        "synthetic-perfect": ("af",),
        "synthetic-imperfect": ("K4", "K2"),
        "windfarm": ("K3",),
    }.get(experiment, ())


# --- environment bundles ------------------------------------------------------

@dataclass
class EnvBundle:
    """Everything a sweep needs: the generative env, its oracle Q*, and the
    schemes addressable from the config."""

    env: object
    space: FactoredSpace
    gamma: float
    schemes: dict[str, FactorizationScheme]
    oracle_q: np.ndarray


def _bundled_data_path(name: str) -> str:
    return str(resources.files("afmdp").joinpath("data", name))


def build_environment(config: ExperimentConfig) -> EnvBundle:
    if config.experiment == "synthetic-perfect":
        gen = gen_perfect_mdp(SyntheticSpec(seed=config.env_seed, n_sub=3,
                                            coupling=0.0))
        env = gen.env()
        schemes = {"af": gen.scheme,
                   "K1": trivial_scheme(gen.mdp.space)}
        mdp = gen.mdp
    elif config.experiment == "synthetic-imperfect":
        gen = gen_imperfect_mdp(SyntheticSpec(seed=config.env_seed, n_sub=4,
                                              coupling=config.coupling))
        env = gen.env()
        schemes = {"K4": gen.schemes[4], "K2": gen.schemes[2],
                   "K1": gen.schemes[1]}
        mdp = gen.mdp
    elif config.experiment == "windfarm":
        price_path = config.price_csv or _bundled_data_path("wind_price.csv")
        mismatch_path = config.mismatch_csv or _bundled_data_path("wind_mismatch.csv")
        spec = wind_spec_from_series(load_series_csv(price_path),
                                     load_series_csv(mismatch_path))
        storage = wind_storage_mdp(spec)
        env = storage.env()
        schemes = {"K3": storage.scheme,
                   "K1": trivial_scheme(storage.mdp.space)}
        mdp = storage.mdp
    else:
        raise ConfigError(f"experiment {config.experiment!r} has no environment")
    oracle = exact_value_iteration(mdp, tol=1e-9)
    return EnvBundle(env=env, space=mdp.space, gamma=mdp.gamma,
                     schemes=schemes, oracle_q=oracle)


# --- budget allocation ---------------------------------------------------------

def vi_steps(gamma: float, truncation: float = VI_TRUNCATION_FACTOR) -> int:
    """Iterations making the pure value-iteration truncation <= truncation."""
    return max(1, math.ceil(math.log(1.0 / (truncation * (1.0 - gamma)))
                            / -math.log(gamma)))


def allocate_model_based(budget: int, n_entries: int, reward_queries: int) -> int:
    """Replicates per entry: floor(budget / (N_entry + reward queries))."""
    denom = n_entries + reward_queries
    n = budget // denom
    if n < 1:
        raise ConfigError(f"budget {budget} below the minimum feasible {denom} "
                          f"({n_entries} entries + {reward_queries} reward queries)")
    return int(n)


def allocate_model_free(budget: int, n_entries: int, reward_queries: int,
                        max_epochs: int = MAX_EPOCHS,
                        min_inner: int = MIN_INNER_STEPS) -> tuple[int, int, list[int]]:
    """(epochs, inner length, reference schedule) fitting the sample ledger
    into the budget: reference counts grow as 4^tau and all slack goes into
    the inner length."""
    for epochs in range(max_epochs, 0, -1):
        nref = [4 ** tau for tau in range(1, epochs + 1)]
        floor_cost = (sum(nref) + epochs * min_inner) * n_entries + reward_queries
        if floor_cost <= budget:
            inner = (budget - reward_queries - sum(nref) * n_entries) // (epochs * n_entries)
            return epochs, int(inner), nref
    minimum = (4 + min_inner) * n_entries + reward_queries
    raise ConfigError(f"budget {budget} below the minimum feasible {minimum} "
                      f"for the model-free ledger")


# --- cells ---------------------------------------------------------------------

@dataclass(frozen=True)
class ResultRow:
    experiment: str
    algorithm: str
    scheme: str
    budget: int
    trial: int
    q_error: float
    wall_ms: int
    samples_used: int

    def key(self) -> tuple:
        return (self.algorithm, self.scheme, self.budget, self.trial)

    def to_csv(self) -> str:
        return (f"{self.experiment},{self.algorithm},{self.scheme},{self.budget},"
                f"{self.trial},{self.q_error:.17g},{self.wall_ms},{self.samples_used}")


def _cell_seed(master_seed: int, family: str, budget: int, trial: int) -> int:
    return rngmod.child_seed(master_seed, rngmod.STREAM_TRIAL,
                             _FAMILY_IDS[family], budget, trial)


def run_cell(bundle: EnvBundle, experiment: str, algorithm: str,
             scheme_label: str, budget: int, trial: int,
             master_seed: int) -> ResultRow:
    scheme = bundle.schemes[scheme_label]
    family = "mb" if algorithm.startswith("mb") else "vrql"
    seed = _cell_seed(master_seed, family, budget, trial)
    counting = CountingEnv(bundle.env)
    plan = plan_for_scheme(scheme, bundle.space)
    native = getattr(bundle.env, "reward_scopes", None) == scheme.reward.scopes
    rq = reward_query_count(scheme, bundle.space, native)

    if family == "mb":
        n = allocate_model_based(budget, plan.n_entries, rq)
        config = MbqviConfig(scheme=scheme, n_replicates=n, rng_seed=seed,
                             iterations=vi_steps(bundle.gamma))
        result = mbqvi(counting, bundle.space, config, plan=plan)
        q = result.q
        used = result.diagnostics["samples_total"]
    else:
        epochs, inner, nref = allocate_model_free(budget, plan.n_entries, rq)
        config = VrqlConfig(scheme=scheme, epochs=epochs, inner=inner,
                            nref=nref, rng_seed=seed)
        q, diag = vrql_af(counting, bundle.space, config, plan=plan)
        used = diag["samples_total"]

    if used != counting.total_queries:
        raise RuntimeError(f"sample ledger {used} != instrumented count "
                           f"{counting.total_queries}")
    if used > budget:
        raise RuntimeError(f"cell used {used} samples over budget {budget}")
    return ResultRow(experiment=experiment, algorithm=algorithm,
                     scheme=scheme_label, budget=budget, trial=trial,
                     q_error=q_error(q, bundle.oracle_q), wall_ms=0,
                     samples_used=used)


def _cells(config: ExperimentConfig) -> list[tuple[str, str, int, int]]:
    cells = []
    for algorithm in config.algorithms:
        labels = ("K1",) if algorithm.endswith("-vanilla") else config.schemes
        for label in labels:
            for budget in config.budgets:
                for trial in range(config.trials):
                    cells.append((algorithm, label, budget, trial))
    return sorted(set(cells))


def _read_partial(path: str) -> dict[tuple, str]:
    done: dict[tuple, str] = {}
    if not os.path.exists(path):
        return done
    with open(path) as fp:
        header = fp.readline().strip()
        if header != RESULT_HEADER:
            raise ConfigError(f"{path}: unexpected header {header!r}")
        for line in fp:
            line = line.strip()
            if not line:
                continue
            fields = line.split(",")
            if len(fields) != 8:
                continue  # torn tail line from a crash: recompute that cell
            key = (fields[1], fields[2], int(fields[3]), int(fields[4]))
            done[key] = line
    return done


def run_experiment(config: ExperimentConfig, log=sys.stderr) -> str:
    """Run every cell, write results.csv and summary.csv; returns the results
    path.  Completed cells found in the partial file are skipped (crash-safe
    resume); the final CSV is sorted by cell key either way."""
    config.validate()
    if config.experiment == "coloring":
        return run_coloring_analysis(config)
    if config.experiment == "bound":
        return run_bound_analysis(config)

    os.makedirs(config.out_dir, exist_ok=True)
    partial_path = os.path.join(config.out_dir, "results.partial.csv")
    results_path = os.path.join(config.out_dir, "results.csv")
    summary_path = os.path.join(config.out_dir, "summary.csv")

    bundle = build_environment(config)
    for algorithm in config.algorithms:
        labels = ("K1",) if algorithm.endswith("-vanilla") else config.schemes
        for label in labels:
            if label not in bundle.schemes:
                raise ConfigError(f"scheme {label!r} not defined for "
                                  f"{config.experiment}")

    done = _read_partial(partial_path)
    cells = _cells(config)
    rows: dict[tuple, str] = dict(done)
    mode = "a" if done else "w"
    with open(partial_path, mode) as partial:
        if not done:
            partial.write(RESULT_HEADER + "\n")
            partial.flush()
        for cell in cells:
            if cell in rows:
                continue
            algorithm, label, budget, trial = cell
            t0 = time.perf_counter()
            row = run_cell(bundle, config.experiment, algorithm, label,
                           budget, trial, config.master_seed)
            elapsed_ms = (time.perf_counter() - t0) * 1000.0
            print(f"[{config.experiment}] {algorithm}/{label} budget={budget} "
                  f"trial={trial} q_error={row.q_error:.5f} "
                  f"({elapsed_ms:.0f} ms)", file=log)
            rows[cell] = row.to_csv()
            partial.write(rows[cell] + "\n")
            partial.flush()

    with open(results_path, "w") as fp:
        fp.write(RESULT_HEADER + "\n")
        for cell in cells:
            fp.write(rows[cell] + "\n")
    _write_summary(results_path, summary_path)
    os.remove(partial_path)
    return results_path


def _write_summary(results_path: str, summary_path: str) -> None:
    table = read_results(results_path)
    with open(summary_path, "w") as fp:
        fp.write("experiment,algorithm,scheme,budget,median,q1,q3,trials\n")
        for (experiment, algorithm, scheme, budget), errors in table.items():
            arr = np.array(errors)
            fp.write(f"{experiment},{algorithm},{scheme},{budget},"
                     f"{np.median(arr):.17g},{np.percentile(arr, 25):.17g},"
                     f"{np.percentile(arr, 75):.17g},{len(arr)}\n")


def read_results(path: str) -> dict[tuple, list[float]]:
    """results.csv -> {(experiment, algorithm, scheme, budget): [q_error...]}
    in file order (trials ascending)."""
    table: dict[tuple, list[float]] = {}
    with open(path) as fp:
        header = fp.readline().strip()
        if header != RESULT_HEADER:
            raise ValueError(f"{path}: unexpected header {header!r}")
        for lineno, line in enumerate(fp, start=2):
            line = line.strip()
            if not line:
                continue
            fields = line.split(",")
            if len(fields) != 8:
                raise ValueError(f"{path}: line {lineno}: expected 8 fields")
            key = (fields[0], fields[1], fields[2], int(fields[3]))
            table.setdefault(key, []).append(float(fields[5]))
    return table


def emit_plotdata(results_path: str, out_dir: str) -> list[str]:
    """One whitespace-separated file per (experiment, algorithm, scheme):
    budget, median q_error, and the interquartile band."""
    os.makedirs(out_dir, exist_ok=True)
    table = read_results(results_path)
    series: dict[tuple, dict[int, list[float]]] = {}
    for (experiment, algorithm, scheme, budget), errors in table.items():
        series.setdefault((experiment, algorithm, scheme), {})[budget] = errors
    written = []
    for (experiment, algorithm, scheme) in sorted(series):
        path = os.path.join(out_dir, f"{experiment}__{algorithm}__{scheme}.dat")
        with open(path, "w") as fp:
            fp.write("samples median q1 q3\n")
            for budget in sorted(series[(experiment, algorithm, scheme)]):
                arr = np.array(series[(experiment, algorithm, scheme)][budget])
                fp.write(f"{budget} {np.median(arr):.17g} "
                         f"{np.percentile(arr, 25):.17g} "
                         f"{np.percentile(arr, 75):.17g}\n")
        written.append(path)
    if not written:
        path = os.path.join(out_dir, "empty.dat")
        with open(path, "w") as fp:
            fp.write("samples median q1 q3\n")
        written.append(path)
    return written


# --- policy evaluation ----------------------------------------------------------

def evaluate_policy(env, policy: np.ndarray, horizon: int, episodes: int,
                    seed: int) -> float:
    """Mean cumulative penalty of Monte-Carlo rollouts under the true kernel.

    Wind environments start from (uniform price bin, uniform mismatch bin,
    mid state of charge) and accrue their physical penalty; generic
    environments start uniformly over states and accrue 1 - reward.
    """
    if horizon < 1:
        raise ValueError("horizon must be >= 1")
    space = env.space
    if isinstance(env, WindEnv):
        spec = env.spec
        n_p, n_d = spec.price_bins, spec.mismatch_bins
        level_step = spec.capacity / (spec.soc_bins - 1)
        mid = min(max(int(math.floor((spec.capacity / 2) / level_step + 0.5)), 0),
                  spec.soc_bins - 1)
        initial = np.array([p + n_p * d + n_p * n_d * mid
                            for d in range(n_d) for p in range(n_p)], dtype=np.int64)
        penalty = env.penalty
    else:
        initial = np.arange(space.n_states, dtype=np.int64)
        penalty = lambda x: 1.0 - env.reward(x)

    n_states = space.n_states
    total = 0.0
    for episode in range(episodes):
        gen = rngmod.substream(seed, rngmod.STREAM_ROLLOUT, episode)
        s = int(initial[int(gen.integers(len(initial)))])
        for _ in range(horizon):
            x = s + n_states * int(policy[s])
            total += penalty(x)
            s = env.sample_next(x, gen)
    return total / episodes


# --- coloring / bound analysis ---------------------------------------------------

def _load_scheme_and_space(config: ExperimentConfig) -> tuple[FactorizationScheme, FactoredSpace]:
    with open(config.scheme_file) as fp:
        scheme = load_scheme_v1(fp)
    return scheme, FactoredSpace(config.state_dims, config.action_dims)


def run_coloring_analysis(config: ExperimentConfig) -> str:
    scheme, space = _load_scheme_and_space(config)
    os.makedirs(config.out_dir, exist_ok=True)
    out = os.path.join(config.out_dir, "coloring.txt")
    with open(out, "w") as fp:
        fp.write(coloring_report(scheme, space))
    return out


def coloring_report(scheme: FactorizationScheme, space: FactoredSpace) -> str:
    """Conflict graph (DOT), both plans, and per-group cost CSV."""
    survivors, reuse = reduce_inclusive(scheme)
    graph = build_conflict_graph(scheme, survivors, space)
    buf = io.StringIO()
    buf.write(graph.to_dot() + "\n")
    if reuse:
        pairs = ", ".join(f"{k}->{v}" for k, v in sorted(reuse.items()))
        buf.write(f"# reuse map: {pairs}\n")
    plans = []
    if len(graph.vertices) <= EXACT_COLORING_GUARD:
        plans.append(("exact", color_exact(graph)))
    plans.append(("greedy", color_greedy(graph)))
    for name, plan in plans:
        buf.write(f"# {name}: n_entries={plan.n_entries} kappa={plan.n_groups}\n")
        buf.write("group,members,dmax\n")
        for gi, members in enumerate(plan.groups):
            member_text = " ".join(str(m) for m in members)
            buf.write(f"{gi},{member_text},{plan.group_costs[gi]}\n")
    return buf.getvalue()


def run_bound_analysis(config: ExperimentConfig) -> str:
    from .model_based import sample_bound
    scheme, space = _load_scheme_and_space(config)
    plan = plan_for_scheme(scheme, space)
    bound = sample_bound(scheme, space, plan, config.eps, config.delta,
                         config.gamma)
    os.makedirs(config.out_dir, exist_ok=True)
    out = os.path.join(config.out_dir, "bound.csv")
    with open(out, "w") as fp:
        fp.write("eps,delta,gamma,total,kernel_term,reward_term\n")
        fp.write(f"{config.eps:.17g},{config.delta:.17g},{config.gamma:.17g},"
                 f"{bound.total:.17g},{bound.kernel_term:.17g},{bound.reward_term}\n")
    return out
