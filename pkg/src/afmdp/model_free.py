"""Variance-reduced Q-learning with approximate factorization (VRQL-AF).

A one-shot sample table holds one next-state draw per joint-sampling-set
entry; the factored empirical Bellman operator assembles, for every pair, a
synthetic next state from the per-component sub-draws and backs it up.  The
VRQL loop couples a fresh table per inner step with a high-accuracy reference
operator rebuilt at each epoch from the epoch-start iterate.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional, Sequence, Union

import numpy as np

from . import kernels
from . import rng as rngmod
from .errors import CoverageError
from .factorization import (FactorizationScheme, pair_projection,
                            require_valid, scope_card, state_contribution,
                            state_projection)
from .mdp import FactoredSpace
from .sampling import (GroupingPlan, JointSamplingSet,
                       build_joint_sampling_sets, estimate_rewards,
                       plan_for_scheme)


def sample_entries(env, pairs: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """One next-state draw per pair; entry i consumes the i-th variate of rng.

    Uses the environment's batched method when available (still counted by the
    instrumented wrapper), else falls back to per-pair draws.
    """
    fn = getattr(env, "sample_entries", None)
    if fn is not None:
        return fn(pairs, rng)
    return np.array([env.sample_next(int(x), rng) for x in pairs], dtype=np.int64)


def _project_entry_pairs(space: FactoredSpace, pairs: np.ndarray,
                         scope: Sequence[int]) -> np.ndarray:
    coords = space.coords_of_pairs(pairs)
    out = np.zeros(len(pairs), dtype=np.int64)
    sub = 1
    for d in scope:
        out += coords[:, d] * sub
        sub *= space.dims[d]
    return out


@dataclass(frozen=True)
class FactoredOperatorContext:
    """Static index structure shared by every one-shot operator of a
    (space, scheme, plan) triple.

    ``src[j, x]`` is the sampling entry supplying component j's sub-next-state
    at pair x: the first entry, in group-major order, whose input-scope
    projection matches x (deterministic and independent of realized samples).
    ``contrib[j, s]`` is the flat-state-index contribution of sample s's
    component-j part; summing over the state-scope partition rebuilds a full
    flat state index.
    """

    space: FactoredSpace
    scheme: FactorizationScheme
    sets: tuple[JointSamplingSet, ...]
    entry_pairs: np.ndarray   # (E,)
    src: np.ndarray           # (K, X)
    contrib: np.ndarray       # (K, S)

    @property
    def n_entries(self) -> int:
        return len(self.entry_pairs)

    def component_supplier(self, j: int) -> np.ndarray:
        """(|X[Z_j^P]|,) entry index supplying each scope value of component j."""
        zp = self.scheme.transition.input_scopes[j]
        proj = _project_entry_pairs(self.space, self.entry_pairs, zp)
        values, first = np.unique(proj, return_index=True)
        if len(values) != scope_card(self.space, zp):
            missing = sorted(set(range(scope_card(self.space, zp))) - set(values.tolist()))
            raise CoverageError(f"component {j}: sampling sets miss scope values {missing}")
        return first


def build_operator_context(space: FactoredSpace, scheme: FactorizationScheme,
                           plan: GroupingPlan) -> FactoredOperatorContext:
    require_valid(scheme, space)
    sets = tuple(build_joint_sampling_sets(plan, scheme, space))
    entry_pairs = (np.concatenate([s.pairs for s in sets]) if sets
                   else np.empty(0, np.int64))
    tr = scheme.transition
    src = np.empty((tr.n_components, space.n_pairs), dtype=np.int64)
    contrib = np.empty((tr.n_components, space.n_states), dtype=np.int64)
    ctx = FactoredOperatorContext(space=space, scheme=scheme, sets=sets,
                                  entry_pairs=entry_pairs, src=src, contrib=contrib)
    for j in range(tr.n_components):
        supplier = ctx.component_supplier(j)
        src[j] = supplier[pair_projection(space, tr.input_scopes[j])]
        zs = tr.state_scopes[j]
        contrib[j] = state_contribution(space, zs)[state_projection(space, zs)]
    entry_pairs.setflags(write=False)
    src.setflags(write=False)
    contrib.setflags(write=False)
    return ctx


@dataclass(frozen=True)
class OneShotSampleTable:
    """One sampled next state per sampling entry, addressable per component:
    every scope value of every component maps to exactly one sub-next-state."""

    context: FactoredOperatorContext
    samples: np.ndarray  # (E,) flat next states

    def component_map(self, j: int) -> np.ndarray:
        """(|X[Z_j^P]|,) sub-next-state index for each scope value of j."""
        space = self.context.space
        zs = self.context.scheme.transition.state_scopes[j]
        supplier = self.context.component_supplier(j)
        return state_projection(space, zs)[self.samples[supplier]]


def generate_bellman_table(env, scheme: FactorizationScheme, plan: GroupingPlan,
                           rng_seed: int,
                           context: Optional[FactoredOperatorContext] = None
                           ) -> OneShotSampleTable:
    """Sample every joint-sampling-set entry once (one-shot operator input)."""
    if context is None:
        context = build_operator_context(env.space, scheme, plan)
    gen = rngmod.substream(rng_seed, rngmod.STREAM_TABLE)
    samples = sample_entries(env, context.entry_pairs, gen)
    return OneShotSampleTable(context=context, samples=np.asarray(samples, dtype=np.int64))


def apply_factored_bellman(table: OneShotSampleTable, q: np.ndarray,
                           rhat: np.ndarray, gamma: float) -> np.ndarray:
    """[H(Q)](x) = rhat(x) + gamma * max_a' Q(synthetic next state, a').

    A gamma-contraction in q for any fixed table.
    """
    ctx = table.context
    if q.shape != (ctx.space.n_pairs,):
        raise ValueError(f"q shape {q.shape} != ({ctx.space.n_pairs},)")
    vmax = kernels.max_over_actions(np.ascontiguousarray(q), ctx.space.n_states)
    return kernels.table_backup(table.samples, ctx.src, ctx.contrib, vmax,
                                np.asarray(rhat, dtype=np.float64), float(gamma))


def reference_operator(env, scheme: FactorizationScheme, plan: GroupingPlan,
                       q_ref: np.ndarray, n_tau: int, rng_seed: int,
                       rhat: Optional[np.ndarray] = None, epoch: int = 0,
                       context: Optional[FactoredOperatorContext] = None) -> np.ndarray:
    """Mean of n_tau independent one-shot operators applied to q_ref."""
    if n_tau < 1:
        raise ValueError("n_tau must be >= 1")
    if context is None:
        context = build_operator_context(env.space, scheme, plan)
    if rhat is None:
        est = estimate_rewards(env, scheme, env.space)
        rhat = compose_reward_estimate(est.local_rewards, scheme, env.space)
    vmax_ref = kernels.max_over_actions(np.ascontiguousarray(q_ref), env.space.n_states)
    acc = np.zeros(env.space.n_pairs)
    for i in range(n_tau):
        gen = rngmod.substream(rng_seed, rngmod.STREAM_REFERENCE, epoch, i)
        samples = sample_entries(env, context.entry_pairs, gen)
        acc += kernels.table_backup(np.asarray(samples, dtype=np.int64), context.src,
                                    context.contrib, vmax_ref,
                                    np.asarray(rhat, dtype=np.float64), float(env.gamma))
    acc /= n_tau
    return acc


def compose_reward_estimate(local_rewards: Sequence[np.ndarray],
                            scheme: FactorizationScheme,
                            space: FactoredSpace) -> np.ndarray:
    """Sum local reward estimates into a dense reward vector."""
    out = np.zeros(space.n_pairs)
    for i, local in enumerate(local_rewards):
        out += np.asarray(local, dtype=np.float64)[
            pair_projection(space, scheme.reward.scopes[i])]
    return out


def learning_rate(t: int, gamma: float) -> float:
    """Rescaled-linear stepsize 1 / (1 + (1-gamma) * (t+1)), t counted from 0."""
    if t < 0:
        raise ValueError("t must be >= 0")
    return 1.0 / (1.0 + (1.0 - gamma) * (t + 1))


class Schedule:
    """Epoch schedule (T, M, N_tau) from target accuracy and confidence."""

    def __init__(self, epochs: int, inner: int, nref: Callable[[int], int]):
        self.epochs = epochs
        self.inner = inner
        self.nref = nref

    def __iter__(self):
        return iter((self.epochs, self.inner, self.nref))


def epoch_schedule(eps: float, delta: float, gamma: float,
                   scheme: FactorizationScheme, space: FactoredSpace,
                   c1: float = 1.0, c2: float = 1.0, c3: float = 1.0) -> Schedule:
    """Theory schedules: T, M logarithmic, N_tau growing as 4^tau.

    The theory leaves the universal constants abstract; they default to 1 and
    are exposed for calibration.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    if not 0 < delta < 1:
        raise ValueError("delta must be in (0, 1)")
    if not 0 < gamma < 1:
        raise ValueError("gamma must be in (0, 1)")
    union: set[int] = set()
    for zp in scheme.transition.input_scopes:
        union.update(zp)
    u_card = scope_card(space, tuple(sorted(union)))
    epochs = max(1, math.ceil(c1 * math.log(1.0 / ((1.0 - gamma) * eps))))
    inner = max(1, math.ceil(
        c2 * math.log(6 * epochs * u_card / ((1.0 - gamma) * delta))
        / (1.0 - gamma) ** 3))

    def nref(tau: int) -> int:
        return max(1, math.ceil(
            c3 * 4.0 ** tau * math.log(6 * epochs * u_card) / (1.0 - gamma) ** 2))

    return Schedule(epochs, inner, nref)


@dataclass
class VrqlConfig:
    """VRQL-AF run parameters.  ``nref`` maps the 1-based epoch index to the
    reference sample count (an int means a constant schedule)."""

    scheme: FactorizationScheme
    epochs: int
    inner: int
    nref: Union[int, Sequence[int], Callable[[int], int]]
    rng_seed: int
    lr: Callable[[int, float], float] = learning_rate
    oracle_reward: bool = False

    def nref_at(self, tau: int) -> int:
        if callable(self.nref):
            return int(self.nref(tau))
        if isinstance(self.nref, int):
            return self.nref
        return int(self.nref[tau - 1])

    def validate(self) -> None:
        if self.epochs < 1 or self.inner < 1:
            raise ValueError("epochs and inner length must be >= 1")
        for tau in range(1, self.epochs + 1):
            if self.nref_at(tau) < 1:
                raise ValueError(f"nref({tau}) must be >= 1")


def vrql_af(env, space: FactoredSpace, config: VrqlConfig,
            oracle_q: Optional[np.ndarray] = None,
            plan: Optional[GroupingPlan] = None) -> tuple[np.ndarray, dict]:
    """Run VRQL-AF and return (final Q, diagnostics).

    Per epoch tau: a reference operator image of the epoch-start iterate is
    averaged over nref(tau) fresh tables, then each inner step draws one fresh
    table and applies the variance-reduced update with both empirical
    evaluations sharing that table.  Diagnostics include the sample ledger
    (each table costs one pass over the sampling entries, the reward build is
    counted once) and per-epoch sup-norm errors when an oracle is supplied.
    """
    config.validate()
    scheme = config.scheme
    require_valid(scheme, space)
    if plan is None:
        plan = plan_for_scheme(scheme, space)
    ctx = build_operator_context(space, scheme, plan)
    gamma = float(env.gamma)
    n_states = space.n_states

    if config.oracle_reward:
        rhat = np.array([env.reward(x) for x in range(space.n_pairs)])
        reward_queries = space.n_pairs
    else:
        est = estimate_rewards(env, scheme, space)
        rhat = compose_reward_estimate(est.local_rewards, scheme, space)
        reward_queries = est.n_queries
    rhat = np.ascontiguousarray(rhat)

    q_bar = np.zeros(space.n_pairs)
    ledger = reward_queries
    epoch_errors: list[float] = []
    samples_cumulative: list[int] = []
    for tau in range(1, config.epochs + 1):
        n_tau = config.nref_at(tau)
        vmax_ref = kernels.max_over_actions(q_bar, n_states)
        href = np.zeros(space.n_pairs)
        for i in range(n_tau):
            gen = rngmod.substream(config.rng_seed, rngmod.STREAM_REFERENCE, tau, i)
            samples = sample_entries(env, ctx.entry_pairs, gen)
            href += kernels.table_backup(np.asarray(samples, dtype=np.int64),
                                         ctx.src, ctx.contrib, vmax_ref, rhat, gamma)
        href /= n_tau

        q = q_bar.copy()
        for t in range(config.inner):
            gen = rngmod.substream(config.rng_seed, rngmod.STREAM_INNER, tau, t)
            samples = sample_entries(env, ctx.entry_pairs, gen)
            eta = config.lr(t, gamma)
            kernels.vrql_step(q, np.asarray(samples, dtype=np.int64), ctx.src,
                              ctx.contrib, vmax_ref, href, rhat, gamma,
                              float(eta), n_states)
        q_bar = q
        ledger += (n_tau + config.inner) * ctx.n_entries
        samples_cumulative.append(ledger)
        if oracle_q is not None:
            epoch_errors.append(float(np.max(np.abs(q_bar - oracle_q))))

    diagnostics = {
        "n_entries": ctx.n_entries,
        "reward_queries": reward_queries,
        "samples_total": ledger,
        "samples_cumulative": samples_cumulative,
        "epoch_errors": epoch_errors,
        "plan": plan,
    }
    return q_bar, diagnostics
