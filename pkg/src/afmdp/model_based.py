"""Model-based Q-value iteration with approximate factorization.

Estimate the factored model via cost-optimal synchronous sampling, compose
the dense kernel and reward, then run empirical Q-value iteration from zero.
Also houses the sample-size calculator matching the published bound with its
fixed constants (576 and 24) evaluated on the plan actually in use.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple, Optional

import numpy as np

from .errors import SchemeError
from .factorization import (FactoredModel, FactorizationScheme, compose_kernel,
                            compose_reward, require_valid, scope_card)
from .mdp import FactoredSpace, state_values
from .sampling import (GroupingPlan, build_conflict_graph,
                       build_joint_sampling_sets, collect_samples, color_exact,
                       color_greedy, estimate_marginals, estimate_rewards,
                       plan_for_scheme, reduce_inclusive, EXACT_COLORING_GUARD,
                       ConflictGraph)

DEFAULT_C_BAR2 = 4.0
THEOREM_C0 = 576.0
THEOREM_C1 = 24.0


def required_iterations(eps: float, gamma: float, c_bar2: float = DEFAULT_C_BAR2) -> int:
    """Value-iteration steps sufficient for an eps-accurate fixed point:
    ceil(c_bar2 * ln(1 / (eps * (1-gamma)))), at least 1."""
    if not 0.0 < eps < 1.0:
        raise ValueError(f"eps must be in (0, 1), got {eps}")
    if not 0.0 < gamma < 1.0:
        raise ValueError(f"gamma must be in (0, 1), got {gamma}")
    return max(1, math.ceil(c_bar2 * math.log(1.0 / (eps * (1.0 - gamma)))))


@dataclass
class MbqviConfig:
    """Inputs of one model-based run: replicates per sampling entry, the
    iteration count (or accuracy target to derive it), seed, and scheme."""

    scheme: FactorizationScheme
    n_replicates: int
    rng_seed: int
    iterations: Optional[int] = None
    eps: Optional[float] = None
    oracle_reward: bool = False

    def resolve_iterations(self, gamma: float) -> int:
        if self.iterations is not None:
            if self.iterations < 1:
                raise ValueError("iterations must be >= 1")
            return self.iterations
        if self.eps is not None:
            return required_iterations(self.eps, gamma)
        raise ValueError("config needs iterations or eps")


class MbqviResult(NamedTuple):
    q: np.ndarray
    model: FactoredModel
    diagnostics: dict


def mbqvi(env, space: FactoredSpace, config: MbqviConfig,
          plan: Optional[GroupingPlan] = None) -> MbqviResult:
    """Full pipeline: plan, sample, estimate, compose, iterate."""
    scheme = config.scheme
    require_valid(scheme, space)
    if config.n_replicates < 1:
        raise ValueError("n_replicates must be >= 1")
    if plan is None:
        plan = plan_for_scheme(scheme, space)
    gamma = float(env.gamma)
    iterations = config.resolve_iterations(gamma)

    sets = build_joint_sampling_sets(plan, scheme, space)
    batch = collect_samples(env, sets, config.n_replicates, config.rng_seed)
    marginals = estimate_marginals(batch, scheme, space)
    est = estimate_rewards(env, scheme, space)
    model = FactoredModel(scheme, marginals, est.local_rewards)

    kernel_hat = compose_kernel(model, space)
    if config.oracle_reward:
        rhat = np.array([env.reward(x) for x in range(space.n_pairs)])
        reward_queries = space.n_pairs
    else:
        rhat = compose_reward(model, space)
        reward_queries = est.n_queries

    q = np.zeros(space.n_pairs)
    residuals = []
    for _ in range(iterations):
        q_next = rhat + gamma * (kernel_hat @ state_values(q, space))
        residuals.append(float(np.max(np.abs(q_next - q))))
        q = q_next

    n_entries = plan.n_entries
    diagnostics = {
        "n_entries": n_entries,
        "reward_queries": reward_queries,
        "samples_total": n_entries * config.n_replicates + reward_queries,
        "iterations": iterations,
        "residuals": residuals,
        "plan": plan,
    }
    return MbqviResult(q=q, model=model, diagnostics=diagnostics)


def reward_grouping_plan(scheme: FactorizationScheme, space: FactoredSpace) -> GroupingPlan:
    """Grouping of the reward components by the same reduce-and-color pipeline
    used for transitions (subset elimination, then disjoint-scope groups)."""
    scopes = [frozenset(z) for z in scheme.reward.scopes]
    n = len(scopes)
    survivors = [k for k in range(n)
                 if not any(scopes[k] < scopes[j] for j in range(n) if j != k)
                 and not any(scopes[j] == scopes[k] for j in range(k))]
    vertices = tuple(survivors)
    edges = []
    for i, a in enumerate(vertices):
        for b in vertices[i + 1:]:
            if scopes[a] & scopes[b]:
                edges.append((a, b))
    costs = tuple(scope_card(space, scheme.reward.scopes[k]) for k in vertices)
    graph = ConflictGraph(vertices=vertices, edges=tuple(edges), costs=costs)
    if len(vertices) <= EXACT_COLORING_GUARD:
        return color_exact(graph)
    return color_greedy(graph)


class SampleBound(NamedTuple):
    total: float
    kernel_term: float
    reward_term: int


def sample_bound(scheme: FactorizationScheme, space: FactoredSpace,
                 plan: GroupingPlan, eps: float, delta: float,
                 gamma: float) -> SampleBound:
    """Published sufficient sample size, evaluated on the actual plan:

        576 * N_entry * ln(24 * |X[union Z_k^P]| / delta) / (eps^2 (1-gamma)^3)
        + (reward grouping total cost)
    """
    if not 0.0 < eps < 1.0:
        raise ValueError(f"eps must be in (0, 1), got {eps}")
    if not 0.0 < delta < 1.0:
        raise ValueError(f"delta must be in (0, 1), got {delta}")
    if not 0.0 < gamma < 1.0:
        raise ValueError(f"gamma must be in (0, 1), got {gamma}")
    union: set[int] = set()
    for zp in scheme.transition.input_scopes:
        union.update(zp)
    u_card = scope_card(space, tuple(sorted(union)))
    kernel_term = (THEOREM_C0 * plan.n_entries
                   * math.log(THEOREM_C1 * u_card / delta)
                   / (eps * eps * (1.0 - gamma) ** 3))
    reward_term = reward_grouping_plan(scheme, space).n_entries
    return SampleBound(total=kernel_term + reward_term,
                       kernel_term=kernel_term, reward_term=reward_term)
