"""Cost-optimal factorized synchronous sampling.

Pipeline: drop components whose input scopes are covered by another's
(inclusive reuse), build the scope-overlap conflict graph, partition the
survivors into scope-disjoint groups minimizing the summed per-group max
cost (exact branch-and-bound or a greedy heuristic), enumerate each group's
joint sampling set by modulo cycling, draw replicates from the generative
model, and turn the batch into empirical marginal kernels and local rewards.

Greedy note: classic coloring heuristics (DSATUR) minimize the number of
colors, but the objective here is the sum of per-group max costs, so the
heuristic first-fits vertices in descending cost order instead.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple, Optional, Protocol, Sequence, runtime_checkable

import numpy as np

from . import rng as rngmod
from .errors import CapacityError, CoverageError
from .factorization import (FactorizationScheme, MarginalKernel, assemble_pairs,
                            require_valid, scope_card, scope_value_coords,
                            state_projection)
from .mdp import FactoredSpace

EXACT_COLORING_GUARD = 10


@runtime_checkable
class GenerativeModel(Protocol):
    """Simulator contract: next-state draws and rewards at any chosen pair.

    ``sample_next_many(x, n, rng)`` must return the same values as ``n``
    successive ``sample_next(x, rng)`` calls on the same generator; replicate
    ``i`` is the ``i``-th variate of the stream.  Environments with natively
    additive rewards may expose ``reward_scopes``/``component_reward`` so the
    local rewards can be read off directly.
    """

    space: FactoredSpace

    def sample_next(self, x: int, rng: np.random.Generator) -> int: ...

    def sample_next_many(self, x: int, n: int, rng: np.random.Generator) -> np.ndarray: ...

    def reward(self, x: int) -> float: ...


class CountingEnv:
    """Instrumented wrapper counting generative-model queries (budget audit)."""

    def __init__(self, env):
        self.env = env
        self.space = env.space
        self.gamma = env.gamma
        self.sample_queries = 0
        self.reward_queries = 0

    def sample_next(self, x, rng):
        self.sample_queries += 1
        return self.env.sample_next(x, rng)

    def sample_next_many(self, x, n, rng):
        self.sample_queries += int(n)
        return self.env.sample_next_many(x, n, rng)

    def sample_entries(self, pairs, rng):
        self.sample_queries += len(pairs)
        fn = getattr(self.env, "sample_entries", None)
        if fn is not None:
            return fn(pairs, rng)
        return np.array([self.env.sample_next(int(x), rng) for x in pairs],
                        dtype=np.int64)

    def reward(self, x):
        self.reward_queries += 1
        return self.env.reward(x)

    @property
    def reward_scopes(self):
        return getattr(self.env, "reward_scopes", None)

    def component_reward(self, i, z):
        self.reward_queries += 1
        return self.env.component_reward(i, z)

    @property
    def total_queries(self) -> int:
        return self.sample_queries + self.reward_queries


# --- planning ----------------------------------------------------------------

def reduce_inclusive(scheme: FactorizationScheme) -> tuple[tuple[int, ...], dict[int, int]]:
    """Survivor components plus a reuse map from each dropped component to the
    smallest-index surviving component whose scope covers it."""
    scopes = [frozenset(z) for z in scheme.transition.input_scopes]
    n = len(scopes)
    survivors = []
    for k in range(n):
        strictly_covered = any(scopes[k] < scopes[j] for j in range(n) if j != k)
        duplicate_of_earlier = any(scopes[j] == scopes[k] for j in range(k))
        if not strictly_covered and not duplicate_of_earlier:
            survivors.append(k)
    reuse = {}
    surv_set = set(survivors)
    for k in range(n):
        if k in surv_set:
            continue
        reuse[k] = min(j for j in survivors if scopes[k] <= scopes[j])
    return tuple(survivors), reuse


@dataclass(frozen=True)
class ConflictGraph:
    """Scope-overlap graph over surviving components; vertex cost |X[Z_k^P]|."""

    vertices: tuple[int, ...]
    edges: tuple[tuple[int, int], ...]
    costs: tuple[int, ...]  # aligned with vertices

    def cost_of(self, v: int) -> int:
        return self.costs[self.vertices.index(v)]

    def neighbors(self, v: int) -> set[int]:
        out = set()
        for a, b in self.edges:
            if a == v:
                out.add(b)
            elif b == v:
                out.add(a)
        return out

    def to_dot(self) -> str:
        lines = ["graph conflicts {"]
        for v, c in zip(self.vertices, self.costs):
            lines.append(f'  {v} [label="{v} (cost {c})"];')
        for a, b in self.edges:
            lines.append(f"  {a} -- {b};")
        lines.append("}")
        return "\n".join(lines)


def build_conflict_graph(scheme: FactorizationScheme, survivors: Sequence[int],
                         space: FactoredSpace) -> ConflictGraph:
    """Edge between two survivors iff their input scopes overlap."""
    scopes = {k: set(scheme.transition.input_scopes[k]) for k in survivors}
    vertices = tuple(sorted(survivors))
    edges = []
    for i, a in enumerate(vertices):
        for b in vertices[i + 1:]:
            if scopes[a] & scopes[b]:
                edges.append((a, b))
    costs = tuple(scope_card(space, scheme.transition.input_scopes[k]) for k in vertices)
    return ConflictGraph(vertices=vertices, edges=tuple(edges), costs=costs)


@dataclass(frozen=True)
class GroupingPlan:
    """Scope-disjoint groups of components; cost of a group is its largest
    member scope, total cost is the per-pass number of unique pairs."""

    groups: tuple[tuple[int, ...], ...]
    group_costs: tuple[int, ...]

    @property
    def total_cost(self) -> int:
        return int(sum(self.group_costs))

    @property
    def n_entries(self) -> int:
        return self.total_cost

    @property
    def n_groups(self) -> int:
        return len(self.groups)


def _canonical_plan(groups: Sequence[Sequence[int]], cost: dict[int, int]) -> GroupingPlan:
    canon = sorted(tuple(sorted(g)) for g in groups if g)
    return GroupingPlan(groups=tuple(canon),
                        group_costs=tuple(max(cost[v] for v in g) for g in canon))


def color_exact(graph: ConflictGraph) -> GroupingPlan:
    """Minimum-total-cost partition into independent sets via branch-and-bound
    over set partitions; among minima returns the lexicographically smallest
    grouping.  Guarded to small graphs - use color_greedy beyond it."""
    n = len(graph.vertices)
    if n > EXACT_COLORING_GUARD:
        raise CapacityError(
            f"exact coloring guard is {EXACT_COLORING_GUARD} vertices, got {n}; "
            "use color_greedy")
    if n == 0:
        return GroupingPlan(groups=(), group_costs=())
    verts = sorted(graph.vertices)
    cost = dict(zip(graph.vertices, graph.costs))
    adj = {v: graph.neighbors(v) for v in verts}

    best: dict = {"cost": None, "key": None, "groups": None}
    groups: list[list[int]] = []
    dmax: list[int] = []

    def recurse(i: int, total: int) -> None:
        if best["cost"] is not None and total > best["cost"]:
            return
        if i == len(verts):
            key = tuple(tuple(g) for g in sorted(tuple(sorted(g)) for g in groups))
            if best["cost"] is None or (total, key) < (best["cost"], best["key"]):
                best.update(cost=total, key=key, groups=[list(g) for g in groups])
            return
        v = verts[i]
        for gi, members in enumerate(groups):
            if any(u in adj[v] for u in members):
                continue
            old = dmax[gi]
            new = max(old, cost[v])
            members.append(v)
            dmax[gi] = new
            recurse(i + 1, total - old + new)
            members.pop()
            dmax[gi] = old
        groups.append([v])
        dmax.append(cost[v])
        recurse(i + 1, total + cost[v])
        groups.pop()
        dmax.pop()

    recurse(0, 0)
    return _canonical_plan(best["groups"], cost)


def color_greedy(graph: ConflictGraph) -> GroupingPlan:
    """Deterministic first-fit in descending cost order (ties by index)."""
    cost = dict(zip(graph.vertices, graph.costs))
    adj = {v: graph.neighbors(v) for v in graph.vertices}
    order = sorted(graph.vertices, key=lambda v: (-cost[v], v))
    groups: list[list[int]] = []
    dmax: list[int] = []
    for v in order:
        compatible = [gi for gi, members in enumerate(groups)
                      if not any(u in adj[v] for u in members)]
        no_cost_increase = [gi for gi in compatible if dmax[gi] >= cost[v]]
        if no_cost_increase:
            gi = no_cost_increase[0]
        elif compatible:
            gi = compatible[0]
        else:
            groups.append([])
            dmax.append(0)
            gi = len(groups) - 1
        groups[gi].append(v)
        dmax[gi] = max(dmax[gi], cost[v])
    return _canonical_plan(groups, cost)


def plan_for_scheme(scheme: FactorizationScheme, space: FactoredSpace) -> GroupingPlan:
    """Reduce, build the conflict graph, and color (exact when within the
    guard, greedy otherwise)."""
    require_valid(scheme, space)
    survivors, _ = reduce_inclusive(scheme)
    graph = build_conflict_graph(scheme, survivors, space)
    if len(graph.vertices) <= EXACT_COLORING_GUARD:
        return color_exact(graph)
    return color_greedy(graph)


# --- joint sampling sets ------------------------------------------------------

@dataclass(frozen=True)
class JointSamplingSet:
    """One group's sampling entries: members' scopes cycle through all values
    (entry i holds value i mod |X[Z_j^P]| of member j), anchor elsewhere."""

    group_index: int
    members: tuple[int, ...]
    pairs: np.ndarray  # (D_max,) flat pair indices

    def __post_init__(self):
        pairs = np.ascontiguousarray(np.asarray(self.pairs, dtype=np.int64))
        pairs.setflags(write=False)
        object.__setattr__(self, "pairs", pairs)

    def __len__(self) -> int:
        return len(self.pairs)


def build_joint_sampling_sets(plan: GroupingPlan, scheme: FactorizationScheme,
                              space: FactoredSpace) -> list[JointSamplingSet]:
    require_valid(scheme, space)
    default_coords = space.unflat_index(scheme.x_default)
    sets = []
    for gi, members in enumerate(plan.groups):
        d_max = plan.group_costs[gi]
        pairs = np.empty(d_max, dtype=np.int64)
        base = scheme.x_default
        for j in members:
            for d in scheme.transition.input_scopes[j]:
                base -= default_coords[d] * space.strides[d]
        pairs[:] = base
        positions = np.arange(d_max, dtype=np.int64)
        for j in members:
            zp = scheme.transition.input_scopes[j]
            card = scope_card(space, zp)
            coords = scope_value_coords(space, zp)
            contrib = np.zeros(card, dtype=np.int64)
            for col, d in enumerate(zp):
                contrib += coords[:, col] * space.strides[d]
            pairs += contrib[positions % card]
        sets.append(JointSamplingSet(group_index=gi, members=tuple(members), pairs=pairs))
    return sets


@dataclass(frozen=True)
class SampleBatch:
    """Next-state draws for every sampling entry: ``next_states[g][e, i]`` is
    replicate i at entry e of group g."""

    sets: tuple[JointSamplingSet, ...]
    next_states: tuple[np.ndarray, ...]
    n_replicates: int

    def all_pairs(self) -> np.ndarray:
        return np.concatenate([s.pairs for s in self.sets])

    def all_samples(self) -> np.ndarray:
        return np.concatenate([ns for ns in self.next_states], axis=0)


def collect_samples(env: GenerativeModel, sets: Sequence[JointSamplingSet],
                    n_replicates: int, rng_seed: int) -> SampleBatch:
    """Draw ``n_replicates`` next states per entry; the (group, entry) pair
    addresses an independent RNG substream, so any execution schedule yields
    the same batch."""
    if n_replicates < 1:
        raise ValueError("n_replicates must be >= 1")
    outs = []
    for s in sets:
        draws = np.empty((len(s), n_replicates), dtype=np.int64)
        for e, pair in enumerate(s.pairs):
            gen = rngmod.substream(rng_seed, rngmod.STREAM_SAMPLE, s.group_index, e)
            draws[e] = env.sample_next_many(int(pair), n_replicates, gen)
        outs.append(draws)
    return SampleBatch(sets=tuple(sets), next_states=tuple(outs), n_replicates=n_replicates)


# --- estimation ---------------------------------------------------------------

def _project_pairs(space: FactoredSpace, pairs: np.ndarray, scope: Sequence[int]) -> np.ndarray:
    coords = space.coords_of_pairs(pairs)
    out = np.zeros(len(pairs), dtype=np.int64)
    sub = 1
    for d in scope:
        out += coords[:, d] * sub
        sub *= space.dims[d]
    return out


def estimate_marginals(batch: SampleBatch, scheme: FactorizationScheme,
                       space: FactoredSpace) -> list[MarginalKernel]:
    """Empirical marginal kernels for every component (dropped ones included).

    Each row pools all batch entries whose input-scope projection matches,
    across groups; this subsumes the inclusive-scope reuse map and strictly
    maximizes sample reuse.  Rows are exact count ratios.
    """
    require_valid(scheme, space)
    all_pairs = batch.all_pairs()
    all_samples = batch.all_samples()  # (E, N)
    n = batch.n_replicates
    out = []
    for k in range(scheme.transition.n_components):
        zp = scheme.transition.input_scopes[k]
        zs = scheme.transition.state_scopes[k]
        n_rows = scope_card(space, zp)
        n_cols = scope_card(space, zs)
        row_of_entry = _project_pairs(space, all_pairs, zp)
        col_of_sample = state_projection(space, zs)[all_samples]
        flat = (row_of_entry[:, None] * n_cols + col_of_sample).ravel()
        counts = np.bincount(flat, minlength=n_rows * n_cols).reshape(n_rows, n_cols)
        totals = counts.sum(axis=1)
        if np.any(totals == 0):
            v = int(np.argmax(totals == 0))
            raise CoverageError(f"component {k}: no samples cover scope value {v}")
        if np.any(totals < n):
            v = int(np.argmax(totals < n))
            raise CoverageError(f"component {k}: scope value {v} has fewer than "
                                f"{n} samples")
        out.append(MarginalKernel(component=k, table=counts / totals[:, None]))
    return out


def reward_query_count(scheme: FactorizationScheme, space: FactoredSpace,
                       native: bool) -> int:
    """Generative-model queries needed by estimate_rewards."""
    total = sum(scope_card(space, z) for z in scheme.reward.scopes)
    if not native and scheme.reward.n_components > 1:
        total += 1  # the anchor reward used by the correction term
    return total


class RewardEstimate(NamedTuple):
    local_rewards: tuple[np.ndarray, ...]
    n_queries: int
    native: bool


def estimate_rewards(env, scheme: FactorizationScheme,
                     space: FactoredSpace) -> RewardEstimate:
    """Local reward vectors from generative-model queries.

    If the environment natively decomposes its reward over exactly the
    scheme's scopes, read each component directly; otherwise query the anchor
    assembly of every scope value and apply the anchored-difference
    construction (exact for additive rewards).
    """
    require_valid(scheme, space)
    native_scopes = getattr(env, "reward_scopes", None)
    if native_scopes is not None and tuple(native_scopes) == scheme.reward.scopes:
        locals_ = tuple(np.array([env.component_reward(i, z)
                                  for z in range(scope_card(space, zr))])
                        for i, zr in enumerate(scheme.reward.scopes))
        return RewardEstimate(locals_, reward_query_count(scheme, space, True), True)
    n_comp = scheme.reward.n_components
    correction = 0.0
    if n_comp > 1:
        correction = (n_comp - 1) / n_comp * env.reward(scheme.x_default)
    locals_ = tuple(
        np.array([env.reward(int(x)) for x in assemble_pairs(space, zr, scheme.x_default)])
        - correction
        for zr in scheme.reward.scopes)
    return RewardEstimate(locals_, reward_query_count(scheme, space, False), False)


class SamplingCost(NamedTuple):
    total: int
    n_entries: int


def sampling_cost(plan: GroupingPlan, n_replicates: int) -> SamplingCost:
    """Total next-state draws for one pass: unique entries times replicates."""
    return SamplingCost(total=plan.n_entries * n_replicates, n_entries=plan.n_entries)
