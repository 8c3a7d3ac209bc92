"""Approximate-factorization schemes and their exact analysis.

A scheme splits next-state dimensions into components (a partition) and names,
for each component, the state/action dimensions its transitions are allowed to
depend on, plus additive reward scopes.  This module computes the anchored
marginal kernels, composes factored models back into dense kernels/rewards,
and evaluates the factorization errors that drive the bias bound.

Scope convention: dimensions are 0-based, state dims 0..n-1 then action dims
n..n+m-1; scopes are stored sorted and duplicate-free.  Scope values are
enumerated by ascending mixed-radix sub-index over the scope's dims in
ascending dimension order (dimension 0 least significant), matching the flat
pair codec.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence, TextIO

import numpy as np

from .errors import CapacityError, SchemeError
from .mdp import FactoredSpace, TabularMdp

SUP_VERTEX_GUARD = 10**6


def _norm_scope(scope: Iterable[int]) -> tuple[int, ...]:
    return tuple(sorted({int(i) for i in scope}))


@dataclass(frozen=True)
class TransitionScheme:
    """Transition factorization: K next-state scopes (a partition of the state
    dims) and K input scopes over the state-action dims."""

    state_scopes: tuple[tuple[int, ...], ...]
    input_scopes: tuple[tuple[int, ...], ...]

    def __init__(self, state_scopes, input_scopes):
        state_scopes = tuple(_norm_scope(s) for s in state_scopes)
        input_scopes = tuple(_norm_scope(s) for s in input_scopes)
        if len(state_scopes) != len(input_scopes):
            raise SchemeError("state_scopes and input_scopes must have equal length")
        if not state_scopes:
            raise SchemeError("need at least one component")
        object.__setattr__(self, "state_scopes", state_scopes)
        object.__setattr__(self, "input_scopes", input_scopes)

    @property
    def n_components(self) -> int:
        return len(self.state_scopes)


@dataclass(frozen=True)
class RewardScheme:
    """Additive reward factorization: L scopes over the state-action dims."""

    scopes: tuple[tuple[int, ...], ...]

    def __init__(self, scopes):
        scopes = tuple(_norm_scope(s) for s in scopes)
        if not scopes:
            raise SchemeError("need at least one reward component")
        object.__setattr__(self, "scopes", scopes)

    @property
    def n_components(self) -> int:
        return len(self.scopes)


@dataclass(frozen=True)
class FactorizationScheme:
    """Full scheme: transition part, reward part, and the anchor pair whose
    coordinates fill every dimension a sampling set leaves unspecified."""

    transition: TransitionScheme
    reward: RewardScheme
    x_default: int = 0


def trivial_scheme(space: FactoredSpace, x_default: int = 0) -> FactorizationScheme:
    """The K=1, L=1 scheme (no factorization): vanilla baselines run on it."""
    n = space.n_state_dims
    full = tuple(range(len(space.dims)))
    return FactorizationScheme(
        transition=TransitionScheme([tuple(range(n))], [full]),
        reward=RewardScheme([full]),
        x_default=x_default,
    )


# --- scope geometry ---------------------------------------------------------

def scope_card(space: FactoredSpace, scope: Sequence[int]) -> int:
    """|X[Z]|: number of scope values."""
    card = 1
    for d in scope:
        card *= space.dims[d]
    return card


def scope_value_coords(space: FactoredSpace, scope: Sequence[int]) -> np.ndarray:
    """(|X[Z]|, |Z|) coordinates of scope values in canonical enumeration."""
    card = scope_card(space, scope)
    out = np.empty((card, len(scope)), dtype=np.int64)
    rem = np.arange(card, dtype=np.int64)
    for j, d in enumerate(scope):
        size = space.dims[d]
        out[:, j] = rem % size
        rem //= size
    return out


def pair_projection(space: FactoredSpace, scope: Sequence[int]) -> np.ndarray:
    """(n_pairs,) map from flat pair index to scope-value index."""
    coords = space.coords_of_pairs(np.arange(space.n_pairs, dtype=np.int64))
    out = np.zeros(space.n_pairs, dtype=np.int64)
    sub = 1
    for d in scope:
        out += coords[:, d] * sub
        sub *= space.dims[d]
    return out


def state_projection(space: FactoredSpace, scope: Sequence[int]) -> np.ndarray:
    """(n_states,) map from flat state index to scope-value index (scope over
    state dims only)."""
    coords = space.coords_of_states(np.arange(space.n_states, dtype=np.int64))
    out = np.zeros(space.n_states, dtype=np.int64)
    sub = 1
    for d in scope:
        if d >= space.n_state_dims:
            raise SchemeError(f"state scope contains action dimension {d}")
        out += coords[:, d] * sub
        sub *= space.dims[d]
    return out


def state_contribution(space: FactoredSpace, scope: Sequence[int]) -> np.ndarray:
    """(|S[Z]|,) flat-state-index contribution of each scope value of a state
    scope; summing contributions over a partition of [n] yields the full flat
    state index."""
    coords = scope_value_coords(space, scope)
    out = np.zeros(len(coords), dtype=np.int64)
    for j, d in enumerate(scope):
        out += coords[:, j] * space.strides[d]
    return out


def assemble_pairs(space: FactoredSpace, scope: Sequence[int], x_default: int) -> np.ndarray:
    """(|X[Z]|,) flat pair indices: scope dims cycle through all values, the
    remaining dims are copied from the anchor."""
    default_coords = space.unflat_index(x_default)
    base = x_default
    for d in scope:
        base -= default_coords[d] * space.strides[d]
    coords = scope_value_coords(space, scope)
    out = np.full(len(coords), base, dtype=np.int64)
    for j, d in enumerate(scope):
        out += coords[:, j] * space.strides[d]
    return out


# --- scheme validation ------------------------------------------------------

def validate_scheme(scheme: FactorizationScheme, space: FactoredSpace) -> list[str]:
    """Return every violated structural invariant (empty list when valid)."""
    n = space.n_state_dims
    n_dims = len(space.dims)
    violations: list[str] = []

    seen: dict[int, int] = {}
    for k, zs in enumerate(scheme.transition.state_scopes):
        if not zs:
            violations.append(f"state scope {k} is empty")
        for d in zs:
            if not 0 <= d < n:
                violations.append(f"state scope {k}: index {d} out of range [0, {n})")
            elif d in seen:
                violations.append(f"not a partition: index {d} repeated in scopes {seen[d]} and {k}")
            else:
                seen[d] = k
    for d in range(n):
        if d not in seen:
            violations.append(f"not a partition: index {d} uncovered")

    for k, zp in enumerate(scheme.transition.input_scopes):
        if not zp:
            violations.append(f"input scope {k} is empty")
        for d in zp:
            if not 0 <= d < n_dims:
                violations.append(f"input scope {k}: index {d} out of range [0, {n_dims})")

    for i, zr in enumerate(scheme.reward.scopes):
        if not zr:
            violations.append(f"reward scope {i} is empty")
        for d in zr:
            if not 0 <= d < n_dims:
                violations.append(f"reward scope {i}: index {d} out of range [0, {n_dims})")

    if not 0 <= scheme.x_default < space.n_pairs:
        violations.append(f"x_default {scheme.x_default} out of range [0, {space.n_pairs})")
    return violations


def require_valid(scheme: FactorizationScheme, space: FactoredSpace) -> None:
    violations = validate_scheme(scheme, space)
    if violations:
        raise SchemeError("; ".join(violations))


# --- factored models --------------------------------------------------------

@dataclass(frozen=True)
class MarginalKernel:
    """Row-stochastic table (|X[Z_k^P]| x |S[Z_k^S]|) for one component."""

    component: int
    table: np.ndarray

    def __post_init__(self):
        table = np.ascontiguousarray(np.asarray(self.table, dtype=np.float64))
        if table.ndim != 2:
            raise ValueError("marginal table must be 2-D")
        if np.any(table < 0):
            raise ValueError("marginal table has negative entries")
        rowsum = table.sum(axis=1)
        if np.any(np.abs(rowsum - 1.0) > 1e-9):
            bad = int(np.argmax(np.abs(rowsum - 1.0)))
            raise ValueError(f"marginal row {bad} sums to {rowsum[bad]!r}, not 1")
        table.setflags(write=False)
        object.__setattr__(self, "table", table)


@dataclass(frozen=True)
class FactoredModel:
    """Estimated (or exact) marginals plus local rewards for one scheme."""

    scheme: FactorizationScheme
    marginals: tuple[MarginalKernel, ...]
    local_rewards: tuple[np.ndarray, ...]

    def __init__(self, scheme, marginals, local_rewards):
        marginals = tuple(marginals)
        local_rewards = tuple(np.asarray(r, dtype=np.float64) for r in local_rewards)
        if len(marginals) != scheme.transition.n_components:
            raise ValueError("one marginal kernel per transition component required")
        if len(local_rewards) != scheme.reward.n_components:
            raise ValueError("one local reward vector per reward component required")
        object.__setattr__(self, "scheme", scheme)
        object.__setattr__(self, "marginals", marginals)
        object.__setattr__(self, "local_rewards", local_rewards)

    def check_shapes(self, space: FactoredSpace) -> None:
        tr = self.scheme.transition
        for k, m in enumerate(self.marginals):
            want = (scope_card(space, tr.input_scopes[k]), scope_card(space, tr.state_scopes[k]))
            if m.table.shape != want:
                raise ValueError(f"component {k}: marginal shape {m.table.shape} != {want}")
        for i, r in enumerate(self.local_rewards):
            want_len = scope_card(space, self.scheme.reward.scopes[i])
            if r.shape != (want_len,):
                raise ValueError(f"reward component {i}: shape {r.shape} != ({want_len},)")


def _marginalize_rows(rows: np.ndarray, proj_s: np.ndarray, n_out: int) -> np.ndarray:
    """Sum kernel rows over next states grouped by their scope projection."""
    out = np.zeros((rows.shape[0], n_out))
    np.add.at(out, (np.arange(rows.shape[0])[:, None], proj_s[None, :]), rows)
    return out


def exact_marginal(mdp: TabularMdp, scheme: FactorizationScheme, k: int) -> MarginalKernel:
    """Anchored member of the feasible marginal set: condition the true kernel
    on the anchor's complement coordinates and marginalize next states onto
    the component's state scope."""
    require_valid(scheme, mdp.space)
    zp = scheme.transition.input_scopes[k]
    zs = scheme.transition.state_scopes[k]
    pairs = assemble_pairs(mdp.space, zp, scheme.x_default)
    proj_s = state_projection(mdp.space, zs)
    table = _marginalize_rows(mdp.kernel[pairs], proj_s, scope_card(mdp.space, zs))
    return MarginalKernel(component=k, table=table)


def exact_factored_model(mdp: TabularMdp, scheme: FactorizationScheme) -> FactoredModel:
    """Anchored marginals plus anchored local rewards for the scheme."""
    marginals = [exact_marginal(mdp, scheme, k) for k in range(scheme.transition.n_components)]
    return FactoredModel(scheme, marginals, best_local_rewards(mdp, scheme))


def compose_kernel(model: FactoredModel, space: FactoredSpace) -> np.ndarray:
    """Dense |X| x |S| kernel: product of the component marginals."""
    model.check_shapes(space)
    tr = model.scheme.transition
    out = None
    for k, marg in enumerate(model.marginals):
        proj_x = pair_projection(space, tr.input_scopes[k])
        proj_s = state_projection(space, tr.state_scopes[k])
        factor = marg.table[np.ix_(proj_x, proj_s)]
        if out is None:
            out = factor
        else:
            out *= factor
    return out


def compose_reward(model: FactoredModel, space: FactoredSpace) -> np.ndarray:
    """Reward vector over |X|: sum of the local reward components."""
    model.check_shapes(space)
    out = np.zeros(space.n_pairs)
    for i, local in enumerate(model.local_rewards):
        proj = pair_projection(space, model.scheme.reward.scopes[i])
        out += local[proj]
    return out


def best_local_rewards(mdp: TabularMdp, scheme: FactorizationScheme) -> list[np.ndarray]:
    """Anchored-difference local rewards r_i(z) = r(z, anchor) - (L-1)/L * r(anchor).

    Exact reconstruction when the true reward is additive over disjoint scopes
    covered by the reward scheme; values may leave [0,1] otherwise.
    """
    require_valid(scheme, mdp.space)
    n_comp = scheme.reward.n_components
    anchor_reward = mdp.reward[scheme.x_default]
    correction = (n_comp - 1) / n_comp * anchor_reward
    locals_: list[np.ndarray] = []
    for zr in scheme.reward.scopes:
        pairs = assemble_pairs(mdp.space, zr, scheme.x_default)
        locals_.append(mdp.reward[pairs] - correction)
    return locals_


# --- approximation errors ---------------------------------------------------

def _vertex_extrema(mdp: TabularMdp, scheme: FactorizationScheme, k: int):
    """Per-row (min, max) of the component marginal over all point-mass
    weightings of the complement dims."""
    space = mdp.space
    zp = scheme.transition.input_scopes[k]
    zs = scheme.transition.state_scopes[k]
    comp = tuple(d for d in range(len(space.dims)) if d not in zp)
    proj_s = state_projection(space, zs)
    n_out = scope_card(space, zs)
    lo = None
    hi = None
    for w in range(scope_card(space, comp)):
        # anchor pair whose complement coords equal vertex w
        coords = [0] * len(space.dims)
        rem = w
        for d in comp:
            coords[d] = rem % space.dims[d]
            rem //= space.dims[d]
        anchor = space.flat_index(coords)
        pairs = assemble_pairs(space, zp, anchor)
        table = _marginalize_rows(mdp.kernel[pairs], proj_s, n_out)
        if lo is None:
            lo, hi = table, table.copy()
        else:
            np.minimum(lo, table, out=lo)
            np.maximum(hi, table, out=hi)
    return lo, hi


def transition_approx_error(mdp: TabularMdp, scheme: FactorizationScheme,
                            mode: str = "anchored") -> float:
    """Sup-norm error between the true kernel and the factored product.

    "anchored" evaluates the deployed product (anchored marginals).
    "sup_vertices" maximizes over all feasible marginal choices; the product
    objective is multilinear in the per-component weightings, so the supremum
    is attained at point masses and reduces to per-factor extrema.
    """
    require_valid(scheme, mdp.space)
    space = mdp.space
    tr = scheme.transition
    if mode == "anchored":
        model = FactoredModel(scheme, [exact_marginal(mdp, scheme, k)
                                       for k in range(tr.n_components)],
                              best_local_rewards(mdp, scheme))
        return float(np.max(np.abs(mdp.kernel - compose_kernel(model, space))))
    if mode != "sup_vertices":
        raise ValueError(f"unknown mode {mode!r}")

    n_vertices = 1
    for zp in tr.input_scopes:
        comp = tuple(d for d in range(len(space.dims)) if d not in zp)
        n_vertices *= scope_card(space, comp)
    if n_vertices > SUP_VERTEX_GUARD:
        raise CapacityError(
            f"sup_vertices would enumerate {n_vertices} vertex combinations "
            f"(> {SUP_VERTEX_GUARD}); use mode='anchored'")

    prod_lo = None
    prod_hi = None
    for k in range(tr.n_components):
        lo, hi = _vertex_extrema(mdp, scheme, k)
        proj_x = pair_projection(space, tr.input_scopes[k])
        proj_s = state_projection(space, tr.state_scopes[k])
        lo_full = lo[np.ix_(proj_x, proj_s)]
        hi_full = hi[np.ix_(proj_x, proj_s)]
        if prod_lo is None:
            prod_lo, prod_hi = lo_full, hi_full
        else:
            prod_lo *= lo_full  # factors are probabilities, so >= 0
            prod_hi *= hi_full
    dev = np.maximum(mdp.kernel - prod_lo, prod_hi - mdp.kernel)
    return float(np.max(dev))


def reward_approx_error(mdp: TabularMdp, scheme: FactorizationScheme,
                        local_rewards: Sequence[np.ndarray]) -> float:
    """max_x |r(x) - sum_i r_i(x[Z_i^R])|."""
    if len(local_rewards) != scheme.reward.n_components:
        raise ValueError("one local reward vector per reward component required")
    out = np.zeros(mdp.space.n_pairs)
    for i, local in enumerate(local_rewards):
        local = np.asarray(local, dtype=np.float64)
        want = scope_card(mdp.space, scheme.reward.scopes[i])
        if local.shape != (want,):
            raise ValueError(f"reward component {i}: shape {local.shape} != ({want},)")
        out += local[pair_projection(mdp.space, scheme.reward.scopes[i])]
    return float(np.max(np.abs(mdp.reward - out)))


def misspecification_bias(delta_p: float, delta_r: float, gamma: float) -> float:
    """Irreducible Q-error floor of a scheme:
    gamma * (1-gamma)^-2 * delta_p + (1-gamma)^-1 * delta_r."""
    if delta_p < 0 or delta_r < 0:
        raise ValueError("approximation errors must be nonnegative")
    if not 0.0 < gamma < 1.0:
        raise ValueError(f"gamma must be in (0, 1), got {gamma}")
    return gamma * (1.0 - gamma) ** -2 * delta_p + (1.0 - gamma) ** -1 * delta_r


# --- SCHEMEv1 text format ---------------------------------------------------

def save_scheme_v1(scheme: FactorizationScheme, fp: TextIO) -> None:
    tr, rw = scheme.transition, scheme.reward
    fp.write(f"K {tr.n_components}\n")
    for k in range(tr.n_components):
        fp.write(f"ZS {k}: {','.join(map(str, tr.state_scopes[k]))}\n")
    for k in range(tr.n_components):
        fp.write(f"ZP {k}: {','.join(map(str, tr.input_scopes[k]))}\n")
    fp.write(f"L {rw.n_components}\n")
    for i in range(rw.n_components):
        fp.write(f"ZR {i}: {','.join(map(str, rw.scopes[i]))}\n")
    fp.write(f"DEFAULT {scheme.x_default}\n")


def load_scheme_v1(fp: TextIO) -> FactorizationScheme:
    n_trans = n_rew = None
    zs: dict[int, tuple[int, ...]] = {}
    zp: dict[int, tuple[int, ...]] = {}
    zr: dict[int, tuple[int, ...]] = {}
    default = 0
    for lineno, raw in enumerate(fp, start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        try:
            head, _, rest = line.partition(" ")
            if head == "K":
                n_trans = int(rest)
            elif head == "L":
                n_rew = int(rest)
            elif head == "DEFAULT":
                default = int(rest)
            elif head in ("ZS", "ZP", "ZR"):
                idx_s, _, items = rest.partition(":")
                idx = int(idx_s)
                scope = tuple(int(v) for v in items.split(",") if v.strip() != "")
                {"ZS": zs, "ZP": zp, "ZR": zr}[head][idx] = scope
            else:
                raise ValueError(f"unknown directive {head!r}")
        except ValueError as exc:
            raise ValueError(f"SCHEMEv1 line {lineno}: {exc}") from exc
    if n_trans is None or n_rew is None:
        raise ValueError("SCHEMEv1: missing K or L line")
    missing = [k for k in range(n_trans) if k not in zs or k not in zp]
    if missing or len(zr) != n_rew or any(i not in zr for i in range(n_rew)):
        raise ValueError("SCHEMEv1: incomplete scope lines")
    return FactorizationScheme(
        transition=TransitionScheme([zs[k] for k in range(n_trans)],
                                    [zp[k] for k in range(n_trans)]),
        reward=RewardScheme([zr[i] for i in range(n_rew)]),
        x_default=default,
    )
