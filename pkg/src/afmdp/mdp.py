"""Exact tabular MDP machinery: factored index codec, Bellman operator,
certified value iteration, and the plain-text MDPv1 serialization.

A Q-function is a plain float vector of length ``space.n_pairs`` and a policy
is an int vector of length ``space.n_states``; the flat pair index is
``x = s + n_states * a`` (dimension 0 least significant, state dims first),
so ``q.reshape(n_actions, n_states)[a, s]`` views pairs by action/state.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence, TextIO

import numpy as np

_MAX_INDEX = np.iinfo(np.int64).max


def _mixed_radix_strides(dims: Sequence[int]) -> tuple[int, ...]:
    strides = []
    acc = 1
    for d in dims:
        strides.append(acc)
        acc *= d
    return tuple(strides)


@dataclass(frozen=True)
class FactoredSpace:
    """Mixed-radix description of S = prod(S_i) and A = prod(A_j)."""

    state_dims: tuple[int, ...]
    action_dims: tuple[int, ...]
    strides: tuple[int, ...] = field(init=False, repr=False, compare=False)

    def __init__(self, state_dims: Sequence[int], action_dims: Sequence[int]):
        state_dims = tuple(int(d) for d in state_dims)
        action_dims = tuple(int(d) for d in action_dims)
        if not state_dims or not action_dims:
            raise ValueError("need at least one state and one action dimension")
        for d in state_dims + action_dims:
            if d < 1:
                raise ValueError(f"dimension sizes must be >= 1, got {d}")
        total = 1
        for d in state_dims + action_dims:
            total *= d
            if total > _MAX_INDEX:
                raise ValueError("state-action space exceeds the index type")
        object.__setattr__(self, "state_dims", state_dims)
        object.__setattr__(self, "action_dims", action_dims)
        object.__setattr__(self, "strides", _mixed_radix_strides(state_dims + action_dims))

    @property
    def dims(self) -> tuple[int, ...]:
        """All dimensions, state dims first."""
        return self.state_dims + self.action_dims

    @property
    def n_state_dims(self) -> int:
        return len(self.state_dims)

    @property
    def n_states(self) -> int:
        return int(np.prod(self.state_dims, dtype=np.int64))

    @property
    def n_actions(self) -> int:
        return int(np.prod(self.action_dims, dtype=np.int64))

    @property
    def n_pairs(self) -> int:
        return self.n_states * self.n_actions

    def flat_index(self, coords: Sequence[int]) -> int:
        """Encode per-dimension coordinates into the flat pair index."""
        dims = self.dims
        if len(coords) != len(dims):
            raise ValueError(f"expected {len(dims)} coordinates, got {len(coords)}")
        idx = 0
        for i, (c, d, w) in enumerate(zip(coords, dims, self.strides)):
            c = int(c)
            if not 0 <= c < d:
                raise IndexError(f"coordinate {c} out of range for dimension {i} (size {d})")
            idx += c * w
        return idx

    def unflat_index(self, index: int) -> tuple[int, ...]:
        """Decode a flat pair index into per-dimension coordinates."""
        index = int(index)
        if not 0 <= index < self.n_pairs:
            raise IndexError(f"flat index {index} out of range for {self.n_pairs} pairs")
        coords = []
        for d in self.dims:
            coords.append(index % d)
            index //= d
        return tuple(coords)

    def state_flat_index(self, coords: Sequence[int]) -> int:
        """Encode state-only coordinates into a flat state index."""
        if len(coords) != len(self.state_dims):
            raise ValueError(f"expected {len(self.state_dims)} state coordinates")
        idx = 0
        for i, (c, d, w) in enumerate(zip(coords, self.state_dims, self.strides)):
            c = int(c)
            if not 0 <= c < d:
                raise IndexError(f"coordinate {c} out of range for dimension {i} (size {d})")
            idx += c * w
        return idx

    def coords_of_pairs(self, indices: np.ndarray) -> np.ndarray:
        """Vectorized decode: (n,) flat pair indices -> (n, n_dims) coordinates."""
        out = np.empty((len(indices), len(self.dims)), dtype=np.int64)
        rem = np.asarray(indices, dtype=np.int64).copy()
        for i, d in enumerate(self.dims):
            out[:, i] = rem % d
            rem //= d
        return out

    def coords_of_states(self, indices: np.ndarray) -> np.ndarray:
        """Vectorized decode of flat state indices over the state dims only."""
        out = np.empty((len(indices), len(self.state_dims)), dtype=np.int64)
        rem = np.asarray(indices, dtype=np.int64).copy()
        for i, d in enumerate(self.state_dims):
            out[:, i] = rem % d
            rem //= d
        return out


def _freeze(arr: np.ndarray) -> np.ndarray:
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class TabularMdp:
    """Dense ground-truth MDP: row-stochastic kernel (|X| x |S|), rewards in
    [0,1], discount in (0,1).  Immutable after construction."""

    space: FactoredSpace
    kernel: np.ndarray
    reward: np.ndarray
    gamma: float

    def __post_init__(self):
        kernel = np.ascontiguousarray(np.asarray(self.kernel, dtype=np.float64))
        reward = np.ascontiguousarray(np.asarray(self.reward, dtype=np.float64))
        n_pairs, n_states = self.space.n_pairs, self.space.n_states
        if kernel.shape != (n_pairs, n_states):
            raise ValueError(f"kernel shape {kernel.shape} != ({n_pairs}, {n_states})")
        if reward.shape != (n_pairs,):
            raise ValueError(f"reward shape {reward.shape} != ({n_pairs},)")
        if np.any(kernel < 0):
            raise ValueError("kernel has negative entries")
        rowsum = kernel.sum(axis=1)
        bad = np.abs(rowsum - 1.0) > 1e-9
        if np.any(bad):
            x = int(np.argmax(bad))
            raise ValueError(f"kernel row {x} sums to {rowsum[x]!r}, not 1")
        if np.any(reward < 0) or np.any(reward > 1):
            raise ValueError("rewards must lie in [0, 1]")
        if not 0.0 < self.gamma < 1.0:
            raise ValueError(f"gamma must be in (0, 1), got {self.gamma}")
        object.__setattr__(self, "kernel", _freeze(kernel))
        object.__setattr__(self, "reward", _freeze(reward))
        object.__setattr__(self, "gamma", float(self.gamma))

    @property
    def q_max(self) -> float:
        return 1.0 / (1.0 - self.gamma)


def state_values(q: np.ndarray, space: FactoredSpace) -> np.ndarray:
    """V(s) = max_a q(s, a)."""
    return q.reshape(space.n_actions, space.n_states).max(axis=0)


def bellman_apply(q: np.ndarray, mdp: TabularMdp) -> np.ndarray:
    """One application of the Bellman optimality operator H."""
    if q.shape != (mdp.space.n_pairs,):
        raise ValueError(f"q shape {q.shape} != ({mdp.space.n_pairs},)")
    v = state_values(q, mdp.space)
    return mdp.reward + mdp.gamma * (mdp.kernel @ v)


def exact_value_iteration(mdp: TabularMdp, tol: float = 1e-8) -> np.ndarray:
    """Iterate H from Q=0 until the certified bound ||Q - Q*||_inf <= tol.

    Stops when successive iterates differ by at most tol*(1-gamma)/gamma,
    which certifies the tolerance via the contraction property.
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    gamma = mdp.gamma
    threshold = tol * (1.0 - gamma) / gamma
    q = np.zeros(mdp.space.n_pairs)
    while True:
        q_next = bellman_apply(q, mdp)
        if float(np.max(np.abs(q_next - q))) <= threshold:
            return q_next
        q = q_next


def greedy_policy(q: np.ndarray, space: FactoredSpace) -> np.ndarray:
    """pi(s) = argmax_a q(s, a), ties broken toward the smallest action."""
    return q.reshape(space.n_actions, space.n_states).argmax(axis=0)


def q_error(q: np.ndarray, q_ref: np.ndarray) -> float:
    """Sup-norm distance between two Q-functions."""
    q = np.asarray(q)
    q_ref = np.asarray(q_ref)
    if q.shape != q_ref.shape:
        raise ValueError(f"shape mismatch: {q.shape} vs {q_ref.shape}")
    return float(np.max(np.abs(q - q_ref)))


# --- MDPv1 plain-text serialization (golden-test format) -------------------

def save_mdp_v1(mdp: TabularMdp, fp: TextIO) -> None:
    sdims = ",".join(str(d) for d in mdp.space.state_dims)
    adims = ",".join(str(d) for d in mdp.space.action_dims)
    fp.write(f"dims s:{sdims} a:{adims} gamma:{mdp.gamma:.17g}\n")
    for x in range(mdp.space.n_pairs):
        probs = " ".join(f"{p:.17g}" for p in mdp.kernel[x])
        fp.write(f"{x} {mdp.reward[x]:.17g} {probs}\n")


def load_mdp_v1(fp: TextIO) -> TabularMdp:
    header = fp.readline().strip()
    parts = header.split()
    if len(parts) != 4 or parts[0] != "dims":
        raise ValueError(f"bad MDPv1 header: {header!r}")
    try:
        sdims = [int(d) for d in parts[1].removeprefix("s:").split(",")]
        adims = [int(d) for d in parts[2].removeprefix("a:").split(",")]
        gamma = float(parts[3].removeprefix("gamma:"))
    except ValueError as exc:
        raise ValueError(f"bad MDPv1 header: {header!r}") from exc
    space = FactoredSpace(sdims, adims)
    kernel = np.zeros((space.n_pairs, space.n_states))
    reward = np.zeros(space.n_pairs)
    seen = np.zeros(space.n_pairs, dtype=bool)
    for lineno, line in enumerate(fp, start=2):
        fields = line.split()
        if not fields:
            continue
        if len(fields) != 2 + space.n_states:
            raise ValueError(f"line {lineno}: expected {2 + space.n_states} fields")
        x = int(fields[0])
        reward[x] = float(fields[1])
        kernel[x] = [float(v) for v in fields[2:]]
        seen[x] = True
    if not seen.all():
        raise ValueError(f"missing rows for {int((~seen).sum())} pairs")
    return TabularMdp(space, kernel, reward, gamma)
