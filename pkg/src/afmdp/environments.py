"""Ground-truth environments.

All generators are pure functions of (spec, seed) and return dense
``TabularMdp`` oracles together with the factorization schemes under study;
``TabularEnv`` adapts a dense MDP to the generative-model sampling contract.
The wind-farm storage MDP follows the discretized storage-control model:
state (price bin, mismatch bin, state-of-charge level), three actions
offsetting 100/50/0 percent of the current energy mismatch, deterministic
lossy storage dynamics, and penalty-based rewards normalized into [0, 1].
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from datetime import datetime, timezone
from typing import NamedTuple, Optional, Sequence, TextIO

import numpy as np

from . import kernels
from . import rng as rngmod
from .factorization import (FactorizationScheme, FactoredModel, MarginalKernel,
                            RewardScheme, TransitionScheme, compose_kernel,
                            compose_reward)
from .mdp import FactoredSpace, TabularMdp


class TabularEnv:
    """Generative-model view of a dense MDP.

    Sampling convention: every draw consumes exactly one uniform variate of
    the supplied generator and inverts the row CDF (first entry exceeding the
    uniform), so batched and scalar paths produce identical streams.
    """

    def __init__(self, mdp: TabularMdp,
                 reward_scopes: Optional[tuple[tuple[int, ...], ...]] = None,
                 local_rewards: Optional[Sequence[np.ndarray]] = None):
        self.mdp = mdp
        self.space = mdp.space
        self.gamma = mdp.gamma
        self.reward_scopes = tuple(reward_scopes) if reward_scopes is not None else None
        self._local_rewards = ([np.asarray(r, dtype=np.float64) for r in local_rewards]
                               if local_rewards is not None else None)
        self._row_cdfs: dict[int, np.ndarray] = {}
        self._entry_cdfs: dict[bytes, np.ndarray] = {}

    def _cdf(self, x: int) -> np.ndarray:
        cdf = self._row_cdfs.get(x)
        if cdf is None:
            cdf = np.cumsum(self.mdp.kernel[x])
            self._row_cdfs[x] = cdf
        return cdf

    def _cdf_matrix(self, pairs: np.ndarray) -> np.ndarray:
        key = pairs.tobytes()
        mat = self._entry_cdfs.get(key)
        if mat is None:
            mat = np.cumsum(self.mdp.kernel[pairs], axis=1)
            self._entry_cdfs[key] = mat
        return mat

    def sample_next(self, x: int, rng: np.random.Generator) -> int:
        u = rng.random()
        idx = int(np.searchsorted(self._cdf(x), u, side="right"))
        return min(idx, self.space.n_states - 1)

    def sample_next_many(self, x: int, n: int, rng: np.random.Generator) -> np.ndarray:
        u = rng.random(n)
        idx = np.searchsorted(self._cdf(x), u, side="right")
        return np.minimum(idx, self.space.n_states - 1).astype(np.int64)

    def sample_entries(self, pairs: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        u = rng.random(len(pairs))
        return kernels.sample_rows(self._cdf_matrix(pairs), u)

    def reward(self, x: int) -> float:
        return float(self.mdp.reward[x])

    def component_reward(self, i: int, z: int) -> float:
        if self._local_rewards is None:
            raise AttributeError("environment has no native reward components")
        return float(self._local_rewards[i][z])


# --- synthetic MDPs ----------------------------------------------------------

DEFAULT_GAMMA = 0.9


@dataclass(frozen=True)
class SyntheticSpec:
    """Knobs of the random synthetic MDP families."""

    seed: int
    n_sub: int = 3
    sub_size: int = 5
    action_size: int = 5
    coupling: float = 0.0
    gamma: float = DEFAULT_GAMMA

    def __post_init__(self):
        if self.sub_size < 2 or self.action_size < 2:
            raise ValueError("substate and action sizes must be >= 2")
        if not 0.0 <= self.coupling <= 1.0:
            raise ValueError("coupling must lie in [0, 1]")


class PerfectSynthetic(NamedTuple):
    mdp: TabularMdp
    scheme: FactorizationScheme
    local_rewards: tuple[np.ndarray, ...]

    def env(self) -> TabularEnv:
        return TabularEnv(self.mdp, self.scheme.reward.scopes, self.local_rewards)


def _dirichlet_rows(gen: np.random.Generator, shape: tuple[int, int],
                    alpha: float = 1.0) -> np.ndarray:
    rows = gen.dirichlet(np.full(shape[1], alpha), size=shape[0])
    # renormalize exactly so TabularMdp's 1e-9 row check never trips
    return rows / rows.sum(axis=1, keepdims=True)


def gen_perfect_mdp(spec: SyntheticSpec) -> PerfectSynthetic:
    """Perfectly factorizable MDP: two independent substates plus one
    action-driven substate, with a matching additive reward."""
    if spec.coupling != 0.0:
        raise ValueError("the perfect generator requires coupling = 0")
    if spec.n_sub != 3:
        raise ValueError("the perfect generator is the 3-substate family")
    gen = rngmod.substream(spec.seed, rngmod.STREAM_ENV, 0)
    space = FactoredSpace([spec.sub_size] * 3, [spec.action_size])
    scheme = FactorizationScheme(
        transition=TransitionScheme([(0,), (1,), (2,)], [(0,), (1,), (2, 3)]),
        reward=RewardScheme([(0,), (1,), (2, 3)]),
        x_default=0,
    )
    s, a = spec.sub_size, spec.action_size
    marginals = (
        MarginalKernel(0, _dirichlet_rows(gen, (s, s))),
        MarginalKernel(1, _dirichlet_rows(gen, (s, s))),
        MarginalKernel(2, _dirichlet_rows(gen, (s * a, s))),
    )
    locals_ = tuple(gen.random(size) / 3.0 for size in (s, s, s * a))
    model = FactoredModel(scheme, marginals, locals_)
    mdp = TabularMdp(space, compose_kernel(model, space),
                     compose_reward(model, space), spec.gamma)
    return PerfectSynthetic(mdp, scheme, locals_)


class ImperfectSynthetic(NamedTuple):
    mdp: TabularMdp
    schemes: dict[int, FactorizationScheme]  # keyed by K in {4, 2, 1}
    local_rewards: tuple[np.ndarray, ...]

    def env(self) -> TabularEnv:
        return TabularEnv(self.mdp, self.schemes[4].reward.scopes, self.local_rewards)


def gen_imperfect_mdp(spec: SyntheticSpec) -> ImperfectSynthetic:
    """Imperfectly factorizable MDP.

    The kernel is a convex mixture of a product of four per-substate chains
    (the last action-driven) with a fully coupled common-jump kernel; the
    reward mixes an additive part with a multiplicative interaction term.
    The coupling weight tunes both factorization errors at once; at zero the
    MDP is perfectly factorizable under the K=4 scheme.
    """
    if spec.n_sub != 4:
        raise ValueError("the imperfect generator is the 4-substate family")
    gen = rngmod.substream(spec.seed, rngmod.STREAM_ENV, 1)
    space = FactoredSpace([spec.sub_size] * 4, [spec.action_size])
    s, a = spec.sub_size, spec.action_size

    scheme4 = FactorizationScheme(
        transition=TransitionScheme([(0,), (1,), (2,), (3,)],
                                    [(0,), (1,), (2,), (3, 4)]),
        reward=RewardScheme([(0,), (1,), (2,), (3, 4)]),
        x_default=0,
    )
    scheme2 = FactorizationScheme(
        transition=TransitionScheme([(0, 1), (2, 3)], [(0, 1), (2, 3, 4)]),
        reward=RewardScheme([(0, 1), (2, 3, 4)]),
        x_default=0,
    )
    scheme1 = FactorizationScheme(
        transition=TransitionScheme([(0, 1, 2, 3)], [(0, 1, 2, 3, 4)]),
        reward=RewardScheme([(0, 1, 2, 3, 4)]),
        x_default=0,
    )

    marginals = (
        MarginalKernel(0, _dirichlet_rows(gen, (s, s))),
        MarginalKernel(1, _dirichlet_rows(gen, (s, s))),
        MarginalKernel(2, _dirichlet_rows(gen, (s, s))),
        MarginalKernel(3, _dirichlet_rows(gen, (s * a, s))),
    )
    locals_ = tuple(gen.random(size) / 4.0 for size in (s, s, s, s * a))
    model = FactoredModel(scheme4, marginals, locals_)
    product_kernel = compose_kernel(model, space)

    if spec.coupling > 0.0:
        # fully coupled part: all four substates jump to one common random
        # value, a correlation no product of marginals can represent
        common = _dirichlet_rows(gen, (space.n_pairs, s))
        diag_states = np.array(
            [space.state_flat_index((v, v, v, v)) for v in range(s)],
            dtype=np.int64)
        coupled = np.zeros((space.n_pairs, space.n_states))
        coupled[:, diag_states] = common
        kernel = (1.0 - spec.coupling) * product_kernel + spec.coupling * coupled
        kernel /= kernel.sum(axis=1, keepdims=True)
    else:
        kernel = product_kernel
    mdp = TabularMdp(space, kernel, compose_reward(model, space), spec.gamma)
    return ImperfectSynthetic(mdp, {4: scheme4, 2: scheme2, 1: scheme1}, locals_)


# --- wind-farm storage control -----------------------------------------------

ACTION_FRACTIONS = (1.0, 0.5, 0.0)


@dataclass(frozen=True)
class WindFarmSpec:
    """Discretized storage-control problem: Markov chains for price and
    generation mismatch, a state-of-charge level grid, and storage losses."""

    price_chain: np.ndarray      # (price_bins, price_bins) row-stochastic
    mismatch_chain: np.ndarray   # (mismatch_bins, mismatch_bins)
    price_edges: np.ndarray      # (price_bins + 1,)
    mismatch_edges: np.ndarray   # (mismatch_bins + 1,)
    capacity: float = 500.0
    charge_eff: float = 0.95
    discharge_eff: float = 0.95
    soc_bins: int = 50
    gamma: float = 0.9

    def __post_init__(self):
        for name in ("price_chain", "mismatch_chain", "price_edges", "mismatch_edges"):
            arr = np.ascontiguousarray(np.asarray(getattr(self, name), dtype=np.float64))
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        for name in ("price_chain", "mismatch_chain"):
            chain = getattr(self, name)
            if chain.ndim != 2 or chain.shape[0] != chain.shape[1]:
                raise ValueError(f"{name} must be square")
            if np.any(chain < 0) or np.any(np.abs(chain.sum(axis=1) - 1.0) > 1e-9):
                raise ValueError(f"{name} must be row-stochastic")
        if len(self.price_edges) != len(self.price_chain) + 1:
            raise ValueError("price_edges must have price_bins + 1 entries")
        if len(self.mismatch_edges) != len(self.mismatch_chain) + 1:
            raise ValueError("mismatch_edges must have mismatch_bins + 1 entries")
        if not 0.0 < self.gamma < 1.0:
            raise ValueError("gamma must be in (0, 1)")
        if not (0.0 < self.charge_eff <= 1.0 and 0.0 < self.discharge_eff <= 1.0):
            raise ValueError("efficiencies must be in (0, 1]")
        if self.soc_bins < 2 or self.capacity <= 0:
            raise ValueError("need soc_bins >= 2 and positive capacity")

    @property
    def price_bins(self) -> int:
        return len(self.price_chain)

    @property
    def mismatch_bins(self) -> int:
        return len(self.mismatch_chain)

    @property
    def price_values(self) -> np.ndarray:
        return 0.5 * (self.price_edges[:-1] + self.price_edges[1:])

    @property
    def mismatch_values(self) -> np.ndarray:
        return 0.5 * (self.mismatch_edges[:-1] + self.mismatch_edges[1:])

    @property
    def soc_values(self) -> np.ndarray:
        return np.linspace(0.0, self.capacity, self.soc_bins)


class WindEnv(TabularEnv):
    """Wind MDP with the physical penalty exposed for policy evaluation."""

    def __init__(self, mdp: TabularMdp, spec: WindFarmSpec, penalty_max: float):
        scopes = (tuple(range(len(mdp.space.dims))),)
        super().__init__(mdp, reward_scopes=scopes, local_rewards=[mdp.reward])
        self.spec = spec
        self.penalty_max = penalty_max

    def penalty(self, x: int) -> float:
        """Un-normalized penalty price * |delivered - committed|."""
        return (1.0 - self.reward(x)) * self.penalty_max


class WindStorage(NamedTuple):
    mdp: TabularMdp
    scheme: FactorizationScheme
    spec: WindFarmSpec
    penalty_max: float

    def env(self) -> WindEnv:
        return WindEnv(self.mdp, self.spec, self.penalty_max)


def _soc_transition(spec: WindFarmSpec) -> tuple[np.ndarray, np.ndarray]:
    """Deterministic storage update.

    Returns (next_level, delivery_gap): for each (soc level, mismatch bin,
    action), the next state-of-charge level index and |g - w_hat| after the
    storage offsets the chosen fraction of the mismatch, with clipping by the
    capacity constraints; charging and discharging never co-occur.
    """
    n_soc = spec.soc_bins
    n_mis = spec.mismatch_bins
    n_act = len(ACTION_FRACTIONS)
    soc_values = spec.soc_values
    mis_values = spec.mismatch_values
    level_step = spec.capacity / (n_soc - 1)
    next_level = np.empty((n_soc, n_mis, n_act), dtype=np.int64)
    gap = np.empty((n_soc, n_mis, n_act))
    for c in range(n_soc):
        soc = soc_values[c]
        for d in range(n_mis):
            mismatch = mis_values[d]  # committed minus produced
            for ai, frac in enumerate(ACTION_FRACTIONS):
                if mismatch > 0:  # shortage: discharge to the grid
                    v_dis = min(frac * mismatch, soc / spec.discharge_eff)
                    v_chg = 0.0
                    residual = mismatch - v_dis
                elif mismatch < 0:  # surplus: charge the storage
                    v_chg = min(frac * (-mismatch), (spec.capacity - soc) / spec.charge_eff)
                    v_dis = 0.0
                    residual = (-mismatch) - v_chg
                else:
                    v_chg = v_dis = 0.0
                    residual = 0.0
                soc_next = soc + spec.charge_eff * v_chg - spec.discharge_eff * v_dis
                level = int(math.floor(soc_next / level_step + 0.5))
                next_level[c, d, ai] = min(max(level, 0), n_soc - 1)
                gap[c, d, ai] = residual
    return next_level, gap


def wind_storage_mdp(spec: WindFarmSpec) -> WindStorage:
    """Dense wind-farm storage MDP plus the 3-component factorization
    (price | price), (mismatch | mismatch), (SoC | SoC, action)."""
    n_p, n_d, n_c = spec.price_bins, spec.mismatch_bins, spec.soc_bins
    n_a = len(ACTION_FRACTIONS)
    space = FactoredSpace([n_p, n_d, n_c], [n_a])
    next_level, gap = _soc_transition(spec)

    price_values = spec.price_values
    penalty_max = float(np.max(price_values) * np.max(np.abs(spec.mismatch_values)))
    # reward layout (a, c, d, p) matches flat x = p + n_p*d + n_p*n_d*c + n_s*a
    reward = np.ones((n_a, n_c, n_d, n_p))
    if penalty_max > 0:
        penalty = (price_values[None, None, None, :]
                   * gap.transpose(2, 0, 1)[:, :, :, None])
        reward = 1.0 - penalty / penalty_max
    reward = reward.reshape(-1)

    soc_onehot = np.zeros((n_a, n_c, n_d, n_c))
    a_idx, c_idx, d_idx = np.meshgrid(np.arange(n_a), np.arange(n_c),
                                      np.arange(n_d), indexing="ij")
    soc_onehot[a_idx, c_idx, d_idx, next_level.transpose(2, 0, 1)[a_idx, c_idx, d_idx]] = 1.0

    kernel = (spec.price_chain[None, None, None, :, None, None, :]
              * spec.mismatch_chain[None, None, :, None, None, :, None]
              * soc_onehot[:, :, :, None, :, None, None])
    kernel = kernel.reshape(space.n_pairs, space.n_states)

    scheme = FactorizationScheme(
        transition=TransitionScheme([(0,), (1,), (2,)], [(0,), (1,), (2, 3)]),
        reward=RewardScheme([(0, 1, 2, 3)]),
        x_default=0,
    )
    mdp = TabularMdp(space, kernel, reward, spec.gamma)
    return WindStorage(mdp, scheme, spec, penalty_max)


# --- time series ingestion ----------------------------------------------------

@dataclass(frozen=True)
class CsvSeries:
    """A timestamped scalar series (strictly increasing timestamps)."""

    timestamps: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        ts = np.ascontiguousarray(np.asarray(self.timestamps, dtype=np.float64))
        vals = np.ascontiguousarray(np.asarray(self.values, dtype=np.float64))
        if len(ts) != len(vals):
            raise ValueError("timestamps and values must have equal length")
        if len(ts) < 2:
            raise ValueError("a series needs at least 2 rows")
        if not np.all(np.isfinite(vals)) or not np.all(np.isfinite(ts)):
            raise ValueError("series contains non-finite entries")
        if np.any(np.diff(ts) <= 0):
            bad = int(np.argmax(np.diff(ts) <= 0)) + 1
            raise ValueError(f"timestamps not strictly increasing at row {bad}")
        ts.setflags(write=False)
        vals.setflags(write=False)
        object.__setattr__(self, "timestamps", ts)
        object.__setattr__(self, "values", vals)

    def __len__(self) -> int:
        return len(self.values)


def _parse_timestamp(text: str) -> float:
    try:
        return float(text)
    except ValueError:
        pass
    try:
        dt = datetime.fromisoformat(text)
    except ValueError as exc:
        raise ValueError(f"bad timestamp {text!r}") from exc
    if dt.tzinfo is None:
        dt = dt.replace(tzinfo=timezone.utc)
    return dt.timestamp()


def load_series_csv(path) -> CsvSeries:
    """Read a `timestamp,value` CSV (header row required; ISO-8601 or numeric
    epoch timestamps)."""
    timestamps = []
    values = []
    with open(path, newline="") as fp:
        reader = csv.reader(fp)
        try:
            header = next(reader)
        except StopIteration:
            raise ValueError(f"{path}: empty file") from None
        if len(header) < 2:
            raise ValueError(f"{path}: header must have two columns")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) < 2:
                raise ValueError(f"{path}: line {lineno}: expected 2 fields")
            try:
                timestamps.append(_parse_timestamp(row[0]))
                values.append(float(row[1]))
            except ValueError as exc:
                raise ValueError(f"{path}: line {lineno}: {exc}") from exc
    if len(values) < 2:
        raise ValueError(f"{path}: need at least 2 data rows")
    return CsvSeries(np.array(timestamps), np.array(values))


def save_series_csv(series: CsvSeries, fp: TextIO) -> None:
    fp.write("timestamp,value\n")
    for t, v in zip(series.timestamps, series.values):
        fp.write(f"{t:.17g},{v:.17g}\n")


def uniform_bin_edges(series: CsvSeries, n_bins: int) -> np.ndarray:
    """Equal-width edges spanning the observed range."""
    lo, hi = float(series.values.min()), float(series.values.max())
    if lo == hi:
        hi = lo + 1.0
    return np.linspace(lo, hi, n_bins + 1)


def bin_series(series: CsvSeries, bin_edges: np.ndarray) -> np.ndarray:
    """Bin index per observation: interior edges split half-open bins."""
    return np.clip(np.digitize(series.values, bin_edges[1:-1]), 0, len(bin_edges) - 2)


def estimate_chain(series: CsvSeries, bin_edges: np.ndarray) -> np.ndarray:
    """First-order empirical Markov chain over the bins.

    Rows with no observed transitions get add-one smoothing (uniform), which
    keeps every row stochastic; observed rows are exact count ratios.
    """
    n_bins = len(bin_edges) - 1
    bins = bin_series(series, bin_edges)
    counts = np.zeros((n_bins, n_bins))
    np.add.at(counts, (bins[:-1], bins[1:]), 1.0)
    totals = counts.sum(axis=1)
    empty = totals == 0
    counts[empty] = 1.0
    totals = counts.sum(axis=1)
    return counts / totals[:, None]


def synth_wind_data(seed: int, length: int) -> tuple[CsvSeries, CsvSeries]:
    """Reproducible AR(1) surrogates for the price and mismatch series.

    Price: mean 40, autocorrelation 0.95, innovation sd 3, floored at 1.
    Mismatch: mean 0, autocorrelation 0.85, innovation sd 25.
    Timestamps are 5-minute epochs starting 2020-01-01T00:00Z.
    """
    if length < 100:
        raise ValueError("length must be >= 100")
    t0 = 1577836800.0
    timestamps = t0 + 300.0 * np.arange(length)

    def ar1(gen, mu, phi, sigma, floor=None):
        eps = gen.normal(0.0, sigma, size=length)
        out = np.empty(length)
        level = mu
        for i in range(length):
            level = mu + phi * (level - mu) + eps[i]
            if floor is not None and level < floor:
                level = floor
            out[i] = level
        return out

    price = ar1(rngmod.substream(seed, rngmod.STREAM_ENV, 2), 40.0, 0.95, 3.0, floor=1.0)
    mismatch = ar1(rngmod.substream(seed, rngmod.STREAM_ENV, 3), 0.0, 0.85, 25.0)
    return (CsvSeries(timestamps, price), CsvSeries(timestamps, mismatch))


def wind_spec_from_series(price: CsvSeries, mismatch: CsvSeries,
                          price_bins: int = 8, mismatch_bins: int = 8,
                          **kwargs) -> WindFarmSpec:
    """Bin both series uniformly and fit their transition chains."""
    price_edges = uniform_bin_edges(price, price_bins)
    mismatch_edges = uniform_bin_edges(mismatch, mismatch_bins)
    return WindFarmSpec(
        price_chain=estimate_chain(price, price_edges),
        mismatch_chain=estimate_chain(mismatch, mismatch_edges),
        price_edges=price_edges,
        mismatch_edges=mismatch_edges,
        **kwargs,
    )
