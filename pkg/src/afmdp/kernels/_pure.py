"""NumPy implementation of the hot kernels.

Bit-compatibility contract with the compiled backend: every floating-point
expression here is evaluated in the same operation order as in _native.pyx,
so a run produces identical bytes regardless of which backend is active.
"""
from __future__ import annotations

import numpy as np


def sample_rows(cdfs: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Inverse-CDF sampling, one draw per row: index of the first cdf entry
    exceeding the row's uniform (count of entries <= u), clipped to the last
    column."""
    idx = (cdfs <= u[:, None]).sum(axis=1)
    return np.minimum(idx, cdfs.shape[1] - 1).astype(np.int64)


def max_over_actions(q: np.ndarray, n_states: int) -> np.ndarray:
    """V(s) = max_a q(s, a) for the flat pair layout x = s + n_states * a."""
    return q.reshape(-1, n_states).max(axis=0)


def assemble_next(samples: np.ndarray, src: np.ndarray, contrib: np.ndarray) -> np.ndarray:
    """Synthetic next-state index per pair: sum of each component's sampled
    sub-state contribution; src[j, x] is the entry supplying component j at
    pair x and contrib[j, s] the flat contribution of sample s's j-part."""
    nf = contrib[0][samples[src[0]]].copy()
    for j in range(1, src.shape[0]):
        nf += contrib[j][samples[src[j]]]
    return nf


def table_backup(samples: np.ndarray, src: np.ndarray, contrib: np.ndarray,
                 vmax: np.ndarray, rhat: np.ndarray, gamma: float) -> np.ndarray:
    """One-shot factored Bellman backup given state values vmax."""
    nf = assemble_next(samples, src, contrib)
    return rhat + gamma * vmax[nf]


def vrql_step(q: np.ndarray, samples: np.ndarray, src: np.ndarray,
              contrib: np.ndarray, vmax_ref: np.ndarray, href: np.ndarray,
              rhat: np.ndarray, gamma: float, eta: float, n_states: int) -> None:
    """One variance-reduced inner iteration, in place.

    Both empirical operator evaluations share the step's table (the coupling
    that cancels noise); the update is grouped as
    (H_t(Q_t) - Q_t) + (Href - H_t(Qref)) so the correction term vanishes
    exactly when the reference equals the per-table operator image.
    """
    vm = max_over_actions(q, n_states)
    nf = assemble_next(samples, src, contrib)
    h1 = rhat + gamma * vm[nf]
    h2 = rhat + gamma * vmax_ref[nf]
    q += eta * ((h1 - q) + (href - h2))
