"""Deterministic RNG stream derivation.

Every stochastic routine in the package derives its generator from a 64-bit
master seed plus an integer path, e.g. ``substream(seed, STREAM_SAMPLE, group,
entry)``.  Streams are independent of scheduling order, so parallel execution
of work items reproduces the sequential result bit for bit.  Within a
(group, entry) stream the replicate index is the counter position: replicate
``i`` consumes the ``i``-th variate of the stream.
"""
from __future__ import annotations

import numpy as np

# Stream tags: first path element after the seed.  Keep values stable; they
# are part of the reproducibility contract.
STREAM_SAMPLE = 1      # synchronous sampling batches (group, entry)
STREAM_TABLE = 2       # one-shot Bellman table generation
STREAM_REFERENCE = 3   # reference-operator tables (epoch, index)
STREAM_INNER = 4       # VRQL inner-loop tables (epoch, step)
STREAM_TRIAL = 5       # experiment trial seeds
STREAM_ROLLOUT = 6     # policy-evaluation episodes
STREAM_ENV = 7         # environment generation

_MASK64 = (1 << 64) - 1


def substream(seed: int, *path: int) -> np.random.Generator:
    """Return the generator for ``(seed, *path)``."""
    entropy = [int(seed) & _MASK64] + [int(p) & _MASK64 for p in path]
    return np.random.default_rng(np.random.SeedSequence(entropy))


def child_seed(seed: int, *path: int) -> int:
    """Derive a 64-bit seed for a nested component with its own streams."""
    entropy = [int(seed) & _MASK64] + [int(p) & _MASK64 for p in path]
    return int(np.random.SeedSequence(entropy).generate_state(1, np.uint64)[0])
