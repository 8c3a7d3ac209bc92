"""Tabular reinforcement learning with approximate MDP factorization.

Core pieces: exact tabular MDP machinery (afmdp.mdp), factorization schemes
and their error analysis (afmdp.factorization), cost-optimal synchronous
sampling (afmdp.sampling), model-based Q-value iteration (afmdp.model_based),
variance-reduced factored Q-learning (afmdp.model_free), benchmark
environments (afmdp.environments), and the experiment harness / CLI
(afmdp.experiments, afmdp.cli).
"""
from .factorization import (FactorizationScheme, RewardScheme,
                            TransitionScheme, trivial_scheme)
from .kernels import BACKEND as KERNEL_BACKEND
from .mdp import (FactoredSpace, TabularMdp, bellman_apply,
                  exact_value_iteration, greedy_policy, q_error)

__version__ = "0.1.0"

__all__ = [
    "FactoredSpace",
    "TabularMdp",
    "FactorizationScheme",
    "TransitionScheme",
    "RewardScheme",
    "trivial_scheme",
    "bellman_apply",
    "exact_value_iteration",
    "greedy_policy",
    "q_error",
    "KERNEL_BACKEND",
    "__version__",
]
