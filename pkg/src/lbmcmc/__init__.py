"""Locally-balanced informed proposals for MCMC on discrete spaces."""
from .balance import BalancingFunction, balanced_transform, evaluate, from_name, is_balanced, log_evaluate
from .kernels import KernelSpec, Trace, run_chain
from .targets import BinaryTarget, DiscreteTarget, IsingTarget, PermutationTarget

__version__ = "0.1.0"

__all__ = [
    "BalancingFunction",
    "balanced_transform",
    "evaluate",
    "from_name",
    "is_balanced",
    "log_evaluate",
    "KernelSpec",
    "Trace",
    "run_chain",
    "BinaryTarget",
    "DiscreteTarget",
    "IsingTarget",
    "PermutationTarget",
]
