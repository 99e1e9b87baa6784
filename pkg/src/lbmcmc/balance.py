"""Balancing functions g used to reweight target ratios in informed proposals.

Everything in the samplers works with log-ratios, so each function is
available both as ``g(t)`` and as ``log g(exp(l))``.  The built-in kinds
also carry an integer code understood by the compiled engine.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

__all__ = [
    "BalancingFunction",
    "evaluate",
    "log_evaluate",
    "is_balanced",
    "balanced_transform",
    "from_name",
    "BUILTIN_CODES",
]

# integer codes shared with lbmcmc._engine.log_g
BUILTIN_CODES = {
    "constant": 0,
    "linear": 1,
    "sqrt": 2,
    "barker": 3,
    "min": 4,
    "max": 5,
}

# declared linear bounds g(t) <= a + b t
_BUILTIN_BOUNDS = {
    "constant": (1.0, 0.0),
    "linear": (0.0, 1.0),
    "sqrt": (1.0, 1.0),
    "barker": (1.0, 0.0),
    "min": (1.0, 0.0),
    "max": (1.0, 1.0),
}

_NAMES = {
    "rw": "constant",
    "constant": "constant",
    "gb": "linear",
    "linear": "linear",
    "sqrt": "sqrt",
    "lb1": "sqrt",
    "barker": "barker",
    "lb2": "barker",
    "lb": "barker",
    "min": "min",
    "max": "max",
}

_BOUND_GRID = np.logspace(-8, 8, 161)


def _builtin_log(kind: str, log_t: float) -> float:
    if kind == "constant":
        return 0.0
    if kind == "linear":
        return log_t
    if kind == "sqrt":
        return 0.5 * log_t
    if kind == "barker":
        # log(t / (1 + t)) without overflow on either tail
        if log_t > 0:
            return -math.log1p(math.exp(-log_t))
        return log_t - math.log1p(math.exp(log_t))
    if kind == "min":
        return min(0.0, log_t)
    if kind == "max":
        return max(0.0, log_t)
    raise ValueError(f"unknown balancing kind {kind!r}")


def _builtin_value(kind: str, t: float) -> float:
    if kind == "constant":
        return 1.0
    if kind == "linear":
        return t
    if kind == "sqrt":
        return math.sqrt(t)
    if kind == "barker":
        return t / (1.0 + t)
    if kind == "min":
        return min(1.0, t)
    if kind == "max":
        return max(1.0, t)
    raise ValueError(f"unknown balancing kind {kind!r}")


@dataclass(frozen=True)
class BalancingFunction:
    """A positive weight transform g on (0, inf).

    Use the class methods (``barker()``, ``sqrt()``, ...) or :func:`from_name`
    for the built-in kinds and :meth:`custom` for anything else.  Custom
    functions declare coefficients ``(a, b)`` with ``g(t) <= a + b t``; the
    bound is checked on a log-spaced grid at construction unless
    ``check_bound=False`` (finite state spaces do not need it).
    """

    kind: str
    func: Optional[Callable[[float], float]] = field(default=None, compare=False)
    log_func: Optional[Callable[[float], float]] = field(default=None, compare=False)
    bound: Optional[tuple[float, float]] = None
    label: str = ""

    def __post_init__(self):
        if self.kind != "custom" and self.kind not in BUILTIN_CODES:
            raise ValueError(f"unknown balancing kind {self.kind!r}")
        if self.kind == "custom" and self.func is None and self.log_func is None:
            raise ValueError("custom balancing function needs func or log_func")
        if self.bound is None and self.kind != "custom":
            object.__setattr__(self, "bound", _BUILTIN_BOUNDS[self.kind])
        if not self.label:
            object.__setattr__(self, "label", self.kind)

    # constructors -------------------------------------------------------
    @classmethod
    def constant(cls):
        return cls("constant")

    @classmethod
    def linear(cls):
        return cls("linear")

    @classmethod
    def sqrt(cls):
        return cls("sqrt")

    @classmethod
    def barker(cls):
        return cls("barker")

    @classmethod
    def min(cls):
        return cls("min")

    @classmethod
    def max(cls):
        return cls("max")

    @classmethod
    def custom(
        cls,
        func: Optional[Callable[[float], float]] = None,
        bound: Optional[tuple[float, float]] = None,
        *,
        log_func: Optional[Callable[[float], float]] = None,
        label: str = "custom",
        check_bound: bool = True,
    ) -> "BalancingFunction":
        g = cls("custom", func=func, log_func=log_func, bound=bound, label=label)
        if check_bound:
            if bound is None:
                raise ValueError("custom balancing functions must declare (a, b) with g(t) <= a + b t")
            if not g.satisfies_bound():
                raise ValueError(f"declared bound {bound} violated on the probe grid")
        return g

    # evaluation ---------------------------------------------------------
    @property
    def code(self) -> int:
        """Engine code; -1 for custom functions (not supported by the compiled engine)."""
        return BUILTIN_CODES.get(self.kind, -1)

    @property
    def is_builtin(self) -> bool:
        return self.kind in BUILTIN_CODES

    def __call__(self, t: float) -> float:
        return evaluate(self, t)

    def log(self, log_t: float) -> float:
        return log_evaluate(self, log_t)

    def log_array(self, log_t: np.ndarray) -> np.ndarray:
        """Vectorised ``log g(exp(log_t))``; -inf entries map to log g(0)."""
        log_t = np.asarray(log_t, dtype=float)
        k = self.kind
        if k == "constant":
            return np.zeros_like(log_t)
        if k == "linear":
            return log_t.copy()
        if k == "sqrt":
            return 0.5 * log_t
        if k == "barker":
            with np.errstate(over="ignore"):
                return -np.logaddexp(0.0, -log_t)
        if k == "min":
            return np.minimum(0.0, log_t)
        if k == "max":
            return np.maximum(0.0, log_t)
        return np.array([self.log(v) for v in log_t.ravel()]).reshape(log_t.shape)

    def satisfies_bound(self, grid: Sequence[float] = _BOUND_GRID) -> bool:
        """Check the declared linear bound on ``grid`` (with a small relative slack)."""
        if self.bound is None:
            return False
        a, b = self.bound
        for t in grid:
            if self(t) > (a + b * t) * (1 + 1e-12):
                return False
        return True


def _check_t(t: float) -> float:
    t = float(t)
    if not math.isfinite(t) or t <= 0:
        raise ValueError(f"balancing functions are defined for finite t > 0, got {t}")
    return t


def evaluate(g: BalancingFunction, t: float) -> float:
    """Return g(t) for finite t > 0."""
    t = _check_t(t)
    if g.kind != "custom":
        return _builtin_value(g.kind, t)
    if g.func is not None:
        return float(g.func(t))
    return math.exp(g.log_func(math.log(t)))


def log_evaluate(g: BalancingFunction, log_t: float) -> float:
    """Return log g(exp(log_t)) computed without overflow."""
    log_t = float(log_t)
    if math.isnan(log_t) or log_t == math.inf:
        raise ValueError(f"log_t must be finite, got {log_t}")
    if log_t == -math.inf:
        # g(0) as a limit: only constant and max stay positive
        if g.kind in ("constant", "max"):
            return 0.0
        if g.kind == "custom":
            raise ValueError("log_t must be finite for custom balancing functions")
        return -math.inf
    if g.kind != "custom":
        return _builtin_log(g.kind, log_t)
    if g.log_func is not None:
        return float(g.log_func(log_t))
    return math.log(g.func(math.exp(log_t)))


def is_balanced(g: BalancingFunction, probe_points: Sequence[float], tol: float = 1e-12) -> bool:
    """True iff |g(t) - t g(1/t)| <= tol * max(1, g(t)) at every probe point.

    The comparison is done in log space when the values themselves would
    overflow, which keeps the test meaningful on wide grids.
    """
    pts = list(probe_points)
    if not pts:
        raise ValueError("probe_points must be non-empty")
    if tol <= 0:
        raise ValueError("tol must be positive")
    for t in pts:
        t = _check_t(t)
        lt = math.log(t)
        lhs = log_evaluate(g, lt)
        rhs = lt + log_evaluate(g, -lt)
        if max(lhs, rhs) > 700:
            if abs(lhs - rhs) > tol:
                return False
            continue
        a, b = math.exp(lhs), math.exp(rhs)
        if abs(a - b) > tol * max(1.0, a):
            return False
    return True


def balanced_transform(g: BalancingFunction) -> BalancingFunction:
    """Return t -> min{g(t), t g(1/t)}, which always satisfies g(t) = t g(1/t)."""

    def log_tilde(lt: float) -> float:
        return min(log_evaluate(g, lt), lt + log_evaluate(g, -lt))

    return BalancingFunction.custom(
        log_func=log_tilde,
        bound=g.bound,
        label=f"tilde({g.label})",
        check_bound=False,
    )


def from_name(name: str) -> BalancingFunction:
    """Built-in balancing function from a config name (rw, gb, sqrt, barker, min, max)."""
    key = name.strip().lower()
    if key not in _NAMES:
        raise ValueError(f"unknown balancing function name {name!r}; expected one of {sorted(_NAMES)}")
    return BalancingFunction(_NAMES[key])
