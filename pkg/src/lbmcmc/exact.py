"""Exhaustive analysis of kernels on small enumerable state spaces.

Everything here builds dense S x S matrices, so it is a verification tool,
not a sampler: stationarity and reversibility checks, spectral gaps,
asymptotic variances, smoothness constants, Peskun comparisons and the
limiting jump rates of the binary chain.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.special import logsumexp

from . import _engine
from .balance import BalancingFunction
from .kernels import EngineChain, KernelSpec, chain_rng
from .targets import DiscreteTarget

__all__ = [
    "DEFAULT_CAP",
    "StateSpaceOverflow",
    "NonReversibleError",
    "StateIndex",
    "ExactKernel",
    "build_exact_kernel",
    "informed_proposal",
    "log_z",
    "flow_matrix",
    "flow_asymmetry",
    "stationarity_error",
    "stationary_distribution",
    "spectral_gap",
    "asymptotic_variance",
    "smoothness_constant",
    "PeskunReport",
    "peskun_check",
    "LimitRates",
    "limit_rates",
    "binary_chain_parameters",
    "brute_force_distribution",
    "visit_distribution",
    "total_variation",
    "two_state_globally_balanced",
    "simulate_kernel",
]

DEFAULT_CAP = 4096


class StateSpaceOverflow(ValueError):
    """The target has more states than the configured cap."""


class NonReversibleError(ValueError):
    """The kernel is not reversible with respect to the given distribution."""


class StateIndex:
    """Bijection between the states of a target and 0..S-1 (lexicographic order).

    Also caches the normalised target, the neighbour map ``nbr[s, m]`` and
    the log-ratios ``lr[s, m]`` taken from log-density differences, so that
    the ratio of a move and its reverse are exact negatives.
    """

    def __init__(self, target: DiscreteTarget, cap: int = DEFAULT_CAP):
        S = target.n_states
        if S > cap:
            raise StateSpaceOverflow(f"{S} states exceed the cap of {cap}")
        self.target = target
        self.states = list(target.states())
        self._pos = {target.state_key(x): i for i, x in enumerate(self.states)}
        if len(self._pos) != len(self.states):
            raise ValueError("state enumeration produced duplicates")
        lp = np.array([target.log_density_unnorm(x) for x in self.states])
        self.log_pi = lp - logsumexp(lp)
        self.pi = np.exp(self.log_pi)
        L = target.n_moves
        self.nbr = np.empty((len(self.states), L), dtype=np.int64)
        for s, x in enumerate(self.states):
            for m in range(L):
                self.nbr[s, m] = self.index(target.apply_move(x, m))
        self.lr = self.log_pi[self.nbr] - self.log_pi[:, None]

    def __len__(self):
        return len(self.states)

    def index(self, x) -> int:
        return self._pos[self.target.state_key(x)]

    def state(self, i: int):
        return self.states[i]


@dataclass
class ExactKernel:
    P: np.ndarray
    pi: np.ndarray
    index: Optional[StateIndex] = None
    label: str = ""

    def __post_init__(self):
        rows = self.P.sum(axis=1)
        if np.any(self.P < -1e-15) or np.max(np.abs(rows - 1.0)) > 1e-12:
            raise ValueError("transition matrix is not row-stochastic")


def _index(target, index, cap):
    return index if index is not None else StateIndex(target, cap)


def _glog(g: BalancingFunction, a: np.ndarray) -> np.ndarray:
    return g.log_array(a)


def _informed(idx: StateIndex, g: BalancingFunction, cols: np.ndarray) -> np.ndarray:
    """MH kernel of the informed proposal restricted to the move columns ``cols``."""
    S = len(idx)
    nbr = idx.nbr[:, cols]
    lr = idx.lr[:, cols]
    lw = _glog(g, lr)
    lW = logsumexp(lw, axis=1)
    q = np.exp(lw - lW[:, None])
    loga = lr + _glog(g, -lr) - lw + lW[:, None] - lW[nbr]
    a = np.exp(np.minimum(0.0, loga))
    P = np.zeros((S, S))
    rows = np.repeat(np.arange(S), nbr.shape[1])
    np.add.at(P, (rows, nbr.ravel()), (q * a).ravel())
    np.fill_diagonal(P, 0.0)
    P[np.arange(S), np.arange(S)] = 1.0 - P.sum(axis=1)
    return P


def _uniform_proposal(idx: StateIndex) -> np.ndarray:
    S, L = idx.nbr.shape
    K = np.zeros((S, S))
    np.add.at(K, (np.repeat(np.arange(S), L), idx.nbr.ravel()), 1.0 / L)
    return K


def build_exact_kernel(spec: KernelSpec, target: DiscreteTarget, cap: int = DEFAULT_CAP,
                       index: Optional[StateIndex] = None) -> ExactKernel:
    """Dense transition matrix of ``spec`` on ``target``.

    RW and informed kernels put the rejection mass on the diagonal.  The
    Hamming Ball kernel is the product of the uniform stage and the
    pi-weighted stage.  The block-wise kernel averages the within-block
    informed kernels over all equally likely unit subsets.
    """
    idx = _index(target, index, cap)
    S, L = idx.nbr.shape
    all_cols = np.arange(L)
    if spec.scheme == "rw":
        a = np.exp(np.minimum(0.0, idx.lr))
        P = np.zeros((S, S))
        np.add.at(P, (np.repeat(np.arange(S), L), idx.nbr.ravel()), (a / L).ravel())
        np.fill_diagonal(P, 0.0)
        P[np.arange(S), np.arange(S)] = 1.0 - P.sum(axis=1)
    elif spec.scheme == "informed":
        P = _informed(idx, spec.g, all_cols)
    elif spec.scheme == "hamming_ball":
        K = _uniform_proposal(idx)
        Qpi = informed_proposal(target, BalancingFunction.linear(), index=idx)
        P = K @ Qpi
    elif spec.scheme == "blockwise":
        k = spec.block_size
        subsets = list(itertools.combinations(range(target.n_units), k))
        P = np.zeros((S, S))
        for sub in subsets:
            cols = target.block_moves(np.array(sub, dtype=np.int64))
            if len(cols) == 0:
                raise ValueError("block size yields an empty sub-neighbourhood")
            P += _informed(idx, spec.g, np.asarray(cols))
        P /= len(subsets)
    else:
        raise ValueError(f"unknown scheme {spec.scheme!r}")
    return ExactKernel(P, idx.pi, idx, spec.label)


def log_z(target: DiscreteTarget, g: BalancingFunction, cap: int = DEFAULT_CAP,
          index: Optional[StateIndex] = None) -> np.ndarray:
    """log Z_g(x) for every state, with the uniform base kernel."""
    idx = _index(target, index, cap)
    return logsumexp(_glog(g, idx.lr), axis=1) - math.log(idx.nbr.shape[1])


def informed_proposal(target: DiscreteTarget, g: BalancingFunction, cap: int = DEFAULT_CAP,
                      index: Optional[StateIndex] = None) -> np.ndarray:
    """Q_g(x, y) proportional to g(pi(y)/pi(x)) K(x, y), without MH correction."""
    idx = _index(target, index, cap)
    S, L = idx.nbr.shape
    lw = _glog(g, idx.lr)
    q = np.exp(lw - logsumexp(lw, axis=1)[:, None])
    Q = np.zeros((S, S))
    np.add.at(Q, (np.repeat(np.arange(S), L), idx.nbr.ravel()), q.ravel())
    return Q


def flow_matrix(target: DiscreteTarget, g: BalancingFunction, cap: int = DEFAULT_CAP,
                index: Optional[StateIndex] = None) -> np.ndarray:
    """pi(x) Z_g(x) Q_g(x, y), symmetric exactly when g is balanced."""
    idx = _index(target, index, cap)
    Q = informed_proposal(target, g, index=idx)
    return (idx.pi * np.exp(log_z(target, g, index=idx)))[:, None] * Q


def flow_asymmetry(F: np.ndarray) -> float:
    return float(np.max(np.abs(F - F.T)))


def stationarity_error(P: np.ndarray, pi: np.ndarray) -> float:
    """max_y |(pi^T P)_y - pi_y|."""
    return float(np.max(np.abs(pi @ P - pi)))


def stationary_distribution(P: np.ndarray) -> np.ndarray:
    """Left Perron vector of a row-stochastic matrix (irreducible case)."""
    S = P.shape[0]
    A = np.vstack([P.T - np.eye(S), np.ones((1, S))])
    b = np.zeros(S + 1)
    b[-1] = 1.0
    v, *_ = np.linalg.lstsq(A, b, rcond=None)
    return v


def _check_reversible(P, pi, tol):
    F = pi[:, None] * P
    scale = max(float(np.max(np.abs(F))), 1e-300)
    err = float(np.max(np.abs(F - F.T)))
    if err > tol * scale:
        raise NonReversibleError(
            f"max |pi(x)P(x,y) - pi(y)P(y,x)| = {err:.3e} exceeds {tol:g} x max flow {scale:.3e}")


def _symmetrised(P, pi, tol):
    _check_reversible(P, pi, tol)
    d = np.sqrt(pi)
    A = d[:, None] * P / d[None, :]
    return 0.5 * (A + A.T)


def spectral_gap(P: np.ndarray, pi: np.ndarray, tol: float = 1e-10) -> float:
    """1 - lambda_2 of a pi-reversible kernel (refuses non-reversible input)."""
    ev = np.linalg.eigvalsh(_symmetrised(np.asarray(P, float), np.asarray(pi, float), tol))
    if ev.size < 2:
        return 0.0
    return float(1.0 - ev[-2])


def asymptotic_variance(P: np.ndarray, pi: np.ndarray, h, tol: float = 1e-10) -> float:
    """Sum over non-unit eigenpairs of (1 + l) / (1 - l) E_pi[h f]^2."""
    pi = np.asarray(pi, float)
    A = _symmetrised(np.asarray(P, float), pi, tol)
    ev, U = np.linalg.eigh(A)
    if np.count_nonzero(ev > 1.0 - 1e-10) > 1:
        raise ValueError("eigenvalue 1 is repeated: the kernel is reducible")
    h = np.asarray(h, float)
    hc = h - np.dot(pi, h)
    coef = U.T @ (np.sqrt(pi) * hc)
    ev, coef = ev[:-1], coef[:-1]
    return float(np.sum((1.0 + ev) / (1.0 - ev) * coef ** 2))


def smoothness_constant(target: DiscreteTarget, g: BalancingFunction, cap: int = DEFAULT_CAP,
                        index: Optional[StateIndex] = None) -> float:
    """c_g = max Z_g(y) / Z_g(x) over neighbouring pairs."""
    idx = _index(target, index, cap)
    lz = log_z(target, g, index=idx)
    return float(np.exp(np.max(lz[idx.nbr] - lz[:, None])))


@dataclass
class PeskunReport:
    c: float
    entrywise_slack: float
    entrywise_ok: bool
    gap1: float
    gap2: float
    gap_ok: bool
    variance_slacks: list = field(default_factory=list)
    variance_ok: bool = True

    @property
    def passed(self) -> bool:
        return self.entrywise_ok and self.gap_ok and self.variance_ok

    def as_dict(self) -> dict:
        return {
            "c": self.c,
            "entrywise_slack": self.entrywise_slack,
            "entrywise_ok": self.entrywise_ok,
            "gap1": self.gap1,
            "gap2": self.gap2,
            "gap_ok": self.gap_ok,
            "min_variance_slack": min(self.variance_slacks) if self.variance_slacks else None,
            "variance_ok": self.variance_ok,
            "passed": self.passed,
        }


def peskun_check(P1: np.ndarray, P2: np.ndarray, pi: np.ndarray, c: float,
                 hs: Optional[Sequence] = None, n_h: int = 10,
                 rng: Optional[np.random.Generator] = None, tol: float = 1e-12) -> PeskunReport:
    """Check P1(x,y) >= c P2(x,y) off the diagonal and the orderings it implies.

    The gap ordering is Gap(P1) >= c Gap(P2) and, for each test function h,
    var(h, P1) <= var(h, P2) / c + (1 - c) / c var_pi(h).
    """
    S = P1.shape[0]
    off = ~np.eye(S, dtype=bool)
    slack = float(np.min((P1 - c * P2)[off])) if S > 1 else 0.0
    g1 = spectral_gap(P1, pi)
    g2 = spectral_gap(P2, pi)
    if hs is None:
        rng = rng if rng is not None else np.random.default_rng(0)
        hs = [rng.standard_normal(S) for _ in range(n_h)]
    slacks = []
    for h in hs:
        h = np.asarray(h, float)
        var_pi = float(np.dot(pi, (h - np.dot(pi, h)) ** 2))
        v1 = asymptotic_variance(P1, pi, h)
        v2 = asymptotic_variance(P2, pi, h)
        bound = v2 / c + (1.0 - c) / c * var_pi
        slacks.append((bound - v1) / max(1.0, abs(bound)))
    # eigen-solver rounding sits far above 1e-12, so the spectral checks get their own tolerance
    spec_tol = 1e-9
    return PeskunReport(
        c=c,
        entrywise_slack=slack,
        entrywise_ok=slack >= -tol,
        gap1=g1,
        gap2=g2,
        gap_ok=g1 >= c * g2 - spec_tol,
        variance_slacks=slacks,
        variance_ok=all(s >= -spec_tol for s in slacks),
    )


@dataclass
class LimitRates:
    e: np.ndarray
    rate_up: np.ndarray  # 0 -> 1 flip rate, e_i (1 - p_i)
    rate_down: np.ndarray  # 1 -> 0 flip rate, e_i p_i
    zbar: float


def limit_rates(p, v, c) -> LimitRates:
    """Limiting jump rates of informed chains on independent bits.

    e_i = v_i min(c_i, 1 - c_i) / Zbar with Zbar the average of v_i p_i (1 - p_i).
    Under the density convention pi(x_i = 0) = p_i, bit i leaves 0 at rate
    e_i (1 - p_i) and leaves 1 at rate e_i p_i.
    """
    p = np.atleast_1d(np.asarray(p, float))
    v = np.broadcast_to(np.asarray(v, float), p.shape).copy()
    c = np.broadcast_to(np.asarray(c, float), p.shape).copy()
    if np.any(p <= 0) or np.any(p >= 1):
        raise ValueError("p must lie strictly inside (0, 1)")
    if np.any(v <= 0):
        raise ValueError("v must be positive")
    if np.any(c <= 0) or np.any(c >= 1):
        raise ValueError("c must lie strictly inside (0, 1)")
    zbar = float(np.mean(v * p * (1 - p)))
    e = v * np.minimum(c, 1 - c) / zbar
    return LimitRates(e=e, rate_up=e * (1 - p), rate_down=e * p, zbar=zbar)


def binary_chain_parameters(p, g: BalancingFunction) -> tuple[np.ndarray, np.ndarray]:
    """(v_i, c_i) with v c (1 - p) = g((1 - p)/p) and v (1 - c) p = g(p/(1 - p)).

    Balanced g always gives c_i = 1/2.
    """
    p = np.asarray(p, float)
    lr = np.log1p(-p) - np.log(p)
    up = np.exp(g.log_array(lr))
    down = np.exp(g.log_array(-lr))
    v = up / (1 - p) + down / p
    return v, up / ((1 - p) * v)


def brute_force_distribution(P: np.ndarray, horizon: int, init=None) -> np.ndarray:
    """Exact law after ``horizon`` steps (``init`` defaults to a point mass on state 0)."""
    S = P.shape[0]
    if init is None:
        mu = np.zeros(S)
        mu[0] = 1.0
    else:
        mu = np.asarray(init, float).copy()
    return mu @ np.linalg.matrix_power(P, int(horizon))


def total_variation(a, b) -> float:
    return 0.5 * float(np.sum(np.abs(np.asarray(a, float) - np.asarray(b, float))))


def visit_distribution(spec: KernelSpec, index: StateIndex, iterations: int, seed: int = 0,
                       init=None, chain: int = 0, chunk: int = 1 << 18) -> np.ndarray:
    """Empirical state frequencies of a compiled chain (spin/bit targets only).

    The engine records Hamming distances rather than states, so the state is
    recovered from distances to the all-minus state and its one-site flips.
    """
    target = index.target
    model = target.engine()
    if model is None or model.max_changed != 1:
        raise ValueError("visit counting needs a single-site flip target")
    n = model.n_coord
    base = model.decode(-np.ones(n, dtype=np.int64))
    refs = [base] + [target.apply_move(base, i) for i in range(n)]
    rng = chain_rng(seed, chain)
    if init is None:
        init = target.random_state(rng)
    ec = EngineChain(spec, model, init, refs, record_level=False)
    counts = np.zeros(len(index))
    codes = np.array([index.index(model.decode(np.array(bits) * 2 - 1))
                      for bits in itertools.product((0, 1), repeat=n)])
    weights = 1 << np.arange(n - 1, -1, -1)
    done = 0
    while done < iterations:
        m = min(chunk, iterations - done)
        summ = np.zeros((m, n + 1))
        ec.run(rng.random((m, ec.width)), 0, 1, summ, np.zeros(m, dtype=np.bool_),
               np.zeros(m, dtype=np.int64))
        d0 = summ[:, :1]
        # d(x, flip_i(base)) = d0 - 1 when x_i is up, d0 + 1 otherwise
        up = (summ[:, 1:] < d0).astype(np.int64)
        np.add.at(counts, codes[up @ weights], 1.0)
        done += m
    return counts / iterations


def simulate_kernel(P: np.ndarray, h, n_steps: int, seed: int = 0, x0: int = 0,
                    chunk: int = 1 << 20) -> np.ndarray:
    """Simulate a finite chain and return h(X_t) for t = 1..n_steps."""
    cum = np.cumsum(np.asarray(P, float), axis=1)
    cum[:, -1] = 1.0
    rng = np.random.default_rng(seed)
    h = np.asarray(h, float)
    out = np.empty(n_steps)
    x = int(x0)
    done = 0
    while done < n_steps:
        m = min(chunk, n_steps - done)
        x = _engine.simulate_finite_chain(cum, x, rng.random(m), h, out[done:done + m])
        done += m
    return out


def two_state_globally_balanced(t0: float = 3.0, s: float = 1.0) -> dict:
    """Two-state check of the g(t) = t proposal, pi = (1, t0) / (1 + t0).

    The base kernel stays put with probability 1 - s and swaps with
    probability s.  Returns the proposal matrix, its stationary law, the
    flow asymmetry of pi Z_g Q_g, and the distance of the stationary law to
    pi^2 (normalised), which vanishes as s shrinks.
    """
    pi = np.array([1.0, t0]) / (1.0 + t0)
    K = np.array([[1 - s, s], [s, 1 - s]])
    ratio = pi[None, :] / pi[:, None]
    W = ratio * K
    Z = W.sum(axis=1)
    Q = W / Z[:, None]
    F = (pi * Z)[:, None] * Q
    stat = stationary_distribution(Q)
    # pi(x) Z_g(x) = sum_y pi(y) K(x, y) for g(t) = t; the proposal is reversible for pi^2 Z_g
    target_law = pi * pi * Z
    target_law /= target_law.sum()
    pi2 = pi ** 2 / np.sum(pi ** 2)
    return {
        "Q": Q,
        "stationary": stat,
        "pi": pi,
        "pi_times_z": pi * Z / np.sum(pi * Z),
        "pi_sq_times_z": target_law,
        "flow_asymmetry": flow_asymmetry(F),
        "tv_to_pi_squared": total_variation(stat, pi2),
    }
