"""Bipartite record-linkage model: partial matchings, hit-miss likelihood,
Poisson-thinning prior, hyperparameter full conditionals and an exact oracle.

Indices are 0-based and -1 marks an unmatched record.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from scipy import integrate, special

from .. import _models
from ..targets import DiscreteTarget, EngineModel

__all__ = [
    "DEFAULT_BETA",
    "Matching",
    "RLDataset",
    "RLHyperState",
    "field_scores",
    "log_prior_matching",
    "log_likelihood",
    "match_score",
    "log_match_constant",
    "truncated_gamma",
    "gibbs_update_hyper",
    "MOVE_TYPES",
    "matching_base_move",
    "MatchingTarget",
    "enumerate_matchings",
    "count_matchings",
    "BruteForcePosterior",
    "brute_force_posterior",
]

DEFAULT_BETA = 0.001


class Matching:
    """Partial matching between ``n_x`` and ``n_y`` records with its inverse map."""

    def __init__(self, n_x: int, n_y: int, M=None):
        self.n_x = int(n_x)
        self.n_y = int(n_y)
        self.M = -np.ones(self.n_x, dtype=np.int64)
        self.Minv = -np.ones(self.n_y, dtype=np.int64)
        if M is not None:
            M = np.asarray(M, dtype=np.int64)
            if M.shape != (self.n_x,):
                raise ValueError(f"M must have length {self.n_x}")
            for i, j in enumerate(M):
                if j >= 0:
                    if j >= self.n_y or self.Minv[j] >= 0:
                        raise ValueError(f"M is not an injective partial matching (column {j})")
                    self.M[i] = j
                    self.Minv[j] = i

    @classmethod
    def from_pairs(cls, n_x, n_y, pairs):
        M = -np.ones(n_x, dtype=np.int64)
        for i, j in pairs:
            M[i] = j
        return cls(n_x, n_y, M)

    @classmethod
    def from_state(cls, n_x, n_y, state):
        return cls(n_x, n_y, np.asarray(state)[:n_x])

    @property
    def state(self) -> np.ndarray:
        """Engine encoding: M followed by M^-1."""
        return np.concatenate([self.M, self.Minv])

    @property
    def n_matches(self) -> int:
        return int(np.count_nonzero(self.M >= 0))

    def pairs(self) -> list[tuple[int, int]]:
        return [(i, int(j)) for i, j in enumerate(self.M) if j >= 0]

    def check(self):
        """Raise if injectivity or inverse consistency fails."""
        for i, j in enumerate(self.M):
            if j >= 0 and self.Minv[j] != i:
                raise AssertionError(f"M[{i}] = {j} but M^-1[{j}] = {self.Minv[j]}")
        for j, i in enumerate(self.Minv):
            if i >= 0 and self.M[i] != j:
                raise AssertionError(f"M^-1[{j}] = {i} but M[{i}] = {self.M[i]}")

    def one_based(self) -> np.ndarray:
        """M with 1-based partners and 0 for unmatched."""
        return self.M + 1

    def copy(self):
        return Matching(self.n_x, self.n_y, self.M)

    def __eq__(self, other):
        return isinstance(other, Matching) and np.array_equal(self.M, other.M)

    def __repr__(self):
        return f"Matching({self.n_x}, {self.n_y}, pairs={self.pairs()})"


def _as_M(M) -> np.ndarray:
    return M.M if isinstance(M, Matching) else np.asarray(M, dtype=np.int64)


@dataclass
class RLDataset:
    """Two tables of categorical codes with per-field frequency vectors.

    ``x`` is n_x by l and ``y`` is n_y by l, holding integer codes into the
    categories of each field.  ``theta[s]`` defaults to the empirical
    frequencies over both tables.
    """

    x: np.ndarray
    y: np.ndarray
    theta: Optional[list] = None
    field_names: Optional[list] = None
    categories: Optional[list] = None

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.int64)
        self.y = np.asarray(self.y, dtype=np.int64)
        if self.x.ndim != 2 or self.y.ndim != 2 or self.x.shape[1] != self.y.shape[1]:
            raise ValueError("x and y must be 2-d with the same number of fields")
        if self.x.size and self.x.min() < 0 or self.y.size and self.y.min() < 0:
            raise ValueError("category codes must be non-negative")
        ell = self.x.shape[1]
        if self.theta is None:
            self.theta = []
            for s in range(ell):
                vals = np.concatenate([self.x[:, s], self.y[:, s]])
                counts = np.bincount(vals)
                self.theta.append(counts / counts.sum())
        self.theta = [np.asarray(t, dtype=float) for t in self.theta]
        if len(self.theta) != ell:
            raise ValueError("one frequency vector per field is required")
        for s, t in enumerate(self.theta):
            if abs(t.sum() - 1.0) > 1e-9:
                raise ValueError(f"theta[{s}] does not sum to one")
            used = np.concatenate([self.x[:, s], self.y[:, s]])
            if used.size and (used.max() >= t.size or np.any(t[used] <= 0)):
                raise ValueError(f"field {s}: an observed value has zero frequency")
        if self.field_names is None:
            self.field_names = [f"f{s}" for s in range(ell)]

    @property
    def n_x(self) -> int:
        return self.x.shape[0]

    @property
    def n_y(self) -> int:
        return self.y.shape[0]

    @property
    def n_fields(self) -> int:
        return self.x.shape[1]

    @property
    def m(self) -> list[int]:
        return [t.size for t in self.theta]

    def baseline_log_likelihood(self) -> float:
        tot = 0.0
        for s, t in enumerate(self.theta):
            lt = np.log(t)
            tot += lt[self.x[:, s]].sum() + lt[self.y[:, s]].sum()
        return float(tot)


@dataclass
class RLHyperState:
    lam: float
    p_match: float
    beta: float = DEFAULT_BETA

    def __post_init__(self):
        if not self.lam > 0:
            raise ValueError("lambda must be positive")
        if not 0 < self.p_match < 1:
            raise ValueError("p_match must lie in (0, 1)")
        if not 0 <= self.beta <= 1:
            raise ValueError("beta must lie in [0, 1]")


def _agree_terms(theta_s: np.ndarray, beta: float):
    with np.errstate(divide="ignore"):
        miss = math.log(beta * (2 - beta)) if beta > 0 else -math.inf
        hit = np.log(beta * (2 - beta) + (1 - beta) ** 2 / theta_s)
    return hit, miss


def field_scores(dataset: RLDataset, beta: float = DEFAULT_BETA, rows=None, cols=None) -> np.ndarray:
    """F[i, j] = sum_s log(beta (2 - beta) + (1 - beta)^2 / theta_s[x_is] 1[x_is = y_js])."""
    x = dataset.x if rows is None else dataset.x[rows]
    y = dataset.y if cols is None else dataset.y[cols]
    F = np.zeros((x.shape[0], y.shape[0]))
    for s in range(dataset.n_fields):
        hit, miss = _agree_terms(dataset.theta[s], beta)
        agree = x[:, s][:, None] == y[:, s][None, :]
        F += np.where(agree, hit[x[:, s]][:, None], miss)
    return F


def log_match_constant(hyper: RLHyperState) -> float:
    """log(4 p / (lambda (1 - p)^2)), the hyperparameter part of every match score."""
    p = hyper.p_match
    return math.log(4.0 * p) - math.log(hyper.lam) - 2.0 * math.log1p(-p)


def match_score(dataset: RLDataset, hyper: RLHyperState, i: int, j: int) -> float:
    """Log of the factor couple (i, j) contributes to the full conditional of M."""
    if not (0 <= i < dataset.n_x and 0 <= j < dataset.n_y):
        raise IndexError(f"couple ({i}, {j}) out of range")
    F = field_scores(dataset, hyper.beta, rows=[i], cols=[j])
    return log_match_constant(hyper) + float(F[0, 0])


def log_prior_matching(M, lam: float, p_match: float, n_x: int, n_y: int) -> float:
    """log P(M | lambda, p) for the Poisson-thinning prior on partial matchings."""
    M = _as_M(M)
    nm = int(np.count_nonzero(M >= 0))
    n = n_x + n_y
    with np.errstate(divide="ignore"):
        lp = math.log(p_match) if p_match > 0 else -math.inf
    out = (-lam + (n - nm) * math.log(lam) - math.lgamma(n_x + 1) - math.lgamma(n_y + 1)
           + (n - 2 * nm) * math.log((1 - p_match) / 2))
    return out + nm * lp if nm > 0 else out


def log_likelihood(dataset: RLDataset, M, beta: float = DEFAULT_BETA) -> float:
    """log P(x, y | M) under the hit-miss model."""
    M = _as_M(M)
    tot = dataset.baseline_log_likelihood()
    for i, j in enumerate(M):
        if j < 0:
            continue
        for s in range(dataset.n_fields):
            xv = dataset.x[i, s]
            term = beta * (2 - beta)
            if xv == dataset.y[j, s]:
                term += (1 - beta) ** 2 / dataset.theta[s][xv]
            tot += math.log(term) if term > 0 else -math.inf
    return tot


def truncated_gamma(shape: float, lo: float, hi: float, rng: np.random.Generator) -> float:
    """Gamma(shape, rate 1) restricted to [lo, hi], by inverse CDF.

    Works with the lower regularised incomplete gamma when the interval sits
    left of the mode and with the upper one otherwise, so the interval mass
    keeps its precision; falls back to bisection if the inverse misbehaves.
    """
    if not lo < hi:
        raise ValueError("empty truncation interval")
    u = rng.random()
    if lo < shape - 1:
        a, b = special.gammainc(shape, lo), special.gammainc(shape, hi)
        val = special.gammaincinv(shape, a + u * (b - a))
        cdf = lambda v: special.gammainc(shape, v) - (a + u * (b - a))
    else:
        a, b = special.gammaincc(shape, lo), special.gammaincc(shape, hi)
        val = special.gammainccinv(shape, a - u * (a - b))
        cdf = lambda v: (a - u * (a - b)) - special.gammaincc(shape, v)
    if b == a or not np.isfinite(val) or not lo <= val <= hi:
        left, right = lo, hi
        for _ in range(200):
            mid = 0.5 * (left + right)
            c = cdf(mid)
            if abs(c) < 1e-12 or right - left < 1e-12 * hi:
                break
            if c < 0:
                left = mid
            else:
                right = mid
        val = 0.5 * (left + right)
    return float(min(max(val, lo), hi))


def gibbs_update_hyper(M, n_x: int, n_y: int, rng: np.random.Generator,
                       beta: float = DEFAULT_BETA, p_rule: str = "conjugate",
                       lambda_support: str = "max") -> RLHyperState:
    """Draw (lambda, p_match) from their full conditionals given M.

    ``p_rule="conjugate"`` draws p ~ Beta(1 + N_m, 1 + n_x + n_y - 2 N_m), which
    is what the prior exponents and a uniform prior give; ``"printed"`` swaps
    the two parameters.  lambda ~ Gamma(1 + n_x + n_y - N_m, 1) truncated to
    [max(n_x, n_y), n_x + n_y] (``lambda_support="max"``) or with the lower
    end min(n_x, n_y) (``"min"``).
    """
    nm = int(np.count_nonzero(_as_M(M) >= 0))
    n = n_x + n_y
    if p_rule == "conjugate":
        a, b = 1 + nm, 1 + n - 2 * nm
    elif p_rule == "printed":
        a, b = 1 + n - 2 * nm, 1 + nm
    else:
        raise ValueError(f"unknown p_rule {p_rule!r}")
    p = float(rng.beta(a, b))
    p = min(max(p, 1e-300), 1 - 1e-16)
    if lambda_support == "max":
        lo = max(n_x, n_y)
    elif lambda_support == "min":
        lo = min(n_x, n_y)
    else:
        raise ValueError(f"unknown lambda_support {lambda_support!r}")
    lam = truncated_gamma(1.0 + n - nm, float(lo), float(n), rng)
    return RLHyperState(lam=lam, p_match=p, beta=beta)


# base kernel on matchings ----------------------------------------------------

MOVE_TYPES = ("add", "delete", "switch_I", "switch_II", "double_switch")


def matching_base_move(M: Matching, i: int, j: int) -> tuple[str, Matching]:
    """Classify couple (i, j) at M and return the move type and resulting matching."""
    if not (0 <= i < M.n_x and 0 <= j < M.n_y):
        raise IndexError(f"couple ({i}, {j}) out of range")
    Mi, Mj = int(M.M[i]), int(M.Minv[j])
    out = M.copy()
    if Mi < 0 and Mj < 0:
        kind = "add"
        out.M[i], out.Minv[j] = j, i
    elif Mi == j:
        kind = "delete"
        out.M[i], out.Minv[j] = -1, -1
    elif Mi < 0:
        kind = "switch_I"
        out.M[Mj] = -1
        out.M[i], out.Minv[j] = j, i
    elif Mj < 0:
        kind = "switch_II"
        out.Minv[Mi] = -1
        out.M[i], out.Minv[j] = j, i
    else:
        kind = "double_switch"
        out.M[i], out.Minv[j] = j, i
        out.M[Mj], out.Minv[Mi] = Mi, Mj
    return kind, out


def count_matchings(n_x: int, n_y: int) -> int:
    return sum(math.comb(n_x, k) * math.comb(n_y, k) * math.factorial(k)
               for k in range(min(n_x, n_y) + 1))


def enumerate_matchings(n_x: int, n_y: int):
    """Yield every partial matching as an M vector (lexicographic in k, rows, columns)."""
    for k in range(min(n_x, n_y) + 1):
        for rows in itertools.combinations(range(n_x), k):
            for cols in itertools.permutations(range(n_y), k):
                M = -np.ones(n_x, dtype=np.int64)
                M[list(rows)] = cols
                yield M


class MatchingTarget(DiscreteTarget):
    """Full conditional of M at fixed hyperparameters, on the couple-based base kernel.

    States are engine encodings ``[M, M^-1]``; move ``m`` is couple
    ``(m // n_y, m % n_y)``.  ``F`` holds the data part of the scores and
    ``const`` the hyperparameter part, so a hyperparameter change only
    rewrites ``const``.
    """

    name = "matching"
    level_name = "n_matches"

    def __init__(self, F: np.ndarray, const: float):
        self.F = np.ascontiguousarray(F, dtype=float)
        self.n_x, self.n_y = self.F.shape
        self._c = np.array([float(const)])

    @classmethod
    def from_dataset(cls, dataset: RLDataset, hyper: RLHyperState):
        return cls(field_scores(dataset, hyper.beta), log_match_constant(hyper))

    @property
    def const(self) -> float:
        return float(self._c[0])

    @const.setter
    def const(self, value: float):
        # in place, so compiled chains holding the data tuple see the change
        self._c[0] = value

    @property
    def n_moves(self):
        return self.n_x * self.n_y

    @property
    def n_states(self):
        return count_matchings(self.n_x, self.n_y)

    def couple(self, m) -> tuple[int, int]:
        m = self.check_move(m)
        return divmod(m, self.n_y)

    def log_ratio(self, x, m):
        i, j = divmod(int(m), self.n_y)
        nx, F, c = self.n_x, self.F, self._c[0]
        Mi, Mj = int(x[i]), int(x[nx + j])
        if Mi < 0 and Mj < 0:
            return float(c + F[i, j])
        if Mi == j:
            return float(-(c + F[i, j]))
        if Mi < 0:
            return float(F[i, j] - F[Mj, j])
        if Mj < 0:
            return float(F[i, j] - F[i, Mi])
        return float((F[i, j] + F[Mj, Mi]) - (F[i, Mi] + F[Mj, j]))

    def apply_move(self, x, m):
        i, j = self.couple(m)
        M = Matching.from_state(self.n_x, self.n_y, x)
        return matching_base_move(M, i, j)[1].state

    def log_density_unnorm(self, x):
        M = np.asarray(x)[: self.n_x]
        rows = np.flatnonzero(M >= 0)
        return float(np.sum(self.c_plus_F(rows, M[rows])))

    def c_plus_F(self, rows, cols):
        return self._c[0] + self.F[rows, cols]

    def affected_moves(self, x, m):
        y = self.apply_move(x, m)
        x = np.asarray(x)
        changed = np.flatnonzero(x != y)
        rows = changed[changed < self.n_x]
        cols = changed[changed >= self.n_x] - self.n_x
        out = [r * self.n_y + np.arange(self.n_y) for r in rows]
        out += [np.arange(self.n_x) * self.n_y + c for c in cols]
        return np.unique(np.concatenate(out)) if out else np.zeros(0, dtype=np.int64)

    def random_state(self, rng):
        return Matching(self.n_x, self.n_y).state

    def states(self):
        for M in enumerate_matchings(self.n_x, self.n_y):
            yield Matching(self.n_x, self.n_y, M).state

    def coords(self, x):
        return np.asarray(x)[: self.n_x]

    def level(self, x):
        return int(np.count_nonzero(np.asarray(x)[: self.n_x] >= 0))

    def engine(self):
        data = (self.F, self._c, self.n_x, self.n_y)
        return EngineModel(
            data=data, lr_fn=_models.match_lr, apply_fn=_models.match_apply,
            aff_fn=_models.match_affected, sel_fn=None,
            n_moves=self.n_moves, n_coord=self.n_x, n_units=0, level_code=2,
            level_name=self.level_name, max_changed=4,
            max_affected=max(self.n_x, self.n_y),
            encode=lambda s: np.asarray(s, dtype=np.int64).copy(),
            decode=lambda s: np.asarray(s, dtype=np.int64).copy(),
        )


# exact posterior --------------------------------------------------------------


@dataclass
class BruteForcePosterior:
    matchings: list
    log_post: np.ndarray
    prob: np.ndarray
    pair_prob: np.ndarray  # n_x by n_y posterior probability of each couple

    @property
    def n_matchings(self) -> int:
        return len(self.matchings)


def _log_lambda_integral(k: int, lo: float, hi: float) -> float:
    """log of the integral of exp(-lam) lam^k over [lo, hi] by adaptive quadrature."""
    mode = min(max(float(k), lo), hi)
    shift = -mode + (k * math.log(mode) if k > 0 else 0.0)
    val, _ = integrate.quad(lambda t: math.exp(-t + (k * math.log(t) if k > 0 else 0.0) - shift),
                            lo, hi, epsabs=0.0, epsrel=1e-13, limit=200)
    return math.log(val) + shift


def brute_force_posterior(dataset: RLDataset, beta: float = DEFAULT_BETA,
                          lambda_support: str = "max", limit: int = 10_000) -> BruteForcePosterior:
    """Exact posterior over matchings with lambda and p integrated out.

    Priors are lambda ~ Unif[lo, n_x + n_y] and p ~ Unif(0, 1).  The p
    integral is a Beta function; the lambda integral uses quadrature.
    """
    nx, ny = dataset.n_x, dataset.n_y
    if count_matchings(nx, ny) > limit:
        raise ValueError(f"{count_matchings(nx, ny)} matchings exceed the enumeration limit {limit}")
    n = nx + ny
    lo = float(max(nx, ny) if lambda_support == "max" else min(nx, ny))
    F = field_scores(dataset, beta)
    base = dataset.baseline_log_likelihood()
    cache = {}
    mats, lps = [], []
    for M in enumerate_matchings(nx, ny):
        nm = int(np.count_nonzero(M >= 0))
        if nm not in cache:
            lp_int = (special.betaln(nm + 1, n - 2 * nm + 1) - (n - 2 * nm) * math.log(2.0))
            cache[nm] = (_log_lambda_integral(n - nm, lo, float(n)) + lp_int
                         - math.lgamma(nx + 1) - math.lgamma(ny + 1))
        rows = np.flatnonzero(M >= 0)
        ll = base + float(np.sum(F[rows, M[rows]]))
        mats.append(M)
        lps.append(ll + cache[nm])
    lps = np.array(lps)
    prob = np.exp(lps - special.logsumexp(lps))
    pair = np.zeros((nx, ny))
    for M, w in zip(mats, prob):
        rows = np.flatnonzero(M >= 0)
        pair[rows, M[rows]] += w
    return BruteForcePosterior(matchings=mats, log_post=lps, prob=prob, pair_prob=pair)
