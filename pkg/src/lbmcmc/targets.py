"""Discrete targets with enumerable neighbourhoods and cheap log-ratios.

States are numpy arrays and are never mutated by the target methods.
Moves are integer indices into a fixed-size neighbourhood, and every
built-in move is its own reverse (flipping a bit twice, switching the same
two indices twice).
"""
from __future__ import annotations

import itertools
import math
from abc import ABC, abstractmethod
from dataclasses import dataclass
from typing import Any, Callable, Iterator, Optional

import numpy as np

from . import _models

__all__ = [
    "DiscreteTarget",
    "BinaryTarget",
    "IsingTarget",
    "PermutationTarget",
    "EngineModel",
    "ISING_PRESETS",
    "disk_field",
    "lognormal_weights",
    "banded_weights",
    "target_from_config",
]


@dataclass
class EngineModel:
    """Everything the compiled engine needs to run chains on a target."""

    data: tuple
    lr_fn: Callable
    apply_fn: Callable
    aff_fn: Callable
    sel_fn: Optional[Callable]
    n_moves: int
    n_coord: int
    n_units: int  # items a block selector draws from (sites or indices)
    level_code: int  # 0 none, 1 sum of spins, 2 number of matched rows
    level_name: str
    max_changed: int
    max_affected: int  # per changed position
    encode: Callable[[np.ndarray], np.ndarray]
    decode: Callable[[np.ndarray], np.ndarray]


class DiscreteTarget(ABC):
    """Unnormalised distribution on a finite space with a symmetric uniform base kernel."""

    name = "target"

    @property
    @abstractmethod
    def n_moves(self) -> int:
        """|N(x)|, the same for every state."""

    def neighborhood_size(self, x=None) -> int:
        return self.n_moves

    def enumerate_neighborhood(self, x) -> Iterator[int]:
        return iter(range(self.n_moves))

    def check_move(self, m) -> int:
        m = int(m)
        if not 0 <= m < self.n_moves:
            raise IndexError(f"move {m} out of range for neighbourhood of size {self.n_moves}")
        return m

    @abstractmethod
    def apply_move(self, x: np.ndarray, m: int) -> np.ndarray:
        """Return the neighbour of ``x`` reached by move ``m`` (a new array)."""

    @abstractmethod
    def log_ratio(self, x: np.ndarray, m: int) -> float:
        """log pi(y) - log pi(x) for y = apply_move(x, m)."""

    @abstractmethod
    def log_density_unnorm(self, x: np.ndarray) -> float:
        """Unnormalised log density."""

    def log_ratios(self, x: np.ndarray) -> np.ndarray:
        return np.array([self.log_ratio(x, m) for m in range(self.n_moves)])

    def affected_moves(self, x: np.ndarray, m: int) -> np.ndarray:
        """Moves whose log-ratio can change when ``m`` is applied at ``x``.

        The default is every move, which is always correct.
        """
        return np.arange(self.n_moves)

    def reverse_move(self, x: np.ndarray, m: int) -> int:
        return m

    @abstractmethod
    def random_state(self, rng: np.random.Generator) -> np.ndarray:
        ...

    @abstractmethod
    def states(self) -> Iterator[np.ndarray]:
        """All states, in lexicographic order of their encoding."""

    @property
    @abstractmethod
    def n_states(self) -> int:
        ...

    def state_key(self, x) -> tuple:
        return tuple(int(v) for v in np.asarray(x).ravel())

    def engine(self) -> Optional[EngineModel]:
        """Compiled description, or None if only the Python path applies."""
        return None

    def coords(self, x) -> np.ndarray:
        """Coordinates compared by Hamming-distance summaries."""
        return np.asarray(x)

    # scalar summary recorded alongside Hamming distances (None if not defined)
    level_name = ""

    def level(self, x) -> Optional[float]:
        return None

    @property
    def n_units(self) -> int:
        """Number of items a block selector draws from."""
        raise NotImplementedError(f"{type(self).__name__} has no block structure")

    def block_moves(self, units: np.ndarray) -> np.ndarray:
        """Moves of the sub-neighbourhood induced by the sorted unit subset."""
        raise NotImplementedError(f"{type(self).__name__} has no block structure")


def _csr(n_sites: int, edges: list[tuple[int, int]]):
    nbrs: list[list[int]] = [[] for _ in range(n_sites)]
    for a, b in edges:
        nbrs[a].append(b)
        nbrs[b].append(a)
    indptr = np.zeros(n_sites + 1, dtype=np.int64)
    for i, row in enumerate(nbrs):
        indptr[i + 1] = indptr[i] + len(row)
    flat = np.array([v for row in nbrs for v in sorted(row)], dtype=np.int64)
    return indptr, flat, [sorted(r) for r in nbrs]


class BinaryTarget(DiscreteTarget):
    """Independent bits: pi(x) = prod p_i^(1 - x_i) (1 - p_i)^x_i, single-bit flips."""

    name = "binary"

    def __init__(self, p):
        p = np.asarray(p, dtype=float)
        if p.ndim != 1 or p.size == 0:
            raise ValueError("p must be a non-empty vector")
        if np.any(p <= 0) or np.any(p >= 1):
            raise ValueError("binary target needs 0 < p_i < 1")
        self.p = p
        self.n = p.size
        self._log_p = np.log(p)
        self._log_q = np.log1p(-p)
        # log ratio of flipping bit i from 0 to 1
        self._up = np.log((1 - p) / p)

    @property
    def n_moves(self):
        return self.n

    @property
    def n_states(self):
        return 2 ** self.n

    def apply_move(self, x, m):
        m = self.check_move(m)
        y = np.array(x, dtype=np.int8, copy=True)
        y[m] = 1 - y[m]
        return y

    def log_ratio(self, x, m):
        return float(self._up[m]) if x[m] == 0 else float(-self._up[m])

    def log_ratios(self, x):
        return np.where(np.asarray(x) == 0, self._up, -self._up)

    def log_density_unnorm(self, x):
        x = np.asarray(x)
        return float(np.sum(np.where(x == 0, self._log_p, self._log_q)))

    def affected_moves(self, x, m):
        return np.array([m], dtype=np.int64)

    level_name = "magnetization"

    def level(self, x):
        return int(np.sum(2 * np.asarray(x, dtype=np.int64) - 1))

    @property
    def n_units(self):
        return self.n

    def block_moves(self, units):
        return np.asarray(units, dtype=np.int64)

    def random_state(self, rng):
        return (rng.random(self.n) < 1 - self.p).astype(np.int8)

    def states(self):
        for bits in itertools.product((0, 1), repeat=self.n):
            yield np.array(bits, dtype=np.int8)

    def engine(self):
        h = 0.5 * self._up
        data = (h, np.zeros(self.n + 1, dtype=np.int64), np.zeros(0, dtype=np.int64),
                np.zeros(1))
        return EngineModel(
            data=data, lr_fn=_models.flip_lr, apply_fn=_models.flip_apply,
            aff_fn=_models.flip_affected, sel_fn=_models.flip_select,
            n_moves=self.n, n_coord=self.n, n_units=self.n, level_code=1,
            level_name="magnetization", max_changed=1, max_affected=1,
            encode=lambda x: 2 * np.asarray(x, dtype=np.int64) - 1,
            decode=lambda s: ((np.asarray(s) + 1) // 2).astype(np.int8),
        )


class IsingTarget(DiscreteTarget):
    """Ising model on an n x n lattice, spins in {-1, +1}, single-spin flips.

    Sites are numbered row-major.  ``boundary`` is ``"periodic"`` (torus) or
    ``"free"``; duplicate torus edges on tiny lattices are merged.
    """

    name = "ising"

    def __init__(self, n: int, alpha=0.0, lam: float = 1.0, boundary: str = "periodic"):
        if n < 1:
            raise ValueError("grid side must be positive")
        if lam < 0:
            raise ValueError("interaction lambda must be non-negative")
        if boundary not in ("periodic", "free"):
            raise ValueError("boundary must be 'periodic' or 'free'")
        self.n = int(n)
        self.size = self.n * self.n
        alpha = np.asarray(alpha, dtype=float)
        self.alpha = np.broadcast_to(alpha.ravel() if alpha.ndim else alpha, (self.size,)).astype(float)
        self.lam = float(lam)
        self.boundary = boundary
        edges = set()
        for r in range(self.n):
            for c in range(self.n):
                i = r * self.n + c
                for dr, dc in ((0, 1), (1, 0)):
                    rr, cc = r + dr, c + dc
                    if boundary == "periodic":
                        rr %= self.n
                        cc %= self.n
                    elif rr >= self.n or cc >= self.n:
                        continue
                    j = rr * self.n + cc
                    if i != j:
                        edges.add((min(i, j), max(i, j)))
        self.edges = np.array(sorted(edges), dtype=np.int64).reshape(-1, 2)
        self._indptr, self._nbr, self._nbr_lists = _csr(self.size, [tuple(e) for e in self.edges])

    @property
    def n_moves(self):
        return self.size

    @property
    def n_states(self):
        return 2 ** self.size

    def apply_move(self, x, m):
        m = self.check_move(m)
        y = np.array(x, dtype=np.int8, copy=True)
        y[m] = -y[m]
        return y

    def log_ratio(self, x, m):
        acc = int(sum(int(x[j]) for j in self._nbr_lists[m]))
        return -2.0 * float(x[m]) * (self.alpha[m] + self.lam * acc)

    def log_ratios(self, x):
        x = np.asarray(x, dtype=np.int64)
        acc = np.add.reduceat(x[self._nbr], self._indptr[:-1]) if self._nbr.size else np.zeros(self.size, dtype=np.int64)
        # reduceat misbehaves on empty rows; isolated sites only occur for n == 1
        if self._nbr.size:
            empty = np.diff(self._indptr) == 0
            acc = np.where(empty, 0, acc)
        return -2.0 * x * (self.alpha + self.lam * acc)

    def log_density_unnorm(self, x):
        x = np.asarray(x, dtype=float)
        inter = float(np.sum(x[self.edges[:, 0]] * x[self.edges[:, 1]])) if self.edges.size else 0.0
        return float(np.dot(self.alpha, x)) + self.lam * inter

    def affected_moves(self, x, m):
        return np.array([m] + self._nbr_lists[m], dtype=np.int64)

    level_name = "magnetization"

    def level(self, x):
        return int(np.sum(np.asarray(x, dtype=np.int64)))

    @property
    def n_units(self):
        return self.size

    def block_moves(self, units):
        return np.asarray(units, dtype=np.int64)

    def random_state(self, rng):
        return np.where(rng.random(self.size) < 0.5, 1, -1).astype(np.int8)

    def states(self):
        for spins in itertools.product((-1, 1), repeat=self.size):
            yield np.array(spins, dtype=np.int8)

    def engine(self):
        data = (self.alpha.copy(), self._indptr, self._nbr, np.array([self.lam]))
        deg = int(np.max(np.diff(self._indptr))) if self.size else 0
        return EngineModel(
            data=data, lr_fn=_models.flip_lr, apply_fn=_models.flip_apply,
            aff_fn=_models.flip_affected, sel_fn=_models.flip_select,
            n_moves=self.size, n_coord=self.size, n_units=self.size, level_code=1,
            level_name="magnetization", max_changed=1, max_affected=1 + deg,
            encode=lambda x: np.asarray(x, dtype=np.int64).copy(),
            decode=lambda s: np.asarray(s).astype(np.int8),
        )


class PermutationTarget(DiscreteTarget):
    """pi(rho) proportional to prod_i w[i, rho(i)] over permutations, index switches.

    Move ``m`` switches the pair ``(pair_i[m], pair_j[m])`` with pairs listed
    in lexicographic order.  States are 0-based permutation arrays.
    """

    name = "permutation"

    def __init__(self, w=None, *, log_w=None):
        if (w is None) == (log_w is None):
            raise ValueError("give exactly one of w or log_w")
        if log_w is None:
            w = np.asarray(w, dtype=float)
            if np.any(w <= 0):
                raise ValueError("permutation weights must be positive")
            log_w = np.log(w)
        log_w = np.asarray(log_w, dtype=float)
        if log_w.ndim != 2 or log_w.shape[0] != log_w.shape[1]:
            raise ValueError("weights must be a square matrix")
        if not np.all(np.isfinite(log_w)):
            raise ValueError("log weights must be finite")
        self.log_w = log_w
        self.n = log_w.shape[0]
        if self.n < 2:
            raise ValueError("permutations need n >= 2")
        iu, ju = np.triu_indices(self.n, k=1)
        self.pair_i = iu.astype(np.int64)
        self.pair_j = ju.astype(np.int64)
        self.pair_index = -np.ones((self.n, self.n), dtype=np.int64)
        self.pair_index[iu, ju] = np.arange(iu.size)
        self.pair_index[ju, iu] = np.arange(iu.size)

    @property
    def n_moves(self):
        return self.pair_i.size

    @property
    def n_states(self):
        return math.factorial(self.n)

    def move_pair(self, m) -> tuple[int, int]:
        m = self.check_move(m)
        return int(self.pair_i[m]), int(self.pair_j[m])

    def apply_move(self, x, m):
        i, j = self.move_pair(m)
        y = np.array(x, dtype=np.int64, copy=True)
        y[i], y[j] = y[j], y[i]
        return y

    def log_ratio(self, x, m):
        i, j = int(self.pair_i[m]), int(self.pair_j[m])
        ri, rj = int(x[i]), int(x[j])
        lw = self.log_w
        return float((lw[i, rj] + lw[j, ri]) - (lw[i, ri] + lw[j, rj]))

    def log_ratios(self, x):
        x = np.asarray(x)
        i, j = self.pair_i, self.pair_j
        lw = self.log_w
        return (lw[i, x[j]] + lw[j, x[i]]) - (lw[i, x[i]] + lw[j, x[j]])

    def log_density_unnorm(self, x):
        x = np.asarray(x)
        return float(np.sum(self.log_w[np.arange(self.n), x]))

    def affected_moves(self, x, m):
        i, j = self.move_pair(m)
        rows = np.concatenate([self.pair_index[i], self.pair_index[j]])
        return np.unique(rows[rows >= 0])

    @property
    def n_units(self):
        return self.n

    def block_moves(self, units):
        units = np.asarray(units, dtype=np.int64)
        a, b = np.triu_indices(units.size, k=1)
        return self.pair_index[units[a], units[b]]

    def random_state(self, rng):
        return rng.permutation(self.n).astype(np.int64)

    def states(self):
        for perm in itertools.permutations(range(self.n)):
            yield np.array(perm, dtype=np.int64)

    def engine(self):
        data = (self.log_w, self.pair_i, self.pair_j, self.pair_index)
        return EngineModel(
            data=data, lr_fn=_models.perm_lr, apply_fn=_models.perm_apply,
            aff_fn=_models.perm_affected, sel_fn=_models.perm_select,
            n_moves=self.n_moves, n_coord=self.n, n_units=self.n, level_code=0,
            level_name="", max_changed=2, max_affected=self.n - 1,
            encode=lambda x: np.asarray(x, dtype=np.int64).copy(),
            decode=lambda s: np.asarray(s, dtype=np.int64).copy(),
        )


# generators -----------------------------------------------------------------

# (mu, sigma, lambda) for Targets 0-4 of the image-analysis Ising benchmark
ISING_PRESETS = {
    0: (0.0, 0.0, 0.0),
    1: (0.5, 1.5, 0.5),
    2: (1.0, 3.0, 1.0),
    3: (2.0, 3.0, 1.0),
    4: (3.0, 3.0, 1.0),
}


def disk_field(n: int, mu: float, sigma: float, rng: np.random.Generator,
               radius: float = 0.25) -> np.ndarray:
    """External field for a disk-shaped object centred in the grid.

    Object sites get ``mu + Z``, background sites ``-mu + Z`` with
    ``Z ~ Unif(-sigma, sigma)``.  ``radius`` is a fraction of the side.
    """
    r, c = np.meshgrid(np.arange(n), np.arange(n), indexing="ij")
    centre = (n - 1) / 2.0
    inside = (r - centre) ** 2 + (c - centre) ** 2 <= (radius * n) ** 2
    noise = rng.uniform(-sigma, sigma, size=(n, n)) if sigma > 0 else np.zeros((n, n))
    return (np.where(inside, mu, -mu) + noise).ravel()


def lognormal_weights(n: int, lam: float, rng: np.random.Generator) -> np.ndarray:
    """log w_ij iid N(0, lam^2); returns the log-weight matrix."""
    return lam * rng.standard_normal((n, n))


def banded_weights(n: int, rng: np.random.Generator) -> np.ndarray:
    """w_ij ~ exp(-chi^2 with |i - j| degrees of freedom); returns log-weights."""
    d = np.abs(np.subtract.outer(np.arange(n), np.arange(n)))
    out = np.zeros((n, n))
    mask = d > 0
    out[mask] = -rng.chisquare(d[mask])
    return out


def _parse_call(spec: str) -> tuple[str, list[float]]:
    spec = spec.strip()
    if "(" not in spec:
        return spec, []
    name, rest = spec.split("(", 1)
    args = [float(a) for a in rest.rstrip(")").split(",") if a.strip()]
    return name.strip(), args


def _load_matrix(path: str) -> np.ndarray:
    return np.loadtxt(path, delimiter=",", ndmin=2)


def target_from_config(cfg: dict[str, Any], rng: np.random.Generator) -> DiscreteTarget:
    """Build a target from a config mapping.

    Recognised shapes::

        {kind: binary, n: 10, p: "iid-uniform(0.2, 0.8)"}   # or an explicit list
        {kind: permutation, n: 100, weights: "lognormal(3)"} # or "banded", or a CSV path
        {kind: ising, n: 50, preset: 3}                      # or mu/sigma/lambda/radius, or field: CSV path
    """
    kind = str(cfg.get("kind", "")).lower()
    if kind == "binary":
        p = cfg.get("p", "iid-uniform(0.2,0.8)")
        if isinstance(p, str):
            name, args = _parse_call(p)
            if name != "iid-uniform" or len(args) != 2:
                raise ValueError(f"binary.p: expected iid-uniform(a,b) or a list, got {p!r}")
            p = rng.uniform(args[0], args[1], size=int(cfg["n"]))
        return BinaryTarget(p)
    if kind == "permutation":
        n = int(cfg["n"])
        spec = cfg.get("weights", "lognormal(1)")
        name, args = _parse_call(str(spec))
        if name == "lognormal":
            if len(args) != 1:
                raise ValueError("permutation.weights: lognormal(lambda)")
            return PermutationTarget(log_w=lognormal_weights(n, args[0], rng))
        if name == "banded":
            return PermutationTarget(log_w=banded_weights(n, rng))
        return PermutationTarget(w=_load_matrix(str(spec)))
    if kind == "ising":
        n = int(cfg["n"])
        boundary = cfg.get("boundary", "periodic")
        if "field" in cfg:
            alpha = np.loadtxt(cfg["field"], delimiter=",").ravel()
            return IsingTarget(n, alpha, float(cfg.get("lambda", 1.0)), boundary)
        mu, sigma, lam = ISING_PRESETS[int(cfg.get("preset", 1))]
        mu = float(cfg.get("mu", mu))
        sigma = float(cfg.get("sigma", sigma))
        lam = float(cfg.get("lambda", lam))
        alpha = disk_field(n, mu, sigma, rng, float(cfg.get("radius", 0.25)))
        return IsingTarget(n, alpha, lam, boundary)
    raise ValueError(f"unknown target kind {cfg.get('kind')!r}")
