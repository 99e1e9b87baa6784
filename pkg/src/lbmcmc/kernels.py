"""Transition kernels: random-walk MH, pointwise informed MH, Hamming Ball and
block-wise informed updates.

Two implementations share one contract.  The step functions below are plain
Python and work for any :class:`~lbmcmc.targets.DiscreteTarget` and any
balancing function; :func:`run_chain` drives the compiled loops in
``lbmcmc._engine`` whenever the target and g are built-in.  Both consume the
same uniforms in the same order (one fixed-width row per iteration), so a
seeded Python run and a seeded compiled run produce the same chain.
"""
from __future__ import annotations

import csv
import json
import math
import time
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import _engine
from .balance import BalancingFunction, from_name
from .targets import DiscreteTarget, EngineModel

__all__ = [
    "IsolatedStateError",
    "WeightTable",
    "KernelSpec",
    "BlockSelector",
    "Trace",
    "build_weight_table",
    "incremental_update",
    "rw_step",
    "informed_step",
    "hamming_ball_step",
    "blockwise_step",
    "informed_log_acceptance",
    "chain_rng",
    "run_chain",
]

_TINY = math.exp(-_engine.DRIFT_NATS)
_LINEAR = BalancingFunction.linear()


class IsolatedStateError(RuntimeError):
    """Every proposal weight at the current state is zero."""


def chain_rng(seed: int, chain: int = 0) -> np.random.Generator:
    """Independent generator for replicate ``chain`` of a seeded experiment."""
    return np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=(int(chain),)))


def _pow2(L: int) -> int:
    P = 1
    while P < L:
        P *= 2
    return P


# weight table ------------------------------------------------------------------


class WeightTable:
    """Proposal weights g(pi(y)/pi(x)) over N(x), kept in a sum tree.

    Leaves hold ``exp(log_weight - shift)``; the root is W(x) / exp(shift).
    Updates recompute only the listed entries, and a full rebuild happens
    when an entry drifts more than ``DRIFT_NATS`` above the shift.  The
    arithmetic mirrors the compiled engine operation for operation.
    """

    def __init__(self, target: DiscreteTarget, g: BalancingFunction, x):
        self.target = target
        self.g = g
        self.x = np.array(x, copy=True)
        self.L = target.n_moves
        self.P = _pow2(self.L)
        self.lw = np.empty(self.L)
        self.tree = np.zeros(2 * self.P)
        self.shift = 0.0
        self.rebuild()

    def _log_weight(self, m) -> float:
        return self.g.log(self.target.log_ratio(self.x, m))

    def rebuild(self):
        for m in range(self.L):
            self.lw[m] = self._log_weight(m)
        mx = float(np.max(self.lw))
        if mx == -math.inf:
            raise IsolatedStateError("all proposal weights are zero at this state")
        self.shift = mx
        P, tree = self.P, self.tree
        for k in range(P):
            tree[P + k] = math.exp(self.lw[k] - mx) if k < self.L else 0.0
        for i in range(P - 1, 0, -1):
            tree[i] = tree[2 * i] + tree[2 * i + 1]

    def _set(self, k, value):
        tree = self.tree
        i = self.P + k
        tree[i] = value
        i //= 2
        while i >= 1:
            tree[i] = tree[2 * i] + tree[2 * i + 1]
            i //= 2

    def update_entries(self, moves) -> tuple[list, bool]:
        """Recompute ``moves`` at ``self.x`` with the current shift; return (undo log, drift)."""
        undo = []
        drift = False
        for m in moves:
            m = int(m)
            undo.append((m, self.lw[m]))
            v = self._log_weight(m)
            self.lw[m] = v
            if v - self.shift > _engine.DRIFT_NATS:
                drift = True
            self._set(m, math.exp(v - self.shift))
        return undo, drift

    def undo(self, log):
        for m, v in reversed(log):
            self.lw[m] = v
            self._set(m, math.exp(v - self.shift))

    def sample(self, u: float) -> int:
        """Inverse CDF: smallest move whose cumulative weight exceeds u * W."""
        tree, P = self.tree, self.P
        target = u * tree[1]
        i = 1
        while i < P:
            left = tree[2 * i]
            if target < left:
                i = 2 * i
            else:
                target -= left
                i = 2 * i + 1
        k = i - P
        if tree[i] <= 0.0:
            while k > 0 and tree[P + k] <= 0.0:
                k -= 1
        return k

    @property
    def log_weights(self) -> np.ndarray:
        return self.lw.copy()

    @property
    def weights(self) -> np.ndarray:
        return np.exp(self.lw)

    @property
    def log_total(self) -> float:
        """log W(x)."""
        return math.log(self.tree[1]) + self.shift

    @property
    def total(self) -> float:
        return math.exp(self.log_total)

    def log_z(self) -> float:
        """log Z_g(x) under the uniform base kernel."""
        return self.log_total - math.log(self.L)


def build_weight_table(target: DiscreteTarget, g: BalancingFunction, x) -> WeightTable:
    return WeightTable(target, g, x)


def incremental_update(target: DiscreteTarget, g: BalancingFunction, table: WeightTable, move,
                       new_state=None) -> WeightTable:
    """Advance ``table`` across an accepted ``move``, touching only affected entries.

    ``table`` must describe the pre-move state.  If ``new_state`` is given it
    must be the state the move leads to.
    """
    if table.target is not target or table.g != g:
        raise ValueError("table was built for a different target or balancing function")
    move = target.check_move(move)
    y = target.apply_move(table.x, move)
    if new_state is not None and not np.array_equal(np.asarray(new_state), y):
        raise ValueError("new_state is not the result of applying the move to the table's state")
    aff = target.affected_moves(table.x, move)
    table.x = y
    _, drift = table.update_entries(aff)
    if drift or table.tree[1] < _TINY:
        table.rebuild()
    return table


def informed_log_acceptance(g: BalancingFunction, lr: float, log_wx: float, log_wy: float) -> float:
    """log of the full MH ratio pi(y) g(pi(x)/pi(y)) W(x) / (pi(x) g(pi(y)/pi(x)) W(y))."""
    return lr + g.log(-lr) - g.log(lr) + log_wx - log_wy


# single steps ------------------------------------------------------------------


def rw_step(target: DiscreteTarget, x, rng: np.random.Generator):
    """Uniform proposal on N(x) accepted with min{1, pi(y)/pi(x)}."""
    u = rng.random(2)
    L = target.n_moves
    k = min(int(u[0] * L), L - 1)
    lr = target.log_ratio(x, k)
    if u[1] < math.exp(min(0.0, lr)):
        return target.apply_move(x, k), True
    return x, False


def informed_step(target: DiscreteTarget, g: BalancingFunction, x, table: WeightTable,
                  rng: np.random.Generator):
    """Pointwise informed MH step; ``table`` is updated in place and returned.

    On rejection the table is restored to describe ``x``.
    """
    u = rng.random(2)
    shift_x = table.shift
    wx = table.tree[1]
    k = table.sample(u[0])
    lr = target.log_ratio(x, k)
    lg_fwd = table.lw[k]
    y = target.apply_move(x, k)
    table.x = y
    log, drift = table.update_entries(target.affected_moves(x, k))
    rebuilt = False
    if drift or table.tree[1] < _TINY:
        table.rebuild()
        rebuilt = True
    loga = (lr + g.log(-lr) - lg_fwd
            + (math.log(wx) + shift_x) - (math.log(table.tree[1]) + table.shift))
    if u[1] < math.exp(min(0.0, loga)):
        return y, True, table
    table.x = x
    if rebuilt:
        table.rebuild()
    else:
        table.undo(log)
    return x, False, table


def hamming_ball_step(target: DiscreteTarget, x, rng: np.random.Generator,
                      table: Optional[WeightTable] = None):
    """Two-stage draw: u uniform on N(x), then x' from pi restricted to N(u).

    ``table`` (linear weights pi(y)/pi(x) at ``x``) is maintained in place if
    given.  Returns ``(x', moved)`` with moved meaning x' != x.
    """
    if table is None:
        table = WeightTable(target, _LINEAR, x)
    u = rng.random(2)
    L = target.n_moves
    k0 = min(int(u[0] * L), L - 1)
    incremental_update(target, _LINEAR, table, k0)
    incremental_update(target, _LINEAR, table, table.sample(u[1]))
    y = table.x
    return y, not np.array_equal(y, np.asarray(x))


class BlockSelector:
    """Uniform random subsets of ``size`` units (sites or indices).

    The selector keeps a scratch permutation that each draw partially
    shuffles, which is what the compiled engine does too.  ``size=0`` selects
    the whole neighbourhood and consumes no uniforms.
    """

    def __init__(self, target: DiscreteTarget, size: int = 0):
        if size < 0:
            raise ValueError("block size must be non-negative")
        n = target.n_units
        if size > n:
            raise ValueError(f"block size {size} exceeds the {n} available units")
        self.target = target
        self.size = int(size)
        self.scratch = np.arange(n, dtype=np.int64)

    @property
    def n_draws(self) -> int:
        return self.size

    def select(self, row) -> np.ndarray:
        if self.size == 0:
            return np.arange(self.target.n_moves, dtype=np.int64)
        s = self.scratch
        N = s.size
        for t in range(self.size):
            j = min(t + int(row[t] * (N - t)), N - 1)
            s[t], s[j] = s[j], s[t]
        return self.target.block_moves(np.sort(s[: self.size]))


def blockwise_step(target: DiscreteTarget, g: BalancingFunction, x, block_selector: BlockSelector,
                   rng: np.random.Generator):
    """Informed MH restricted to a random sub-neighbourhood with within-block normalisers."""
    nsel = block_selector.n_draws
    row = rng.random(nsel + 2)
    moves = block_selector.select(row)
    if len(moves) == 0:
        raise ValueError("block selector returned an empty sub-neighbourhood")
    blw = [g.log(target.log_ratio(x, m)) for m in moves]
    mx = max(blw)
    if mx == -math.inf:
        raise IsolatedStateError("all proposal weights in the block are zero")
    bw = [math.exp(v - mx) for v in blw]
    wx = 0.0
    for w in bw:
        wx += w
    target_u = row[nsel] * wx
    csum = 0.0
    pick = -1
    for k, w in enumerate(bw):
        csum += w
        if target_u < csum:
            pick = k
            break
    if pick < 0:
        pick = len(bw) - 1
        while pick > 0 and bw[pick] <= 0.0:
            pick -= 1
    m = int(moves[pick])
    lr = target.log_ratio(x, m)
    y = target.apply_move(x, m)
    bly = [g.log(target.log_ratio(y, mm)) for mm in moves]
    my = max(bly)
    wy = 0.0
    for v in bly:
        wy += math.exp(v - my)
    loga = lr + g.log(-lr) - blw[pick] + (math.log(wx) + mx) - (math.log(wy) + my)
    if row[nsel + 1] < math.exp(min(0.0, loga)):
        return y, True
    return x, False


# kernel specification ----------------------------------------------------------

_SCHEMES = ("rw", "informed", "hamming_ball", "blockwise")


@dataclass(frozen=True)
class KernelSpec:
    """Which transition kernel to run.

    ``block_size`` counts units (coordinates for binary/Ising, indices for
    permutations); 0 means the full neighbourhood.
    """

    scheme: str
    g: Optional[BalancingFunction] = None
    block_size: int = 0
    label: str = ""

    def __post_init__(self):
        if self.scheme not in _SCHEMES:
            raise ValueError(f"unknown scheme {self.scheme!r}")
        if self.scheme in ("informed", "blockwise") and self.g is None:
            raise ValueError(f"scheme {self.scheme!r} needs a balancing function")
        if self.scheme == "blockwise" and self.block_size < 1:
            raise ValueError("blockwise scheme needs block_size >= 1")
        if not self.label:
            tag = self.scheme if self.g is None else f"{self.scheme}-{self.g.label}"
            object.__setattr__(self, "label", tag)

    @classmethod
    def rw(cls):
        return cls("rw", label="RW")

    @classmethod
    def informed(cls, g, label: str = ""):
        if isinstance(g, str):
            g = from_name(g)
        return cls("informed", g, label=label)

    @classmethod
    def hamming_ball(cls):
        return cls("hamming_ball", label="HB")

    @classmethod
    def blockwise(cls, g, block_size: int, label: str = ""):
        if isinstance(g, str):
            g = from_name(g)
        return cls("blockwise", g, block_size=block_size, label=label)

    @classmethod
    def from_name(cls, name: str, block_size: int = 0) -> "KernelSpec":
        """rw, gb, lb1 (sqrt), lb2 (barker), min, max, hb, or ``blockwise-<g>``."""
        key = name.strip().lower()
        if key == "rw":
            return cls.rw()
        if key == "hb":
            return cls.hamming_ball()
        if key.startswith("blockwise"):
            gname = key.split("-", 1)[1] if "-" in key else "barker"
            if gname == "lb":
                gname = "barker"
            return cls.blockwise(gname, block_size, label=name.upper())
        labels = {"gb": "GB", "lb1": "LB1", "sqrt": "LB1", "lb2": "LB2", "lb": "LB2", "barker": "LB2"}
        return cls.informed(from_name(key), label=labels.get(key, key.upper()))

    @property
    def acceptance_kind(self) -> str:
        return "moved" if self.scheme == "hamming_ball" else "mh"


# traces ------------------------------------------------------------------------


@dataclass
class Trace:
    """Thinned record of a chain: summaries, acceptance flags and flip counts.

    Row ``r`` describes the state after iteration ``r * thin + 1``.
    ``accepted`` means MH acceptance, or x' != x for the Hamming Ball sampler.
    """

    iterations: int
    thin: int
    summary_names: list
    summaries: np.ndarray
    accepted: np.ndarray
    cum_flips: np.ndarray
    n_accepted: int
    wall_clock: float
    seed: Optional[int]
    chain: int = 0
    scheme: str = ""
    acceptance_kind: str = "mh"
    final_state: Optional[np.ndarray] = None
    meta: dict = field(default_factory=dict)

    @property
    def acceptance_rate(self) -> float:
        return self.n_accepted / self.iterations

    @property
    def flips_per_sec(self) -> float:
        return self.n_accepted / self.wall_clock if self.wall_clock > 0 else float("inf")

    @property
    def iteration_index(self) -> np.ndarray:
        return np.arange(len(self.accepted)) * self.thin + 1

    def summary(self, name: str) -> np.ndarray:
        return self.summaries[:, self.summary_names.index(name)]

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["iteration", *self.summary_names, "accepted", "cum_flips"])
            for r, it in enumerate(self.iteration_index):
                vals = [_fmt(v) for v in self.summaries[r]]
                w.writerow([int(it), *vals, int(self.accepted[r]), int(self.cum_flips[r])])

    def sidecar(self) -> dict:
        return {
            "seed": self.seed,
            "chain": self.chain,
            "scheme": self.scheme,
            "iterations": self.iterations,
            "thin": self.thin,
            "summaries": list(self.summary_names),
            "wall_clock_sec": self.wall_clock,
            "acceptance_kind": self.acceptance_kind,
            "acceptance_rate": self.acceptance_rate,
            "flips": self.n_accepted,
            "flips_per_sec": self.flips_per_sec,
            **self.meta,
        }

    def write_json(self, path, extra: Optional[dict] = None):
        with open(path, "w") as fh:
            json.dump({**self.sidecar(), **(extra or {})}, fh, indent=2, default=_json_default)


def _fmt(v) -> str:
    v = float(v)
    return str(int(v)) if v.is_integer() else repr(v)


def _json_default(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"not JSON serialisable: {type(o).__name__}")


# chains ------------------------------------------------------------------------


class EngineChain:
    """Compiled chain state: encoded state, weight table, summaries and scratch buffers.

    ``moves`` restricts the informed scheme to a fixed sub-neighbourhood
    (used by record-linkage blocking).  After changing ``model.data`` in place
    call :meth:`rebuild`.
    """

    def __init__(self, spec: KernelSpec, model: EngineModel, init, references=(),
                 record_level: bool = True, moves=None):
        self.spec = spec
        self.model = model
        self.state = np.ascontiguousarray(model.encode(init), dtype=np.int64)
        self.refs = np.ascontiguousarray(
            np.array([model.encode(r)[: model.n_coord] for r in references], dtype=np.int64)
            .reshape(len(references), model.n_coord))
        self.dist = np.array([np.count_nonzero(self.state[: model.n_coord] != r) for r in self.refs],
                             dtype=np.int64)
        self.level_code = model.level_code if record_level else 0
        self.level = np.zeros(1, dtype=np.int64)
        self.reset_level()
        self.counters = np.zeros(1, dtype=np.int64)
        mc = model.max_changed
        self.pos = np.zeros(mc, dtype=np.int64)
        self.old = np.zeros(mc, dtype=np.int64)
        self.pos2 = np.zeros(mc, dtype=np.int64)
        self.old2 = np.zeros(mc, dtype=np.int64)
        na = max(1, mc * model.max_affected)
        self.aff = np.zeros(na, dtype=np.int64)
        self.undo_k = np.zeros(na, dtype=np.int64)
        self.undo_v = np.zeros(na)
        self.meta = np.zeros(1)
        self.set_moves(moves)
        if spec.scheme == "blockwise":
            nsel = spec.block_size
            if model.sel_fn is None:
                raise ValueError("this target has no block selector")
            if nsel > model.n_units:
                raise ValueError(f"block size {nsel} exceeds the {model.n_units} available units")
            self.nsel = nsel
            self.scratch = np.arange(model.n_units, dtype=np.int64)
            # flip models select sites, permutations select index pairs
            nb = max(1, nsel if model.max_changed == 1 else nsel * (nsel - 1) // 2)
            self.bmoves = np.zeros(nb, dtype=np.int64)
            self.blw = np.zeros(nb)
            self.bw = np.zeros(nb)

    @property
    def width(self) -> int:
        return self.spec.block_size + 2 if self.spec.scheme == "blockwise" else 2

    def reset_level(self):
        s = self.state[: self.model.n_coord]
        if self.level_code == 1:
            self.level[0] = int(np.sum(s))
        elif self.level_code == 2:
            self.level[0] = int(np.count_nonzero(s >= 0))

    def set_moves(self, moves=None):
        n_moves = self.model.n_moves
        self.moves = (np.arange(n_moves, dtype=np.int64) if moves is None
                      else np.ascontiguousarray(moves, dtype=np.int64))
        self.local = -np.ones(n_moves, dtype=np.int64)
        self.local[self.moves] = np.arange(self.moves.size)
        L = self.moves.size
        if L == 0:
            raise ValueError("empty neighbourhood")
        self.P = _pow2(L)
        self.lw = np.zeros(L)
        self.tree = np.zeros(2 * self.P)
        if self.spec.scheme in ("informed", "hamming_ball"):
            self.rebuild()

    def rebuild(self):
        if self.spec.scheme not in ("informed", "hamming_ball"):
            return
        code = 1 if self.spec.scheme == "hamming_ball" else self.spec.g.code
        m = self.model
        shift = _engine._rebuild(m.lr_fn, m.data, self.state, code, self.moves, self.lw,
                                 self.tree, self.P, self.meta)
        if shift != shift:
            raise IsolatedStateError("all proposal weights are zero at this state")

    @property
    def log_total(self) -> float:
        return math.log(self.tree[1]) + self.meta[0]

    def run(self, unif, t0, thin, out_summ, out_acc, out_flips):
        m = self.model
        sch = self.spec.scheme
        common = (t0, thin, m.n_coord, self.refs, self.dist, self.level_code, self.level,
                  out_summ, out_acc, out_flips, self.counters)
        status = 0
        if sch == "rw":
            _engine.run_rw(m.lr_fn, m.apply_fn, m.data, self.state, self.moves, unif, *common,
                           self.pos, self.old)
        elif sch == "informed":
            status = _engine.run_informed(
                m.lr_fn, m.apply_fn, m.aff_fn, m.data, self.state, self.spec.g.code, self.moves,
                self.local, self.lw, self.tree, self.P, self.meta, unif, *common, self.pos,
                self.old, self.aff, self.undo_k, self.undo_v)
        elif sch == "hamming_ball":
            status = _engine.run_hamming_ball(
                m.lr_fn, m.apply_fn, m.aff_fn, m.data, self.state, self.moves, self.local,
                self.lw, self.tree, self.P, self.meta, unif, *common, self.pos, self.old,
                self.pos2, self.old2, self.aff, self.undo_k, self.undo_v)
        else:
            _engine.run_blockwise(
                m.lr_fn, m.apply_fn, m.sel_fn, m.data, self.state, self.spec.g.code, self.nsel,
                self.scratch, self.bmoves, self.blw, self.bw, unif, *common, self.pos, self.old)
        if status:
            raise IsolatedStateError("chain reached a state with no positive proposal weight")

    def warm_up(self):
        """Trigger compilation without advancing the chain."""
        n_sum = len(self.dist) + (1 if self.level_code else 0)
        self.run(np.zeros((0, self.width)), 0, 1, np.zeros((0, n_sum)), np.zeros(0, dtype=np.bool_),
                 np.zeros(0, dtype=np.int64))

    def decoded_state(self):
        return self.model.decode(self.state)


def _summary_names(target: DiscreteTarget, n_refs: int, level: bool) -> list:
    names = [f"hamming_{k}" for k in range(n_refs)]
    if level and target.level_name:
        names.append(target.level_name)
    return names


def run_chain(spec: KernelSpec, target: DiscreteTarget, init=None, iterations: int = 1000,
              thin: int = 1, references: Sequence = (), record_level: bool = True,
              seed: int = 0, chain: int = 0, backend: str = "auto",
              chunk: int = 1 << 16) -> Trace:
    """Run one chain and return its :class:`Trace`.

    ``references`` are states to which the Hamming distance is recorded.
    ``backend`` is ``"auto"`` (compiled when possible), ``"engine"`` or
    ``"python"``.  The run is a deterministic function of ``seed`` and
    ``chain``.
    """
    if iterations < 1:
        raise ValueError("iterations must be at least 1")
    if thin < 1:
        raise ValueError("thin must be at least 1")
    rng = chain_rng(seed, chain)
    if init is None:
        init = target.random_state(rng)
    model = target.engine()
    g_ok = spec.g is None or spec.g.is_builtin
    if backend == "auto":
        backend = "engine" if (model is not None and g_ok) else "python"
    if backend == "engine" and (model is None or not g_ok):
        raise ValueError("compiled backend needs a built-in target and balancing function")
    names = _summary_names(target, len(references), record_level)
    n_rec = -(-iterations // thin)
    summ = np.zeros((n_rec, len(names)))
    acc = np.zeros(n_rec, dtype=np.bool_)
    flips = np.zeros(n_rec, dtype=np.int64)
    if backend == "engine":
        ec = EngineChain(spec, model, init, references, record_level and bool(target.level_name))
        ec.warm_up()
        start = time.perf_counter()
        done = 0
        while done < iterations:
            n = min(chunk, iterations - done)
            ec.run(rng.random((n, ec.width)), done, thin, summ, acc, flips)
            done += n
        wall = time.perf_counter() - start
        n_acc = int(ec.counters[0])
        final = ec.decoded_state()
    else:
        refs = [target.coords(r) for r in references]
        use_level = record_level and bool(target.level_name)
        x = np.array(init, copy=True)
        table = None
        selector = None
        start = time.perf_counter()
        if spec.scheme == "informed":
            table = WeightTable(target, spec.g, x)
        elif spec.scheme == "hamming_ball":
            table = WeightTable(target, _LINEAR, x)
        elif spec.scheme == "blockwise":
            selector = BlockSelector(target, spec.block_size)
        n_acc = 0
        for t in range(iterations):
            if spec.scheme == "rw":
                x, a = rw_step(target, x, rng)
            elif spec.scheme == "informed":
                x, a, table = informed_step(target, spec.g, x, table, rng)
            elif spec.scheme == "hamming_ball":
                x, a = hamming_ball_step(target, x, rng, table)
            else:
                x, a = blockwise_step(target, spec.g, x, selector, rng)
            n_acc += int(a)
            if t % thin == 0:
                r = t // thin
                row = [np.count_nonzero(target.coords(x) != ref) for ref in refs]
                if use_level:
                    row.append(target.level(x))
                summ[r] = row
                acc[r] = a
                flips[r] = n_acc
        wall = time.perf_counter() - start
        final = x
    return Trace(iterations=iterations, thin=thin, summary_names=names, summaries=summ,
                 accepted=acc, cum_flips=flips, n_accepted=n_acc, wall_clock=wall, seed=seed,
                 chain=chain, scheme=spec.label, acceptance_kind=spec.acceptance_kind,
                 final_state=final, meta={"backend": backend})
