"""Metropolis-within-Gibbs sampler for the record-linkage posterior."""
from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from ..balance import BalancingFunction
from ..kernels import EngineChain, KernelSpec, Trace, WeightTable, chain_rng, informed_step
from .model import (
    DEFAULT_BETA,
    Matching,
    MatchingTarget,
    RLDataset,
    RLHyperState,
    gibbs_update_hyper,
    log_match_constant,
)

__all__ = [
    "RLConfig",
    "RLResult",
    "lb_matching_step",
    "block_select",
    "BlockSampler",
    "run_rl_sampler",
    "DENSE_PAIR_LIMIT",
]

# refuse dense pairwise-probability matrices beyond this many couples
DENSE_PAIR_LIMIT = 10 ** 8


@dataclass
class RLConfig:
    """Sampler settings.

    ``iterations`` counts matching updates.  Hyperparameters are redrawn
    (and, if blocking, a new block chosen) every ``hyper_every`` matching
    updates; pairwise co-match counts are taken at the same points once
    ``burn_in`` updates have passed.  ``block_size=None`` runs unblocked.
    """

    scheme: str = "lb"
    iterations: int = 10_000
    hyper_every: int = 100
    thin: int = 1
    beta: float = DEFAULT_BETA
    block_size: Optional[int] = None
    block_selector: str = "alternate"
    block_fields: int = 3
    burn_in: int = 0
    p_rule: str = "conjugate"
    lambda_support: str = "max"
    init_lambda: Optional[float] = None
    init_p: float = 0.5
    max_retries: int = 20

    def kernel(self) -> KernelSpec:
        key = self.scheme.lower()
        if key in ("rw", "hb"):
            return KernelSpec.from_name(key)
        if key in ("gb", "lb", "lb1", "lb2", "sqrt", "barker", "min", "max"):
            return KernelSpec.from_name(key)
        raise ValueError(f"unknown record-linkage scheme {self.scheme!r}")


@dataclass
class RLResult:
    trace: Trace
    pair_counts: dict
    n_pair_samples: int
    hyper_trace: np.ndarray  # one (lambda, p_match) row per Gibbs update
    final: Matching
    blocks: int = 0

    def pair_probabilities(self) -> dict:
        n = max(self.n_pair_samples, 1)
        return {k: v / n for k, v in self.pair_counts.items()}

    def dense_pair_probabilities(self, n_x: int, n_y: int) -> np.ndarray:
        if n_x * n_y > DENSE_PAIR_LIMIT:
            raise MemoryError(f"{n_x * n_y} couples exceed the dense limit {DENSE_PAIR_LIMIT}")
        out = np.zeros((n_x, n_y))
        for (i, j), p in self.pair_probabilities().items():
            out[i, j] = p
        return out


def lb_matching_step(dataset: RLDataset, hyper: RLHyperState, M: Matching,
                     g: BalancingFunction, rng: np.random.Generator,
                     table: Optional[WeightTable] = None, target: Optional[MatchingTarget] = None):
    """One informed update of M at fixed hyperparameters (reference implementation).

    Pass ``target`` and ``table`` to reuse them across calls; the table is
    kept consistent with the returned matching.
    """
    if target is None:
        target = MatchingTarget.from_dataset(dataset, hyper)
    state = M.state
    if table is None:
        table = WeightTable(target, g, state)
    y, acc, table = informed_step(target, g, state, table, rng)
    return Matching.from_state(M.n_x, M.n_y, y), acc


def _filter_block(M: np.ndarray, Minv: np.ndarray, I: np.ndarray, J: np.ndarray):
    inJ = np.zeros(Minv.size, dtype=bool)
    inJ[J] = True
    inI = np.zeros(M.size, dtype=bool)
    inI[I] = True
    mi = M[I]
    keep_i = (mi < 0) | inJ[np.maximum(mi, 0)]
    mj = Minv[J]
    keep_j = (mj < 0) | inI[np.maximum(mj, 0)]
    return I[keep_i], J[keep_j]


def _subsample(idx: np.ndarray, size: int, rng) -> np.ndarray:
    if idx.size > size:
        idx = rng.choice(idx, size=size, replace=False)
    return np.sort(idx)


def block_select(dataset: RLDataset, M: Matching, rng: np.random.Generator, call_index: int = 0,
                 block_size: int = 300, n_fields: int = 3, max_retries: int = 20):
    """Choose index blocks (I, J) for a restricted update.

    Even calls draw I and J uniformly; odd calls pick a record i0 of x and
    min(3, l) fields and keep the records agreeing with x_i0 on them.  Blocks
    larger than ``block_size`` are subsampled uniformly.  Indices matched
    across the block boundary are then dropped.  Empty blocks are redrawn,
    falling back to uniform selection after ``max_retries`` attempts.
    """
    nx, ny = dataset.n_x, dataset.n_y
    agreement = call_index % 2 == 1
    for attempt in range(2 * max_retries + 1):
        if agreement and attempt < max_retries:
            i0 = int(rng.integers(nx))
            k = min(n_fields, dataset.n_fields)
            fs = rng.choice(dataset.n_fields, size=k, replace=False)
            key = dataset.x[i0, fs]
            I = np.flatnonzero(np.all(dataset.x[:, fs] == key, axis=1))
            J = np.flatnonzero(np.all(dataset.y[:, fs] == key, axis=1))
            I, J = _subsample(I, block_size, rng), _subsample(J, block_size, rng)
        else:
            I = np.sort(rng.choice(nx, size=min(block_size, nx), replace=False))
            J = np.sort(rng.choice(ny, size=min(block_size, ny), replace=False))
        I, J = _filter_block(M.M, M.Minv, I, J)
        if I.size and J.size:
            return I, J
    # every draw emptied out; the full index sets are always valid
    return np.arange(nx), np.arange(ny)


class BlockSampler:
    """Stateful wrapper alternating the two block selectors call by call."""

    def __init__(self, dataset: RLDataset, block_size: int = 300, mode: str = "alternate",
                 n_fields: int = 3, max_retries: int = 20):
        if mode not in ("alternate", "uniform", "agreement"):
            raise ValueError(f"unknown block selector {mode!r}")
        self.dataset = dataset
        self.block_size = block_size
        self.mode = mode
        self.n_fields = n_fields
        self.max_retries = max_retries
        self.calls = 0

    def __call__(self, M: Matching, rng):
        idx = {"alternate": self.calls, "uniform": 0, "agreement": 1}[self.mode]
        self.calls += 1
        return block_select(self.dataset, M, rng, idx, self.block_size, self.n_fields,
                            self.max_retries)


def _flush(buf: list, counts: dict):
    if not buf:
        return
    keys, c = np.unique(np.concatenate(buf), return_counts=True)
    for k, v in zip(keys.tolist(), c.tolist()):
        counts[k] = counts.get(k, 0) + v
    buf.clear()


def run_rl_sampler(dataset: RLDataset, config: RLConfig, seed: int = 0, chain: int = 0,
                   init: Optional[Matching] = None,
                   references: Sequence[Matching] = ()) -> RLResult:
    """Alternate Gibbs hyperparameter draws with ``hyper_every`` matching updates.

    Records the number of matches and Hamming distances to ``references``,
    and accumulates co-match counts sparsely (only couples ever matched).
    """
    if config.iterations < 1:
        raise ValueError("iterations must be at least 1")
    nx, ny = dataset.n_x, dataset.n_y
    rng = chain_rng(seed, chain)
    spec = config.kernel()
    lo = max(nx, ny) if config.lambda_support == "max" else min(nx, ny)
    lam0 = config.init_lambda if config.init_lambda is not None else 0.5 * (lo + nx + ny)
    hyper = RLHyperState(lam=lam0, p_match=config.init_p, beta=config.beta)
    target = MatchingTarget.from_dataset(dataset, hyper)
    M = init.copy() if init is not None else Matching(nx, ny)
    model = target.engine()
    blocker = (BlockSampler(dataset, config.block_size, config.block_selector, config.block_fields,
                            config.max_retries)
               if config.block_size else None)
    ec = EngineChain(spec, model, M.state, [r.state for r in references], record_level=True)
    names = [f"hamming_{k}" for k in range(len(references))] + [target.level_name]
    n_rec = -(-config.iterations // config.thin)
    summ = np.zeros((n_rec, len(names)))
    acc = np.zeros(n_rec, dtype=np.bool_)
    flips = np.zeros(n_rec, dtype=np.int64)
    ec.warm_up()
    hyper_rows = []
    buf: list = []
    counts: dict = {}
    n_samples = 0
    n_blocks = 0
    t = 0
    start = time.perf_counter()
    while t < config.iterations:
        cur = ec.state[:nx]
        hyper = gibbs_update_hyper(cur, nx, ny, rng, config.beta, config.p_rule,
                                   config.lambda_support)
        hyper_rows.append((hyper.lam, hyper.p_match))
        target.const = log_match_constant(hyper)
        if blocker is not None:
            Mcur = Matching.from_state(nx, ny, ec.state)
            I, J = blocker(Mcur, rng)
            ec.set_moves((I[:, None] * ny + J[None, :]).ravel())
            n_blocks += 1
        else:
            ec.rebuild()
        n = min(config.hyper_every, config.iterations - t)
        ec.run(rng.random((n, ec.width)), t, config.thin, summ, acc, flips)
        t += n
        if t > config.burn_in:
            cur = ec.state[:nx]
            rows = np.flatnonzero(cur >= 0)
            buf.append(rows * ny + cur[rows])
            n_samples += 1
            if len(buf) >= 4096:
                _flush(buf, counts)
    wall = time.perf_counter() - start
    _flush(buf, counts)
    pair_counts = {divmod(int(k), ny): v for k, v in counts.items()}
    trace = Trace(iterations=config.iterations, thin=config.thin, summary_names=names,
                  summaries=summ, accepted=acc, cum_flips=flips, n_accepted=int(ec.counters[0]),
                  wall_clock=wall, seed=seed, chain=chain, scheme=spec.label,
                  acceptance_kind=spec.acceptance_kind,
                  final_state=ec.state.copy(),
                  meta={"backend": "engine", "blocks": n_blocks})
    return RLResult(trace=trace, pair_counts=pair_counts, n_pair_samples=n_samples,
                    hyper_trace=np.array(hyper_rows), final=Matching.from_state(nx, ny, ec.state),
                    blocks=n_blocks)
