"""Synthetic record-linkage data and CSV input/output."""
from __future__ import annotations

import csv
from pathlib import Path
from typing import Mapping, Optional, Sequence

import numpy as np

from .model import DEFAULT_BETA, Matching, RLDataset

__all__ = [
    "IngestionError",
    "generate_synthetic",
    "generate_with_counts",
    "default_field_theta",
    "read_csv_pair",
    "write_dataset_csv",
    "write_pair_probabilities",
    "write_matching_csv",
]


class IngestionError(ValueError):
    """A CSV file could not be turned into a dataset."""


def default_field_theta(m: Sequence[int], rng: np.random.Generator, skew: float = 1.0) -> list:
    """Field distributions with Zipf-like decay (exponent ``skew``), in shuffled order."""
    out = []
    for k in m:
        w = 1.0 / np.arange(1, k + 1) ** skew
        out.append(rng.permutation(w / w.sum()))
    return out


def generate_synthetic(lam: float, p_match: float, theta: Sequence, beta: float = DEFAULT_BETA,
                       rng: Optional[np.random.Generator] = None):
    """Sample two databases from the generative model.

    The number of entities is Poisson(lam).  Each entity yields a matched
    pair with probability ``p_match`` and otherwise one record placed in x or
    y with equal probability.  Pair records copy a common value per field,
    each replaced by a fresh draw from theta_s with probability ``beta``.
    Record order is shuffled.  Returns ``(dataset, true_matching)``; the
    dataset's theta are the empirical frequencies, as on real data.
    """
    rng = rng if rng is not None else np.random.default_rng()
    n_ent = rng.poisson(lam)
    dup = rng.random(n_ent) < p_match
    side = rng.random(n_ent) < 0.5
    return generate_with_counts(int(dup.sum()), int(np.sum(~dup & side)), int(np.sum(~dup & ~side)),
                                theta, beta, rng)


def generate_with_counts(n_pair: int, n_sx: int, n_sy: int, theta: Sequence,
                         beta: float = DEFAULT_BETA, rng: Optional[np.random.Generator] = None):
    """Like :func:`generate_synthetic` with the numbers of pairs and singletons fixed."""
    rng = rng if rng is not None else np.random.default_rng()
    theta = [np.asarray(t, float) / np.sum(t) for t in theta]
    ell = len(theta)

    def draw(n):
        if n == 0:
            return np.zeros((0, ell), dtype=np.int64)
        return np.column_stack([rng.choice(t.size, size=n, p=t) for t in theta])

    def distort(v):
        out = v.copy()
        mask = rng.random(v.shape) < beta
        fresh = draw(v.shape[0])
        out[mask] = fresh[mask]
        return out

    common = draw(n_pair)
    xs = np.vstack([distort(common), draw(n_sx)]).astype(np.int64)
    ys = np.vstack([distort(common), draw(n_sy)]).astype(np.int64)
    px = rng.permutation(xs.shape[0])
    py = rng.permutation(ys.shape[0])
    x = xs[px]
    y = ys[py]
    # entity e < n_pair sits at row where(px == e) of x and where(py == e) of y
    inv_x = np.argsort(px)
    inv_y = np.argsort(py)
    M = -np.ones(x.shape[0], dtype=np.int64)
    M[inv_x[:n_pair]] = inv_y[:n_pair]
    # recode each field to the categories that actually occur, then use their frequencies
    x2, y2, th = x.copy(), y.copy(), []
    for s in range(ell):
        counts = np.bincount(np.concatenate([x[:, s], y[:, s]]), minlength=theta[s].size)
        present = np.flatnonzero(counts > 0)
        code = -np.ones(counts.size, dtype=np.int64)
        code[present] = np.arange(present.size)
        x2[:, s] = code[x[:, s]]
        y2[:, s] = code[y[:, s]]
        th.append(counts[present] / counts[present].sum())
    ds = RLDataset(x2, y2, theta=th)
    return ds, Matching(x2.shape[0], y2.shape[0], M)


def _read_table(path: Path):
    try:
        fh = open(path, newline="")
    except OSError as exc:
        raise IngestionError(f"cannot open {path}: {exc.strerror}") from exc
    with fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise IngestionError(f"{path}: empty file, expected a header row") from None
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise IngestionError(
                    f"{path}:{lineno}: expected {len(header)} fields, found {len(row)}")
            rows.append([v.strip() for v in row])
    return [h.strip() for h in header], rows


def read_csv_pair(path_x, path_y, fields: Optional[Sequence[str]] = None):
    """Read two CSV files with header rows into an :class:`RLDataset`.

    Every field is a categorical string; codes are assigned per field over
    both files and theta is the empirical frequency over both.  ``fields``
    restricts (and orders) the columns used; by default the columns common
    to both headers, in the order of the first file.
    """
    hx, rx = _read_table(Path(path_x))
    hy, ry = _read_table(Path(path_y))
    if fields is None:
        fields = [h for h in hx if h in hy]
    if not fields:
        raise IngestionError("the two files share no column names")
    for f in fields:
        if f not in hx or f not in hy:
            raise IngestionError(f"column {f!r} missing from one of the files")
    ix = [hx.index(f) for f in fields]
    iy = [hy.index(f) for f in fields]
    cats = []
    x = np.zeros((len(rx), len(fields)), dtype=np.int64)
    y = np.zeros((len(ry), len(fields)), dtype=np.int64)
    for s in range(len(fields)):
        values = sorted({r[ix[s]] for r in rx} | {r[iy[s]] for r in ry})
        code = {v: k for k, v in enumerate(values)}
        x[:, s] = [code[r[ix[s]]] for r in rx]
        y[:, s] = [code[r[iy[s]]] for r in ry]
        cats.append(values)
    return RLDataset(x, y, field_names=list(fields), categories=cats)


def write_dataset_csv(dataset: RLDataset, path_x, path_y, true_matching: Optional[Matching] = None,
                      path_truth=None):
    """Write both tables as CSV (category labels if known, else codes)."""
    def label(s, v):
        return dataset.categories[s][v] if dataset.categories else f"v{v}"

    for table, path in ((dataset.x, path_x), (dataset.y, path_y)):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(dataset.field_names)
            for row in table:
                w.writerow([label(s, v) for s, v in enumerate(row)])
    if true_matching is not None and path_truth is not None:
        write_matching_csv(true_matching, path_truth)


def write_matching_csv(M: Matching, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["i", "j"])
        for i, j in M.pairs():
            w.writerow([i, j])


def write_pair_probabilities(probs: Mapping[tuple, float], path, floor: float = 0.01):
    """CSV of (i, j, probability) for couples at or above ``floor``, sorted by (i, j)."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["i", "j", "probability"])
        for (i, j), p in sorted(probs.items()):
            if p >= floor:
                w.writerow([i, j, repr(float(p))])
