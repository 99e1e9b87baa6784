"""Output analysis for MCMC traces."""
from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass
from typing import Mapping, Optional, Sequence

import numpy as np

from .kernels import Trace

__all__ = [
    "ConstantSeriesWarning",
    "autocorrelation",
    "integrated_autocorrelation_time",
    "ess",
    "batch_means",
    "hamming_distance",
    "EssReport",
    "ess_report",
    "EfficiencyRow",
    "efficiency_table",
    "write_efficiency_csv",
    "write_rows_csv",
]


class ConstantSeriesWarning(UserWarning):
    """The series has zero variance, so its autocorrelation is undefined."""


def _acov(x: np.ndarray) -> np.ndarray:
    """Biased autocovariances at all lags via zero-padded FFT."""
    n = x.size
    xc = x - x.mean()
    nfft = 1 << (2 * n - 1).bit_length()
    f = np.fft.rfft(xc, nfft)
    return np.fft.irfft(f * np.conj(f), nfft)[:n] / n


def autocorrelation(series, max_lag: int) -> np.ndarray:
    """rho(1..max_lag) with 1/N normalisation.  Constant series give zeros and a warning."""
    x = np.asarray(series, dtype=float)
    if max_lag < 1 or x.size <= max_lag:
        raise ValueError("need len(series) > max_lag >= 1")
    acov = _acov(x)
    if acov[0] <= 0:
        warnings.warn("constant series: autocorrelation set to zero", ConstantSeriesWarning)
        return np.zeros(max_lag)
    return acov[1:max_lag + 1] / acov[0]


def integrated_autocorrelation_time(series) -> float:
    """tau = 1 + 2 sum rho(k), truncated by Geyer's initial monotone sequence.

    Autocorrelations are paired as Gamma_m = rho(2m) + rho(2m+1); the sum
    stops at the first non-positive pair and the pairs are forced to be
    non-increasing.  tau is floored at 1/log10(N), so ESS may exceed N for
    antithetic chains but stays below N log10(N).
    """
    x = np.asarray(series, dtype=float)
    n = x.size
    acov = _acov(x)
    if acov[0] <= 0:
        return float("nan")
    rho = acov / acov[0]
    n_pairs = n // 2
    gam = rho[0:2 * n_pairs:2] + rho[1:2 * n_pairs:2]
    total = 0.0
    prev = np.inf
    for m in range(n_pairs):
        g = gam[m]
        if m > 0 and g <= 0:
            break
        g = min(g, prev)
        total += g
        prev = g
    tau = -1.0 + 2.0 * total
    return float(max(tau, 1.0 / np.log10(n)))


def ess(series) -> float:
    """Effective sample size N / tau (Geyer initial monotone sequence)."""
    x = np.asarray(series, dtype=float)
    if x.size < 100:
        raise ValueError("ESS needs at least 100 samples")
    tau = integrated_autocorrelation_time(x)
    if np.isnan(tau):
        warnings.warn("constant series: ESS reported as the sample size", ConstantSeriesWarning)
        return float(x.size)
    return x.size / tau


def batch_means(series, n_batches: int = 1000) -> tuple[float, float, float]:
    """(mean, asymptotic variance estimate, its standard error).

    The estimate is b * var(batch means) with b the batch size; the standard
    error uses the chi-square approximation est * sqrt(2 / (B - 1)).
    """
    x = np.asarray(series, dtype=float)
    b = x.size // n_batches
    if b < 1:
        raise ValueError("fewer samples than batches")
    means = x[: b * n_batches].reshape(n_batches, b).mean(axis=1)
    est = b * means.var(ddof=1)
    return float(x.mean()), float(est), float(est * np.sqrt(2.0 / (n_batches - 1)))


def hamming_distance(a, b) -> int:
    """Number of coordinates where two states differ."""
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape != b.shape:
        raise ValueError(f"state shapes differ: {a.shape} vs {b.shape}")
    return int(np.count_nonzero(a != b))


@dataclass
class EssReport:
    names: list
    ess: np.ndarray
    iact: np.ndarray
    ess_per_sec: np.ndarray
    acceptance_rate: float
    acceptance_kind: str
    flips_per_sec: float
    wall_clock: float

    @property
    def mean_ess_per_sec(self) -> float:
        return float(np.mean(self.ess_per_sec))


def ess_report(trace: Trace, burn_in: int = 0, names: Optional[Sequence[str]] = None) -> EssReport:
    """ESS and ESS per second for each recorded summary after dropping ``burn_in`` rows."""
    names = list(names) if names is not None else list(trace.summary_names)
    if not names:
        raise ValueError("trace has no recorded summaries; pass references to run_chain")
    vals, taus = [], []
    for nm in names:
        s = trace.summary(nm)[burn_in:]
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", ConstantSeriesWarning)
            e = ess(s)
        vals.append(e)
        taus.append(s.size / e)
    vals = np.array(vals)
    wall = trace.wall_clock
    return EssReport(
        names=names,
        ess=vals,
        iact=np.array(taus),
        ess_per_sec=vals / wall if wall > 0 else np.full(len(vals), np.inf),
        acceptance_rate=trace.acceptance_rate,
        acceptance_kind=trace.acceptance_kind,
        flips_per_sec=trace.flips_per_sec,
        wall_clock=wall,
    )


@dataclass
class EfficiencyRow:
    scheme: str
    ess_per_sec: float
    relative: float
    acceptance_rate: float
    acceptance_kind: str
    flips_per_sec: float
    relative_flips: float


def efficiency_table(traces: Mapping[str, Trace | Sequence[Trace]], reference: str,
                     burn_in: int = 0, names: Optional[Sequence[str]] = None) -> list[EfficiencyRow]:
    """ESS/time averaged over summaries (and replicates), relative to ``reference``."""
    if reference not in traces:
        raise KeyError(f"reference scheme {reference!r} has no trace")
    stats = {}
    for scheme, tr in traces.items():
        group = [tr] if isinstance(tr, Trace) else list(tr)
        reps = [ess_report(t, burn_in, names) for t in group]
        stats[scheme] = (
            float(np.mean([r.mean_ess_per_sec for r in reps])),
            float(np.mean([r.acceptance_rate for r in reps])),
            reps[0].acceptance_kind,
            float(np.mean([r.flips_per_sec for r in reps])),
        )
    ref_eff, _, _, ref_flips = stats[reference]
    return [
        EfficiencyRow(scheme, eff, eff / ref_eff, acc, kind, fps,
                      fps / ref_flips if ref_flips > 0 else float("nan"))
        for scheme, (eff, acc, kind, fps) in stats.items()
    ]


def write_rows_csv(path, header: Sequence[str], rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(list(header))
        for row in rows:
            w.writerow(list(row))


def write_efficiency_csv(path, rows: Sequence[EfficiencyRow]) -> None:
    write_rows_csv(
        path,
        ["scheme", "ess_per_sec", "relative_efficiency", "acceptance_rate", "acceptance_kind",
         "flips_per_sec", "relative_flips_per_sec"],
        [[r.scheme, r.ess_per_sec, r.relative, r.acceptance_rate, r.acceptance_kind,
          r.flips_per_sec, r.relative_flips] for r in rows],
    )
