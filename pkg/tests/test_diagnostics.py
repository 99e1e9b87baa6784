import dataclasses
import warnings

import numpy as np
import pytest
from hypothesis import given, strategies as st

from lbmcmc.diagnostics import (ConstantSeriesWarning, autocorrelation, batch_means, efficiency_table,
                                ess, ess_report, hamming_distance, integrated_autocorrelation_time,
                                write_efficiency_csv)
from lbmcmc.kernels import KernelSpec, run_chain
from lbmcmc.targets import BinaryTarget, PermutationTarget


def ar1(phi, n, seed=0):
    rng = np.random.default_rng(seed)
    e = rng.standard_normal(n)
    x = np.empty(n)
    x[0] = e[0] / np.sqrt(1 - phi ** 2)
    for t in range(1, n):
        x[t] = phi * x[t - 1] + e[t]
    return x


@pytest.fixture(scope="module")
def ar09():
    return ar1(0.9, 10 ** 6, seed=1)


def test_autocorrelation_white_noise():
    x = np.random.default_rng(0).standard_normal(10 ** 5)
    assert np.all(np.abs(autocorrelation(x, 50)) <= 4 / np.sqrt(x.size))


def test_autocorrelation_ar1(ar09):
    assert autocorrelation(ar09, 1)[0] == pytest.approx(0.9, abs=0.01)


def test_autocorrelation_alternating():
    x = np.tile([1.0, -1.0], 500)
    assert autocorrelation(x, 1)[0] == pytest.approx(-1.0, abs=0.01)


def test_autocorrelation_constant_and_args():
    with pytest.warns(ConstantSeriesWarning):
        assert np.all(autocorrelation(np.ones(100), 5) == 0)
    with pytest.raises(ValueError):
        autocorrelation(np.arange(5.0), 5)
    with pytest.raises(ValueError):
        autocorrelation(np.arange(5.0), 0)


def test_ess_iid():
    x = np.random.default_rng(2).standard_normal(10 ** 5)
    assert 0.9 * x.size <= ess(x) <= 1.1 * x.size


def test_ess_ar1(ar09):
    want = ar09.size * 0.1 / 1.9
    assert ess(ar09) == pytest.approx(want, rel=0.1)


def test_ess_antithetic_exceeds_n():
    rng = np.random.default_rng(3)
    z = rng.standard_normal(10 ** 4)
    x = np.empty(2 * z.size)
    x[0::2], x[1::2] = z, -z
    assert ess(x) > x.size


def test_ess_constant_and_short():
    with pytest.warns(ConstantSeriesWarning):
        assert ess(np.full(200, 4.0)) == 200
    with pytest.raises(ValueError):
        ess(np.arange(50.0))


@given(a=st.floats(0.01, 100) | st.floats(-100, -0.01), b=st.floats(-1e3, 1e3),
       seed=st.integers(0, 1000))
def test_ess_affine_invariant(a, b, seed):
    x = ar1(0.5, 2000, seed)
    assert ess(a * x + b) == pytest.approx(ess(x), rel=1e-10)


@given(seed=st.integers(0, 1000), phi=st.floats(-0.9, 0.95))
def test_ess_bounds(seed, phi):
    x = ar1(phi, 1000, seed)
    e = ess(x)
    assert 0 < e <= x.size * np.log10(x.size)
    assert integrated_autocorrelation_time(x) == pytest.approx(x.size / e)


def test_batch_means_iid():
    x = np.random.default_rng(4).standard_normal(10 ** 6)
    mean, est, se = batch_means(x)
    assert abs(mean) < 0.01
    assert abs(est - 1.0) <= 3 * se
    with pytest.raises(ValueError):
        batch_means(np.arange(10.0), n_batches=100)


def test_hamming_distance():
    assert hamming_distance([0, 1, 2], [0, 1, 2]) == 0
    assert hamming_distance([0, 1, 2, 3], [1, 0, 2, 3]) == 2
    assert hamming_distance([0, 0, 0], [1, 0, 1]) == 2
    with pytest.raises(ValueError):
        hamming_distance([0, 1], [0, 1, 2])


@pytest.fixture(scope="module")
def trace():
    t = BinaryTarget(np.linspace(0.1, 0.9, 20))
    refs = [np.zeros(20, dtype=np.int8), np.ones(20, dtype=np.int8)]
    return run_chain(KernelSpec.from_name("lb2"), t, iterations=20000, references=refs, seed=0)


def test_ess_report(trace):
    rep = ess_report(trace)
    assert rep.names == trace.summary_names and rep.names[:2] == ["hamming_0", "hamming_1"]
    assert np.all(rep.ess > 0) and np.all(rep.ess <= trace.summaries.shape[0] * 5)
    assert rep.flips_per_sec >= 0
    assert rep.acceptance_kind == "mh"
    rep2 = ess_report(trace, burn_in=1000, names=["hamming_0"])
    assert rep2.names == ["hamming_0"]


def test_efficiency_table(trace, tmp_path):
    slow = dataclasses.replace(trace, wall_clock=2 * trace.wall_clock)
    rows = {r.scheme: r for r in efficiency_table({"a": trace, "b": slow}, "a")}
    assert rows["a"].relative == 1.0
    assert rows["b"].relative == pytest.approx(0.5, rel=1e-12)
    # scale-free in the wall-clock unit
    k = 7.3
    scaled = {"a": dataclasses.replace(trace, wall_clock=k * trace.wall_clock),
              "b": dataclasses.replace(slow, wall_clock=k * slow.wall_clock)}
    rows2 = {r.scheme: r for r in efficiency_table(scaled, "a")}
    assert rows2["b"].relative == pytest.approx(rows["b"].relative, rel=1e-12)
    # replicate lists are averaged
    rep = efficiency_table({"a": [trace, trace], "b": slow}, "a")
    assert rep[0].relative == 1.0
    with pytest.raises(KeyError):
        efficiency_table({"a": trace}, "rw")
    write_efficiency_csv(tmp_path / "eff.csv", list(rows.values()))
    lines = (tmp_path / "eff.csv").read_text().splitlines()
    assert lines[0].startswith("scheme,ess_per_sec,relative_efficiency")
    assert len(lines) == 3


def test_ess_report_needs_summaries():
    t = PermutationTarget(log_w=np.zeros((5, 5)))
    tr = run_chain(KernelSpec.from_name("rw"), t, iterations=100, seed=0)
    with pytest.raises(ValueError, match="no recorded summaries"):
        ess_report(tr)
