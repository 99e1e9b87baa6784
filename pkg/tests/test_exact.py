import numpy as np
import pytest
from hypothesis import given, strategies as st

from lbmcmc import exact as ex
from lbmcmc.balance import BalancingFunction, balanced_transform
from lbmcmc.kernels import KernelSpec
from lbmcmc.targets import BinaryTarget, IsingTarget, PermutationTarget, lognormal_weights

SCHEMES = [KernelSpec.rw(), KernelSpec.informed("gb"), KernelSpec.informed("sqrt"),
           KernelSpec.informed("barker"), KernelSpec.hamming_ball(),
           KernelSpec.blockwise("barker", 2)]


def two_state_rw():
    P = np.array([[0.0, 1.0], [0.5, 0.5]])
    return P, np.array([1 / 3, 2 / 3])


def test_state_index():
    t = BinaryTarget([0.3, 0.6, 0.5])
    idx = ex.StateIndex(t)
    assert len(idx) == 8
    for k in range(8):
        assert idx.index(idx.state(k)) == k
    assert [tuple(s) for s in idx.states] == sorted(tuple(s) for s in idx.states)
    assert idx.pi.sum() == pytest.approx(1.0)
    with pytest.raises(ex.StateSpaceOverflow):
        ex.StateIndex(BinaryTarget([0.5] * 13))
    with pytest.raises(ex.StateSpaceOverflow):
        ex.StateIndex(BinaryTarget([0.5] * 4), cap=8)


def test_rw_two_state():
    t = BinaryTarget([1 / 3])
    K = ex.build_exact_kernel(KernelSpec.rw(), t)
    # state 0 has probability 1/3
    np.testing.assert_allclose(K.P, two_state_rw()[0], atol=1e-15)


def test_barker_uniform_doubly_stochastic():
    P = ex.build_exact_kernel(KernelSpec.informed("barker"), BinaryTarget([0.5, 0.5])).P
    np.testing.assert_allclose(P.sum(axis=0), 1.0, atol=1e-14)


@pytest.mark.parametrize("spec", SCHEMES, ids=lambda s: s.label)
def test_stationarity_battery(spec):
    rng = np.random.default_rng(0)
    for t in (BinaryTarget([0.2, 0.5, 0.8]), BinaryTarget([0.2, 0.8, 0.2, 0.8]),
              BinaryTarget(rng.uniform(0.05, 0.95, 6)),
              PermutationTarget(log_w=lognormal_weights(4, 2.0, rng)),
              IsingTarget(3, rng.normal(size=9), 0.7)):
        K = ex.build_exact_kernel(spec, t)
        assert ex.stationarity_error(K.P, K.pi) <= 1e-12
        assert np.all(K.P >= -1e-15)
        np.testing.assert_allclose(K.P.sum(axis=1), 1.0, atol=1e-12)


@pytest.mark.parametrize("spec", SCHEMES[:4], ids=lambda s: s.label)
def test_reversible(spec):
    t = IsingTarget(2, np.array([0.3, -1.0, 2.0, 0.1]), 0.8)
    K = ex.build_exact_kernel(spec, t)
    F = K.pi[:, None] * K.P
    assert np.max(np.abs(F - F.T)) <= 1e-12


def test_long_simulation_cross_check():
    t = BinaryTarget([0.2, 0.5, 0.8])
    idx = ex.StateIndex(t)
    for name in ("sqrt", "barker"):
        emp = ex.visit_distribution(KernelSpec.informed(name), idx, 1_000_000, seed=1)
        assert ex.total_variation(emp, idx.pi) <= 0.02
    a = ex.visit_distribution(KernelSpec.informed("barker"), idx, 10_000, seed=5)
    b = ex.visit_distribution(KernelSpec.informed("barker"), idx, 10_000, seed=5)
    np.testing.assert_array_equal(a, b)


def test_spectral_gap_examples():
    pi = np.array([0.2, 0.3, 0.5])
    assert ex.spectral_gap(np.eye(3), pi) == pytest.approx(0.0, abs=1e-12)
    assert ex.spectral_gap(np.tile(pi, (3, 1)), pi) == pytest.approx(1.0, abs=1e-12)
    P, pi2 = two_state_rw()
    assert ex.spectral_gap(P, pi2) == pytest.approx(1.5, abs=1e-12)


def test_spectral_gap_refuses_nonreversible():
    P = np.array([[0.0, 1.0, 0.0], [0.0, 0.0, 1.0], [1.0, 0.0, 0.0]])
    with pytest.raises(ex.NonReversibleError):
        ex.spectral_gap(P, np.ones(3) / 3)


def test_asymptotic_variance_examples():
    pi = np.array([0.2, 0.3, 0.5])
    h = np.array([1.0, -2.0, 4.0])
    var_pi = np.dot(pi, (h - pi @ h) ** 2)
    assert ex.asymptotic_variance(np.tile(pi, (3, 1)), pi, h) == pytest.approx(var_pi, rel=1e-12)
    P = ex.build_exact_kernel(KernelSpec.rw(), BinaryTarget([0.3, 0.6])).P
    pi4 = ex.StateIndex(BinaryTarget([0.3, 0.6])).pi
    assert ex.asymptotic_variance(P, pi4, np.full(4, 3.0)) == pytest.approx(0.0, abs=1e-14)
    with pytest.raises(ValueError):
        ex.asymptotic_variance(np.eye(2), np.array([0.5, 0.5]), [0.0, 1.0])


@given(a=st.floats(0.01, 1.0), b=st.floats(0.01, 1.0))
def test_two_state_closed_form(a, b):
    P = np.array([[1 - a, a], [b, 1 - b]])
    pi = np.array([b, a]) / (a + b)
    lam = 1 - a - b
    assert ex.spectral_gap(P, pi) == pytest.approx(1 - lam, abs=1e-10)
    want = a * b / (a + b) ** 2 * (1 + lam) / (1 - lam)
    assert ex.asymptotic_variance(P, pi, [0.0, 1.0]) == pytest.approx(want, rel=1e-8, abs=1e-12)


def test_two_state_variance_batch_means():
    from lbmcmc.diagnostics import batch_means

    P, pi = two_state_rw()
    h = np.array([0.0, 1.0])
    want = ex.asymptotic_variance(P, pi, h)
    _, est, se = batch_means(ex.simulate_kernel(P, h, 10 ** 7, seed=3))
    assert abs(est - want) <= 3 * se


def test_smoothness_constant():
    assert ex.smoothness_constant(BinaryTarget([0.5] * 4), BalancingFunction.barker()) == 1.0
    assert ex.smoothness_constant(PermutationTarget(np.ones((4, 4))), BalancingFunction.sqrt()) == 1.0
    c = ex.smoothness_constant(BinaryTarget([0.2, 0.7, 0.4]), BalancingFunction.barker())
    assert c > 1.0


def test_flow_symmetry_balanced_vs_not():
    t = BinaryTarget([0.2, 0.6, 0.9])
    for name in ("sqrt", "barker", "min", "max"):
        F = ex.flow_matrix(t, BalancingFunction(name))
        assert ex.flow_asymmetry(F) <= 1e-12
    assert ex.flow_asymmetry(ex.flow_matrix(t, BalancingFunction.linear())) > 1e-3


def test_two_state_globally_balanced():
    r = ex.two_state_globally_balanced(3.0)
    assert r["flow_asymmetry"] > 0.1
    np.testing.assert_allclose(r["stationary"], r["pi_sq_times_z"], atol=1e-12)
    # lazier base kernels push the proposal's stationary law towards pi^2
    tvs = [ex.two_state_globally_balanced(3.0, s)["tv_to_pi_squared"] for s in (1.0, 0.5, 0.1, 0.01)]
    assert all(b <= a for a, b in zip(tvs, tvs[1:]))


def test_peskun_examples():
    t = BinaryTarget(np.linspace(0.15, 0.85, 6))
    idx = ex.StateIndex(t)
    P = ex.build_exact_kernel(KernelSpec.informed("barker"), t, index=idx).P
    rep = ex.peskun_check(P, P, idx.pi, 1.0)
    assert rep.passed and rep.entrywise_slack >= 0
    lazy = 0.5 * P + 0.5 * np.eye(len(idx))
    rep = ex.peskun_check(P, lazy, idx.pi, 0.5)
    assert rep.passed
    assert rep.gap2 == pytest.approx(0.5 * rep.gap1, rel=1e-10)

    sq = BalancingFunction.custom(lambda v: v * v, check_bound=False, label="t^2")
    gt = balanced_transform(sq)
    c = 1.0 / (ex.smoothness_constant(t, sq, index=idx) * ex.smoothness_constant(t, gt, index=idx))
    P_g = ex.build_exact_kernel(KernelSpec.informed(sq), t, index=idx).P
    P_gt = ex.build_exact_kernel(KernelSpec.informed(gt), t, index=idx).P
    assert ex.peskun_check(P_gt, P_g, idx.pi, c).passed


def test_peskun_detects_violation():
    t = BinaryTarget([0.3, 0.6])
    idx = ex.StateIndex(t)
    P = ex.build_exact_kernel(KernelSpec.informed("barker"), t, index=idx).P
    lazy = 0.5 * P + 0.5 * np.eye(4)
    assert not ex.peskun_check(lazy, P, idx.pi, 1.0).passed


def test_limit_rates():
    p = np.array([0.2, 0.4, 0.7])
    v = np.array([1.0, 2.0, 0.5])
    grid = np.arange(1, 100) / 100
    for i in range(3):
        e = [ex.limit_rates(p, v, np.where(np.arange(3) == i, c, 0.5)).e[i] for c in grid]
        assert grid[int(np.argmax(e))] == 0.5
    r1 = ex.limit_rates(p, v, 0.3)
    r2 = ex.limit_rates(p, 2 * v, 0.3)
    np.testing.assert_allclose(r1.e, r2.e, rtol=1e-14)
    r = ex.limit_rates(p, 1.0, 0.5)
    # constant v and c = 1/2: rates proportional to 1 - p_i (up) and p_i (down)
    np.testing.assert_allclose(r.rate_up / r.rate_up[0], (1 - p) / (1 - p[0]), rtol=1e-14)
    np.testing.assert_allclose(r.rate_down / r.rate_down[0], p / p[0], rtol=1e-14)
    with pytest.raises(ValueError):
        ex.limit_rates([0.0, 0.5], 1.0, 0.5)
    _, c = ex.binary_chain_parameters(p, BalancingFunction.barker())
    np.testing.assert_allclose(c, 0.5, atol=1e-14)


def test_brute_force_distribution():
    t = BinaryTarget([0.2, 0.5, 0.8])
    K = ex.build_exact_kernel(KernelSpec.informed("barker"), t)
    mu = ex.brute_force_distribution(K.P, 2000)
    assert ex.total_variation(mu, K.pi) <= 1e-10


def test_stationary_distribution():
    t = BinaryTarget([0.2, 0.5])
    K = ex.build_exact_kernel(KernelSpec.rw(), t)
    np.testing.assert_allclose(ex.stationary_distribution(K.P), K.pi, atol=1e-12)
