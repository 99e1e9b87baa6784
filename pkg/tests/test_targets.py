import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from lbmcmc.targets import (BinaryTarget, IsingTarget, PermutationTarget, banded_weights,
                            lognormal_weights, target_from_config)


def make_targets(seed=0):
    rng = np.random.default_rng(seed)
    return [
        BinaryTarget(rng.uniform(0.05, 0.95, 7)),
        PermutationTarget(log_w=lognormal_weights(6, 2.0, rng)),
        IsingTarget(4, rng.normal(0, 1, 16), 0.7),
        IsingTarget(3, rng.normal(0, 1, 9), 0.4, boundary="free"),
    ]


TARGETS = make_targets()


def test_apply_move_examples():
    t = IsingTarget(3, 0.0, 1.0)
    y = t.apply_move(np.ones(9, dtype=np.int8), 5)
    assert y[5] == -1 and np.sum(y == 1) == 8
    p = PermutationTarget(np.ones((4, 4)))
    assert list(p.apply_move(np.arange(4), p.pair_index[0, 1])) == [1, 0, 2, 3]
    b = BinaryTarget([0.5, 0.5, 0.5])
    assert list(b.apply_move(np.zeros(3, dtype=np.int8), 1)) == [0, 1, 0]


def test_move_out_of_range():
    b = BinaryTarget([0.5, 0.5])
    with pytest.raises(IndexError):
        b.apply_move(np.zeros(2, dtype=np.int8), 2)
    p = PermutationTarget(np.ones((3, 3)))
    with pytest.raises(IndexError):
        p.apply_move(np.arange(3), 3)


def test_log_ratio_examples():
    b = BinaryTarget([0.3, 0.6])
    assert b.log_ratio(np.zeros(2, dtype=np.int8), 0) == pytest.approx(math.log(7 / 3), rel=1e-14)
    rng = np.random.default_rng(1)
    lw = rng.normal(size=(5, 5))
    p = PermutationTarget(log_w=lw)
    rho = rng.permutation(5)
    i, j = 1, 3
    want = lw[i, rho[j]] + lw[j, rho[i]] - lw[i, rho[i]] - lw[j, rho[j]]
    assert p.log_ratio(rho, p.pair_index[i, j]) == pytest.approx(want, abs=1e-14)
    alpha = rng.normal(size=9)
    t = IsingTarget(3, alpha, 0.8)
    x = t.random_state(rng)
    for s in range(9):
        nb = [b for a, b in t.edges if a == s] + [a for a, b in t.edges if b == s]
        want = -2 * x[s] * (alpha[s] + 0.8 * sum(x[k] for k in nb))
        assert t.log_ratio(x, s) == pytest.approx(want, abs=1e-12)


def test_log_density_examples():
    t = IsingTarget(3, 0.0, 1.0)
    assert len(t.edges) == 18
    assert t.log_density_unnorm(np.ones(9, dtype=np.int8)) == pytest.approx(18.0)
    b = BinaryTarget([0.3, 0.7])
    assert b.log_density_unnorm(np.zeros(2, dtype=np.int8)) == pytest.approx(math.log(0.21))
    p = PermutationTarget(np.array([[1.0, 2.0], [3.0, 4.0]]))
    assert p.log_density_unnorm(np.arange(2)) == pytest.approx(math.log(4.0))


def test_neighbourhood_sizes():
    assert BinaryTarget([0.5] * 3).neighborhood_size() == 3
    assert len(list(PermutationTarget(np.ones((4, 4))).enumerate_neighborhood(np.arange(4)))) == 6
    assert IsingTarget(3).n_moves == 9


@pytest.mark.parametrize("t", TARGETS, ids=lambda t: t.name)
@given(seed=st.integers(0, 2 ** 32 - 1))
def test_reverse_move_antisymmetry(t, seed):
    rng = np.random.default_rng(seed)
    x = t.random_state(rng)
    m = int(rng.integers(t.n_moves))
    y = t.apply_move(x, m)
    r = t.reverse_move(x, m)
    assert np.array_equal(t.apply_move(y, r), x)
    assert t.log_ratio(x, m) + t.log_ratio(y, r) == pytest.approx(0.0, abs=1e-12)


@pytest.mark.parametrize("t", TARGETS, ids=lambda t: t.name)
@given(seed=st.integers(0, 2 ** 32 - 1))
def test_log_ratio_matches_density_difference(t, seed):
    rng = np.random.default_rng(seed)
    x = t.random_state(rng)
    lrs = t.log_ratios(x)
    for m in range(t.n_moves):
        y = t.apply_move(x, m)
        d = t.log_density_unnorm(y) - t.log_density_unnorm(x)
        assert t.log_ratio(x, m) == pytest.approx(d, abs=1e-10)
        assert lrs[m] == pytest.approx(d, abs=1e-10)


@pytest.mark.parametrize("t", TARGETS, ids=lambda t: t.name)
def test_neighbourhood_symmetry(t):
    rng = np.random.default_rng(3)
    for _ in range(20):
        x = t.random_state(rng)
        for m in t.enumerate_neighborhood(x):
            y = t.apply_move(x, m)
            back = [k for k in t.enumerate_neighborhood(y) if np.array_equal(t.apply_move(y, k), x)]
            assert len(back) == 1
            assert t.neighborhood_size(y) == t.neighborhood_size(x)


@pytest.mark.parametrize("t", TARGETS, ids=lambda t: t.name)
def test_affected_moves_cover_changes(t):
    rng = np.random.default_rng(4)
    for _ in range(30):
        x = t.random_state(rng)
        m = int(rng.integers(t.n_moves))
        y = t.apply_move(x, m)
        changed = np.flatnonzero(~np.isclose(t.log_ratios(x), t.log_ratios(y), rtol=0, atol=0))
        assert set(changed) <= set(t.affected_moves(x, m).tolist())


def test_affected_counts():
    t = IsingTarget(10)
    assert len(t.affected_moves(t.random_state(np.random.default_rng(0)), 37)) == 5
    p = PermutationTarget(np.ones((50, 50)))
    assert len(p.affected_moves(np.arange(50), 0)) == 2 * (50 - 2) + 1
    assert list(BinaryTarget([0.5] * 4).affected_moves(np.zeros(4, dtype=np.int8), 2)) == [2]


def test_states_enumeration():
    assert len(list(BinaryTarget([0.5] * 4).states())) == 16
    assert len(list(PermutationTarget(np.ones((4, 4))).states())) == 24
    sts = list(IsingTarget(2).states())
    assert len(sts) == 16 and all(set(np.unique(s)) <= {-1, 1} for s in sts)


def test_validation():
    with pytest.raises(ValueError):
        BinaryTarget([0.0, 0.5])
    with pytest.raises(ValueError):
        PermutationTarget(np.array([[1.0, -1.0], [1.0, 1.0]]))
    with pytest.raises(ValueError):
        IsingTarget(3, 0.0, -1.0)


def test_generators_and_config():
    rng = np.random.default_rng(0)
    w = lognormal_weights(200, 3.0, rng)
    assert w.shape == (200, 200)
    assert np.std(w) == pytest.approx(3.0, rel=0.02)
    lb = banded_weights(5, rng)  # log weights, -chi2 with |i-j| degrees of freedom
    assert np.all(np.diag(lb) == 0) and np.all(lb <= 0)
    t = target_from_config({"kind": "permutation", "n": 10, "weights": "lognormal(2)"}, rng)
    assert isinstance(t, PermutationTarget) and t.n == 10
    t = target_from_config({"kind": "binary", "n": 5, "p": "iid-uniform(0.2, 0.8)"}, rng)
    assert np.all((t.p >= 0.2) & (t.p <= 0.8))
    t = target_from_config({"kind": "ising", "n": 20, "preset": 3}, rng)
    assert t.lam == 1.0
    with pytest.raises(ValueError):
        target_from_config({"kind": "bogus"}, rng)
