import math
from collections import Counter

import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy import stats

from lbmcmc import exact as ex
from lbmcmc.balance import BalancingFunction
from lbmcmc.kernels import KernelSpec
from lbmcmc.recordlinkage import (MOVE_TYPES, BlockSampler, IngestionError, Matching, MatchingTarget,
                                  RLConfig, RLDataset, RLHyperState, block_select,
                                  brute_force_posterior, count_matchings, default_field_theta,
                                  enumerate_matchings, field_scores, generate_synthetic,
                                  generate_with_counts, gibbs_update_hyper, lb_matching_step,
                                  log_likelihood, log_match_constant, log_prior_matching,
                                  match_score, matching_base_move, read_csv_pair,
                                  run_rl_sampler, truncated_gamma, write_dataset_csv,
                                  write_pair_probabilities)
from lbmcmc.recordlinkage.sampler import DENSE_PAIR_LIMIT, RLResult


def small_dataset(n=3, seed=0, levels=(3, 4, 2), beta=0.1):
    rng = np.random.default_rng(seed)
    theta = default_field_theta(list(levels), rng)
    ds, truth = generate_with_counts(n - 1, 1, 1, theta, beta=beta, rng=rng)
    return ds, truth


def random_matching(nx, ny, rng):
    k = int(rng.integers(0, min(nx, ny) + 1))
    rows = rng.choice(nx, k, replace=False)
    cols = rng.choice(ny, k, replace=False)
    return Matching.from_pairs(nx, ny, zip(rows, cols))


# matchings ---------------------------------------------------------------------

def test_counts():
    assert count_matchings(3, 3) == 34
    assert count_matchings(4, 4) == 209
    assert len(list(enumerate_matchings(3, 3))) == 34
    assert len(list(enumerate_matchings(4, 4))) == 209
    ms = {tuple(M) for M in enumerate_matchings(4, 4)}
    assert len(ms) == 209


def test_matching_validation():
    with pytest.raises(ValueError):
        Matching(3, 3, [0, 0, -1])
    with pytest.raises(ValueError):
        Matching(3, 2, [2, -1, -1])
    M = Matching(3, 4, [2, -1, 0])
    assert M.n_matches == 2 and M.pairs() == [(0, 2), (2, 0)]
    assert list(M.one_based()) == [3, 0, 1]
    assert list(M.Minv) == [2, -1, 0, -1]


def test_base_move_examples():
    M = Matching(3, 3)
    kind, M2 = matching_base_move(M, 0, 1)
    assert kind == "add" and M2.M[0] == 1
    kind, M3 = matching_base_move(M2, 0, 1)
    assert kind == "delete" and M3.M[0] == -1
    M = Matching(3, 3, [1, 2, -1])
    kind, M4 = matching_base_move(M, 0, 2)
    assert kind == "double_switch"
    assert M4.M[0] == 2 and M4.M[1] == 1
    kind, _ = matching_base_move(M, 2, 1)
    assert kind == "switch_I"
    kind, _ = matching_base_move(M, 0, 0)
    assert kind == "switch_II"
    with pytest.raises(IndexError):
        matching_base_move(M, 3, 0)


def test_matching_stress():
    rng = np.random.default_rng(1)
    M = Matching(6, 5)
    seen = Counter()
    for _ in range(100_000):
        kind, M = matching_base_move(M, int(rng.integers(6)), int(rng.integers(5)))
        seen[kind] += 1
        if _ % 997 == 0:
            M.check()
            assert M.n_matches == np.count_nonzero(M.Minv >= 0)
    M.check()
    assert set(seen) == set(MOVE_TYPES)


def test_base_kernel_symmetric():
    nx = ny = 3
    trans = Counter()
    for Mv in enumerate_matchings(nx, ny):
        M = Matching(nx, ny, Mv)
        for i in range(nx):
            for j in range(ny):
                _, M2 = matching_base_move(M, i, j)
                trans[(tuple(M.M), tuple(M2.M))] += 1
    for (a, b), c in trans.items():
        assert trans[(b, a)] == c


# model ---------------------------------------------------------------------------

def test_log_prior_examples():
    lp = log_prior_matching(Matching(1, 1), 2.0, 0.5, 1, 1)
    assert lp == pytest.approx(-2 - 2 * math.log(2), rel=1e-14)
    # full matching: the (1 - p)/2 factor drops out
    full = Matching(2, 2, [1, 0])
    a = log_prior_matching(full, 3.0, 0.3, 2, 2)
    want = -3 + 2 * math.log(3) - 2 * math.log(2) + 2 * math.log(0.3)
    assert a == pytest.approx(want, rel=1e-14)
    vals = [log_prior_matching(full, 3.0, p, 2, 2) for p in (1e-1, 1e-3, 1e-6, 1e-12)]
    assert all(y < x for x, y in zip(vals, vals[1:]))


def test_log_likelihood_examples():
    ds = RLDataset(np.array([[0]]), np.array([[0]]), theta=[np.array([0.5, 0.5])])
    base = log_likelihood(ds, Matching(1, 1), beta=0.0)
    assert base == pytest.approx(ds.baseline_log_likelihood())
    assert log_likelihood(ds, Matching(1, 1, [0]), beta=0.0) == pytest.approx(base + math.log(2))
    ds = RLDataset(np.array([[0]]), np.array([[1]]), theta=[np.array([0.5, 0.5])])
    got = log_likelihood(ds, Matching(1, 1, [0]), beta=0.001)
    assert got == pytest.approx(ds.baseline_log_likelihood() + math.log(0.001 * 1.999))


def test_scores_reproduce_posterior():
    ds, _ = small_dataset(5, seed=3)
    hyper = RLHyperState(lam=7.3, p_match=0.4, beta=0.05)
    rng = np.random.default_rng(0)
    F = field_scores(ds, hyper.beta)
    c = log_match_constant(hyper)
    ref = None
    for _ in range(30):
        M = random_matching(ds.n_x, ds.n_y, rng)
        full = (log_likelihood(ds, M, hyper.beta)
                + log_prior_matching(M, hyper.lam, hyper.p_match, ds.n_x, ds.n_y))
        s = sum(c + F[i, j] for i, j in M.pairs())
        for i, j in M.pairs():
            assert match_score(ds, hyper, i, j) == pytest.approx(c + F[i, j], rel=1e-12)
        if ref is None:
            ref = full - s
        assert full - s == pytest.approx(ref, abs=1e-10)


def test_rare_values_score_higher():
    x = np.array([[0], [1]])
    ds = RLDataset(x, x.copy(), theta=[np.array([0.9, 0.1])])
    F = field_scores(ds, 0.01)
    assert F[1, 1] > F[0, 0] > F[0, 1]


def test_target_ratio_matches_fresh_evaluation():
    ds, _ = small_dataset(5, seed=4)
    hyper = RLHyperState(lam=8.0, p_match=0.6, beta=0.02)
    t = MatchingTarget.from_dataset(ds, hyper)
    rng = np.random.default_rng(2)

    def logpost(M):
        return (log_likelihood(ds, M, hyper.beta)
                + log_prior_matching(M, hyper.lam, hyper.p_match, ds.n_x, ds.n_y))

    kinds = set()
    for _ in range(400):
        M = random_matching(ds.n_x, ds.n_y, rng)
        i, j = int(rng.integers(ds.n_x)), int(rng.integers(ds.n_y))
        kind, M2 = matching_base_move(M, i, j)
        kinds.add(kind)
        lr = t.log_ratio(M.state, i * ds.n_y + j)
        assert lr == pytest.approx(logpost(M2) - logpost(M), abs=1e-10)
        assert np.array_equal(t.apply_move(M.state, i * ds.n_y + j), M2.state)
    assert kinds == set(MOVE_TYPES)


def test_exact_matching_kernel_stationary():
    ds, _ = small_dataset(3, seed=5)
    t = MatchingTarget.from_dataset(ds, RLHyperState(lam=5.0, p_match=0.5, beta=0.05))
    idx = ex.StateIndex(t)
    assert len(idx) == 34
    for spec in (KernelSpec.informed("barker"), KernelSpec.informed("sqrt"), KernelSpec.rw(),
                 KernelSpec.hamming_ball()):
        K = ex.build_exact_kernel(spec, t, index=idx)
        assert ex.stationarity_error(K.P, K.pi) <= 1e-12


# hyperparameters -------------------------------------------------------------------

@given(shape=st.floats(1.0, 400.0), lo=st.floats(0.5, 300.0), width=st.floats(1e-3, 300.0),
       seed=st.integers(0, 1000))
def test_truncated_gamma_in_range(shape, lo, width, seed):
    v = truncated_gamma(shape, lo, lo + width, np.random.default_rng(seed))
    assert lo <= v <= lo + width


def test_truncated_gamma_distribution():
    rng = np.random.default_rng(0)
    for shape, lo, hi in ((5.0, 2.0, 9.0), (300.0, 150.0, 200.0), (2.0, 40.0, 60.0)):
        draws = np.array([truncated_gamma(shape, lo, hi, rng) for _ in range(3000)])
        g = stats.gamma(shape)
        a, b = g.cdf(lo), g.cdf(hi)
        if b - a > 1e-8:
            cdf = lambda v: (g.cdf(v) - a) / (b - a)
        else:
            sa, sb = g.sf(lo), g.sf(hi)
            cdf = lambda v: (sa - g.sf(v)) / (sa - sb)
        assert stats.kstest(draws, cdf).pvalue > 1e-3
    with pytest.raises(ValueError):
        truncated_gamma(2.0, 3.0, 3.0, rng)


def test_gibbs_update_hyper():
    M = Matching(4, 6, [0, 1, -1, -1])
    a = gibbs_update_hyper(M, 4, 6, np.random.default_rng(9))
    b = gibbs_update_hyper(M, 4, 6, np.random.default_rng(9))
    assert a == b
    rng = np.random.default_rng(1)
    for _ in range(200):
        h = gibbs_update_hyper(M, 4, 6, rng)
        assert 6 <= h.lam <= 10 and 0 < h.p_match < 1
        h = gibbs_update_hyper(M, 4, 6, rng, lambda_support="min")
        assert 4 <= h.lam <= 10
    # N_m = 0 under the printed rule: Beta(1 + n, 1) piles p near one
    ps = [gibbs_update_hyper(Matching(20, 20), 20, 20, rng, p_rule="printed").p_match
          for _ in range(200)]
    assert np.mean(ps) > 0.9
    ps = [gibbs_update_hyper(Matching(20, 20), 20, 20, rng).p_match for _ in range(200)]
    assert np.mean(ps) < 0.1
    with pytest.raises(ValueError):
        gibbs_update_hyper(M, 4, 6, rng, p_rule="bogus")


# oracle ------------------------------------------------------------------------

def test_brute_force_flat_likelihood():
    ds, _ = small_dataset(3, seed=6)
    post = brute_force_posterior(ds, beta=1.0)
    assert post.n_matchings == 34
    assert post.prob.sum() == pytest.approx(1.0)
    by_k = {}
    for M, p in zip(post.matchings, post.prob):
        by_k.setdefault(int(np.sum(M >= 0)), set()).add(round(p, 14))
    assert all(len(v) == 1 for v in by_k.values())


def test_brute_force_limit():
    ds, _ = small_dataset(5, seed=0)
    with pytest.raises(ValueError):
        brute_force_posterior(ds, limit=100)


def test_single_record_pair_matches_two_state_posterior():
    x = np.array([[0, 1, 2]])
    ds = RLDataset(x, x.copy(), theta=[np.array([0.5, 0.5]), np.array([0.2, 0.8]),
                                       np.array([0.1, 0.1, 0.8])])
    post = brute_force_posterior(ds, beta=0.001)
    res = run_rl_sampler(ds, RLConfig(iterations=200_000, hyper_every=10, beta=0.001), seed=1)
    p_mcmc = res.pair_probabilities().get((0, 0), 0.0)
    assert post.pair_prob[0, 0] > 0.9
    assert p_mcmc == pytest.approx(post.pair_prob[0, 0], abs=0.02)


def test_sampler_matches_oracle_small():
    ds, _ = small_dataset(3, seed=7)
    post = brute_force_posterior(ds, beta=0.1)
    res = run_rl_sampler(ds, RLConfig(iterations=300_000, hyper_every=10, beta=0.1), seed=2)
    est = res.dense_pair_probabilities(ds.n_x, ds.n_y)
    assert np.max(np.abs(est - post.pair_prob)) <= 0.02


def test_lb_matching_step_reference():
    ds, truth = small_dataset(4, seed=8)
    hyper = RLHyperState(lam=6.0, p_match=0.5, beta=0.1)
    rng = np.random.default_rng(0)
    M = Matching(ds.n_x, ds.n_y)
    for _ in range(200):
        M, _ = lb_matching_step(ds, hyper, M, BalancingFunction.barker(), rng)
        M.check()


# sampler -----------------------------------------------------------------------

def test_sampler_deterministic_and_trace():
    ds, truth = small_dataset(6, seed=9)
    cfg = RLConfig(iterations=5000, hyper_every=50, thin=5, beta=0.1)
    a = run_rl_sampler(ds, cfg, seed=3, references=[truth])
    b = run_rl_sampler(ds, cfg, seed=3, references=[truth])
    np.testing.assert_array_equal(a.trace.summaries, b.trace.summaries)
    assert a.pair_counts == b.pair_counts
    assert a.trace.summary_names == ["hamming_0", "n_matches"]
    assert a.trace.summaries.shape[0] == 1000
    assert a.hyper_trace.shape == (100, 2)
    a.final.check()
    with pytest.raises(ValueError):
        run_rl_sampler(ds, RLConfig(iterations=0), seed=0)
    with pytest.raises(ValueError):
        RLConfig(scheme="bogus").kernel()


@pytest.mark.parametrize("scheme", ["rw", "gb", "lb", "hb"])
def test_sampler_schemes_run(scheme):
    ds, _ = small_dataset(8, seed=10)
    res = run_rl_sampler(ds, RLConfig(scheme=scheme, iterations=3000, hyper_every=100, beta=0.1),
                         seed=0)
    res.final.check()
    assert res.trace.acceptance_kind == ("moved" if scheme == "hb" else "mh")


def test_blocked_sampler():
    ds, truth = generate_synthetic(60, 0.5, default_field_theta([10, 8, 12, 6], np.random.default_rng(0)),
                                   beta=0.02, rng=np.random.default_rng(1))
    res = run_rl_sampler(ds, RLConfig(iterations=20_000, hyper_every=200, block_size=15, beta=0.02),
                         seed=0)
    res.final.check()
    assert res.blocks == 100


def test_dense_limit():
    r = RLResult(trace=None, pair_counts={}, n_pair_samples=0, hyper_trace=np.zeros((0, 2)),
                 final=Matching(1, 1))
    with pytest.raises(MemoryError):
        r.dense_pair_probabilities(DENSE_PAIR_LIMIT, 2)


# blocking ----------------------------------------------------------------------

def test_block_select_filters_cross_matches():
    ds, truth = generate_synthetic(80, 0.5, default_field_theta([5, 5, 5, 5], np.random.default_rng(2)),
                                   beta=0.05, rng=np.random.default_rng(3))
    rng = np.random.default_rng(4)
    for call in range(40):
        I, J = block_select(ds, truth, rng, call_index=call, block_size=20)
        assert I.size and J.size and I.size <= 20 and J.size <= 20
        inI, inJ = set(I.tolist()), set(J.tolist())
        for i in I:
            if truth.M[i] >= 0:
                assert truth.M[i] in inJ
        for j in J:
            if truth.Minv[j] >= 0:
                assert truth.Minv[j] in inI


def test_block_select_full_and_few_fields():
    ds, truth = small_dataset(4, seed=11, levels=(3, 2))
    I, J = block_select(ds, truth, np.random.default_rng(0), call_index=0, block_size=100)
    assert list(I) == list(range(ds.n_x)) and list(J) == list(range(ds.n_y))
    # two fields only: the agreement selector uses both
    I, J = block_select(ds, truth, np.random.default_rng(0), call_index=1, block_size=100)
    assert I.size and J.size
    bs = BlockSampler(ds, 100)
    bs(truth, np.random.default_rng(0))
    bs(truth, np.random.default_rng(0))
    assert bs.calls == 2
    with pytest.raises(ValueError):
        BlockSampler(ds, 10, mode="bogus")


# data -----------------------------------------------------------------------------

def test_generate_edge_cases():
    theta = default_field_theta([4, 6, 3], np.random.default_rng(0))
    ds, truth = generate_synthetic(40, 0.7, theta, beta=0.0, rng=np.random.default_rng(1))
    for i, j in truth.pairs():
        assert np.array_equal(ds.x[i], ds.y[j])
    ds, truth = generate_synthetic(40, 0.0, theta, beta=0.1, rng=np.random.default_rng(2))
    assert truth.n_matches == 0


def test_generate_match_count_mean():
    theta = [np.array([0.5, 0.5])]
    rng = np.random.default_rng(3)
    lam, p = 12.0, 0.4
    counts = np.array([generate_synthetic(lam, p, theta, beta=0.1, rng=rng)[1].n_matches
                       for _ in range(10_000)])
    se = counts.std(ddof=1) / math.sqrt(counts.size)
    assert abs(counts.mean() - lam * p) <= 3 * se


def test_dataset_validation():
    with pytest.raises(ValueError):
        RLDataset(np.zeros((2, 2)), np.zeros((2, 3)))
    with pytest.raises(ValueError):
        RLDataset(np.array([[0]]), np.array([[1]]), theta=[np.array([1.0, 0.0])])
    with pytest.raises(ValueError):
        RLHyperState(lam=5.0, p_match=1.0)
    ds = RLDataset(np.array([[0, 1]]), np.array([[1, 1]]))
    np.testing.assert_allclose(ds.theta[0], [0.5, 0.5])
    np.testing.assert_allclose(ds.theta[1], [0.0, 1.0])


def test_csv_roundtrip(tmp_path):
    ds, truth = small_dataset(6, seed=12)
    write_dataset_csv(ds, tmp_path / "x.csv", tmp_path / "y.csv", truth, tmp_path / "t.csv")
    back = read_csv_pair(tmp_path / "x.csv", tmp_path / "y.csv")
    assert back.n_x == ds.n_x and back.n_y == ds.n_y and back.n_fields == ds.n_fields
    # codes are relabelled but agreement patterns survive
    np.testing.assert_array_equal(field_scores(back, 0.1) > 0, field_scores(ds, 0.1) > 0)
    assert (tmp_path / "t.csv").read_text().splitlines()[0] == "i,j"
    sub = read_csv_pair(tmp_path / "x.csv", tmp_path / "y.csv", fields=["f1"])
    assert sub.n_fields == 1


def test_csv_errors(tmp_path):
    good = tmp_path / "good.csv"
    good.write_text("a,b\n1,2\n3,4\n")
    with pytest.raises(IngestionError, match="cannot open"):
        read_csv_pair(tmp_path / "missing.csv", good)
    empty = tmp_path / "empty.csv"
    empty.write_text("")
    with pytest.raises(IngestionError, match="empty"):
        read_csv_pair(empty, good)
    ragged = tmp_path / "ragged.csv"
    ragged.write_text("a,b\n1,2\n3\n")
    with pytest.raises(IngestionError, match=":3:"):
        read_csv_pair(ragged, good)
    other = tmp_path / "other.csv"
    other.write_text("c,d\n1,2\n")
    with pytest.raises(IngestionError, match="share no column"):
        read_csv_pair(other, good)
    with pytest.raises(IngestionError, match="missing"):
        read_csv_pair(good, good, fields=["a", "z"])


def test_pair_probability_writer(tmp_path):
    write_pair_probabilities({(1, 2): 0.5, (0, 0): 0.005, (0, 3): 0.01}, tmp_path / "p.csv")
    lines = (tmp_path / "p.csv").read_text().splitlines()
    assert lines == ["i,j,probability", "0,3,0.01", "1,2,0.5"]
