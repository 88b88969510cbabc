import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from feasem.baselines import is_valid_sample
from feasem.model import CovBlocks, build_sigma_blocks
from feasem.simlab import (
    METHODS, SimConfig, TrialRecord, appendix_a_check, draw_loadings, energy_concentration_ratio,
    generate, run_monte_carlo, summarize, true_params,
)


def ratio_oracle(lx, ly, beta0=1.0):
    num = tot = 0.0
    for r in range(len(lx)):
        for s in range(len(ly)):
            v = beta0 ** 2 * lx[r] ** 2 * ly[s] ** 2
            tot += v
            if r < 2 and s < 2:
                num += v
    return num / tot


class TestGenerate:
    def test_p2_loadings(self):
        lx, ly = draw_loadings(SimConfig(p1=2, p2=2))
        np.testing.assert_array_equal(lx, [1.0, 1.0])
        np.testing.assert_array_equal(ly, [1.0, 1.0])

    def test_p5_tail(self):
        lx, _ = draw_loadings(SimConfig(p1=5, p2=5))
        t = 0.3 * 5 ** -0.75
        np.testing.assert_allclose(lx, [1, 1, t, t, t], rtol=1e-15)

    def test_case2_tail_range(self):
        cfg = SimConfig(n=7, p1=6, p2=6, case="2")
        for rep in range(5):
            lx, ly = draw_loadings(cfg, rep)
            base = 6 ** -0.75
            for lam in (lx, ly):
                assert np.all(lam[2:] >= base) and np.all(lam[2:] <= base * 6 ** 1.75)
        assert not np.array_equal(draw_loadings(cfg, 0)[0], draw_loadings(cfg, 1)[0])

    def test_deterministic(self):
        cfg = SimConfig(p1=3, p2=4, seed=5)
        a, b = generate(cfg, 2), generate(cfg, 2)
        np.testing.assert_array_equal(a.x, b.x)
        assert not np.array_equal(a.x, generate(cfg, 3).x)

    @pytest.mark.parametrize("case, p", [("1", 3), ("2", 4)])
    def test_population_moments(self, case, p):
        cfg = SimConfig(n=100_000, p1=p, p2=p, case=case, seed=1)
        theta, beta0 = true_params(cfg, 0)
        sxx, syy, sxy = build_sigma_blocks(theta, beta0)
        pop = np.block([[sxx, sxy], [sxy.T, syy]])
        S = CovBlocks.from_data(generate(cfg, 0)).full()
        assert np.linalg.norm(S - pop) / np.linalg.norm(pop) < 0.02

    @pytest.mark.parametrize("p", [2, 5, 9])
    def test_cross_rank_one_dominance(self, p):
        cfg = SimConfig(n=100_000, p1=p, p2=p, seed=2)
        sv = np.linalg.svd(CovBlocks.from_data(generate(cfg, 0)).s_xy, compute_uv=False)
        assert sv[0] >= 10 * sv[1]


class TestEnergyRatio:
    def test_p2_is_one(self):
        assert energy_concentration_ratio(SimConfig(p1=2, p2=2)) == 1.0

    def test_p4_brute_force(self):
        cfg = SimConfig(p1=4, p2=4)
        assert energy_concentration_ratio(cfg) == pytest.approx(ratio_oracle(*draw_loadings(cfg)), rel=1e-14)

    def test_case2_brute_force(self):
        cfg = SimConfig(n=7, p1=5, p2=7, case="2", seed=3)
        assert energy_concentration_ratio(cfg, 4) == pytest.approx(
            ratio_oracle(*draw_loadings(cfg, 4)), rel=1e-13)


class TestAppendix:
    def test_increasing_to_one(self):
        rows = appendix_a_check(p_list=(10, 100, 1000))
        ratios = [r["ratio"] for r in rows]
        assert ratios[0] < ratios[1] < ratios[2] < 1.0

    def test_brute_force_p100(self):
        row = appendix_a_check(p_list=(100,))[0]
        lx, ly = draw_loadings(SimConfig(p1=100, p2=100))
        assert row["ratio"] == pytest.approx(ratio_oracle(lx, ly), abs=1e-12)
        tail = max(lx[r] ** 2 * ly[s] ** 2 for r in range(100) for s in range(100) if r >= 2 or s >= 2)
        assert row["tail_max"] == pytest.approx(tail, rel=1e-14)

    def test_slower_for_small_alpha(self):
        for p in (10, 100, 1000):
            slow = appendix_a_check(alpha_decay=0.51, p_list=(p,))[0]["gap"]
            fast = appendix_a_check(alpha_decay=0.9, p_list=(p,))[0]["gap"]
            assert slow > fast

    def test_gap_rate(self):
        rows = appendix_a_check(p_list=(100, 1000, 10000))
        big = rows[-1]
        c = big["gap"] / big["p"] ** (1 - 1.5)
        for r in rows:
            pred = c * r["p"] ** (1 - 1.5)
            assert 0.5 <= r["gap"] / pred <= 2.0

    def test_strict_violation_raises(self):
        with pytest.raises(ValueError):
            appendix_a_check(p_list=(100, 10))

    def test_alpha_domain(self):
        with pytest.raises(ValueError):
            appendix_a_check(alpha_decay=0.5)


def rec(method, beta, rep=0, p=2):
    return TrialRecord(method, beta is not None, beta, 1.0, rep, p)


class TestSummarize:
    def test_all_exact(self):
        r = summarize([rec("sem", 0.6, k) for k in range(5)], 0.6, n_boot=50)[("sem", 2)]
        assert (r.bias, r.var, r.rmse) == (0.0, 0.0, 0.0)

    def test_two_point(self):
        r = summarize([rec("sem", 0.5, 0), rec("sem", 1.5, 1)], 1.0, n_boot=50)[("sem", 2)]
        assert r.bias == pytest.approx(0.0, abs=1e-15)
        assert r.var == pytest.approx(0.25)
        assert r.rmse == pytest.approx(0.5)
        assert r.pos_ratio == 0.5 and r.neg_ratio == 0.5 and r.zero_ratio == 0.0

    def test_empty_valid_set(self):
        r = summarize([rec("l1", None, k) for k in range(3)], 0.6)[("l1", 2)]
        assert r.valid_rate == 0.0 and r.n_valid == 0
        assert r.bias is None and r.rmse is None and r.bias_ci is None

    def test_valid_rate_counts_all(self):
        recs = [rec("sem", 0.5, 0), rec("sem", None, 1), rec("sem", 0.7, 2), rec("sem", None, 3)]
        assert summarize(recs, 0.6, n_boot=20)[("sem", 2)].valid_rate == 0.5

    @given(st.lists(st.floats(-3, 3), min_size=1, max_size=30), st.integers(0, 1000))
    @settings(max_examples=50, deadline=None)
    def test_identity_and_permutation(self, betas, seed):
        recs = [rec("proposed", b, k) for k, b in enumerate(betas)]
        a = summarize(recs, 0.6, n_boot=30)[("proposed", 2)]
        assert a.rmse ** 2 == pytest.approx(a.bias ** 2 + a.var, abs=1e-10)
        perm = np.random.default_rng(seed).permutation(len(recs))
        b = summarize([recs[i] for i in perm], 0.6, n_boot=30)[("proposed", 2)]
        assert a.to_dict() == b.to_dict()
        e = np.array(betas) - 0.6
        assert a.iqr == pytest.approx(np.percentile(e, 75) - np.percentile(e, 25), abs=1e-12)

    def test_record_validation(self):
        with pytest.raises(ValueError):
            TrialRecord("sem", True, None, 1.0, 0, 2)


class TestMonteCarlo:
    def test_single_rep_cardinality(self):
        recs = run_monte_carlo(SimConfig(p1=2, p2=2, M=1), lambdas={"l1": 0.1, "l2": 0.1},
                               fit_overrides={"refine": False, "n_perturb": 3})
        assert sorted(r.method for r in recs) == sorted(METHODS)

    def test_rank_forced_validity(self):
        cfg = SimConfig(n=6, p1=3, p2=3, M=3)
        recs = run_monte_carlo(cfg, ("sem", "l1", "l2"), lambdas={"l1": 1.0, "l2": 1.0})
        assert not any(r.valid for r in recs)
        cfg = SimConfig(n=8, p1=3, p2=3, M=3)
        assert all(r.valid for r in run_monte_carlo(cfg, ("sem",)))

    @pytest.mark.parametrize("seed", range(20))
    def test_validity_rank_property(self, seed):
        rng = np.random.default_rng(seed)
        p1, p2 = (int(v) for v in rng.integers(2, 6, size=2))
        n = int(rng.integers(4, 14))
        s = CovBlocks.from_data(generate(SimConfig(n=n, p1=p1, p2=p2, seed=seed), 0))
        assert is_valid_sample(s) == (n > p1 + p2)

    def test_methods_do_not_shift_each_other(self):
        cfg = SimConfig(p1=2, p2=2, M=2, seed=4)
        over = {"refine": False, "n_perturb": 3}
        a = run_monte_carlo(cfg, ("sem", "proposed"), lambdas={}, fit_overrides=over)
        b = run_monte_carlo(cfg, ("proposed",), lambdas={}, fit_overrides=over)
        assert [r for r in a if r.method == "proposed"] == b

    def test_unknown_method(self):
        with pytest.raises(ValueError):
            run_monte_carlo(SimConfig(M=1), ("bogus",))
