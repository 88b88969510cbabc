import numpy as np
import pytest

from feasem.baselines import (
    _bounds, fit_full_ml, fit_penalized, full_objective, is_valid_sample, oracle_tune_lambda,
    penalized_objective,
)
from feasem.model import CovBlocks, FactorParams, build_sigma_blocks
from feasem.simlab import LAMBDA_GRID, SimConfig, generate


def blocks_of(cfg, rep=0):
    return CovBlocks.from_data(generate(cfg, rep))


def population(p=2, beta=0.6):
    lx = np.r_[1.0, np.linspace(0.8, 0.5, p - 1)]
    t = FactorParams(lx, np.full(p, 0.5), lx.copy(), np.full(p, 0.5), beta ** 2 + 0.4)
    sxx, syy, sxy = build_sigma_blocks(t, beta)
    return t, CovBlocks(sxx, syy, sxy, 1000)


def pack(theta, beta):
    return np.concatenate([
        theta.lambda_x[1:], np.log(theta.theta_delta), theta.lambda_y[1:],
        np.log(theta.theta_eps), [beta, np.log(theta.tau - beta ** 2)],
    ])


class TestValidity:
    def test_rank_deficient(self):
        assert not is_valid_sample(blocks_of(SimConfig(n=10, p1=5, p2=5)))

    def test_full_rank(self):
        assert is_valid_sample(blocks_of(SimConfig(n=10, p1=2, p2=2)))

    def test_identity(self):
        assert is_valid_sample(CovBlocks(np.eye(2), np.eye(3), np.zeros((2, 3)), 10))

    @pytest.mark.parametrize("seed", range(100))
    def test_n_at_most_p_always_invalid(self, seed):
        rng = np.random.default_rng(seed)
        p1, p2 = rng.integers(2, 7, size=2)
        n = int(rng.integers(2, p1 + p2 + 1))
        assert not is_valid_sample(blocks_of(SimConfig(n=n, p1=int(p1), p2=int(p2), seed=seed)))


class TestFullMl:
    def test_population_recovery(self):
        _, s = population(2)
        fit = fit_full_ml(s, n_init=5)
        assert fit.valid and fit.beta == pytest.approx(0.6, abs=1e-3)

    def test_invalid_when_p_exceeds_n(self):
        fit = fit_full_ml(blocks_of(SimConfig(n=10, p1=5, p2=5)))
        assert not fit.valid and fit.beta is None

    def test_deterministic(self):
        s = blocks_of(SimConfig(p1=3, p2=3, seed=2))
        a, b = fit_full_ml(s, seed=4), fit_full_ml(s, seed=4)
        assert a.beta == b.beta and a.objective == b.objective

    def test_gradient(self):
        rng = np.random.default_rng(0)
        t, s = population(3)
        S = s.full()
        for _ in range(20):
            z = pack(t, 0.6) + 0.2 * rng.standard_normal(12)
            f, g = full_objective(z, S, 3, 3)
            h = 1e-6
            fd = np.array([(full_objective(z + h * e, S, 3, 3)[0]
                            - full_objective(z - h * e, S, 3, 3)[0]) / (2 * h) for e in np.eye(12)])
            assert np.linalg.norm(fd - g) / np.linalg.norm(g) < 1e-5

    def test_objective_matches_dense_formula(self):
        t, s = population(3)
        S = np.cov(np.random.default_rng(1).standard_normal((30, 6)).T)
        from feasem.model import implied_full

        sigma = implied_full(t, 0.6)
        expect = np.linalg.slogdet(sigma)[1] + np.trace(S @ np.linalg.inv(sigma))
        assert full_objective(pack(t, 0.6), S, 3, 3)[0] == pytest.approx(expect, rel=1e-12)


class TestPenalized:
    def test_large_l1_shrinks_beta(self):
        s = blocks_of(SimConfig(n=50, p1=2, p2=2, seed=1))
        fit = fit_penalized(s, "l1", 1000.0, n_init=3)
        assert fit.valid and abs(fit.beta) < 1e-6

    def test_large_l2_shrinks_beta(self):
        s = blocks_of(SimConfig(n=50, p1=2, p2=2, seed=1))
        assert abs(fit_penalized(s, "l2", 1000.0, n_init=3).beta) < 1e-2

    @pytest.mark.parametrize("penalty", ["l1", "l2"])
    def test_zero_lambda_is_full_ml(self, penalty):
        s = blocks_of(SimConfig(n=30, p1=3, p2=3, seed=3))
        a = fit_penalized(s, penalty, 0.0, n_init=5, seed=1)
        b = fit_full_ml(s, n_init=5, seed=1)
        assert a.beta == pytest.approx(b.beta, abs=1e-4)

    @pytest.mark.parametrize("penalty", ["l1", "l2"])
    def test_local_optimality(self, penalty):
        s = blocks_of(SimConfig(n=30, p1=3, p2=3, seed=5))
        lam = 0.1
        fit = fit_penalized(s, penalty, lam, n_init=5)
        z = pack(fit.theta, fit.beta)
        S = s.full()
        f0 = penalized_objective(z, S, 3, 3, penalty, lam)
        assert f0 == pytest.approx(fit.objective, rel=1e-10)
        rng = np.random.default_rng(2)
        lo, hi = np.array(_bounds(s)).T
        for _ in range(50):
            w = np.clip(z + 0.05 * rng.standard_normal(z.size), lo, hi)
            assert f0 <= penalized_objective(w, S, 3, 3, penalty, lam) + 1e-8

    def test_bad_arguments(self):
        s = blocks_of(SimConfig(n=30))
        from feasem.errors import PreconditionError

        with pytest.raises(PreconditionError):
            fit_penalized(s, "l3", 1.0)
        with pytest.raises(PreconditionError):
            fit_penalized(s, "l1", -1.0)


class TestTuning:
    def test_single_grid(self):
        assert oracle_tune_lambda(SimConfig(), "l1", [0.5]) == 0.5

    def test_reproducible_and_matches_rerun(self):
        cfg = SimConfig(p1=2, p2=2)
        lam = oracle_tune_lambda(cfg, "l2", LAMBDA_GRID, seed=3, n_init=3)
        assert lam == oracle_tune_lambda(cfg, "l2", LAMBDA_GRID, seed=3, n_init=3)
        from feasem.rng import derive_seed

        tune = cfg.replace(seed=3)
        scores = []
        for g in LAMBDA_GRID:
            errs = []
            for t in range(5):
                f = fit_penalized(blocks_of(tune, t), "l2", g, 3, derive_seed(3, "tune-fit", t))
                if f.valid:
                    errs.append(f.beta - cfg.beta0)
            scores.append(np.sqrt(np.mean(np.square(errs))))
        assert lam == LAMBDA_GRID[int(np.argmin(scores))]

    def test_exact_recovery_selected(self, monkeypatch):
        import feasem.baselines as bl
        from feasem.baselines import BaselineFit

        def fake(s, penalty, lam, n_init, seed):
            return BaselineFit(True, None, 0.6 if lam == 10.0 else 0.6 + lam, 0.0)

        monkeypatch.setattr(bl, "fit_penalized", fake)
        assert bl.oracle_tune_lambda(SimConfig(), "l1", [0.001, 10.0, 0.1]) == 10.0


@pytest.fixture(scope="module")
def p2_tuned_records():
    from feasem.simlab import run_monte_carlo, tune_lambdas

    cfg = SimConfig(p1=2, p2=2, M=100, seed=0)
    return run_monte_carlo(cfg, ("l1", "l2"), lambdas=tune_lambdas(cfg, ("l1", "l2")))


@pytest.mark.slow
@pytest.mark.parametrize("penalty", [
    pytest.param("l1", marks=pytest.mark.xfail(
        reason="oracle tuning picks lambda=0.1 here, which barely shrinks; median error is about +0.02",
        strict=False)),
    "l2",
])
def test_tuned_p2_median_bias_negative(p2_tuned_records, penalty):
    errs = [r.beta_hat - 0.6 for r in p2_tuned_records if r.method == penalty and r.valid]
    assert len(errs) == 100
    assert np.median(errs) < 0
