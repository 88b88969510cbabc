import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from feasem.errors import DomainError
from feasem.model import (
    CovBlocks, DataBlocks, FactorParams, StructuralCoeff, beta_closed_form, build_sigma_blocks,
    implied_full, relative_cross_error, srmr,
)


def make_theta(p1=2, p2=2, rng=None, tau=1.0):
    rng = rng or np.random.default_rng(0)
    lx = np.r_[1.0, rng.uniform(0.2, 1.5, p1 - 1)]
    ly = np.r_[1.0, rng.uniform(0.2, 1.5, p2 - 1)]
    return FactorParams(lx, rng.uniform(0.2, 1.0, p1), ly, rng.uniform(0.2, 1.0, p2), tau)


def srmr_oracle(S, sigma):
    p = S.shape[0]
    total = 0.0
    for i in range(p):
        for j in range(i, p):
            r = S[i, j] / np.sqrt(S[i, i] * S[j, j]) - sigma[i, j] / np.sqrt(S[i, i] * S[j, j])
            total += r * r
    return np.sqrt(2.0 * total / (p * (p + 1)))


class TestFactorParams:
    def test_first_loading_fixed(self):
        with pytest.raises(ValueError):
            FactorParams([0.9, 1.0], [1, 1], [1, 1], [1, 1], 1.0)

    @pytest.mark.parametrize("bad", [
        dict(theta_delta=[1.0, 0.0]), dict(theta_eps=[-1.0, 1.0]), dict(tau=0.0),
    ])
    def test_positivity(self, bad):
        kw = dict(lambda_x=[1, 2], theta_delta=[1, 1], lambda_y=[1, 2], theta_eps=[1, 1], tau=1.0)
        kw.update(bad)
        with pytest.raises(ValueError):
            FactorParams(**kw)

    def test_unconstrained_round_trip(self):
        t = make_theta(3, 4, tau=0.7)
        z = t.to_unconstrained()
        assert z.size == t.n_free == 2 * 3 + 2 * 4 - 1
        assert FactorParams.from_unconstrained(z, 3, 4).allclose(t, atol=1e-14)

    def test_dict_round_trip(self):
        t = make_theta(3, 2)
        assert FactorParams.from_dict(t.to_dict()).allclose(t)

    def test_structural_coeff_flags_negative_psi(self):
        t = make_theta(tau=0.5)
        c = StructuralCoeff.from_params(t, 0.8)
        assert c.psi_implied == pytest.approx(0.5 - 0.8 ** 2, abs=0)
        assert c.psi_negative


class TestSigmaBlocks:
    def test_zero_beta(self):
        t = FactorParams([1, 1], [0.5, 0.5], [1, 1], [0.5, 0.5], 1.0)
        sxx, _, sxy = build_sigma_blocks(t, 0.0)
        np.testing.assert_array_equal(sxx, [[1.5, 1.0], [1.0, 1.5]])
        np.testing.assert_array_equal(sxy, np.zeros((2, 2)))

    def test_rank_one_cross(self):
        t = FactorParams([1, 1], [0.5, 0.5], [1, 1], [0.5, 0.5], 1.0)
        np.testing.assert_allclose(build_sigma_blocks(t, 0.4)[2], np.full((2, 2), 0.4))

    def test_case1_oracle(self):
        # loadings (1, 1, 0.3 * 3^-0.75), Theta = 0.5 I, psi = 0.4, beta = 0.6
        tail = 0.3 * 3 ** -0.75
        lam = np.array([1.0, 1.0, tail])
        beta, psi = 0.6, 0.4
        t = FactorParams(lam, np.full(3, 0.5), lam, np.full(3, 0.5), beta ** 2 + psi)
        sxx, syy, sxy = build_sigma_blocks(t, beta)
        L = np.zeros((6, 2))
        L[:3, 0] = lam
        L[3:, 1] = lam
        phi = np.array([[1.0, beta], [beta, beta ** 2 + psi]])
        full = L @ phi @ L.T + 0.5 * np.eye(6)
        np.testing.assert_allclose(sxx, full[:3, :3], rtol=1e-14)
        np.testing.assert_allclose(syy, full[3:, 3:], rtol=1e-14)
        np.testing.assert_allclose(sxy, full[:3, 3:], rtol=1e-14)

    @given(st.integers(1, 6), st.integers(1, 6), st.floats(-3, 3), st.integers(0, 10_000))
    @settings(max_examples=40, deadline=None)
    def test_invariants(self, p1, p2, beta, seed):
        t = make_theta(p1, p2, np.random.default_rng(seed), tau=1.3)
        sxx, syy, sxy = build_sigma_blocks(t, beta)
        for m, d in ((sxx, t.theta_delta), (syy, t.theta_eps)):
            assert np.max(np.abs(m - m.T)) < 1e-12
            assert np.linalg.eigvalsh(m)[0] >= d.min() - 1e-10
        sv = np.linalg.svd(sxy, compute_uv=False)
        if beta != 0 and sv.size > 1:
            assert sv[1] <= 1e-10 * sv[0]


class TestSrmr:
    def test_perfect_fit(self):
        t = make_theta(3, 3)
        S = implied_full(t, 0.5)
        assert srmr(S, t, 0.5) == pytest.approx(0.0, abs=1e-14)

    def test_two_variable_hand_value(self):
        t = FactorParams([1.0], [1e-300], [1.0], [1e-300], 1.0)
        # Sigma = I except Sigma_xy = 0.5; use a CovBlocks S = I
        s = CovBlocks(np.eye(1), np.eye(1), np.zeros((1, 1)), 10)
        # implied diagonals are 1 + tiny, so only the cross residual survives
        assert srmr(s, t, 0.5) == pytest.approx(np.sqrt(1.0 / 12.0), rel=1e-12)

    def test_matches_oracle(self):
        rng = np.random.default_rng(3)
        t = make_theta(3, 4, rng, tau=1.2)
        A = rng.standard_normal((20, 7))
        S = np.cov(A.T)
        assert srmr(S, t, -0.3) == pytest.approx(srmr_oracle(S, implied_full(t, -0.3)), rel=1e-12)

    def test_diagonal_congruence_invariance(self):
        rng = np.random.default_rng(4)
        t = make_theta(2, 3, rng, tau=1.1)
        S = np.cov(rng.standard_normal((15, 5)).T)
        # leave the first variable of each block unscaled so the model stays representable
        d = rng.uniform(0.3, 3.0, 5)
        d[0] = d[2] = 1.0
        D = np.diag(d)
        ts = FactorParams(
            t.lambda_x * d[:2], t.theta_delta * d[:2] ** 2,
            t.lambda_y * d[2:], t.theta_eps * d[2:] ** 2, t.tau,
        )
        np.testing.assert_allclose(implied_full(ts, 0.7), D @ implied_full(t, 0.7) @ D, rtol=1e-13)
        assert srmr(D @ S @ D, ts, 0.7) == pytest.approx(srmr(S, t, 0.7), rel=1e-12)

    def test_nonnegative_and_zero_only_at_fit(self):
        rng = np.random.default_rng(5)
        t = make_theta(2, 2, rng)
        S = implied_full(t, 0.2)
        S2 = S.copy()
        S2[0, 3] += 1e-3
        S2[3, 0] += 1e-3
        assert srmr(S2, t, 0.2) > 0

    def test_nonpositive_diagonal_names_index(self):
        t = make_theta(2, 2)
        S = np.eye(4)
        S[2, 2] = 0.0
        with pytest.raises(DomainError, match="2"):
            srmr(S, t, 0.1)


class TestBetaClosedForm:
    def test_exact_rank_one(self):
        t = make_theta(3, 2)
        O = np.outer(t.lambda_x, t.lambda_y)
        assert beta_closed_form(0.5 * O, t) == pytest.approx(0.5, rel=1e-14)

    def test_zero_input(self):
        assert beta_closed_form(np.zeros((2, 3)), make_theta(2, 3)) == 0.0

    def test_grid_oracle(self):
        rng = np.random.default_rng(6)
        sig = rng.standard_normal((3, 3))
        t = FactorParams([1, 0.5, 0.2], [1, 1, 1], [1, 1, 0.1], [1, 1, 1], 1.0)
        b = beta_closed_form(sig, t)
        O = np.outer(t.lambda_x, t.lambda_y)
        grid = np.linspace(-10, 10, 100_001)
        res = ((sig[None] - grid[:, None, None] * O[None]) ** 2).sum(axis=(1, 2))
        assert abs(b - grid[np.argmin(res)]) <= 1e-4
        assert np.sum((sig - b * O) ** 2) <= res.min() + 1e-12

    def test_relative_error(self):
        t = make_theta(2, 2)
        O = np.outer(t.lambda_x, t.lambda_y)
        sig = 0.3 * O + 0.1
        expect = np.sum((sig - 0.2 * O) ** 2) / 2.0
        assert relative_cross_error(sig, t, 0.2, 2.0) == pytest.approx(expect, rel=1e-14)


class TestBlocks:
    def test_from_data_divisor(self):
        rng = np.random.default_rng(7)
        x, y = rng.standard_normal((6, 2)), rng.standard_normal((6, 3))
        s = CovBlocks.from_data(DataBlocks(x, y))
        full = np.cov(np.hstack([x, y]).T, ddof=1)
        np.testing.assert_allclose(s.full(), full, rtol=1e-13)
        assert s.n == 6 and s.p1 == 2 and s.p2 == 3

    def test_asymmetric_rejected(self):
        with pytest.raises(ValueError):
            CovBlocks(np.array([[1, 0.5], [0.4, 1]]), np.eye(2), np.zeros((2, 2)), 5)

    def test_data_blocks_row_mismatch(self):
        with pytest.raises(ValueError):
            DataBlocks(np.zeros((4, 2)), np.zeros((5, 2)))
