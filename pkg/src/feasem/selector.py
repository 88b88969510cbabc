"""
Feasible-set filtering on the cross-covariance and SRMR-based selection.

:func:`fit_pipeline` chains every stage: sample covariance, multi-start
self-covariance fit, likelihood-slack bootstrap, candidate pool, sparse
cross-covariance with its signal strength, tolerance bootstrap, the
relative-error filter and finally the SRMR minimizer.
"""
import warnings
from dataclasses import asdict, dataclass, field
from typing import NamedTuple

import numpy as np
from scipy.optimize import minimize

from .cross import calibrate_xi_n, sparse_cross_estimate
from .errors import FeasemError, StageError
from .model import CovBlocks, FactorParams, beta_closed_form, srmr
from .rng import derive_seed
from .self_mle import (
    LOADING_BOUND, Candidate, FeasiblePool, _bounds, _split, _unique, bootstrap_self_deltas,
    build_feasible_pool, enrich_pool, fit_self_mle, self_objective,
)
from .stats import upper_quantile


@dataclass(frozen=True)
class FitConfig:
    """Tuning knobs of the estimator; defaults follow the simulation protocol."""

    n_init: int = 10
    b_self: int = 10
    b_cross: int = 10
    alpha: float = 0.05
    c_max: float = 10.0
    n_splits: int = 20
    n_perturb: int = 20
    perturb_scale: float = 0.05
    n_restarts: int = 2
    beta_grid: int = 41
    beta_span: float = 0.5
    refine: bool = True
    refine_starts: int = 3
    refine_maxiter: int = 100
    seed: int = 0

    def replace(self, **changes):
        d = asdict(self)
        d.update(changes)
        return FitConfig(**d)


class CrossCandidate(NamedTuple):
    theta: FactorParams
    beta: float
    rel_error: float
    ell: float


@dataclass(eq=False)
class FitResult:
    theta_hat: FactorParams
    beta_hat: float
    srmr_value: float
    eps_n: float
    xi_n: float
    pool_size: int
    feasible_size: int
    diagnostics: dict = field(default_factory=dict)
    delta_hat: float = float("nan")
    rel_error: float = float("nan")

    @property
    def psi_implied(self):
        return self.theta_hat.tau - self.beta_hat ** 2

    def to_dict(self):
        return {
            "theta_hat": self.theta_hat.to_dict(),
            "beta_hat": self.beta_hat,
            "psi_implied": self.psi_implied,
            "srmr": self.srmr_value,
            "eps_n": self.eps_n,
            "xi_n": self.xi_n,
            "delta_hat": self.delta_hat,
            "rel_error": self.rel_error,
            "pool_size": self.pool_size,
            "feasible_size": self.feasible_size,
            "diagnostics": dict(self.diagnostics),
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            theta_hat=FactorParams.from_dict(d["theta_hat"]),
            beta_hat=d["beta_hat"], srmr_value=d["srmr"], eps_n=d["eps_n"],
            xi_n=d["xi_n"], pool_size=d["pool_size"], feasible_size=d["feasible_size"],
            diagnostics=dict(d["diagnostics"]), delta_hat=d["delta_hat"],
            rel_error=d["rel_error"],
        )


def _beta_path(center, n_grid, span):
    if n_grid <= 1:
        return np.array([center])
    return np.unique(center * (1.0 + np.linspace(-span, span, n_grid)))


def _rel_coeffs(sparse, theta):
    # relative error is a + b beta + c beta^2 (already divided by delta)
    outer = np.outer(theta.lambda_x, theta.lambda_y)
    a = float(np.sum(sparse.matrix ** 2))
    b = float(np.sum(sparse.matrix * outer))
    c = float(np.sum(outer ** 2))
    return a / sparse.delta_hat, -2.0 * b / sparse.delta_hat, c / sparse.delta_hat


def _rel_errors(sparse, theta, betas):
    a, b, c = _rel_coeffs(sparse, theta)
    return a + b * betas + c * betas ** 2


def feasible_beta_interval(sparse, theta, xi_n):
    """Closed interval of ``beta`` meeting the relative-error bound, or ``None``."""
    a, b, c = _rel_coeffs(sparse, theta)
    center = -b / (2.0 * c)
    slack = xi_n - (a + b * center + c * center ** 2)
    if slack < 0:
        return None
    half = float(np.sqrt(slack / c))
    return center - half, center + half


def _srmr_beta_argmin(S, theta):
    _, b, c = _srmr_coeffs(S, theta)
    return b / c


def build_feasible_cross(pool, sparse, tol, n_grid=41, span=0.5, S=None):
    """
    Pairs ``(theta, beta)`` satisfying the relative cross-covariance constraint.

    For every pool member ``beta`` ranges over the closed-form least-squares
    value and a grid of ``n_grid`` points within ``+/- span`` of it.  When the
    full sample covariance ``S`` is given, the SRMR-optimal ``beta`` clipped
    to the member's feasible interval is added as well.
    """
    out = []
    for c in pool.candidates:
        b0 = beta_closed_form(sparse.matrix, c.theta)
        betas = _beta_path(b0, n_grid, span)
        if S is not None:
            iv = feasible_beta_interval(sparse, c.theta, tol.xi_n)
            if iv is not None:
                b_star = float(np.clip(_srmr_beta_argmin(S, c.theta), *iv))
                betas = np.append(betas, b_star)
        errs = _rel_errors(sparse, c.theta, betas)
        for beta, err in zip(betas, errs):
            if err <= tol.xi_n:
                out.append(CrossCandidate(c.theta, float(beta), float(err), c.ell))
    return out


def _srmr_coeffs(S, theta):
    # SRMR^2 * p(p+1)/2 = fixed - 2 b beta + c beta^2 (only the xy block moves with beta)
    p1 = theta.p1
    d = np.diag(S)
    scale = np.sqrt(np.outer(d, d))
    sigma = np.zeros_like(S)
    lx, ly = theta.lambda_x, theta.lambda_y
    sigma[:p1, :p1] = np.outer(lx, lx) + np.diag(theta.theta_delta)
    sigma[p1:, p1:] = theta.tau * np.outer(ly, ly) + np.diag(theta.theta_eps)
    r = (S - sigma) / scale
    iu = np.triu_indices(S.shape[0])
    fixed = np.sum(r[iu] ** 2) - np.sum(r[:p1, p1:] ** 2)
    sxy = S[:p1, p1:] / scale[:p1, p1:]
    oxy = np.outer(lx, ly) / scale[:p1, p1:]
    return fixed + np.sum(sxy ** 2), float(np.sum(sxy * oxy)), float(np.sum(oxy ** 2))


def _srmr_path(S, theta, betas):
    """SRMR for several ``beta`` at fixed ``theta``."""
    a, b, c = _srmr_coeffs(S, theta)
    p = S.shape[0]
    ss = a - 2.0 * betas * b + betas ** 2 * c
    return np.sqrt(2.0 / (p * (p + 1)) * np.maximum(ss, 0.0))


def srmr_sq_objective(w, S, p1, p2):
    """
    Sum of squared standardized residuals over ``i <= j`` and its gradient.

    ``w`` is the unconstrained self parameter vector followed by ``beta``;
    the value is ``SRMR^2 * p (p + 1) / 2``.
    """
    lx, td, ly, te, tau = _split(w[:-1], p1, p2)
    beta = float(w[-1])
    d = np.diag(S)
    W = 1.0 / np.outer(d, d)
    sig = np.empty_like(S)
    sig[:p1, :p1] = np.outer(lx, lx) + np.diag(td)
    sig[p1:, p1:] = tau * np.outer(ly, ly) + np.diag(te)
    sig[:p1, p1:] = beta * np.outer(lx, ly)
    sig[p1:, :p1] = sig[:p1, p1:].T
    E = W * (S - sig)
    f = 0.5 * (float(np.sum(E * (S - sig))) + float(np.sum(np.diag(E) * np.diag(S - sig))))
    Fx = E[:p1, :p1] + np.diag(np.diag(E[:p1, :p1]))
    Fy = E[p1:, p1:] + np.diag(np.diag(E[p1:, p1:]))
    Exy = E[:p1, p1:]
    g_lx = -2.0 * Fx @ lx - 2.0 * beta * Exy @ ly
    g_ly = -2.0 * tau * Fy @ ly - 2.0 * beta * Exy.T @ lx
    g = np.concatenate([
        g_lx[1:], -np.diag(Fx) * td, g_ly[1:], -np.diag(Fy) * te,
        [-float(ly @ Fy @ ly) * tau, -2.0 * float(lx @ Exy @ ly)],
    ])
    return f, g


def _rel_error_grad(w, sparse, p1, p2):
    lx, _, ly, _, _ = _split(w[:-1], p1, p2)
    beta = float(w[-1])
    O = np.outer(lx, ly)
    D = sparse.matrix - beta * O
    val = float(np.sum(D * D)) / sparse.delta_hat
    g = np.zeros_like(w)
    g[: p1 - 1] = (-2.0 * beta * D @ ly / sparse.delta_hat)[1:]
    j = 2 * p1 - 1
    g[j: j + p2 - 1] = (-2.0 * beta * D.T @ lx / sparse.delta_hat)[1:]
    g[-1] = -2.0 * float(np.sum(D * O)) / sparse.delta_hat
    return val, g


def refine_feasible(s, pool, sparse, tol, starts, maxiter=100):
    """
    Constrained SRMR minimization over the continuous feasible region.

    Starting from each ``(theta, beta)`` in ``starts``, SLSQP minimizes SRMR
    subject to ``ell(theta) <= ell_hat + eps_n`` and the relative-error bound.
    Only end points that satisfy both constraints exactly are returned.
    """
    S = s.full()
    p1, p2 = s.p1, s.p2
    bounds = _bounds(s) + [(-LOADING_BOUND, LOADING_BOUND)]
    cut = pool.ell_hat + pool.eps_n
    # aim slightly inside so the returned points pass the exact checks
    c_ell = cut - 1e-9 * (1.0 + abs(cut))
    c_rel = tol.xi_n * (1.0 - 1e-9)

    memo = {}

    def _self(w):
        key = w.tobytes()
        if key not in memo:
            memo.clear()
            memo[key] = self_objective(w[:-1], s)
        return memo[key]

    def ell_con(w):
        return c_ell - _self(w)[0]

    def ell_jac(w):
        return np.r_[-_self(w)[1], 0.0]

    def rel_con(w):
        return c_rel - _rel_error_grad(w, sparse, p1, p2)[0]

    def rel_jac(w):
        return -_rel_error_grad(w, sparse, p1, p2)[1]

    cons = [
        {"type": "ineq", "fun": ell_con, "jac": ell_jac},
        {"type": "ineq", "fun": rel_con, "jac": rel_jac},
    ]
    lo = np.array([b[0] for b in bounds])
    hi = np.array([b[1] for b in bounds])
    out = []
    for theta, beta in starts:
        w0 = np.clip(np.r_[theta.to_unconstrained(), beta], lo, hi)
        with np.errstate(all="ignore"), warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            try:
                res = minimize(
                    srmr_sq_objective, w0, args=(S, p1, p2), jac=True, method="SLSQP",
                    bounds=bounds, constraints=cons, options={"maxiter": maxiter, "ftol": 1e-12},
                )
            except (ValueError, FeasemError, np.linalg.LinAlgError):
                continue
        w = res.x
        if not np.all(np.isfinite(w)):
            continue
        th = FactorParams.from_unconstrained(w[:-1], p1, p2)
        ell = self_objective(w[:-1], s)[0]
        err = _rel_error_grad(w, sparse, p1, p2)[0]
        if np.isfinite(ell) and ell <= cut and err <= tol.xi_n:
            out.append(CrossCandidate(th, float(w[-1]), float(err), float(ell)))
    return out


def _refine_starts(optima, sparse, tol, S, k):
    # feasible starts first, then lower SRMR
    ranked = []
    for c in optima:
        b0 = beta_closed_form(sparse.matrix, c.theta)
        iv = feasible_beta_interval(sparse, c.theta, tol.xi_n)
        if iv is not None:
            b0 = float(np.clip(_srmr_beta_argmin(S, c.theta), *iv))
        score = float(_srmr_path(S, c.theta, np.array([b0]))[0])
        ranked.append((iv is None, score, c.ell, len(ranked), (c.theta, b0)))
    ranked.sort(key=lambda r: r[:4])
    return [r[-1] for r in ranked[:k]]


def select_fit(s, feasible, pool, sparse, tol):
    """
    Minimize SRMR over the feasible pairs.

    Ties go to the smaller ``|beta|`` and then the smaller discrepancy.  An
    empty feasible set falls back to the pool member (at its closed-form
    ``beta``) with the smallest relative error, flagged ``empty_fallback``.
    """
    S = s.full()
    diag = {
        "delta_floored": bool(getattr(sparse, "delta_floored", False)),
        "sparsifier_saturated": bool(sparse.saturated),
        "empty_fallback": False,
    }
    if feasible:
        pairs = feasible
    else:
        diag["empty_fallback"] = True
        pairs = []
        for c in pool.candidates:
            b0 = beta_closed_form(sparse.matrix, c.theta)
            err = float(_rel_errors(sparse, c.theta, np.array([b0]))[0])
            pairs.append(CrossCandidate(c.theta, b0, err, c.ell))
        best_err = min(p.rel_error for p in pairs)
        pairs = [p for p in pairs if p.rel_error <= best_err]
    # group by theta so SRMR is evaluated once per theta over its betas
    scored = []
    by_theta = {}
    for k, pr in enumerate(pairs):
        by_theta.setdefault(id(pr.theta), []).append(k)
    for idx in by_theta.values():
        theta = pairs[idx[0]].theta
        vals = _srmr_path(S, theta, np.array([pairs[k].beta for k in idx]))
        scored.extend((float(v), abs(pairs[k].beta), pairs[k].ell, k) for v, k in zip(vals, idx))
    _, _, _, k_best = min(scored)
    best = pairs[k_best]
    return FitResult(
        theta_hat=best.theta,
        beta_hat=float(best.beta),
        srmr_value=srmr(s, best.theta, best.beta),
        eps_n=pool.eps_n,
        xi_n=tol.xi_n,
        pool_size=len(pool),
        feasible_size=len(feasible),
        diagnostics=diag,
        delta_hat=sparse.delta_hat,
        rel_error=float(best.rel_error),
    )


def _stage(name, fn, *args, **kwargs):
    try:
        return fn(*args, **kwargs)
    except StageError:
        raise
    except (FeasemError, ValueError, ArithmeticError, np.linalg.LinAlgError) as exc:
        raise StageError(name, exc) from exc


def fit_pipeline(data, config=None, row_map=None):
    """
    Run the full estimator on one dataset.

    Parameters
    ----------
    data : DataBlocks
    config : FitConfig, optional
    row_map : array of int, optional
        Permutation putting the rows into canonical order.  Every random row
        draw refers to canonical positions, so permuting the rows and passing
        the matching ``row_map`` reproduces the unpermuted result exactly.

    Returns
    -------
    FitResult
    """
    cfg = config or FitConfig()
    if row_map is not None:
        data = data.take(row_map)
    seed = cfg.seed
    s = _stage("covariance", CovBlocks.from_data, data)
    if data.n < 4:
        raise StageError("covariance", f"need at least 4 observations, got {data.n}")
    cands = _stage("self_mle", fit_self_mle, s, cfg.n_init, derive_seed(seed, "self"))
    theta_hat = cands[0].theta
    deltas = _stage(
        "eps_bootstrap", bootstrap_self_deltas, data, theta_hat, cfg.b_self,
        derive_seed(seed, "eps"), cfg.n_restarts,
    )
    eps_n = upper_quantile(deltas, cfg.alpha)
    pool = build_feasible_pool(cands, eps_n, cfg.alpha)
    optima = _unique(pool.candidates)
    pool = _stage(
        "pool", enrich_pool, pool, s, cfg.n_perturb, cfg.perturb_scale, derive_seed(seed, "pool")
    )
    sparse = _stage("sparsify", sparse_cross_estimate, data, cfg.n_splits, derive_seed(seed, "ecdm"))
    tol = _stage(
        "xi_bootstrap", calibrate_xi_n, data, sparse, cfg.b_cross, cfg.alpha, cfg.c_max,
        derive_seed(seed, "xi"), cfg.n_splits,
    )
    S = s.full()
    feasible = build_feasible_cross(pool, sparse, tol, cfg.beta_grid, cfg.beta_span, S)
    if cfg.refine:
        starts = _refine_starts(optima, sparse, tol, S, cfg.refine_starts)
        refined = _stage(
            "refine", refine_feasible, s, pool, sparse, tol, starts, cfg.refine_maxiter
        )
        if refined:
            pool = FeasiblePool(
                pool.candidates + [Candidate(r.theta, r.ell) for r in refined],
                pool.ell_hat, pool.eps_n, pool.alpha,
            )
            feasible = feasible + refined
    return _stage("select", select_fit, s, feasible, pool, sparse, tol)
