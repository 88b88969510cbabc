"""
Comparison estimators on the same one-factor model.

All three baselines minimize the classical full-covariance discrepancy
``log|Sigma| + tr(S Sigma^-1)``, optionally plus an L1 or L2 penalty on
``beta`` and the free loadings.  They need a positive definite ``S``; a
singular sample covariance makes the trial invalid (no eigenvalue repair).
"""
import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.optimize import minimize

from .errors import PreconditionError
from .model import FactorParams, beta_closed_form
from .rng import derive_rng, derive_seed
from .self_mle import LOADING_BOUND, LOG_VAR_HIGH, LOG_VAR_LOW, random_start

logger = logging.getLogger(__name__)

PENALTIES = (None, "l1", "l2")


@dataclass(frozen=True, eq=False)
class BaselineFit:
    valid: bool
    theta: Optional[FactorParams] = None
    beta: Optional[float] = None
    objective: float = float("nan")
    reason: str = ""

    @classmethod
    def invalid(cls, reason):
        return cls(False, reason=reason)


def is_valid_sample(s, tol=1e-10):
    """True iff the smallest eigenvalue of the full sample covariance exceeds ``tol``."""
    S = s.full()
    if not np.all(np.isfinite(S)):
        return False
    return bool(np.linalg.eigvalsh(S)[0] > tol)


# parameter layout: [lx[1:], log td, ly[1:], log te, beta, log psi]

def _unpack(z, p1, p2):
    i = 0
    lx = np.empty(p1); lx[0] = 1.0; lx[1:] = z[i:i + p1 - 1]; i += p1 - 1
    td = np.exp(z[i:i + p1]); i += p1
    ly = np.empty(p2); ly[0] = 1.0; ly[1:] = z[i:i + p2 - 1]; i += p2 - 1
    te = np.exp(z[i:i + p2]); i += p2
    return lx, td, ly, te, float(z[i]), float(np.exp(z[i + 1]))


def penalized_index(p1, p2):
    """Positions of the penalized coordinates (free loadings and beta)."""
    return np.r_[np.arange(p1 - 1), np.arange(2 * p1 - 1, 2 * p1 + p2 - 2), 2 * p1 + 2 * p2 - 2]


def full_objective(z, S, p1, p2):
    """Joint discrepancy ``log|Sigma| + tr(S Sigma^-1)`` and its gradient."""
    lx, td, ly, te, beta, psi = _unpack(z, p1, p2)
    tau = beta * beta + psi
    p = p1 + p2
    L = np.zeros((p, 2))
    L[:p1, 0] = lx
    L[p1:, 1] = ly
    phi = np.array([[1.0, beta], [beta, tau]])
    sigma = L @ phi @ L.T
    sigma[np.diag_indices(p)] += np.r_[td, te]
    try:
        c = np.linalg.cholesky(sigma)
    except np.linalg.LinAlgError:
        return np.inf, np.zeros_like(z)
    logdet = 2.0 * np.sum(np.log(np.diag(c)))
    cinv = np.linalg.inv(c)
    sinv = cinv.T @ cinv
    f = logdet + float(np.sum(S * sinv))
    G = sinv - sinv @ S @ sinv
    gL = 2.0 * G @ L @ phi
    gphi = L.T @ G @ L
    d = np.diag(G)
    g_beta = 2.0 * gphi[0, 1] + 2.0 * beta * gphi[1, 1]
    g = np.concatenate([
        gL[1:p1, 0], d[:p1] * td, gL[p1 + 1:, 1], d[p1:] * te, [g_beta, gphi[1, 1] * psi],
    ])
    return f, g


def _bounds(s):
    sx = float(np.mean(np.diag(s.s_xx)))
    sy = float(np.mean(np.diag(s.s_yy)))
    lv = lambda scale: (np.log(scale) + LOG_VAR_LOW, np.log(scale) + LOG_VAR_HIGH)
    lb = [(-LOADING_BOUND, LOADING_BOUND)]
    return (
        lb * (s.p1 - 1) + [lv(sx)] * s.p1 + lb * (s.p2 - 1) + [lv(sy)] * s.p2
        + lb + [lv(sy)]
    )


def _start(s, rng):
    z = random_start(s, rng)
    theta = FactorParams.from_unconstrained(z, s.p1, s.p2)
    beta = beta_closed_form(s.s_xy, theta)
    psi = max(theta.tau - beta * beta, 0.1 * theta.tau)
    return np.concatenate([z[:-1], [beta, np.log(psi)]])


def _minimize(s, z0, penalty, lam):
    """
    L-BFGS-B on the (penalized) joint discrepancy.

    The L1 term is handled exactly by splitting each penalized coordinate
    into nonnegative parts ``w = u - v`` with penalty ``lam * (u + v)``.
    """
    S = s.full()
    p1, p2 = s.p1, s.p2
    bounds = _bounds(s)
    idx = penalized_index(p1, p2)
    if penalty == "l1" and lam > 0:
        k = idx.size
        w0 = z0[idx]
        x0 = np.concatenate([z0, np.maximum(w0, 0.0), np.maximum(-w0, 0.0)])
        free = np.ones(z0.size, dtype=bool)
        free[idx] = False

        def fun(x):
            z = x[: z0.size].copy()
            u, v = x[z0.size: z0.size + k], x[z0.size + k:]
            z[idx] = u - v
            f, g = full_objective(z, S, p1, p2)
            gx = np.zeros_like(x)
            gx[: z0.size] = np.where(free, g, 0.0)
            gx[z0.size: z0.size + k] = g[idx] + lam
            gx[z0.size + k:] = -g[idx] + lam
            return f + lam * float(np.sum(u + v)), gx

        xb = [b if free[j] else (0.0, 0.0) for j, b in enumerate(bounds)]
        xb += [(0.0, LOADING_BOUND)] * (2 * k)
        res = minimize(fun, x0, jac=True, method="L-BFGS-B", bounds=xb,
                       options={"maxiter": 500, "gtol": 1e-6, "ftol": 1e-13})
        z = res.x[: z0.size].copy()
        z[idx] = res.x[z0.size: z0.size + k] - res.x[z0.size + k:]
        return z, penalized_objective(z, S, p1, p2, penalty, lam)

    def fun(z):
        f, g = full_objective(z, S, p1, p2)
        if penalty == "l2" and lam > 0:
            f = f + lam * float(np.sum(z[idx] ** 2))
            g = g.copy()
            g[idx] += 2.0 * lam * z[idx]
        return f, g

    res = minimize(fun, z0, jac=True, method="L-BFGS-B", bounds=bounds,
                   options={"maxiter": 500, "gtol": 1e-6, "ftol": 1e-13})
    return res.x, float(res.fun)


def penalized_objective(z, S, p1, p2, penalty=None, lam=0.0):
    f, _ = full_objective(z, S, p1, p2)
    w = z[penalized_index(p1, p2)]
    if penalty == "l1":
        f += lam * float(np.sum(np.abs(w)))
    elif penalty == "l2":
        f += lam * float(np.sum(w ** 2))
    return f


def fit_penalized(s, penalty=None, lam=0.0, n_init=10, seed=0):
    """
    Multi-start (penalized) maximum likelihood on the full covariance.

    Returns
    -------
    BaselineFit
        ``valid`` is false when ``S`` is not positive definite or no start
        produced a finite optimum.
    """
    if penalty not in PENALTIES:
        raise PreconditionError(f"unknown penalty {penalty!r}")
    if lam < 0:
        raise PreconditionError(f"lambda must be nonnegative, got {lam}")
    if not is_valid_sample(s):
        return BaselineFit.invalid("sample covariance is not positive definite")
    best = None
    for k in range(n_init):
        z0 = _start(s, derive_rng(seed, "start", k))
        if not np.isfinite(full_objective(z0, s.full(), s.p1, s.p2)[0]):
            continue
        z, f = _minimize(s, z0, penalty, lam)
        if np.isfinite(f) and (best is None or f < best[1]):
            best = (z, f)
    if best is None:
        return BaselineFit.invalid("no start reached a finite optimum")
    z, f = best
    lx, td, ly, te, beta, psi = _unpack(z, s.p1, s.p2)
    if not np.isfinite(beta):
        return BaselineFit.invalid("nonfinite estimate")
    theta = FactorParams(lx, td, ly, te, beta * beta + psi)
    return BaselineFit(True, theta, beta, f)


def fit_full_ml(s, n_init=10, seed=0):
    """Unpenalized full-covariance maximum likelihood."""
    return fit_penalized(s, None, 0.0, n_init, seed)


def oracle_tune_lambda(config, penalty, grid, trials=5, seed=0, n_init=10):
    """
    Pick the penalty weight with the smallest RMSE against the true ``beta``.

    Every grid value is scored on the same ``trials`` generated datasets;
    ties go to the smaller weight.  Only usable in simulations.
    """
    from .model import CovBlocks
    from .simlab import generate

    grid = sorted(float(g) for g in grid)
    if len(grid) == 1:
        return grid[0]
    tune_cfg = config.replace(seed=seed)
    blocks = [CovBlocks.from_data(generate(tune_cfg, t)) for t in range(trials)]
    best_lam, best_rmse = grid[0], np.inf
    for lam in grid:
        errs = []
        for t, s in enumerate(blocks):
            fit = fit_penalized(s, penalty, lam, n_init, derive_seed(seed, "tune-fit", t))
            if fit.valid:
                errs.append(fit.beta - config.beta0)
        rmse = float(np.sqrt(np.mean(np.square(errs)))) if errs else np.inf
        if rmse < best_rmse:
            best_lam, best_rmse = lam, rmse
    return best_lam
