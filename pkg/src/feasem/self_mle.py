"""
Self-covariance maximum likelihood and the likelihood-slack feasible pool.

Only the within-block covariances ``S_xx`` and ``S_yy`` enter here; both
are nonsingular whenever ``n > p1`` and ``n > p2`` even if the joint
covariance is not.  The candidate pool approximates the set of parameters
whose self-covariance discrepancy is within ``eps_n`` of the best optimum.
"""
import logging
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
from scipy.optimize import minimize

from .errors import NumericError, PreconditionError
from .model import CovBlocks, FactorParams
from .rng import derive_rng, derive_seed
from .stats import upper_quantile

logger = logging.getLogger(__name__)

LOADING_BOUND = 50.0
# log-variance box relative to the block's mean sample variance
LOG_VAR_LOW = np.log(1e-6)
LOG_VAR_HIGH = np.log(1e4)
GTOL = 1e-6
MAXITER = 500


class Candidate(NamedTuple):
    theta: FactorParams
    ell: float


@dataclass(frozen=True, eq=False)
class FeasiblePool:
    """Finite stand-in for the self-covariance feasible set.

    Attributes
    ----------
    candidates : list of Candidate
        Retained parameters with their self-covariance discrepancy.
    ell_hat : float
        Minimum discrepancy over the candidates.
    eps_n : float
        Likelihood slack used for retention.
    alpha : float or None
        Quantile level the slack was calibrated at.
    """

    candidates: list
    ell_hat: float
    eps_n: float
    alpha: float = None

    def __len__(self):
        return len(self.candidates)

    @property
    def best(self):
        return min(self.candidates, key=lambda c: c.ell)


def _block_nll(S, lam, d, tau, grad=False):
    # Sigma = tau lam lam' + diag(d); rank-one update keeps this O(p^2)
    dinv = 1.0 / d
    u = dinv * lam
    c = 1.0 + tau * float(lam @ u)
    if not (c > 0 and np.all(d > 0) and np.isfinite(c)):
        raise NumericError("implied self-covariance block is not positive definite")
    logdet = float(np.sum(np.log(d)) + np.log(c))
    sinv = np.diag(dinv) - (tau / c) * np.outer(u, u)
    val = logdet + float(np.sum(S * sinv))
    if not grad:
        return val
    G = sinv - sinv @ S @ sinv
    Gl = G @ lam
    return val, 2.0 * tau * Gl, np.diag(G).copy(), float(lam @ Gl)


def neg_loglik_self(theta, s):
    """``log|Sigma_xx| + tr(S_xx Sigma_xx^-1) + log|Sigma_yy| + tr(S_yy Sigma_yy^-1)``."""
    return (
        _block_nll(s.s_xx, theta.lambda_x, theta.theta_delta, 1.0)
        + _block_nll(s.s_yy, theta.lambda_y, theta.theta_eps, theta.tau)
    )


def _split(z, p1, p2):
    i = 0
    lx = np.empty(p1); lx[0] = 1.0; lx[1:] = z[i:i + p1 - 1]; i += p1 - 1
    td = np.exp(z[i:i + p1]); i += p1
    ly = np.empty(p2); ly[0] = 1.0; ly[1:] = z[i:i + p2 - 1]; i += p2 - 1
    te = np.exp(z[i:i + p2]); i += p2
    return lx, td, ly, te, float(np.exp(z[i]))


def self_objective(z, s):
    """Objective and gradient in the unconstrained parameterization."""
    p1, p2 = s.p1, s.p2
    lx, td, ly, te, tau = _split(z, p1, p2)
    fx, glx, gtd, _ = _block_nll(s.s_xx, lx, td, 1.0, grad=True)
    fy, gly, gte, gtau = _block_nll(s.s_yy, ly, te, tau, grad=True)
    g = np.concatenate([glx[1:], gtd * td, gly[1:], gte * te, [gtau * tau]])
    return fx + fy, g


def _bounds(s):
    sx = float(np.mean(np.diag(s.s_xx)))
    sy = float(np.mean(np.diag(s.s_yy)))
    lv = lambda scale: (np.log(scale) + LOG_VAR_LOW, np.log(scale) + LOG_VAR_HIGH)
    lb = [(-LOADING_BOUND, LOADING_BOUND)]
    return (
        lb * (s.p1 - 1) + [lv(sx)] * s.p1
        + lb * (s.p2 - 1) + [lv(sy)] * s.p2 + [lv(sy)]
    )


def projected_grad_norm(z, g, bounds):
    g = np.array(g, dtype=float)
    lo = np.array([b[0] for b in bounds])
    hi = np.array([b[1] for b in bounds])
    g[(z <= lo) & (g > 0)] = 0.0
    g[(z >= hi) & (g < 0)] = 0.0
    return float(np.max(np.abs(g), initial=0.0))


def minimize_self(s, z0, callback=None):
    """
    Run L-BFGS-B from ``z0``.

    Returns ``(z, ell, converged)``; ``converged`` is true when the projected
    gradient max-norm is below ``GTOL`` or the line search stalls at a point
    whose gradient is already negligible (below ``1e-3``).
    """
    bounds = _bounds(s)
    lo = np.array([b[0] for b in bounds])
    hi = np.array([b[1] for b in bounds])
    z0 = np.clip(np.asarray(z0, dtype=float), lo, hi)
    res = minimize(
        self_objective, z0, args=(s,), jac=True, method="L-BFGS-B", bounds=bounds,
        callback=callback,
        options={"maxiter": MAXITER, "gtol": GTOL, "ftol": 1e-13, "maxcor": 20},
    )
    z = res.x
    if not np.isfinite(res.fun):
        return z, float("inf"), False
    pg = projected_grad_norm(z, res.jac, bounds)
    return z, float(res.fun), bool(pg < GTOL or (pg < 1e-3 and res.nit > 0))


def random_start(s, rng):
    """Loadings ~ U[0.2, 1.5], halved sample variances, tau from the top eigenvalue of S_yy."""
    p1, p2 = s.p1, s.p2
    lx = rng.uniform(0.2, 1.5, size=p1 - 1)
    ly = rng.uniform(0.2, 1.5, size=p2 - 1)
    td = np.maximum(np.diag(s.s_xx) / 2.0, 1e-8)
    te = np.maximum(np.diag(s.s_yy) / 2.0, 1e-8)
    top = float(np.linalg.eigvalsh(s.s_yy)[-1])
    tau = max(top, 1e-8) * rng.uniform(0.5, 1.5)
    return np.concatenate([lx, np.log(td), ly, np.log(te), [np.log(tau)]])


def _check_pd(s):
    for name, m in (("S_xx", s.s_xx), ("S_yy", s.s_yy)):
        try:
            np.linalg.cholesky(m)
        except np.linalg.LinAlgError:
            raise PreconditionError(f"{name} is not positive definite") from None


def fit_self_mle(s, n_init=10, seed=0, require_pd=True, warm_starts=()):
    """
    Multi-start minimization of the self-covariance discrepancy.

    Parameters
    ----------
    s : CovBlocks
    n_init : int
        Number of randomized starts.
    seed : int
        Master seed; start ``k`` uses the stream ``(seed, "start", k)``.
    require_pd : bool
        Check that ``S_xx`` and ``S_yy`` are positive definite first.  Bootstrap
        refits disable this: the discrepancy stays finite for singular ``S``.
    warm_starts : sequence of FactorParams
        Extra starting points tried before the random ones.

    Returns
    -------
    list of Candidate
        Converged local optima sorted by ascending discrepancy.
    """
    if require_pd:
        if s.n <= s.p1 or s.n <= s.p2:
            raise PreconditionError(
                f"need n > p1 and n > p2 (n={s.n}, p1={s.p1}, p2={s.p2})"
            )
        _check_pd(s)
    starts = [t.to_unconstrained() for t in warm_starts]
    starts += [random_start(s, derive_rng(seed, "start", k)) for k in range(n_init)]
    out = []
    for k, z0 in enumerate(starts):
        try:
            z, ell, ok = minimize_self(s, z0)
        except NumericError as exc:
            logger.debug("start %d dropped: %s", k, exc)
            continue
        if not ok:
            logger.debug("start %d dropped: optimizer did not converge (ell=%.6g)", k, ell)
            continue
        theta = FactorParams.from_unconstrained(z, s.p1, s.p2)
        out.append(Candidate(theta, neg_loglik_self(theta, s)))
    if not out:
        raise NumericError(f"all {len(starts)} optimizer starts failed")
    out.sort(key=lambda c: c.ell)
    return out


def _resample_blocks(data, rng):
    rows = rng.integers(0, data.n, size=data.n)
    return CovBlocks.from_data(data.take(rows))


def bootstrap_self_deltas(data, theta_hat, B=10, seed=0, n_restarts=2):
    """
    Likelihood gaps ``ell(theta_hat; S_b) - ell(theta_b; S_b)`` over bootstrap draws.

    Each refit is warm-started at ``theta_hat`` with ``n_restarts`` random
    restarts; ``theta_hat`` itself stays in the comparison, so every gap is
    nonnegative.  A replicate whose refit fails is redrawn, with at most
    ``10 * B`` draws in total.
    """
    if B < 2:
        raise PreconditionError(f"B must be at least 2, got {B}")
    deltas = []
    draw = 0
    while len(deltas) < B:
        if draw >= 10 * B:
            raise NumericError(f"only {len(deltas)} of {B} bootstrap refits succeeded in {draw} draws")
        sb = _resample_blocks(data, derive_rng(seed, "eps-draw", draw))
        try:
            at_hat = neg_loglik_self(theta_hat, sb)
            cands = fit_self_mle(
                sb, n_init=n_restarts, seed=derive_seed(seed, "eps-refit", draw), require_pd=False,
                warm_starts=[theta_hat],
            )
        except NumericError as exc:
            logger.debug("bootstrap draw %d redrawn: %s", draw, exc)
            draw += 1
            continue
        draw += 1
        deltas.append(max(at_hat - min(cands[0].ell, at_hat), 0.0))
    return np.asarray(deltas)


def calibrate_eps_n(data, theta_hat, B=10, alpha=0.05, seed=0, n_restarts=2):
    """Likelihood slack: the upper ``(1 - alpha)`` quantile of the bootstrap gaps."""
    return upper_quantile(bootstrap_self_deltas(data, theta_hat, B, seed, n_restarts), alpha)


def build_feasible_pool(candidates, eps_n, alpha=None):
    """Keep the candidates within ``eps_n`` of the best discrepancy (ties within 1e-12 kept)."""
    candidates = list(candidates)
    if not candidates:
        raise PreconditionError("candidate list is empty")
    if eps_n < 0:
        raise PreconditionError(f"eps_n must be nonnegative, got {eps_n}")
    ell_hat = min(c.ell for c in candidates)
    cut = ell_hat + eps_n + 1e-12
    kept = sorted((c for c in candidates if c.ell <= cut), key=lambda c: c.ell)
    return FeasiblePool(kept, ell_hat, float(eps_n), alpha)


def _unique(candidates, tol=1e-6):
    seen = []
    for c in candidates:
        z = c.theta.to_unconstrained()
        if all(np.max(np.abs(z - w)) > tol for w, _ in seen):
            seen.append((z, c))
    return [c for _, c in seen]


def enrich_pool(pool, s, n_perturb=20, scale=0.05, seed=0):
    """
    Add multiplicative Gaussian perturbations of each distinct optimum.

    Every free loading, error variance and ``tau`` is multiplied by
    ``1 + scale * z``; perturbations within the slack are kept.
    """
    if n_perturb <= 0:
        return pool
    extra = []
    for k, c in enumerate(_unique(pool.candidates)):
        rng = derive_rng(seed, "perturb", k)
        t = c.theta
        for _ in range(n_perturb):
            f = 1.0 + scale * rng.standard_normal(t.n_free)
            i = 0
            lx = t.lambda_x.copy(); lx[1:] *= f[i:i + t.p1 - 1]; i += t.p1 - 1
            td = t.theta_delta * np.abs(f[i:i + t.p1]); i += t.p1
            ly = t.lambda_y.copy(); ly[1:] *= f[i:i + t.p2 - 1]; i += t.p2 - 1
            te = t.theta_eps * np.abs(f[i:i + t.p2]); i += t.p2
            tau = t.tau * abs(f[i])
            try:
                theta = FactorParams(lx, td, ly, te, tau)
                ell = neg_loglik_self(theta, s)
            except (NumericError, PreconditionError):
                continue
            extra.append(Candidate(theta, ell))
    return build_feasible_pool(pool.candidates + extra, pool.eps_n, pool.alpha)
