"""
Cross-covariance signal strength, energy-preserving sparsification and the
relative-error tolerance.

In the p > n regime ``S_xy`` is a poor matrix estimate, but scalar
functionals of it are still estimable: the squared Frobenius norm
``||Sigma_xy||_F^2`` via split-sample cross products, and ``tr(Sigma^2)``
via the pairwise ``W_n`` statistic.
"""
import itertools
import logging
import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .errors import DomainError, PreconditionError
from .rng import derive_rng, derive_seed
from .stats import upper_quantile

logger = logging.getLogger(__name__)

DELTA_FLOOR = 1e-12


class DeltaEstimate(NamedTuple):
    value: float
    raw: float
    floored: bool


@dataclass(frozen=True, eq=False)
class SparseCross:
    """Sparsified cross-covariance.

    ``support`` lists the retained ``(row, col)`` cells in decreasing order
    of ``|S_xy|``; ties are broken in row-major order.
    """

    matrix: np.ndarray
    support: tuple
    delta_hat: float
    energy_retained: float
    saturated: bool = False
    delta_floored: bool = False


@dataclass(frozen=True)
class ToleranceParams:
    xi_n: float
    c_hat: float
    c_trunc: float
    c_max: float
    r_np: float
    w1: float
    w2: float
    q_upper: float
    alpha: float
    t_values: tuple = ()
    all_floored: bool = False


def _cross_cov(x, y):
    xc = x - x.mean(axis=0)
    yc = y - y.mean(axis=0)
    return xc.T @ yc / (x.shape[0] - 1)


def sample_cross_cov(data):
    """Centered cross-covariance ``S_xy`` with divisor ``n - 1``."""
    if data.n < 2:
        raise PreconditionError(f"need at least 2 observations, got {data.n}")
    return _cross_cov(data.x, data.y)


def half_split_trace(data, rows_a, rows_b):
    """``tr(S_xy^(A) S_yx^(B))`` for two disjoint row sets."""
    sa = _cross_cov(data.x[rows_a], data.y[rows_a])
    sb = _cross_cov(data.x[rows_b], data.y[rows_b])
    return float(np.sum(sa * sb))


def all_half_splits(n):
    """Every ordered split into a first half of ``n // 2`` rows and the remainder."""
    rows = np.arange(n)
    for a in itertools.combinations(range(n), n // 2):
        a = np.array(a)
        yield a, np.setdiff1d(rows, a)


def estimate_delta_xy(data, n_splits=20, seed=0, splits=None):
    """
    Cross-data-matrix estimate of ``||Sigma_xy||_F^2``.

    The rows are split into disjoint halves ``A`` and ``B``; because the
    halves are independent, ``tr(S_xy^(A) S_yx^(B))`` is unbiased for the
    squared norm.  The estimate averages ``n_splits`` random splits (or the
    explicit ``splits``) and is floored at ``1e-12``.
    """
    n = data.n
    if n < 4:
        raise PreconditionError(f"need at least 4 observations, got {n}")
    if splits is None:
        rng = derive_rng(seed, "ecdm")
        splits = []
        for _ in range(n_splits):
            perm = rng.permutation(n)
            splits.append((perm[: n // 2], perm[n // 2:]))
    vals = [half_split_trace(data, a, b) for a, b in splits]
    raw = float(np.mean(vals))
    if raw < DELTA_FLOOR:
        return DeltaEstimate(DELTA_FLOOR, raw, True)
    return DeltaEstimate(raw, raw, False)


def sparsify_energy(s_xy, delta_hat):
    """
    Keep the largest entries of ``s_xy`` until their squared sum reaches ``delta_hat``.

    At least one entry is always kept.  If the total energy falls short of
    ``delta_hat`` every entry is kept and ``saturated`` is set.
    """
    if delta_hat < 0:
        raise DomainError(f"delta_hat must be nonnegative, got {delta_hat}")
    s_xy = np.atleast_2d(np.asarray(s_xy, dtype=float))
    flat = s_xy.ravel()
    order = np.argsort(-np.abs(flat), kind="stable")
    energy = np.cumsum(flat[order] ** 2)
    saturated = bool(energy[-1] < delta_hat)
    if saturated:
        k = flat.size
    else:
        k = max(int(np.searchsorted(energy, delta_hat, side="left")) + 1, 1)
    keep = order[:k]
    out = np.zeros_like(flat)
    out[keep] = flat[keep]
    ncol = s_xy.shape[1]
    support = tuple((int(i // ncol), int(i % ncol)) for i in keep)
    return SparseCross(
        out.reshape(s_xy.shape), support, float(delta_hat), float(energy[k - 1]), saturated
    )


def w_n_trace(block):
    """
    Pairwise ``W_n`` estimate of ``tr(Sigma^2)``.

    For each pair ``i < j`` the rows are partitioned into a group of
    ``n1 = ceil(n/2)`` rows containing ``i`` (a cyclic window ending at
    ``(i + j) // 2``) and its complement containing ``j``.  With group means
    ``m1``, ``m2`` the statistic is::

        2 u_n / (n (n - 1)) * sum_{i<j} ((x_i - m1)'(x_j - m2))^2,
        u_n = n1 n2 / ((n1 - 1) (n2 - 1))

    which is unbiased for independent rows.
    """
    x = np.atleast_2d(np.asarray(block, dtype=float))
    n = x.shape[0]
    if n < 4:
        raise PreconditionError(f"need at least 4 observations, got {n}")
    n1 = math.ceil(n / 2)
    n2 = n - n1
    prefix = np.vstack([np.zeros((1, x.shape[1])), np.cumsum(x, axis=0)])
    total = prefix[-1]
    acc = 0.0
    for i in range(n - 1):
        j = np.arange(i + 1, n)
        m = (i + 1 + j + 1) // 2  # 1-based window end
        wrap = m < n1
        g1 = np.where(
            wrap[:, None],
            prefix[m] + total - prefix[np.minimum(m + n2, n)],
            prefix[m] - prefix[np.maximum(m - n1, 0)],
        )
        ui = x[i] - g1 / n1
        uj = x[j] - (total - g1) / n2
        acc += float(np.sum(np.sum(ui * uj, axis=1) ** 2))
    u_n = n1 * n2 / ((n1 - 1) * (n2 - 1))
    return 2.0 * u_n / (n * (n - 1)) * acc


def rate_r_np(n, p, w1, w2, delta_hat):
    """``log(p) / n + (w1 w2)^(1/4) / sqrt(n delta_hat)``."""
    if delta_hat <= 0:
        raise DomainError(f"delta_hat must be positive, got {delta_hat}")
    if n < 1 or p < 2:
        raise DomainError(f"need n >= 1 and p >= 2, got n={n}, p={p}")
    return math.log(p) / n + (w1 ** 0.25) * (w2 ** 0.25) / math.sqrt(n * delta_hat)


def sparse_cross_estimate(data, n_splits=20, seed=0):
    """Signal strength plus the sparsified ``S_xy`` for one dataset."""
    delta = estimate_delta_xy(data, n_splits=n_splits, seed=seed)
    sc = sparsify_energy(sample_cross_cov(data), delta.value)
    return SparseCross(
        sc.matrix, sc.support, sc.delta_hat, sc.energy_retained, sc.saturated, delta.floored
    )


def tolerance_from_quantile(q, r_np, c_max, **fields):
    """Constant ``C = q / r``, truncated at ``c_max``, times the rate."""
    c_hat = q / r_np
    c_trunc = min(c_hat, c_max)
    return ToleranceParams(
        xi_n=c_trunc * r_np, c_hat=c_hat, c_trunc=c_trunc, c_max=c_max, r_np=r_np,
        q_upper=q, **fields,
    )


def calibrate_xi_n(data, base, B=10, alpha=0.05, c_max=10.0, seed=0, n_splits=20):
    """
    Bootstrap the relative deviation of the sparsified cross-covariance.

    For each resample ``b`` the whole sparsification is recomputed and
    ``T_b = ||Sig_b - Sig||_F^2 / delta_b``; the tolerance is
    ``min(q / r, c_max) * r`` with ``q`` the upper ``(1 - alpha)`` quantile
    of ``T_b`` and ``r`` the rate from :func:`rate_r_np`.
    """
    if B < 2:
        raise PreconditionError(f"B must be at least 2, got {B}")
    w1 = w_n_trace(data.x)
    w2 = w_n_trace(data.y)
    r = rate_r_np(data.n, data.p1 + data.p2, w1, w2, base.delta_hat)
    t_vals, floored = [], 0
    for b in range(B):
        rows = derive_rng(seed, "xi-draw", b).integers(0, data.n, size=data.n)
        sb = sparse_cross_estimate(data.take(rows), n_splits, derive_seed(seed, "xi-ecdm", b))
        floored += sb.delta_floored
        t_vals.append(float(np.sum((sb.matrix - base.matrix) ** 2)) / sb.delta_hat)
    if floored == B:
        logger.warning("all %d bootstrap signal-strength estimates were floored", B)
    q = upper_quantile(t_vals, alpha)
    return tolerance_from_quantile(
        q, r, float(c_max), w1=w1, w2=w2, alpha=alpha, t_values=tuple(t_vals),
        all_floored=floored == B,
    )
