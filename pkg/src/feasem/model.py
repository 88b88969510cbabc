"""
One-factor LISREL model with two indicator blocks.

The measurement model is ``x = lambda_x * xi + delta`` and
``y = lambda_y * eta + eps`` with a single structural path
``eta = beta * xi + zeta``.  With ``Var(xi) = 1`` and the first loading of
each block fixed to one, the implied covariance blocks are::

    Sigma_xx = lambda_x lambda_x' + diag(theta_delta)
    Sigma_yy = tau lambda_y lambda_y' + diag(theta_eps)      (tau = beta^2 + psi)
    Sigma_xy = beta lambda_x lambda_y'
"""
from dataclasses import dataclass

import numpy as np

from .errors import DomainError, PreconditionError


def _vec(a, name):
    a = np.array(a, dtype=float).ravel()
    if a.size == 0:
        raise PreconditionError(f"{name} must be nonempty")
    a.setflags(write=False)
    return a


def _frozen(a):
    a = np.array(a, dtype=float)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class DataBlocks:
    """Raw observations split into the ``x`` (n x p1) and ``y`` (n x p2) blocks."""

    x: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        x = np.atleast_2d(np.asarray(self.x, dtype=float))
        y = np.atleast_2d(np.asarray(self.y, dtype=float))
        if x.shape[0] != y.shape[0]:
            raise PreconditionError(
                f"x and y must have the same number of rows ({x.shape[0]} != {y.shape[0]})"
            )
        object.__setattr__(self, "x", _frozen(x))
        object.__setattr__(self, "y", _frozen(y))

    @property
    def n(self):
        return self.x.shape[0]

    @property
    def p1(self):
        return self.x.shape[1]

    @property
    def p2(self):
        return self.y.shape[1]

    def take(self, rows):
        """Return the blocks restricted to (possibly repeated) row indices."""
        rows = np.asarray(rows, dtype=np.intp)
        return DataBlocks(self.x[rows], self.y[rows])


@dataclass(frozen=True, eq=False)
class FactorParams:
    """Self-covariance parameters ``(lambda_x, theta_delta, lambda_y, theta_eps, tau)``."""

    lambda_x: np.ndarray
    theta_delta: np.ndarray
    lambda_y: np.ndarray
    theta_eps: np.ndarray
    tau: float

    def __post_init__(self):
        lx = _vec(self.lambda_x, "lambda_x")
        ly = _vec(self.lambda_y, "lambda_y")
        td = _vec(self.theta_delta, "theta_delta")
        te = _vec(self.theta_eps, "theta_eps")
        if td.size != lx.size or te.size != ly.size:
            raise PreconditionError("error-variance vectors must match loading lengths")
        if lx[0] != 1.0 or ly[0] != 1.0:
            raise PreconditionError("the first loading of each block is fixed to 1")
        if not (np.all(td > 0) and np.all(te > 0)):
            raise PreconditionError("error variances must be strictly positive")
        tau = float(self.tau)
        if not tau > 0:
            raise PreconditionError(f"tau must be positive, got {tau}")
        for name, val in (("lambda_x", lx), ("theta_delta", td), ("lambda_y", ly), ("theta_eps", te)):
            object.__setattr__(self, name, val)
        object.__setattr__(self, "tau", tau)

    @property
    def p1(self):
        return self.lambda_x.size

    @property
    def p2(self):
        return self.lambda_y.size

    @property
    def n_free(self):
        return 2 * self.p1 + 2 * self.p2 - 1

    def to_unconstrained(self):
        """Pack into ``[lx[1:], log td, ly[1:], log te, log tau]``."""
        return np.concatenate([
            self.lambda_x[1:], np.log(self.theta_delta),
            self.lambda_y[1:], np.log(self.theta_eps), [np.log(self.tau)],
        ])

    @classmethod
    def from_unconstrained(cls, z, p1, p2):
        z = np.asarray(z, dtype=float)
        i = 0
        lx = np.concatenate([[1.0], z[i:i + p1 - 1]]); i += p1 - 1
        td = np.exp(z[i:i + p1]); i += p1
        ly = np.concatenate([[1.0], z[i:i + p2 - 1]]); i += p2 - 1
        te = np.exp(z[i:i + p2]); i += p2
        return cls(lx, td, ly, te, float(np.exp(z[i])))

    def to_dict(self):
        return {
            "lambda_x": self.lambda_x.tolist(),
            "theta_delta": self.theta_delta.tolist(),
            "lambda_y": self.lambda_y.tolist(),
            "theta_eps": self.theta_eps.tolist(),
            "tau": self.tau,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(d["lambda_x"], d["theta_delta"], d["lambda_y"], d["theta_eps"], d["tau"])

    def allclose(self, other, atol=0.0):
        return all(
            np.allclose(getattr(self, f), getattr(other, f), rtol=0.0, atol=atol)
            for f in ("lambda_x", "theta_delta", "lambda_y", "theta_eps", "tau")
        )


@dataclass(frozen=True)
class StructuralCoeff:
    """Structural path ``beta`` with the implied disturbance variance ``tau - beta**2``.

    ``psi_implied`` may be negative; that is reported, not rejected.
    """

    beta: float
    psi_implied: float

    @classmethod
    def from_params(cls, theta, beta):
        beta = float(beta)
        return cls(beta, theta.tau - beta * beta)

    @property
    def psi_negative(self):
        return self.psi_implied < 0


@dataclass(frozen=True, eq=False)
class CovBlocks:
    """Partitioned sample covariance ``(S_xx, S_xy, S_yy)`` of ``n`` observations."""

    s_xx: np.ndarray
    s_yy: np.ndarray
    s_xy: np.ndarray
    n: int

    def __post_init__(self):
        sxx = np.atleast_2d(np.asarray(self.s_xx, dtype=float))
        syy = np.atleast_2d(np.asarray(self.s_yy, dtype=float))
        sxy = np.atleast_2d(np.asarray(self.s_xy, dtype=float))
        p1, p2 = sxx.shape[0], syy.shape[0]
        if sxx.shape != (p1, p1) or syy.shape != (p2, p2) or sxy.shape != (p1, p2):
            raise PreconditionError(
                f"inconsistent block shapes {sxx.shape}, {syy.shape}, {sxy.shape}"
            )
        for name, m in (("s_xx", sxx), ("s_yy", syy)):
            if np.max(np.abs(m - m.T), initial=0.0) > 1e-12 * max(1.0, np.max(np.abs(m))):
                raise PreconditionError(f"{name} is not symmetric")
        object.__setattr__(self, "s_xx", _frozen(sxx))
        object.__setattr__(self, "s_yy", _frozen(syy))
        object.__setattr__(self, "s_xy", _frozen(sxy))
        object.__setattr__(self, "n", int(self.n))

    @property
    def p1(self):
        return self.s_xx.shape[0]

    @property
    def p2(self):
        return self.s_yy.shape[0]

    @classmethod
    def from_data(cls, data):
        """Sample covariance with divisor ``n - 1``."""
        if data.n < 2:
            raise PreconditionError(f"need at least 2 observations, got {data.n}")
        z = np.hstack([data.x, data.y])
        zc = z - z.mean(axis=0)
        s = zc.T @ zc / (data.n - 1)
        s = (s + s.T) / 2.0
        p1 = data.p1
        return cls(s[:p1, :p1], s[p1:, p1:], s[:p1, p1:], data.n)

    def full(self):
        """Assemble the ``(p1 + p2)``-dimensional covariance matrix."""
        return np.block([[self.s_xx, self.s_xy], [self.s_xy.T, self.s_yy]])


def build_sigma_blocks(theta, beta):
    """
    Model-implied covariance blocks for ``(theta, beta)``.

    Returns
    -------
    sigma_xx, sigma_yy, sigma_xy : ndarray
    """
    lx, ly = theta.lambda_x, theta.lambda_y
    sxx = np.outer(lx, lx)
    sxx[np.diag_indices_from(sxx)] += theta.theta_delta
    syy = theta.tau * np.outer(ly, ly)
    syy[np.diag_indices_from(syy)] += theta.theta_eps
    sxy = float(beta) * np.outer(lx, ly)
    return sxx, syy, sxy


def implied_full(theta, beta):
    sxx, syy, sxy = build_sigma_blocks(theta, beta)
    return np.block([[sxx, sxy], [sxy.T, syy]])


def srmr(s, theta, beta):
    """
    Standardized root mean square residual over the full covariance.

    Residuals ``S_ij - Sigma_ij`` are scaled by ``sqrt(S_ii S_jj)`` and the
    squared values averaged over the ``p (p + 1) / 2`` pairs ``i <= j``.
    """
    S = s.full() if isinstance(s, CovBlocks) else np.asarray(s, dtype=float)
    d = np.diag(S)
    bad = np.flatnonzero(~(d > 0))
    if bad.size:
        raise DomainError(f"sample variance at index {int(bad[0])} is not positive ({d[bad[0]]})")
    sigma = implied_full(theta, beta)
    resid = (S - sigma) / np.sqrt(np.outer(d, d))
    p = S.shape[0]
    iu = np.triu_indices(p)
    return float(np.sqrt(2.0 / (p * (p + 1)) * np.sum(resid[iu] ** 2)))


def beta_closed_form(sparse_xy, theta):
    """Least-squares ``beta`` minimizing ``||sparse_xy - beta lx ly'||_F``."""
    outer = np.outer(theta.lambda_x, theta.lambda_y)
    denom = float(np.sum(outer * outer))
    if denom == 0.0:
        raise DomainError("loading outer product is zero; beta is not identified")
    return float(np.sum(np.asarray(sparse_xy, dtype=float) * outer) / denom)


def relative_cross_error(sparse_xy, theta, beta, delta):
    """``||sparse_xy - beta lx ly'||_F^2 / delta``."""
    diff = np.asarray(sparse_xy, dtype=float) - float(beta) * np.outer(theta.lambda_x, theta.lambda_y)
    return float(np.sum(diff * diff) / delta)
