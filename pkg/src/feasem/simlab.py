"""
Synthetic data generators, the Monte Carlo harness and evaluation metrics.

Case 1 gives every block two unit loadings followed by tails
``a * p^(-alpha)``; Case 2 multiplies each tail loading by an independent
``Uniform(1, p^(7/4))`` draw so the tail energy can reach order one.
"""
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from .model import DataBlocks
from .rng import derive_rng, derive_seed

logger = logging.getLogger(__name__)

METHODS = ("sem", "l1", "l2", "proposed")
METHOD_LABELS = {"sem": "SEM", "l1": "L1-SEM", "l2": "L2-SEM", "proposed": "Proposed"}
LAMBDA_GRID = (0.001, 0.01, 0.1, 1.0, 10.0, 100.0, 1000.0)


@dataclass(frozen=True)
class SimConfig:
    """
    One simulation cell.

    ``beta0`` defaults to 0.6, an assumed value; set it to study other effects.
    ``a`` and ``b`` default to 0.3 for Case 1 and 1.0 for Case 2 (the Case 2
    tails are ``p^(-3/4) * U(1, p^(7/4))`` with no extra factor).
    """

    n: int = 10
    p1: int = 2
    p2: int = 2
    beta0: float = 0.6
    psi: float = 0.4
    theta_scale: float = 0.5
    case: str = "case1"
    a: Optional[float] = None
    b: Optional[float] = None
    alpha_decay: float = 0.75
    M: int = 100
    n_init: int = 10
    B_self: int = 10
    B_cross: int = 10
    B_infer: int = 100
    seed: int = 0

    def __post_init__(self):
        case = {"1": "case1", "2": "case2"}.get(str(self.case), str(self.case))
        if case not in ("case1", "case2"):
            raise ValueError(f"unknown case {self.case!r}")
        object.__setattr__(self, "case", case)
        default = 0.3 if case == "case1" else 1.0
        if self.a is None:
            object.__setattr__(self, "a", default)
        if self.b is None:
            object.__setattr__(self, "b", default)
        if not 0.5 < self.alpha_decay < 1.0:
            raise ValueError(f"alpha_decay must lie in (1/2, 1), got {self.alpha_decay}")
        if self.psi <= 0 or self.theta_scale <= 0:
            raise ValueError("psi and theta_scale must be positive")

    def replace(self, **changes):
        d = asdict(self)
        d.update(changes)
        if "case" in changes and "a" not in changes:
            d["a"] = None
        if "case" in changes and "b" not in changes:
            d["b"] = None
        return SimConfig(**d)

    def to_dict(self):
        return asdict(self)


def draw_loadings(config, rep_index=0):
    """Loadings ``(lambda_x, lambda_y)`` for repetition ``rep_index``."""
    def block(p, scale, tag):
        lam = np.ones(p)
        if p > 2:
            tail = np.full(p - 2, scale * p ** (-config.alpha_decay))
            if config.case == "case2":
                rng = derive_rng(config.seed, "loadings", rep_index, tag)
                tail = tail * rng.uniform(1.0, p ** 1.75, size=p - 2)
            lam[2:] = tail
        return lam

    return block(config.p1, config.a, "x"), block(config.p2, config.b, "y")


def generate(config, rep_index=0):
    """Draw ``n`` observations from the one-factor model for repetition ``rep_index``."""
    lx, ly = draw_loadings(config, rep_index)
    rng = derive_rng(config.seed, "data", rep_index)
    n = config.n
    xi = rng.standard_normal(n)
    zeta = rng.normal(0.0, math.sqrt(config.psi), n)
    eta = config.beta0 * xi + zeta
    sd = math.sqrt(config.theta_scale)
    x = np.outer(xi, lx) + rng.normal(0.0, sd, (n, config.p1))
    y = np.outer(eta, ly) + rng.normal(0.0, sd, (n, config.p2))
    return DataBlocks(x, y)


def true_params(config, rep_index=0):
    """``(FactorParams, beta0)`` of the generating model."""
    from .model import FactorParams

    lx, ly = draw_loadings(config, rep_index)
    theta = FactorParams(
        lx, np.full(config.p1, config.theta_scale), ly, np.full(config.p2, config.theta_scale),
        config.beta0 ** 2 + config.psi,
    )
    return theta, config.beta0


def _concentration(lx, ly, k=2):
    # share of sum_{r,s} lx_r^2 ly_s^2 carried by the leading k x k block; beta cancels
    ex, ey = np.square(lx), np.square(ly)
    return float(ex[:k].sum() * ey[:k].sum() / (ex.sum() * ey.sum()))


def energy_concentration_ratio(config, rep_index=0):
    """Share of ``||Sigma_xy||_F^2`` carried by the leading 2 x 2 loading block."""
    return _concentration(*draw_loadings(config, rep_index))


def appendix_a_check(a=0.3, b=0.3, alpha_decay=0.75, p_list=(10, 100, 1000, 10000), beta0=1.0,
                     strict=True):
    """
    Concentration ratio and largest off-block energy for Case 1 loadings.

    Returns a list of dicts with keys ``p``, ``ratio``, ``gap`` (``1 - ratio``)
    and ``tail_max`` (largest ``beta0^2 lx_r^2 ly_s^2`` outside the leading
    block).  With ``strict`` a ``ValueError`` is raised unless the ratio is
    strictly increasing and ``tail_max`` strictly decreasing over ``p_list``.
    """
    if not 0.5 < alpha_decay < 1.0:
        raise ValueError(f"alpha_decay must lie in (1/2, 1), got {alpha_decay}")
    rows = []
    for p in p_list:
        p = int(p)
        cfg = SimConfig(p1=p, p2=p, a=a, b=b, alpha_decay=alpha_decay)
        lx, ly = draw_loadings(cfg)
        ex, ey = np.square(lx), np.square(ly)
        tails = [ex[2:].max(initial=0.0) * ey.max(), ex.max() * ey[2:].max(initial=0.0)]
        ratio = _concentration(lx, ly)
        rows.append({
            "p": p, "ratio": ratio, "gap": 1.0 - ratio,
            "tail_max": float(beta0 ** 2 * max(tails)),
        })
    if strict:
        for r0, r1 in zip(rows, rows[1:]):
            if not r1["ratio"] > r0["ratio"]:
                raise ValueError(f"ratio not increasing between p={r0['p']} and p={r1['p']}")
            if not r1["tail_max"] < r0["tail_max"]:
                raise ValueError(f"tail_max not decreasing between p={r0['p']} and p={r1['p']}")
    return rows


@dataclass(frozen=True)
class TrialRecord:
    method: str
    valid: bool
    beta_hat: Optional[float]
    energy_ratio: float
    rep_index: int
    p: int
    reason: str = ""

    def __post_init__(self):
        if self.valid != (self.beta_hat is not None):
            raise ValueError("beta_hat must be present exactly when the trial is valid")

    def to_dict(self):
        return asdict(self)


def _fit_config(config, method, rep_index, overrides=None):
    from .selector import FitConfig

    return FitConfig(
        n_init=config.n_init, b_self=config.B_self, b_cross=config.B_cross,
        seed=derive_seed(config.seed, "rep", rep_index, method), **(overrides or {}),
    )


def run_trial(config, data, method, rep_index, lam=0.0, fit_overrides=None):
    """Evaluate one method on one dataset; any failure yields an invalid record."""
    from .baselines import fit_penalized
    from .errors import FeasemError
    from .model import CovBlocks
    from .selector import fit_pipeline

    ratio = energy_concentration_ratio(config, rep_index)
    rec = lambda ok, beta, why="": TrialRecord(method, ok, beta, ratio, rep_index, config.p1, why)
    try:
        if method == "proposed":
            res = fit_pipeline(data, _fit_config(config, method, rep_index, fit_overrides))
            beta = res.beta_hat
        else:
            penalty = None if method == "sem" else method
            fit = fit_penalized(
                CovBlocks.from_data(data), penalty, lam if penalty else 0.0, config.n_init,
                derive_seed(config.seed, "rep", rep_index, method),
            )
            if not fit.valid:
                return rec(False, None, fit.reason)
            beta = fit.beta
    except (FeasemError, ValueError, ArithmeticError, np.linalg.LinAlgError) as exc:
        logger.debug("rep %d method %s failed: %s", rep_index, method, exc)
        return rec(False, None, str(exc))
    if not np.isfinite(beta):
        return rec(False, None, "nonfinite estimate")
    return rec(True, float(beta))


def tune_lambdas(config, methods, grid=LAMBDA_GRID, trials=5):
    """Oracle penalty weight per penalized method (smallest grid value if no sample is usable)."""
    from .baselines import oracle_tune_lambda

    out = {}
    for m in methods:
        if m in ("l1", "l2"):
            out[m] = oracle_tune_lambda(
                config, m, grid, trials, derive_seed(config.seed, "tune", m), config.n_init
            )
    return out


def _run_rep(args):
    config, methods, lambdas, rep, overrides = args
    data = generate(config, rep)
    return [run_trial(config, data, m, rep, lambdas.get(m, 0.0), overrides) for m in methods]


def run_monte_carlo(config, methods=METHODS, lambdas=None, n_jobs=1, fit_overrides=None):
    """
    ``config.M`` repetitions, every method evaluated on the same dataset.

    Per-method randomness is derived from ``(seed, rep, method)`` so the set
    of methods does not change any individual method's results.  Penalty
    weights are tuned once per call unless ``lambdas`` is given.
    ``fit_overrides`` holds extra FitConfig fields for the proposed method.
    """
    methods = list(methods)
    if not methods:
        raise ValueError("methods must be nonempty")
    unknown = set(methods) - set(METHODS)
    if unknown:
        raise ValueError(f"unknown methods {sorted(unknown)}")
    if lambdas is None:
        lambdas = tune_lambdas(config, methods)
    tasks = [(config, methods, dict(lambdas), rep, fit_overrides) for rep in range(config.M)]
    if n_jobs == 1:
        chunks = [_run_rep(t) for t in tasks]
    else:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=n_jobs) as ex:
            chunks = list(ex.map(_run_rep, tasks))
    return [r for chunk in chunks for r in chunk]


@dataclass
class MetricsReport:
    method: str
    p: int
    M: int
    n_valid: int
    valid_rate: float
    bias: Optional[float] = None
    var: Optional[float] = None
    rmse: Optional[float] = None
    bias_ci: Optional[tuple] = None
    var_ci: Optional[tuple] = None
    rmse_ci: Optional[tuple] = None
    pos_ratio: Optional[float] = None
    neg_ratio: Optional[float] = None
    zero_ratio: Optional[float] = None
    iqr: Optional[float] = None
    extra: dict = field(default_factory=dict)

    def to_dict(self):
        return asdict(self)


def _moments(err):
    bias = float(np.mean(err))
    var = float(np.mean((err - bias) ** 2))
    return bias, var, float(np.sqrt(np.mean(err ** 2)))


def summarize(records, beta0, n_boot=1000, level=0.95, seed=0):
    """
    Metrics per ``(method, p)`` over the valid trials.

    ``var`` is the population variance, so ``rmse^2 = bias^2 + var``.  CIs
    are percentile intervals over ``n_boot`` resamples of the valid trials.

    Returns
    -------
    dict mapping ``(method, p)`` to MetricsReport
    """
    from .stats import percentile_interval

    groups = {}
    for r in records:
        groups.setdefault((r.method, r.p), []).append(r)
    out = {}
    for (method, p), recs in sorted(groups.items()):
        recs = sorted(recs, key=lambda r: (r.rep_index, r.beta_hat if r.valid else 0.0))
        betas = np.array([r.beta_hat for r in recs if r.valid], dtype=float)
        rep = MetricsReport(method, p, len(recs), betas.size, betas.size / len(recs))
        if betas.size:
            err = betas - beta0
            rep.bias, rep.var, rep.rmse = _moments(err)
            rng = derive_rng(seed, "summary", method, p)
            boots = np.array([
                _moments(err[rng.integers(0, err.size, err.size)]) for _ in range(n_boot)
            ])
            rep.bias_ci, rep.var_ci, rep.rmse_ci = (
                tuple(percentile_interval(boots[:, k], level)) for k in range(3)
            )
            rep.pos_ratio = float(np.mean(err > 0))
            rep.neg_ratio = float(np.mean(err < 0))
            rep.zero_ratio = float(np.mean(err == 0))
            q1, q3 = np.percentile(err, [25, 75])
            rep.iqr = float(q3 - q1)
        out[(method, p)] = rep
    return out
