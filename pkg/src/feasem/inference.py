"""
Percentile bootstrap for the structural coefficient.

Likelihood-ratio and Wald tests need a nonsingular joint covariance, so
uncertainty is assessed by refitting the whole pipeline on row resamples.
"""
import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import NumericError, PreconditionError, StageError
from .rng import derive_rng, derive_seed
from .selector import FitConfig, fit_pipeline
from .stats import percentile_interval

logger = logging.getLogger(__name__)


@dataclass
class BootstrapSummary:
    """
    Bootstrap distribution of ``beta`` and its percentile interval.

    ``p_value`` is the approximate two-sided tail proportion
    ``2 min(#{b <= 0}, #{b >= 0}) / B`` capped at 1.
    """

    beta_hats: list
    mean: float
    sd: float
    ci_low: float
    ci_high: float
    level: float
    significant: bool
    p_value: float
    n_requested: int
    n_failed: int = 0
    failures: list = field(default_factory=list)

    @classmethod
    def from_draws(cls, beta_hats, level=0.95, n_requested=None, failures=()):
        b = np.asarray(beta_hats, dtype=float)
        if b.size == 0:
            raise PreconditionError("no bootstrap estimates")
        lo, hi = percentile_interval(b, level)
        tail = min(int(np.sum(b <= 0)), int(np.sum(b >= 0)))
        return cls(
            beta_hats=[float(v) for v in b],
            mean=float(np.mean(b)),
            sd=float(np.std(b, ddof=1)) if b.size > 1 else 0.0,
            ci_low=lo, ci_high=hi, level=float(level),
            significant=not (lo <= 0.0 <= hi),
            p_value=min(1.0, 2.0 * tail / b.size),
            n_requested=int(n_requested if n_requested is not None else b.size),
            n_failed=len(failures), failures=list(failures),
        )

    def to_dict(self):
        return asdict(self)


def bootstrap_beta(data, config=None, B=100, level=0.95, seed=0):
    """
    Refit the pipeline on ``B`` row resamples.

    Replicate ``b`` draws rows from ``(seed, "boot", b)`` and fits with seed
    ``derive_seed(seed, "boot-fit", b)``.  Failed replicates are excluded
    and listed; more than half failing raises ``NumericError``.
    """
    if B < 10:
        raise PreconditionError(f"B must be at least 10, got {B}")
    cfg = config or FitConfig()
    betas, failures = [], []
    for b in range(B):
        rows = derive_rng(seed, "boot", b).integers(0, data.n, size=data.n)
        try:
            res = fit_pipeline(data.take(rows), cfg.replace(seed=derive_seed(seed, "boot-fit", b)))
        except StageError as exc:
            logger.debug("bootstrap replicate %d failed: %s", b, exc)
            failures.append({"replicate": b, "stage": exc.stage, "error": str(exc)})
            continue
        betas.append(res.beta_hat)
    if len(failures) * 2 > B:
        raise NumericError(f"{len(failures)} of {B} bootstrap replicates failed")
    return BootstrapSummary.from_draws(betas, level, B, failures)
