"""Quantile rules used for tolerance calibration and percentile intervals."""
import math

import numpy as np


def upper_quantile(values, alpha):
    """Empirical ``(1 - alpha)``-quantile as ``inf{t : F_B(t) >= 1 - alpha}``.

    This is the inverse of the empirical distribution function: the
    ``ceil((1 - alpha) * B)``-th order statistic (at least the first).
    ``alpha = 0`` returns the maximum.
    """
    v = np.sort(np.asarray(values, dtype=float).ravel())
    if v.size == 0:
        raise ValueError("quantile of an empty sample")
    if not 0.0 <= alpha < 1.0:
        raise ValueError(f"alpha must lie in [0, 1), got {alpha}")
    # guard against 0.95 * 20 = 19.000000000000004 style round-up
    k = math.ceil(round((1.0 - alpha) * v.size, 9))
    return float(v[max(k, 1) - 1])


def percentile_interval(values, level=0.95):
    """Two-sided percentile interval with linear interpolation between order statistics."""
    v = np.asarray(values, dtype=float).ravel()
    if v.size == 0:
        raise ValueError("percentile interval of an empty sample")
    if not 0.0 < level < 1.0:
        raise ValueError(f"level must lie in (0, 1), got {level}")
    tail = (1.0 - level) / 2.0
    lo, hi = np.quantile(v, [tail, 1.0 - tail], method="linear")
    return float(lo), float(hi)
