"""Evaluation metrics: quantile loss, Harrell's C-index, interval coverage."""

import math
from typing import Callable, Optional, Sequence

import numpy as np
from pydantic import BaseModel, Field

from crforest.errors import ParameterError
from crforest.survival import SurvivalCurve


class MetricReport(BaseModel):
    name: str
    value: float
    n_evaluated: int = Field(ge=1)
    std_error: Optional[float] = None


def _same_length(*arrays: np.ndarray) -> int:
    lengths = {a.shape[0] for a in arrays}
    if len(lengths) != 1:
        raise ParameterError(f"length mismatch: {sorted(lengths)}")
    n = lengths.pop()
    if n == 0:
        raise ParameterError("nothing to evaluate")
    return n


def check_loss(u: np.ndarray, tau: float) -> np.ndarray:
    """ρ_τ(u) = u (τ - 1{u < 0})."""
    return u * (tau - (u < 0.0))


def quantile_loss(q_hats: Sequence[float], t_true: Sequence[float], tau: float) -> float:
    q, t = np.asarray(q_hats, dtype=np.float64), np.asarray(t_true, dtype=np.float64)
    _same_length(q, t)
    if not 0.0 < tau < 1.0:
        raise ParameterError(f"tau must lie in (0, 1), got {tau}")
    return float(np.mean(check_loss(t - q, tau)))


def c_index(y: Sequence[float], delta: Sequence[int], risk: Sequence[float]) -> float:
    """Harrell's concordance over pairs with δ_i = 1 and y_i < y_j; risk ties count 1/2."""
    y, delta, risk = (np.asarray(a, dtype=np.float64) for a in (y, delta, risk))
    _same_length(y, delta, risk)
    concordant = 0.0
    comparable = 0
    for i in np.flatnonzero(delta == 1):
        later = y > y[i]
        count = int(later.sum())
        if not count:
            continue
        comparable += count
        concordant += float(np.sum(risk[i] > risk[later])) + 0.5 * float(np.sum(risk[i] == risk[later]))
    if comparable == 0:
        raise ParameterError("no comparable pairs for the C-index")
    return concordant / comparable


def risk_from_quantiles(q_hats: Sequence[float]) -> np.ndarray:
    """Longer predicted survival means lower risk."""
    return -np.asarray(q_hats, dtype=np.float64)


def interval_coverage(intervals: Sequence[Sequence[float]], t_true: Sequence[float]) -> float:
    """Fraction of i with lo_i <= t_i <= hi_i (closed endpoints)."""
    bounds = np.asarray(intervals, dtype=np.float64).reshape(len(intervals), -1)
    t = np.asarray(t_true, dtype=np.float64)
    _same_length(bounds, t)
    return float(np.mean((bounds[:, 0] <= t) & (t <= bounds[:, 1])))


def curve_sup_distance(curve: SurvivalCurve, truth: Callable[[np.ndarray], np.ndarray], grid: Sequence[float]) -> float:
    """sup |Ĝ(q) - G(q)| over grid points where the estimate has not degenerated to 0."""
    grid = np.asarray(grid, dtype=np.float64)
    estimate = np.asarray(curve(grid)).reshape(-1)
    alive = estimate > 0.0
    if not alive.any():
        raise ParameterError("the estimated curve is zero on the whole grid")
    return float(np.max(np.abs(estimate[alive] - np.asarray(truth(grid[alive])).reshape(-1))))


# ======================================================
# 📋 Reports
# ======================================================

def quantile_loss_report(q_hats, t_true, tau: float) -> MetricReport:
    q, t = np.asarray(q_hats, dtype=np.float64), np.asarray(t_true, dtype=np.float64)
    n = _same_length(q, t)
    losses = check_loss(t - q, tau)
    std_error = float(np.std(losses, ddof=1) / math.sqrt(n)) if n > 1 else None
    return MetricReport(name=f"quantile_loss@{tau:g}", value=quantile_loss(q, t, tau), n_evaluated=n, std_error=std_error)


def c_index_report(y, delta, q_hats, tau: float) -> MetricReport:
    value = c_index(y, delta, risk_from_quantiles(q_hats))
    return MetricReport(name=f"c_index@{tau:g}", value=value, n_evaluated=len(y))


def coverage_report(intervals, t_true, level: float) -> MetricReport:
    value = interval_coverage(intervals, t_true)
    n = len(t_true)
    return MetricReport(
        name=f"coverage@{level:g}", value=value, n_evaluated=n, std_error=math.sqrt(value * (1.0 - value) / n)
    )
