"""Censored quantile estimation from forest weights.

For a query x and level τ the estimate is the candidate q minimising |S_n(q; x)|,

    S_n(q; x) = (1 - τ) Ĝ(q|x) - Σ_i w(X_i, x) 1(Y_i > q),

where Ĝ is a conditional survival curve of the censoring variable and the
candidates are the observed responses with positive weight. S_n is a step
function that only changes at those responses, so exhaustive enumeration of
the candidates is exact; bisection is not, because Ĝ also decreases.
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import List, NamedTuple, Optional, Sequence, Union

import numpy as np
import pandas as pd
from tqdm import tqdm

from crforest.config import ForestConfig, SplitRule, SurvivalSpec
from crforest.data_model import Dataset
from crforest.errors import ParameterError
from crforest.forest import Forest, fit
from crforest.survival import SurvivalCurve, censoring_curve, resolve_survival
from crforest.weights import WeightVector, forest_weights, forest_weights_batch

logger = logging.getLogger(__name__)

# --- Constants ---
SCORE_TIE_TOL = 1e-12
PREDICTION_COLUMNS = ["row", "tau", "q_hat", "score_abs", "degenerate"]
INTERVAL_COLUMNS = ["row", "level", "lower", "upper", "swapped"]


@dataclass(frozen=True)
class QuantileQuery:
    x: np.ndarray
    tau: float
    survival_kind: SurvivalSpec = SurvivalSpec()

    def __post_init__(self):
        check_tau(self.tau)


@dataclass(frozen=True)
class QuantileEstimate:
    q_hat: float
    score_abs: float
    candidates_evaluated: int
    degenerate: bool


class PredictionInterval(NamedTuple):
    lower: float
    upper: float
    swapped: bool = False


def check_tau(tau: float, name: str = "tau") -> float:
    if not 0.0 < tau < 1.0:
        raise ParameterError(f"{name} must lie in (0, 1), got {tau}")
    return tau


# ======================================================
# 🧮 Estimating equation
# ======================================================

def score(
    q: Union[float, np.ndarray], tau: float, g: SurvivalCurve, w: WeightVector, y: np.ndarray
) -> Union[float, np.ndarray]:
    """S_n(q) = (1 - τ) G(q) - Σ w_i 1(y_i > q), right-continuous in q."""
    q_arr = np.asarray(q, dtype=np.float64)
    ys = y[w.indices]
    above = (ys[None, :] > q_arr.reshape(-1, 1)) @ w.values
    out = (1.0 - tau) * np.asarray(g(q_arr)).reshape(-1) - above
    return float(out[0]) if q_arr.ndim == 0 else out.reshape(q_arr.shape)


def candidate_set(w: WeightVector, y: np.ndarray) -> np.ndarray:
    """Distinct responses carrying positive weight, ascending."""
    return np.unique(y[w.indices[w.values > 0]])


def _tail_weights(w: WeightVector, y: np.ndarray):
    """(candidates, Σ w·1(y > c) per candidate) in one pass over the support."""
    candidates, group = np.unique(y[w.indices], return_inverse=True)
    per_value = np.bincount(group, weights=w.values, minlength=candidates.size)
    suffix = np.cumsum(per_value[::-1])[::-1]
    tail = np.append(suffix[1:], 0.0)
    return candidates, tail


def _first_minimum(scores: np.ndarray, eligible: np.ndarray) -> int:
    best = float(scores[eligible].min())
    return int(np.flatnonzero(eligible & (scores <= best + SCORE_TIE_TOL))[0])


def solve(w: WeightVector, y: np.ndarray, g: SurvivalCurve, tau: float) -> QuantileEstimate:
    """argmin of |S_n| over the candidates where Ĝ > 0; near-ties go to the smallest q.

    Where Ĝ has vanished both terms of S_n are 0, so those candidates only
    count when no surviving candidate gets |S_n| ≤ (1 - τ)/2; the estimate is
    then flagged degenerate.
    """
    check_tau(tau)
    candidates, tail = _tail_weights(w, y)
    survival = np.asarray(g(candidates), dtype=np.float64).reshape(-1)
    scores = np.abs((1.0 - tau) * survival - tail)

    alive = survival > 0.0
    degenerate = False
    if alive.all():
        pick = _first_minimum(scores, alive)
    elif alive.any() and float(scores[alive].min()) <= (1.0 - tau) / 2.0:
        pick = _first_minimum(scores, alive)
    else:
        pick = _first_minimum(scores, np.ones_like(alive))
        degenerate = True
    return QuantileEstimate(
        q_hat=float(candidates[pick]),
        score_abs=float(scores[pick]),
        candidates_evaluated=int(candidates.size),
        degenerate=bool(degenerate),
    )


def estimate_quantile(
    f: Forest, d: Dataset, query: QuantileQuery, oob_index: Optional[int] = None
) -> QuantileEstimate:
    """Weights, censoring curve, then the candidate search, for one query."""
    w = forest_weights(f, query.x, exclude=oob_index)
    g = censoring_curve(d, w, query.survival_kind, query.x)
    return solve(w, d.y, g, query.tau)


def interval_taus(level: float):
    check_tau(level, "level")
    alpha = (1.0 - level) / 2.0
    return alpha, 1.0 - alpha


def _interval(w: WeightVector, d: Dataset, g: SurvivalCurve, level: float) -> PredictionInterval:
    lo_tau, hi_tau = interval_taus(level)
    lower = solve(w, d.y, g, lo_tau).q_hat
    upper = solve(w, d.y, g, hi_tau).q_hat
    if lower > upper:
        return PredictionInterval(lower=upper, upper=lower, swapped=True)
    return PredictionInterval(lower=lower, upper=upper)


def prediction_interval(
    f: Forest,
    d: Dataset,
    x: np.ndarray,
    level: float,
    survival: SurvivalSpec = SurvivalSpec(),
    oob_index: Optional[int] = None,
) -> PredictionInterval:
    """[q̂((1-level)/2), q̂(1-(1-level)/2)]; swapped (and flagged) if crossed."""
    w = forest_weights(f, x, exclude=oob_index)
    return _interval(w, d, censoring_curve(d, w, survival, x), level)


# ======================================================
# 📦 Batch prediction
# ======================================================

def _fan_out(fn, items, threads: int, progress: bool, desc: str) -> list:
    with ThreadPoolExecutor(max_workers=max(1, threads)) as pool:
        results = pool.map(fn, items)
        if progress:
            results = tqdm(results, total=len(items), desc=desc, leave=False)
        return list(results)


def predict_batch(
    f: Forest,
    d: Dataset,
    X: np.ndarray,
    taus: Sequence[float],
    survival: SurvivalSpec = SurvivalSpec(),
    threads: int = 1,
    oob: bool = False,
    progress: bool = False,
) -> pd.DataFrame:
    """One output row per (query row, τ): row,tau,q_hat,score_abs,degenerate."""
    taus = [check_tau(t) for t in taus]
    X = np.atleast_2d(X)
    survival = resolve_survival(d, survival)
    exclude = np.arange(X.shape[0]) if oob else None
    weights = forest_weights_batch(f, X, exclude=exclude)

    def predict_row(r: int) -> List[QuantileEstimate]:
        g = censoring_curve(d, weights[r], survival, X[r])
        return [solve(weights[r], d.y, g, tau) for tau in taus]

    estimates = _fan_out(predict_row, list(range(X.shape[0])), threads, progress, "queries")
    records = [
        (r, tau, est.q_hat, est.score_abs, est.degenerate)
        for r, row in enumerate(estimates)
        for tau, est in zip(taus, row)
    ]
    degenerate = sum(rec[4] for rec in records)
    if degenerate:
        logger.warning("%d of %d estimates flagged degenerate (censoring curve vanished)", degenerate, len(records))
    return pd.DataFrame.from_records(records, columns=PREDICTION_COLUMNS)


def predict_intervals(
    f: Forest,
    d: Dataset,
    X: np.ndarray,
    level: float,
    survival: SurvivalSpec = SurvivalSpec(),
    threads: int = 1,
    oob: bool = False,
    progress: bool = False,
) -> pd.DataFrame:
    """One output row per query row: row,level,lower,upper,swapped."""
    interval_taus(level)
    X = np.atleast_2d(X)
    survival = resolve_survival(d, survival)
    exclude = np.arange(X.shape[0]) if oob else None
    weights = forest_weights_batch(f, X, exclude=exclude)

    def interval_row(r: int) -> PredictionInterval:
        return _interval(weights[r], d, censoring_curve(d, weights[r], survival, X[r]), level)

    intervals = _fan_out(interval_row, list(range(X.shape[0])), threads, progress, "intervals")
    swapped = sum(iv.swapped for iv in intervals)
    if swapped:
        logger.warning("%d of %d intervals had crossed endpoints and were swapped", swapped, len(intervals))
    return pd.DataFrame.from_records(
        [(r, level, iv.lower, iv.upper, iv.swapped) for r, iv in enumerate(intervals)],
        columns=INTERVAL_COLUMNS,
    )


# ======================================================
# 🌲 Estimator facade
# ======================================================

class CensoredQuantileForest:
    """Train once, then predict censored conditional quantiles at new points."""

    def __init__(self, config: ForestConfig, survival: SurvivalSpec = SurvivalSpec()):
        self.config = config
        self.survival = survival
        self.forest: Optional[Forest] = None
        self.data: Optional[Dataset] = None

    @classmethod
    def with_defaults(cls, split_rule: SplitRule, p: int, survival: SurvivalSpec = SurvivalSpec(), **overrides):
        return cls(ForestConfig.default_for(split_rule, p, **overrides), survival)

    def fit(self, d: Dataset, threads: int = 1, progress: bool = False) -> "CensoredQuantileForest":
        self.forest = fit(d, self.config, threads=threads, progress=progress)
        self.data = d
        return self

    def _require_fitted(self):
        if self.forest is None or self.data is None:
            raise ParameterError("call fit() before predicting")

    def predict(self, X: np.ndarray, taus: Sequence[float], threads: int = 1, oob: bool = False) -> pd.DataFrame:
        self._require_fitted()
        return predict_batch(self.forest, self.data, X, taus, self.survival, threads=threads, oob=oob)

    def predict_interval(self, X: np.ndarray, level: float, threads: int = 1, oob: bool = False) -> pd.DataFrame:
        self._require_fitted()
        return predict_intervals(self.forest, self.data, X, level, self.survival, threads=threads, oob=oob)
