"""Conditional survival curves G(q|x) of the censoring variable.

Three product-limit estimators, all evaluated by `product_limit`:

* ``beran_nw``: Beran's estimator with Nadaraya-Watson kernel weights;
* ``km_knn``: Kaplan-Meier on the k largest forest weights;
* ``beran_forest``: Beran's estimator with the forest weights themselves.

Only censored rows (delta == 0) produce jumps. Tied censoring times share one
factor, 1 - (tied censored weight) / (weight at risk), with the risk set taken
before the tied rows are removed.
"""

import logging
from dataclasses import dataclass
from typing import Literal, Optional, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field
from scipy.spatial.distance import pdist

from crforest.config import SurvivalSpec
from crforest.data_model import Dataset
from crforest.errors import BandwidthError, ParameterError
from crforest.weights import WeightVector

logger = logging.getLogger(__name__)

DEFAULT_BANDWIDTH_QUANTILE = 0.10
# pairwise distances are computed on at most this many rows
BANDWIDTH_SAMPLE_ROWS = 2000


@dataclass(frozen=True, eq=False)
class SurvivalCurve:
    """Right-continuous nonincreasing step function; 1 before the first jump."""

    jump_times: np.ndarray
    values: np.ndarray

    @classmethod
    def constant_one(cls) -> "SurvivalCurve":
        return cls(jump_times=np.empty(0), values=np.empty(0))

    def __call__(self, q: Union[float, np.ndarray]) -> Union[float, np.ndarray]:
        q_arr = np.asarray(q, dtype=np.float64)
        pos = np.searchsorted(self.jump_times, q_arr, side="right")
        padded = np.concatenate(([1.0], self.values))
        out = padded[pos]
        return float(out) if out.ndim == 0 else out

    @property
    def num_jumps(self) -> int:
        return int(self.jump_times.size)

    def vanishes_at(self) -> float:
        """First q with G(q) = 0, or +inf when the curve never reaches 0."""
        zero = np.flatnonzero(self.values <= 0.0)
        return float(self.jump_times[zero[0]]) if zero.size else float("inf")

    def is_valid(self) -> bool:
        v, t = self.values, self.jump_times
        return (
            v.shape == t.shape
            and bool(np.all(np.diff(t) > 0))
            and bool(np.all(np.diff(v) <= 0))
            and bool(np.all((v >= 0.0) & (v <= 1.0)))
        )


def product_limit(y: np.ndarray, delta: np.ndarray, weights: np.ndarray) -> SurvivalCurve:
    """Weighted product-limit estimate of the censoring survival function."""
    keep = weights > 0
    y, delta, weights = y[keep], delta[keep], weights[keep]
    if y.size == 0 or not np.any(delta == 0):
        return SurvivalCurve.constant_one()

    order = np.argsort(y, kind="stable")
    ys, ds, ws = y[order], delta[order], weights[order]
    times, first, group = np.unique(ys, return_index=True, return_inverse=True)
    at_risk = np.cumsum(ws[::-1])[::-1][first]
    censored = np.bincount(group, weights=np.where(ds == 0, ws, 0.0), minlength=times.size)

    jumps = censored > 0
    factors = 1.0 - censored[jumps] / at_risk[jumps]
    values = np.clip(np.cumprod(np.clip(factors, 0.0, 1.0)), 0.0, 1.0)
    return SurvivalCurve(jump_times=times[jumps], values=values)


# ======================================================
# 📉 Estimators
# ======================================================

class KernelSpec(BaseModel):
    model_config = ConfigDict(frozen=True)

    bandwidth: float = Field(gt=0.0)
    shape: Literal["box", "gaussian"] = "box"

    def evaluate(self, u: np.ndarray) -> np.ndarray:
        if self.shape == "box":
            return (u <= 1.0).astype(np.float64)
        return np.exp(-0.5 * u ** 2)


def default_bandwidth(features: np.ndarray, quantile: float = DEFAULT_BANDWIDTH_QUANTILE) -> float:
    """The given quantile of pairwise Euclidean distances (diagnostic default)."""
    n = features.shape[0]
    if n < 2:
        raise ParameterError("a bandwidth needs at least two rows")
    if n > BANDWIDTH_SAMPLE_ROWS:
        features = features[np.linspace(0, n - 1, BANDWIDTH_SAMPLE_ROWS).astype(np.int64)]
    bandwidth = float(np.quantile(pdist(features), quantile))
    if bandwidth <= 0.0:
        raise BandwidthError("pairwise distance quantile is zero; supply a bandwidth")
    return bandwidth


def nadaraya_watson_weights(d: Dataset, x: np.ndarray, kernel: KernelSpec) -> np.ndarray:
    u = np.linalg.norm(d.features - np.asarray(x, dtype=np.float64)[None, :], axis=1) / kernel.bandwidth
    mass = kernel.evaluate(u)
    total = mass.sum()
    if total <= 0.0:
        raise BandwidthError(f"no kernel mass at the query point with bandwidth {kernel.bandwidth}")
    return mass / total


def beran_nw(d: Dataset, x: np.ndarray, kernel: KernelSpec) -> SurvivalCurve:
    return product_limit(d.y, d.delta, nadaraya_watson_weights(d, x, kernel))


def nearest_by_weight(w: WeightVector, k: int) -> np.ndarray:
    """The k indices with the largest weights (ties to the lower index), ascending."""
    if k > w.support_size:
        raise ParameterError(f"k={k} exceeds the weight support size {w.support_size}")
    order = np.lexsort((w.indices, -w.values))
    return np.sort(w.indices[order[:k]])


def km_knn(d: Dataset, w: WeightVector, k: int) -> SurvivalCurve:
    neighbours = nearest_by_weight(w, k)
    return product_limit(d.y[neighbours], d.delta[neighbours], np.full(k, 1.0 / k))


def beran_forest(d: Dataset, w: WeightVector) -> SurvivalCurve:
    return product_limit(d.y[w.indices], d.delta[w.indices], w.values)


def resolve_survival(d: Dataset, spec: SurvivalSpec) -> SurvivalSpec:
    """Pins the default kernel bandwidth for 'beran-nw' so a batch computes it once."""
    if spec.kind == "beran-nw" and spec.bandwidth is None:
        bandwidth = default_bandwidth(d.features)
        logger.info("beran-nw bandwidth defaulted to %.4g", bandwidth)
        return spec.model_copy(update={"bandwidth": bandwidth})
    return spec


def censoring_curve(
    d: Dataset, w: WeightVector, spec: SurvivalSpec, x: Optional[np.ndarray] = None
) -> SurvivalCurve:
    """G(q|x) for the configured estimator; 'uncorrected' is the constant 1.

    'beran-nw' smooths over the features instead of the forest weights and so
    needs the query point x.
    """
    if spec.kind == "beran-forest":
        return beran_forest(d, w)
    if spec.kind == "km-knn":
        return km_knn(d, w, spec.k)
    if spec.kind == "beran-nw":
        if x is None:
            raise ParameterError("beran-nw needs the query point")
        spec = resolve_survival(d, spec)
        return beran_nw(d, x, KernelSpec(bandwidth=spec.bandwidth))
    return SurvivalCurve.constant_one()
