"""Seeded generators for the simulation designs and a censoring injector.

Every generator draws from ``numpy.random.Generator(PCG64(seed))`` in a fixed
order: the feature matrix (uniforms, row-major), then n standard normals for
the noise, then n uniforms for the censoring variable. Exponentials are
rate-parameterised and drawn by inverse CDF, C = -log(1 - U) / rate.
"""

import logging
import math
from typing import Literal, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator
from scipy.stats import norm

from crforest.data_model import Dataset, validate
from crforest.errors import ParameterError

logger = logging.getLogger(__name__)

# --- Design constants ---
AFT_NOISE_SD = 0.3
AFT_CENSOR_RATE = 0.08
HETERO_MEAN = 10.0
HETERO_CENSOR_SHIFT = 8.0
HETERO_CENSOR_RATE = 0.10
SINE_BASE = 2.5
SINE_NOISE_SD = 0.3
SINE_CENSOR_SHIFT = 1.0
SINE_CENSOR_RATE = 0.2
DEFAULT_RATE_MULTIPLIER = 2.0

Model = Literal["aft", "hetero", "sine"]


class SimSpec(BaseModel):
    model_config = ConfigDict(frozen=True)

    model: Model
    n: int = Field(gt=0)
    p: int = Field(1, ge=1)
    seed: int = Field(0, ge=0)

    @model_validator(mode="after")
    def _sine_is_univariate(self) -> "SimSpec":
        if self.model == "sine" and self.p != 1:
            raise ValueError("the sine design has exactly one feature (p = 1)")
        return self

    @classmethod
    def build(cls, **kwargs) -> "SimSpec":
        try:
            return cls(**kwargs)
        except ValidationError as e:
            raise ParameterError(f"invalid simulation spec: {e}") from e


def _rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(seed))


def exponential(u: np.ndarray, rate: float) -> np.ndarray:
    return -np.log1p(-u) / rate


def _censored(features: np.ndarray, t: np.ndarray, c: np.ndarray) -> Dataset:
    d = Dataset(features=features, y=np.minimum(t, c), delta=(t <= c).astype(np.int64), latent_t=t)
    validate(d)
    return d


def _expect(spec: SimSpec, model: str) -> None:
    if spec.model != model:
        raise ParameterError(f"spec is for model '{spec.model}', not '{model}'")


def gen_aft(spec: SimSpec) -> Dataset:
    """log T = x0 + N(0, 0.3²), X ~ U[0,2]^p, C ~ Exp(rate 0.08)."""
    _expect(spec, "aft")
    rng = _rng(spec.seed)
    X = 2.0 * rng.random((spec.n, spec.p))
    t = np.exp(X[:, 0] + AFT_NOISE_SD * rng.standard_normal(spec.n))
    c = exponential(rng.random(spec.n), AFT_CENSOR_RATE)
    return _censored(X, t, c)


def gen_hetero(spec: SimSpec) -> Dataset:
    """T ~ N(10, (1 + 1{x0 > 0})²), X ~ U[-1,1]^p, C ~ 8 + Exp(rate 0.10)."""
    _expect(spec, "hetero")
    rng = _rng(spec.seed)
    X = 2.0 * rng.random((spec.n, spec.p)) - 1.0
    sd = 1.0 + (X[:, 0] > 0.0)
    t = HETERO_MEAN + sd * rng.standard_normal(spec.n)
    c = HETERO_CENSOR_SHIFT + exponential(rng.random(spec.n), HETERO_CENSOR_RATE)
    return _censored(X, t, c)


def gen_sine(spec: SimSpec) -> Dataset:
    """T = 2.5 + sin X + N(0, 0.3²), X ~ U(0, 2π), C ~ 1 + sin X + Exp(rate 0.2)."""
    _expect(spec, "sine")
    rng = _rng(spec.seed)
    X = 2.0 * math.pi * rng.random((spec.n, 1))
    wave = np.sin(X[:, 0])
    t = SINE_BASE + wave + SINE_NOISE_SD * rng.standard_normal(spec.n)
    c = SINE_CENSOR_SHIFT + wave + exponential(rng.random(spec.n), SINE_CENSOR_RATE)
    return _censored(X, t, c)


GENERATORS = {"aft": gen_aft, "hetero": gen_hetero, "sine": gen_sine}


def generate(spec: SimSpec) -> Dataset:
    d = GENERATORS[spec.model](spec)
    logger.debug("Generated %s n=%d p=%d seed=%d censored=%.3f", spec.model, d.n, d.p, spec.seed, d.censoring_fraction)
    return d


def inject_censoring(d: Dataset, rate_multiplier: float = DEFAULT_RATE_MULTIPLIER, seed: int = 0) -> Dataset:
    """Censors fully observed responses with C ~ Exp(rate = 1 / (multiplier · ȳ))."""
    if np.any(d.delta == 0):
        raise ParameterError("censoring can only be injected into fully observed responses")
    if rate_multiplier <= 0.0:
        raise ParameterError(f"rate multiplier must be positive, got {rate_multiplier}")
    mean_y = float(np.mean(d.y))
    if mean_y <= 0.0:
        raise ParameterError(f"mean response must be positive to set the censoring rate, got {mean_y}")
    c = exponential(_rng(seed).random(d.n), 1.0 / (rate_multiplier * mean_y))
    return _censored(d.features, np.array(d.y), c)


# ======================================================
# 🎯 Closed-form truths of the designs
# ======================================================

def _column(x: Union[np.ndarray, float]) -> np.ndarray:
    """First feature of one point or of each row."""
    arr = np.asarray(x, dtype=np.float64)
    return arr[..., 0] if arr.ndim >= 1 else arr


def true_quantile(model: str, x: Union[np.ndarray, float], tau: float) -> Union[float, np.ndarray]:
    """Conditional τ-quantile of the latent T at x (one point or rows of a matrix)."""
    z = norm.ppf(tau)
    x0 = _column(x)
    if model == "aft":
        out = np.exp(x0 + AFT_NOISE_SD * z)
    elif model == "hetero":
        out = HETERO_MEAN + (1.0 + (x0 > 0.0)) * z
    elif model == "sine":
        out = SINE_BASE + np.sin(x0) + SINE_NOISE_SD * z
    else:
        raise ParameterError(f"unknown model '{model}'")
    return float(out) if np.ndim(out) == 0 else out


def true_latent_survival(model: str, x: np.ndarray, q: Union[float, np.ndarray]) -> np.ndarray:
    """P(T > q | x)."""
    x0 = float(_column(x))
    q = np.asarray(q, dtype=np.float64)
    if model == "aft":
        with np.errstate(divide="ignore"):
            return np.where(q > 0.0, norm.sf((np.log(np.maximum(q, 1e-300)) - x0) / AFT_NOISE_SD), 1.0)
    if model == "hetero":
        return norm.sf((q - HETERO_MEAN) / (1.0 + (x0 > 0.0)))
    if model == "sine":
        return norm.sf((q - SINE_BASE - math.sin(x0)) / SINE_NOISE_SD)
    raise ParameterError(f"unknown model '{model}'")


def true_censoring_survival(model: str, x: np.ndarray, q: Union[float, np.ndarray]) -> np.ndarray:
    """P(C > q | x)."""
    x0 = float(_column(x))
    q = np.asarray(q, dtype=np.float64)
    if model == "aft":
        shift, rate = 0.0, AFT_CENSOR_RATE
    elif model == "hetero":
        shift, rate = HETERO_CENSOR_SHIFT, HETERO_CENSOR_RATE
    elif model == "sine":
        shift, rate = SINE_CENSOR_SHIFT + math.sin(x0), SINE_CENSOR_RATE
    else:
        raise ParameterError(f"unknown model '{model}'")
    return np.where(q < shift, 1.0, np.exp(-rate * (q - shift)))


def true_score(model: str, x: np.ndarray, q: Union[float, np.ndarray], tau: float) -> np.ndarray:
    """Population estimating equation S(q) = (1 - τ) G(q|x) - P(Y > q | x)."""
    g = true_censoring_survival(model, x, q)
    return (1.0 - tau) * g - true_latent_survival(model, x, q) * g
