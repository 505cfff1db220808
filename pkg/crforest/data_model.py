"""Dataset representation, validation, CSV ingestion and train/test splitting.

CSV layout: header ``x0,...,x{p-1},y,delta[,t]``; ``delta`` is 1 when the event
was observed (T <= C) and 0 when the row is censored; ``t`` optionally carries
the latent response of simulated data.
"""

import logging
import math
from dataclasses import dataclass
from typing import List, Optional, Tuple

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict, Field, ValidationError

from crforest.errors import DataValidationError, ParameterError, ParseError, SchemaError
from crforest.utils import write_table

logger = logging.getLogger(__name__)

# Cap on issues listed per invariant.
MAX_ISSUES_PER_CHECK = 20


@dataclass(frozen=True, eq=False)
class Dataset:
    features: np.ndarray
    y: np.ndarray
    delta: np.ndarray
    latent_t: Optional[np.ndarray] = None

    def __post_init__(self):
        # arrays are copied and made read-only
        object.__setattr__(self, "features", _frozen(np.atleast_2d(np.asarray(self.features, dtype=np.float64))))
        object.__setattr__(self, "y", _frozen(np.asarray(self.y, dtype=np.float64).ravel()))
        object.__setattr__(self, "delta", _frozen(np.asarray(self.delta).ravel().astype(np.int64)))
        if self.latent_t is not None:
            object.__setattr__(self, "latent_t", _frozen(np.asarray(self.latent_t, dtype=np.float64).ravel()))

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def p(self) -> int:
        return self.features.shape[1]

    @property
    def censoring_fraction(self) -> float:
        return float(np.mean(self.delta == 0))

    def subset(self, indices: np.ndarray) -> "Dataset":
        indices = np.asarray(indices, dtype=np.int64)
        return Dataset(
            features=self.features[indices],
            y=self.y[indices],
            delta=self.delta[indices],
            latent_t=None if self.latent_t is None else self.latent_t[indices],
        )

    def oracle(self) -> "Dataset":
        """The same rows with the latent response observed and nothing censored."""
        if self.latent_t is None:
            raise ParameterError("oracle view needs a latent response column")
        return Dataset(features=self.features, y=self.latent_t, delta=np.ones(self.n, dtype=np.int64), latent_t=self.latent_t)


def _frozen(arr: np.ndarray) -> np.ndarray:
    arr = np.array(arr, copy=True)
    arr.setflags(write=False)
    return arr


class SplitSpec(BaseModel):
    model_config = ConfigDict(frozen=True)

    train_fraction: float = Field(0.8, gt=0.0, lt=1.0)
    seed: int = Field(0, ge=0)


# ======================================================
# ✅ Validation
# ======================================================

def _capped(issues: List[str], found: List[str]) -> None:
    issues.extend(found[:MAX_ISSUES_PER_CHECK])
    if len(found) > MAX_ISSUES_PER_CHECK:
        issues.append(f"... and {len(found) - MAX_ISSUES_PER_CHECK} more")


def collect_issues(d: Dataset) -> List[str]:
    """Returns every violated Dataset invariant, each naming its index."""
    issues: List[str] = []
    if d.features.ndim != 2 or d.n < 1 or d.p < 1:
        return [f"features must be an n x p matrix with n, p >= 1, got shape {d.features.shape}"]
    n = d.n
    for name, vec in (("y", d.y), ("delta", d.delta)):
        if vec.shape[0] != n:
            issues.append(f"{name} has length {vec.shape[0]}, expected {n}")
    if d.latent_t is not None and d.latent_t.shape[0] != n:
        issues.append(f"latent_t has length {d.latent_t.shape[0]}, expected {n}")
    if issues:
        return issues

    rows, cols = np.nonzero(~np.isfinite(d.features))
    _capped(issues, [f"features[{i}][{j}] is not finite" for i, j in zip(rows, cols)])
    _capped(issues, [f"y[{i}] is not finite" for i in np.flatnonzero(~np.isfinite(d.y))])
    _capped(issues, [f"delta[{i}]={d.delta[i]} not in {{0,1}}" for i in np.flatnonzero((d.delta != 0) & (d.delta != 1))])

    if d.latent_t is not None:
        t = d.latent_t
        _capped(issues, [f"latent_t[{i}] is not finite" for i in np.flatnonzero(~np.isfinite(t))])
        _capped(issues, [f"y[{i}] > latent_t[{i}]" for i in np.flatnonzero(d.y > t)])
        observed = d.delta == 1
        _capped(issues, [f"delta[{i}]=1 but y[{i}] != latent_t[{i}]" for i in np.flatnonzero(observed & (d.y != t))])
        _capped(issues, [f"delta[{i}]=0 but y[{i}] == latent_t[{i}]" for i in np.flatnonzero(~observed & (d.y == t))])
    return issues


def validate(d: Dataset) -> None:
    issues = collect_issues(d)
    if issues:
        raise DataValidationError(issues)


# ======================================================
# 📄 CSV ingestion
# ======================================================

def expected_columns(p: int, has_latent: bool) -> List[str]:
    return [f"x{j}" for j in range(p)] + ["y", "delta"] + (["t"] if has_latent else [])


def load_csv(path: str, has_latent: Optional[bool] = False) -> Dataset:
    """Reads a dataset in the positional x0..x{p-1},y,delta[,t] layout.

    has_latent=None takes the latent column from the header when it ends in `t`.
    """
    try:
        frame = pd.read_csv(path, dtype=str, keep_default_na=False, encoding="utf-8")
    except (pd.errors.ParserError, pd.errors.EmptyDataError, UnicodeDecodeError) as e:
        raise SchemaError(f"{path}: unreadable CSV: {e}") from e

    columns = [c.strip() for c in frame.columns]
    if has_latent is None:
        has_latent = bool(columns) and columns[-1] == "t"
    p = sum(1 for c in columns if c.startswith("x"))
    expected = expected_columns(p, has_latent)
    if p < 1 or columns != expected:
        raise SchemaError(f"{path}: header {columns} does not match expected {expected}")
    frame.columns = columns

    parsed = {column: _parse_column(frame[column], column) for column in columns}
    d = Dataset(
        features=np.column_stack([parsed[f"x{j}"] for j in range(p)]),
        y=parsed["y"],
        delta=_delta_column(parsed["delta"]),
        latent_t=parsed["t"] if has_latent else None,
    )
    validate(d)
    logger.info("Loaded %s: n=%d p=%d censored=%.3f", path, d.n, d.p, d.censoring_fraction)
    return d


def _parse_column(column: pd.Series, name: str) -> np.ndarray:
    try:
        return column.astype(np.float64).to_numpy()
    except ValueError:
        coerced = pd.to_numeric(column, errors="coerce")
        bad = coerced.isna() & ~column.str.strip().str.lower().eq("nan")
        row = int(np.flatnonzero(bad.to_numpy())[0])
        raise ParseError(f"row {row}, column '{name}': non-numeric value {column.iloc[row]!r}", row=row, column=name)


def _delta_column(values: np.ndarray) -> np.ndarray:
    # non-integral codes are reported by validate with their row
    bad = np.flatnonzero(~np.isfinite(values) | (values != np.round(values)))
    if bad.size:
        raise DataValidationError([f"delta[{i}]={values[i]} not in {{0,1}}" for i in bad[:MAX_ISSUES_PER_CHECK]])
    return values.astype(np.int64)


def to_frame(d: Dataset) -> pd.DataFrame:
    has_latent = d.latent_t is not None
    columns = expected_columns(d.p, has_latent)
    frame = pd.DataFrame(d.features, columns=columns[: d.p])
    frame["y"] = d.y
    frame["delta"] = d.delta.astype(np.int64)
    if has_latent:
        frame["t"] = d.latent_t
    return frame


def save_csv(d: Dataset, path: str) -> None:
    write_table(to_frame(d), path)


# ======================================================
# ✂️ Splitting
# ======================================================

def round_half_away(x: float) -> int:
    return int(math.copysign(math.floor(abs(x) + 0.5), x))


def split_indices(n: int, spec: SplitSpec) -> Tuple[np.ndarray, np.ndarray]:
    """Disjoint, exhaustive, seed-deterministic (train, test) index sets, each sorted."""
    if n < 2:
        raise ParameterError(f"cannot split a dataset of n={n}")
    n_train = round_half_away(spec.train_fraction * n)
    if not 0 < n_train < n:
        raise ParameterError(f"train_fraction={spec.train_fraction} leaves an empty side for n={n}")
    perm = np.random.Generator(np.random.PCG64(spec.seed)).permutation(n)
    return np.sort(perm[:n_train]), np.sort(perm[n_train:])


def split(d: Dataset, spec: SplitSpec) -> Tuple[Dataset, Dataset]:
    train_idx, test_idx = split_indices(d.n, spec)
    return d.subset(train_idx), d.subset(test_idx)


def make_split_spec(train_fraction: float, seed: int) -> SplitSpec:
    try:
        return SplitSpec(train_fraction=train_fraction, seed=seed)
    except ValidationError as e:
        raise ParameterError(f"train_fraction must lie in (0, 1), got {train_fraction}") from e
