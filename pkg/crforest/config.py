"""Typed configuration models: forest, survival estimator and run metadata."""

import math
import re
from enum import Enum
from typing import Any, Dict, List, Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from crforest.errors import ConfigError

# --- Defaults ---
DEFAULT_GAMMA = 0.05
DEFAULT_GRF_TAUS = (0.1, 0.5, 0.9)
HONEST_SUBSAMPLE_FRACTION = 0.5


class SplitRule(str, Enum):
    CART_VARIANCE = "cart_variance"
    GRF_QUANTILE = "grf_quantile"


class ForestConfig(BaseModel):
    """Hyperparameters of one forest. Immutable once built."""

    model_config = ConfigDict(frozen=True, use_enum_values=False)

    num_trees: int = Field(500, gt=0)
    min_node_size: int = Field(5, gt=0)
    mtry: Optional[int] = Field(None, gt=0)
    subsample_fraction: float = Field(1.0, gt=0.0, le=1.0)
    honest: bool = False
    gamma: float = Field(DEFAULT_GAMMA, gt=0.0, le=0.5)
    split_rule: SplitRule = SplitRule.CART_VARIANCE
    grf_taus: List[float] = Field(default_factory=lambda: list(DEFAULT_GRF_TAUS))
    seed: int = Field(0, ge=0)
    prune_empty_leaves: bool = True

    @model_validator(mode="before")
    @classmethod
    def _rule_defaults(cls, data: Any) -> Any:
        # honest half-subsampling for grf, bootstrap for cart, unless given
        if isinstance(data, dict):
            data = dict(data)
            rule = SplitRule(data.get("split_rule", SplitRule.CART_VARIANCE))
            grf = rule is SplitRule.GRF_QUANTILE
            if data.get("subsample_fraction") is None:
                data["subsample_fraction"] = HONEST_SUBSAMPLE_FRACTION if grf else 1.0
            if data.get("honest") is None:
                data["honest"] = grf
        return data

    @field_validator("grf_taus")
    @classmethod
    def _taus_in_unit_interval(cls, taus: List[float]) -> List[float]:
        for tau in taus:
            if not 0.0 < tau < 1.0:
                raise ValueError(f"grf tau {tau} outside (0, 1)")
        return sorted(taus)

    @model_validator(mode="after")
    def _grf_needs_taus(self) -> "ForestConfig":
        if self.split_rule is SplitRule.GRF_QUANTILE and not self.grf_taus:
            raise ValueError("grf_taus must be nonempty for grf_quantile")
        return self

    @classmethod
    def build(cls, **kwargs: Any) -> "ForestConfig":
        """Validate keyword arguments, raising ConfigError instead of pydantic's error."""
        try:
            return cls(**kwargs)
        except ValidationError as e:
            raise ConfigError(f"invalid forest config: {e}") from e

    @classmethod
    def default_for(cls, split_rule: SplitRule, p: int, **overrides: Any) -> "ForestConfig":
        params = {"split_rule": split_rule, "mtry": cls.default_mtry(p)}
        params.update({k: v for k, v in overrides.items() if v is not None})
        return cls.build(**params)

    @staticmethod
    def default_mtry(p: int) -> int:
        return max(1, math.ceil(math.sqrt(p)))

    def resolved_mtry(self, p: int) -> int:
        mtry = self.mtry if self.mtry is not None else self.default_mtry(p)
        if mtry > p:
            raise ConfigError(f"mtry={mtry} exceeds the number of features p={p}")
        return mtry

    @property
    def bootstrap(self) -> bool:
        """Full-size resampling with replacement; only when not honest."""
        return self.subsample_fraction >= 1.0 and not self.honest


_KNN_PATTERN = re.compile(r"^km-knn(\d+)$")
_NW_PATTERN = re.compile(r"^beran-nw(?::(.+))?$")


class SurvivalSpec(BaseModel):
    """Which estimator supplies G(q|x) inside the estimating equation."""

    model_config = ConfigDict(frozen=True)

    kind: Literal["beran-forest", "beran-nw", "km-knn", "uncorrected"] = "beran-forest"
    k: Optional[int] = Field(None, gt=0)
    # beran-nw only; None means the pairwise-distance default
    bandwidth: Optional[float] = Field(None, gt=0.0)

    @model_validator(mode="after")
    def _knn_needs_k(self) -> "SurvivalSpec":
        if self.kind == "km-knn" and self.k is None:
            raise ValueError("km-knn needs a neighbour count k")
        return self

    @classmethod
    def parse(cls, text: str) -> "SurvivalSpec":
        """Parse 'beran-forest', 'uncorrected', 'km-knnN' (e.g. km-knn50) or 'beran-nw[:H]'."""
        text = text.strip().lower()
        knn = _KNN_PATTERN.match(text)
        nw = _NW_PATTERN.match(text)
        try:
            if knn:
                return cls(kind="km-knn", k=int(knn.group(1)))
            if nw:
                return cls(kind="beran-nw", bandwidth=nw.group(1))
            return cls(kind=text)
        except ValidationError as e:
            raise ConfigError(f"unknown survival estimator '{text}'") from e

    def label(self) -> str:
        if self.kind == "km-knn":
            return f"km-knn{self.k}"
        if self.kind == "beran-nw" and self.bandwidth is not None:
            return f"beran-nw:{self.bandwidth:g}"
        return self.kind


class RunConfig(BaseModel):
    """Fully resolved parameters of one CLI invocation."""

    command: str
    params: Dict[str, Any]
    version: str

    def to_json(self) -> str:
        return self.model_dump_json(indent=2)
