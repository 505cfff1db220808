"""Repeated-simulation sweep over node sizes comparing censored and naive forests.

Methods, all sharing this package's forests and solver:

============== ============== ============== ======================
method         split rule     trained on     censoring correction
============== ============== ============== ======================
crf-quantile   cart_variance  observed y     beran-forest
crf-generalized grf_quantile  observed y     beran-forest
qrf            cart_variance  observed y     none (Ĝ ≡ 1)
grf            grf_quantile   observed y     none
qrf-oracle     cart_variance  latent t       none
grf-oracle     grf_quantile   latent t       none
============== ============== ============== ======================
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Dict, List, Optional, Tuple

import numpy as np
import pandas as pd
from pydantic import BaseModel, Field, ValidationError, field_validator, model_validator
from tqdm import tqdm

from crforest.config import ForestConfig, SplitRule, SurvivalSpec
from crforest.cqrf import predict_batch, predict_intervals
from crforest.data_model import Dataset, make_split_spec, split
from crforest.errors import ConfigError, ParameterError
from crforest.forest import Forest, fit
from crforest.metrics import c_index, interval_coverage, quantile_loss, risk_from_quantiles
from crforest.simgen import SimSpec, generate, inject_censoring, true_quantile

logger = logging.getLogger(__name__)

BERAN = SurvivalSpec(kind="beran-forest")
NAIVE = SurvivalSpec(kind="uncorrected")

# method -> (split rule, train on latent t, survival estimator)
METHODS: Dict[str, Tuple[SplitRule, bool, SurvivalSpec]] = {
    "crf-quantile": (SplitRule.CART_VARIANCE, False, BERAN),
    "crf-generalized": (SplitRule.GRF_QUANTILE, False, BERAN),
    "qrf": (SplitRule.CART_VARIANCE, False, NAIVE),
    "grf": (SplitRule.GRF_QUANTILE, False, NAIVE),
    "qrf-oracle": (SplitRule.CART_VARIANCE, True, NAIVE),
    "grf-oracle": (SplitRule.GRF_QUANTILE, True, NAIVE),
}
DEFAULT_P = {"aft": 20, "hetero": 40, "sine": 1}


class BenchmarkConfig(BaseModel):
    model: Optional[str] = "aft"
    n: int = Field(1000, gt=1)
    p: Optional[int] = Field(None, ge=1)
    n_test: int = Field(200, gt=0)
    trees: int = Field(500, gt=0)
    node_sizes: List[int] = Field(default_factory=lambda: [10, 20, 40, 80])
    taus: List[float] = Field(default_factory=lambda: [0.3, 0.5, 0.7])
    reps: int = Field(10, gt=0)
    methods: List[str] = Field(default_factory=lambda: list(METHODS))
    mtry: Optional[int] = Field(None, gt=0)
    level: Optional[float] = Field(None, gt=0.0, lt=1.0)
    data_path: Optional[str] = None
    has_latent: bool = False
    inject_censoring: Optional[float] = Field(None, gt=0.0)
    train_fraction: float = Field(0.8, gt=0.0, lt=1.0)
    seed: int = Field(0, ge=0)

    @field_validator("taus")
    @classmethod
    def _taus_in_unit_interval(cls, taus: List[float]) -> List[float]:
        if not taus or any(not 0.0 < t < 1.0 for t in taus):
            raise ValueError(f"taus must be a nonempty list inside (0, 1), got {taus}")
        return taus

    @field_validator("methods")
    @classmethod
    def _known_methods(cls, methods: List[str]) -> List[str]:
        unknown = sorted(set(methods) - set(METHODS))
        if unknown:
            raise ValueError(f"unknown methods {unknown}; choose from {list(METHODS)}")
        return methods

    @model_validator(mode="after")
    def _resolve_p(self) -> "BenchmarkConfig":
        if self.data_path is None:
            if self.model not in DEFAULT_P:
                raise ValueError(f"unknown simulation model '{self.model}'")
            if self.p is None:
                self.p = DEFAULT_P[self.model]
        return self

    @classmethod
    def build(cls, **kwargs) -> "BenchmarkConfig":
        try:
            return cls(**kwargs)
        except ValidationError as e:
            raise ConfigError(f"invalid benchmark config: {e}") from e

    @property
    def simulated(self) -> bool:
        return self.data_path is None


@dataclass
class BenchmarkResult:
    records: pd.DataFrame  # one row per (rep, node size, method, tau)
    table: pd.DataFrame  # aggregated over reps
    coverage: Optional[pd.DataFrame] = None


def _cell_seeds(seed: int, rep: int, node_size: int) -> Tuple[int, int, int]:
    data_state = np.random.SeedSequence(seed, spawn_key=(rep,)).generate_state(2)
    forest_state = np.random.SeedSequence(seed, spawn_key=(rep, node_size)).generate_state(1)
    return int(data_state[0]), int(data_state[1]), int(forest_state[0])


class Benchmark:
    def __init__(self, cfg: BenchmarkConfig, base_data: Optional[Dataset] = None):
        self.cfg = cfg
        self.base_data = base_data
        needs_latent = any(METHODS[m][1] for m in cfg.methods) or cfg.level is not None
        if not cfg.simulated and needs_latent and base_data is not None and base_data.latent_t is None and cfg.inject_censoring is None:
            raise ConfigError("oracle methods and interval coverage need a latent response column")

    # --- data for one repetition ---
    def _datasets(self, rep: int, data_seed: int, test_seed: int) -> Tuple[Dataset, Dataset]:
        cfg = self.cfg
        if cfg.simulated:
            train = generate(SimSpec.build(model=cfg.model, n=cfg.n, p=cfg.p, seed=data_seed))
            test = generate(SimSpec.build(model=cfg.model, n=cfg.n_test, p=cfg.p, seed=test_seed))
            return train, test
        data = self.base_data
        if cfg.inject_censoring is not None:
            data = inject_censoring(data, cfg.inject_censoring, seed=data_seed)
        return split(data, make_split_spec(cfg.train_fraction, test_seed))

    def _forest(self, train: Dataset, rule: SplitRule, node_size: int, forest_seed: int) -> Forest:
        cfg = ForestConfig.default_for(
            rule, train.p, num_trees=self.cfg.trees, min_node_size=node_size, mtry=self.cfg.mtry, seed=forest_seed
        )
        return fit(train, cfg)

    def run_cell(self, cell: Tuple[int, int]) -> Tuple[List[dict], List[dict]]:
        rep, node_size = cell
        data_seed, test_seed, forest_seed = _cell_seeds(self.cfg.seed, rep, node_size)
        train, test = self._datasets(rep, data_seed, test_seed)
        truth = {tau: true_quantile(self.cfg.model, test.features, tau) for tau in self.cfg.taus} if self.cfg.simulated else None

        forests: Dict[Tuple[SplitRule, bool], Tuple[Forest, Dataset]] = {}
        records, coverage = [], []
        for method in self.cfg.methods:
            rule, oracle, survival = METHODS[method]
            key = (rule, oracle)
            if key not in forests:
                view = train.oracle() if oracle else train
                forests[key] = (self._forest(view, rule, node_size, forest_seed), view)
            forest, view = forests[key]

            predictions = predict_batch(forest, view, test.features, self.cfg.taus, survival)
            for tau, group in predictions.groupby("tau", sort=False):
                q_hat = group["q_hat"].to_numpy()
                record = {"rep": rep, "node_size": node_size, "method": method, "tau": float(tau)}
                if test.latent_t is not None:
                    record["metric"] = "quantile_loss"
                    record["value"] = quantile_loss(q_hat, test.latent_t, tau)
                else:
                    record["metric"] = "c_index"
                    record["value"] = c_index(test.y, test.delta, risk_from_quantiles(q_hat))
                if truth is not None:
                    record["mad_truth"] = float(np.mean(np.abs(q_hat - truth[tau])))
                records.append(record)

            if self.cfg.level is not None and view.latent_t is not None:
                intervals = predict_intervals(forest, view, view.features, self.cfg.level, survival, oob=True)
                coverage.append({
                    "rep": rep, "node_size": node_size, "method": method, "level": self.cfg.level,
                    "coverage": interval_coverage(intervals[["lower", "upper"]].to_numpy(), train.latent_t),
                })
        logger.info("Benchmark cell rep=%d node_size=%d done", rep, node_size)
        return records, coverage

    def run(self, threads: int = 1, progress: bool = False) -> BenchmarkResult:
        cells = [(rep, m) for rep in range(self.cfg.reps) for m in self.cfg.node_sizes]
        with ThreadPoolExecutor(max_workers=max(1, threads)) as pool:
            results = pool.map(self.run_cell, cells)
            if progress:
                results = tqdm(results, total=len(cells), desc="cells", leave=False)
            outcomes = list(results)

        records = pd.DataFrame([r for cell_records, _ in outcomes for r in cell_records])
        table = summarize(records, ["method", "node_size", "tau", "metric"], "value")
        coverage_rows = [c for _, cell_coverage in outcomes for c in cell_coverage]
        coverage = summarize(pd.DataFrame(coverage_rows), ["method", "node_size", "level"], "coverage") if coverage_rows else None
        return BenchmarkResult(records=records, table=table, coverage=coverage)


def summarize(records: pd.DataFrame, keys: List[str], value: str) -> pd.DataFrame:
    """Mean, standard deviation and count of `value` per key combination, in method order."""
    agg = {"mean": (value, "mean"), "std": (value, "std"), "reps": (value, "size")}
    if "mad_truth" in records.columns:
        agg["mean_mad_truth"] = ("mad_truth", "mean")
    table = records.groupby(keys, sort=False).agg(**agg).reset_index()
    table["std"] = table["std"].fillna(0.0)
    order = {m: i for i, m in enumerate(METHODS)}
    table = table.sort_values(
        by=keys, key=lambda col: col.map(order) if col.name == "method" else col, kind="stable"
    ).reset_index(drop=True)
    return table


def run_benchmark(cfg: BenchmarkConfig, base_data: Optional[Dataset] = None, threads: int = 1, progress: bool = False) -> BenchmarkResult:
    if not cfg.simulated and base_data is None:
        raise ParameterError("the real-data protocol needs a dataset")
    return Benchmark(cfg, base_data).run(threads=threads, progress=progress)
