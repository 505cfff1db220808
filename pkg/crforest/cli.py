import functools
import logging
import os
from enum import Enum
from typing import Any, Callable, List, Optional

import numpy as np
import pandas as pd
import typer
import yaml
from dotenv import load_dotenv

from crforest import __version__
from crforest.benchmark import METHODS, BenchmarkConfig, run_benchmark
from crforest.config import ForestConfig, RunConfig, SplitRule, SurvivalSpec
from crforest.cqrf import predict_batch, predict_intervals
from crforest.data_model import Dataset, load_csv, to_frame
from crforest.errors import CensoredForestError, ConfigError, ParameterError, SchemaError
from crforest.forest import Forest, fit
from crforest.metrics import MetricReport, c_index_report, coverage_report, curve_sup_distance, quantile_loss_report
from crforest.simgen import SimSpec, generate, true_censoring_survival
from crforest.survival import censoring_curve
from crforest.utils import parse_number_list, read_table, stderr_is_tty, write_run_metadata, write_table
from crforest.weights import forest_weights

logger = logging.getLogger(__name__)

# --- Initialization ---
load_dotenv()


class WeightsKind(str, Enum):
    QUANTILE = "quantile"
    GENERALIZED = "generalized"


class SimModel(str, Enum):
    AFT = "aft"
    HETERO = "hetero"
    SINE = "sine"


RULE_FOR_WEIGHTS = {WeightsKind.QUANTILE: SplitRule.CART_VARIANCE, WeightsKind.GENERALIZED: SplitRule.GRF_QUANTILE}


# ======================================================
# 🧰 Option helpers
# ======================================================

def _open_unit(value, flag: str):
    values = value if isinstance(value, (list, tuple)) else [value]
    for v in values:
        if v is not None and not 0.0 < v < 1.0:
            raise typer.BadParameter(f"{flag} must lie strictly between 0 and 1, got {v}")
    return value


def _survival_option(text: str) -> SurvivalSpec:
    try:
        return SurvivalSpec.parse(text)
    except ConfigError as e:
        raise typer.BadParameter(str(e)) from e


def _guarded(fn: Callable) -> Callable:
    """Library and I/O failures become a logged message and exit code 1."""

    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except (CensoredForestError, OSError) as e:
            logger.error("❌ %s", e)
            typer.echo(f"Error: {e}", err=True)
            raise typer.Exit(code=1)

    return wrapper


def _record_run(ctx: typer.Context, output_path: str) -> None:
    params = {k: (v.value if isinstance(v, Enum) else v) for k, v in ctx.params.items()}
    run = RunConfig(command=ctx.info_name, params=params, version=__version__)
    logger.info("Run config: %s", run.model_dump_json())
    write_run_metadata(output_path, run)


def _query_point(d: Dataset, x: Optional[str], row: Optional[int]) -> np.ndarray:
    if (x is None) == (row is None):
        raise ParameterError("give exactly one of --x or --row")
    if row is not None:
        if not 0 <= row < d.n:
            raise ParameterError(f"--row {row} outside 0..{d.n - 1}")
        return d.features[row]
    point = np.asarray(parse_number_list(x, float), dtype=np.float64)
    if point.size != d.p:
        raise ParameterError(f"--x has {point.size} values, the forest was trained on p={d.p}")
    return point


def _query_features(path: Optional[str], d: Dataset) -> np.ndarray:
    if path is None:
        return d.features
    frame = read_table(path)
    columns = [f"x{j}" for j in range(d.p)]
    missing = [c for c in columns if c not in frame.columns]
    if missing:
        raise SchemaError(f"{path}: query file lacks feature columns {missing}")
    try:
        return frame[columns].to_numpy(dtype=np.float64)
    except ValueError as e:
        raise SchemaError(f"{path}: non-numeric feature values: {e}") from e


def _load_model(model_path: str, data_path: str):
    forest = Forest.load(model_path)
    d = load_csv(data_path, has_latent=None)
    if d.n != forest.training_n:
        raise ConfigError(f"{data_path} has {d.n} rows, the forest was trained on {forest.training_n}")
    return forest, d


# ======================================================
# 🚀 Application factory
# ======================================================

def create_app() -> typer.Typer:
    """Builds the command-line application with all subcommands registered."""

    app = typer.Typer(add_completion=False, no_args_is_help=True, help="Censored quantile regression forests.")

    @app.callback()
    def main(
        ctx: typer.Context,
        config: Optional[str] = typer.Option(None, "--config", help="YAML/JSON file: {subcommand: {option: value}}."),
        log_level: str = typer.Option("INFO", "--log-level", envvar="CQRF_LOG_LEVEL"),
    ):
        logging.basicConfig(level=log_level.upper(), format="%(asctime)s %(levelname)s %(name)s: %(message)s")
        if config is not None:
            try:
                with open(config, "r", encoding="utf-8") as f:
                    defaults = yaml.safe_load(f) or {}
            except (OSError, yaml.YAMLError) as e:
                raise typer.BadParameter(f"cannot read config file: {e}", param_hint="--config")
            if not isinstance(defaults, dict):
                raise typer.BadParameter("config file must map subcommand names to options", param_hint="--config")
            ctx.default_map = {**(ctx.default_map or {}), **defaults}

    # --- simulate ---
    @app.command()
    @_guarded
    def simulate(
        ctx: typer.Context,
        model: SimModel = typer.Option(SimModel.AFT, "--model"),
        n: int = typer.Option(1000, "--n", min=1),
        p: Optional[int] = typer.Option(None, "--p", min=1, help="Defaults: aft 20, hetero 40, sine 1."),
        seed: int = typer.Option(0, "--seed", min=0),
        out: str = typer.Option(..., "--out"),
        json_mirror: bool = typer.Option(False, "--json"),
    ):
        """Draw a censored dataset (with its latent t column) from a simulation design."""
        default_p = {SimModel.AFT: 20, SimModel.HETERO: 40, SimModel.SINE: 1}[model]
        d = generate(SimSpec.build(model=model.value, n=n, p=p or default_p, seed=seed))
        write_table(to_frame(d), out, json_mirror)
        _record_run(ctx, out)
        logger.info("✅ Wrote %s (n=%d, censored=%.3f)", out, d.n, d.censoring_fraction)

    # --- train ---
    @app.command()
    @_guarded
    def train(
        ctx: typer.Context,
        data: str = typer.Option(..., "--data"),
        model_out: str = typer.Option(..., "--model-out"),
        trees: int = typer.Option(500, "--trees", min=1),
        min_node_size: int = typer.Option(5, "--min-node-size", min=1),
        mtry: Optional[int] = typer.Option(None, "--mtry", min=1),
        gamma: Optional[float] = typer.Option(None, "--gamma"),
        subsample: Optional[float] = typer.Option(None, "--subsample"),
        honest: Optional[bool] = typer.Option(None, "--honest/--no-honest"),
        weights: WeightsKind = typer.Option(WeightsKind.QUANTILE, "--weights"),
        grf_taus: str = typer.Option("0.1,0.5,0.9", "--grf-taus"),
        seed: int = typer.Option(0, "--seed", min=0),
        threads: int = typer.Option(1, "--threads", envvar="CQRF_THREADS", min=1),
    ):
        """Fit a forest and save it as JSON."""
        d = load_csv(data, has_latent=None)
        cfg = ForestConfig.default_for(
            RULE_FOR_WEIGHTS[weights], d.p,
            num_trees=trees, min_node_size=min_node_size, mtry=mtry, gamma=gamma,
            subsample_fraction=subsample, honest=honest,
            grf_taus=parse_number_list(grf_taus, float), seed=seed,
        )
        forest = fit(d, cfg, threads=threads, progress=stderr_is_tty())
        forest.save(model_out)
        _record_run(ctx, model_out)
        logger.info("✅ Saved %d trees to %s", forest.num_trees, model_out)

    # --- predict ---
    @app.command()
    @_guarded
    def predict(
        ctx: typer.Context,
        model: str = typer.Option(..., "--model"),
        data: str = typer.Option(..., "--data", help="The training CSV the forest was fitted on."),
        query: Optional[str] = typer.Option(None, "--query", help="CSV with x0..x{p-1}; defaults to the training rows."),
        tau: Optional[List[float]] = typer.Option(None, "--tau", callback=lambda v: _open_unit(v, "--tau")),
        level: Optional[float] = typer.Option(None, "--level", callback=lambda v: _open_unit(v, "--level")),
        survival: str = typer.Option("beran-forest", "--survival", callback=_survival_option),
        oob: bool = typer.Option(False, "--oob", help="Out-of-bag weights; only with the training rows as queries."),
        threads: int = typer.Option(1, "--threads", envvar="CQRF_THREADS", min=1),
        out: str = typer.Option(..., "--out"),
        json_mirror: bool = typer.Option(False, "--json"),
    ):
        """Estimate conditional quantiles (--tau, repeatable) or prediction intervals (--level)."""
        if bool(tau) == (level is not None):
            raise typer.BadParameter("give --tau (one or more) or --level, not both", param_hint="--tau/--level")
        if oob and query is not None:
            raise typer.BadParameter("--oob predicts the training rows; drop --query", param_hint="--oob")
        forest, d = _load_model(model, data)
        X = _query_features(query, d)
        progress = stderr_is_tty()
        if level is not None:
            table = predict_intervals(forest, d, X, level, survival, threads=threads, oob=oob, progress=progress)
        else:
            table = predict_batch(forest, d, X, tau, survival, threads=threads, oob=oob, progress=progress)
        write_table(table, out, json_mirror)
        _record_run(ctx, out)
        logger.info("✅ Wrote %d predictions to %s", len(table), out)

    # --- survcurve ---
    @app.command()
    @_guarded
    def survcurve(
        ctx: typer.Context,
        model: str = typer.Option(..., "--model"),
        data: str = typer.Option(..., "--data"),
        x: Optional[str] = typer.Option(None, "--x", help="Comma-separated query point."),
        row: Optional[int] = typer.Option(None, "--row", help="Use training row as the query point."),
        survival: str = typer.Option("beran-forest", "--survival", callback=_survival_option),
        oob: bool = typer.Option(False, "--oob"),
        compare_truth: Optional[SimModel] = typer.Option(None, "--compare-truth"),
        out: str = typer.Option(..., "--out"),
        json_mirror: bool = typer.Option(False, "--json"),
    ):
        """Dump the censoring survival curve at a query point as jump_time,value pairs."""
        forest, d = _load_model(model, data)
        point = _query_point(d, x, row)
        w = forest_weights(forest, point, exclude=row if oob else None)
        curve = censoring_curve(d, w, survival, point)
        table = pd.DataFrame({"jump_time": curve.jump_times, "value": curve.values})
        if compare_truth is not None:
            table["truth"] = true_censoring_survival(compare_truth.value, point, curve.jump_times)
            if curve.num_jumps:
                distance = curve_sup_distance(
                    curve, lambda q: true_censoring_survival(compare_truth.value, point, q), curve.jump_times
                )
                logger.info("Sup distance to the %s censoring curve: %.4f", compare_truth.value, distance)
        write_table(table, out, json_mirror)
        _record_run(ctx, out)

    # --- weights ---
    @app.command()
    @_guarded
    def weights(
        ctx: typer.Context,
        model: str = typer.Option(..., "--model"),
        data: str = typer.Option(..., "--data"),
        x: Optional[str] = typer.Option(None, "--x"),
        row: Optional[int] = typer.Option(None, "--row"),
        oob: bool = typer.Option(False, "--oob"),
        out: str = typer.Option(..., "--out"),
        json_mirror: bool = typer.Option(False, "--json"),
    ):
        """Dump the sparse forest weight vector at a query point as index,weight pairs."""
        forest, d = _load_model(model, data)
        point = _query_point(d, x, row)
        w = forest_weights(forest, point, exclude=row if oob else None)
        write_table(pd.DataFrame({"index": w.indices, "weight": w.values}), out, json_mirror)
        _record_run(ctx, out)

    # --- evaluate ---
    @app.command()
    @_guarded
    def evaluate(
        ctx: typer.Context,
        predictions: str = typer.Option(..., "--predictions"),
        data: str = typer.Option(..., "--data", help="The dataset the predictions were made for."),
        out: str = typer.Option(..., "--out"),
        json_mirror: bool = typer.Option(False, "--json"),
    ):
        """Score a predict output: quantile loss and C-index per tau, or interval coverage."""
        table = read_table(predictions)
        d = load_csv(data, has_latent=None)
        reports = evaluate_predictions(table, d)
        write_table(pd.DataFrame([r.model_dump() for r in reports]), out, json_mirror)
        _record_run(ctx, out)

    # --- benchmark ---
    @app.command()
    @_guarded
    def benchmark(
        ctx: typer.Context,
        model: SimModel = typer.Option(SimModel.AFT, "--model"),
        n: int = typer.Option(1000, "--n", min=2),
        p: Optional[int] = typer.Option(None, "--p", min=1),
        n_test: int = typer.Option(200, "--n-test", min=1),
        trees: int = typer.Option(500, "--trees", min=1),
        node_sizes: str = typer.Option("10,20,40,80", "--node-sizes"),
        taus: str = typer.Option("0.3,0.5,0.7", "--taus"),
        reps: int = typer.Option(10, "--reps", min=1),
        methods: str = typer.Option(",".join(METHODS), "--methods"),
        mtry: Optional[int] = typer.Option(None, "--mtry", min=1),
        level: Optional[float] = typer.Option(None, "--level", callback=lambda v: _open_unit(v, "--level")),
        data: Optional[str] = typer.Option(None, "--data", help="Run the 80/20 protocol on this CSV instead."),
        inject_censoring: Optional[float] = typer.Option(None, "--inject-censoring"),
        seed: int = typer.Option(0, "--seed", min=0),
        threads: int = typer.Option(1, "--threads", envvar="CQRF_THREADS", min=1),
        out: str = typer.Option(..., "--out"),
        records_out: Optional[str] = typer.Option(None, "--records-out", help="Per-repetition rows."),
        json_mirror: bool = typer.Option(False, "--json"),
    ):
        """Repeated sweep over node sizes comparing censored, naive and oracle forests."""
        base = load_csv(data, has_latent=None) if data is not None else None
        cfg = BenchmarkConfig.build(
            model=None if data is not None else model.value,
            n=n, p=p, n_test=n_test, trees=trees,
            node_sizes=parse_number_list(node_sizes, int),
            taus=parse_number_list(taus, float),
            reps=reps, methods=[m.strip() for m in methods.split(",") if m.strip()],
            mtry=mtry, level=level, data_path=data,
            inject_censoring=inject_censoring, seed=seed,
        )
        result = run_benchmark(cfg, base, threads=threads, progress=stderr_is_tty())
        write_table(result.table, out, json_mirror)
        if records_out is not None:
            write_table(result.records, records_out, json_mirror)
        if result.coverage is not None:
            write_table(result.coverage, coverage_path(out), json_mirror)
        _record_run(ctx, out)
        logger.info("✅ Benchmark table written to %s", out)

    return app


def coverage_path(out: str) -> str:
    root, ext = os.path.splitext(out)
    return f"{root}-coverage{ext or '.csv'}"


def evaluate_predictions(table: pd.DataFrame, d: Dataset) -> List[MetricReport]:
    """MetricReports for a predict output table against the dataset it was made for."""
    if table.empty:
        raise SchemaError("predictions table has no rows")
    rows = table["row"].to_numpy() if "row" in table.columns else None
    if rows is None or rows.min() < 0 or rows.max() >= d.n:
        raise SchemaError(f"prediction rows must index the {d.n} dataset rows")

    reports: List[MetricReport] = []
    if {"lower", "upper"} <= set(table.columns):
        if d.latent_t is None:
            raise ConfigError("interval coverage needs the latent t column")
        for level, group in table.groupby("level", sort=True):
            bounds = group[["lower", "upper"]].to_numpy()
            reports.append(coverage_report(bounds, d.latent_t[group["row"].to_numpy()], float(level)))
        return reports

    if "q_hat" not in table.columns:
        raise SchemaError("predictions need either q_hat or lower/upper columns")
    for tau, group in table.groupby("tau", sort=True):
        idx = group["row"].to_numpy()
        q_hat = group["q_hat"].to_numpy()
        if d.latent_t is not None:
            reports.append(quantile_loss_report(q_hat, d.latent_t[idx], float(tau)))
        try:
            reports.append(c_index_report(d.y[idx], d.delta[idx], q_hat, float(tau)))
        except ParameterError as e:
            logger.warning("Skipping C-index at tau=%g: %s", tau, e)
    return reports


def run(argv: Optional[List[str]] = None) -> Any:
    """Entry point; returns whatever click's standalone mode returns (it exits with the code)."""
    return create_app()(args=argv, prog_name="crforest")
