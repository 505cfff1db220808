# consistency-trend.py
# Standalone desk-scale check: on AFT data, the gap between the forest's score
# curve and the population score shrinks as n grows, and per-query cost stays
# subquadratic in n. Prints both tables; nothing is written to disk.
#
#   python scripts/consistency-trend.py
#   CQRF_TREND_SIZES=500,2000 CQRF_TREND_SEEDS=2 python scripts/consistency-trend.py

import os
import time

import numpy as np
import pandas as pd
from dotenv import load_dotenv

from crforest.config import ForestConfig, SplitRule
from crforest.cqrf import QuantileQuery, estimate_quantile, score, solve
from crforest.forest import fit
from crforest.simgen import SimSpec, generate, true_quantile, true_score
from crforest.survival import beran_forest
from crforest.utils import parse_number_list
from crforest.weights import forest_weights

# --- Configuration ---
load_dotenv()

SIZES = parse_number_list(os.getenv("CQRF_TREND_SIZES", "500,2000,8000"), int)
COST_SIZES = parse_number_list(os.getenv("CQRF_COST_SIZES", "1000,4000,16000"), int)
SEEDS = int(os.getenv("CQRF_TREND_SEEDS", "5"))
THREADS = int(os.getenv("CQRF_THREADS", "4"))
TAU = 0.5
P = 20

rng = np.random.default_rng(0)
points = np.column_stack([np.linspace(0.3, 1.7, 5), rng.random((5, P - 1)) * 2.0])


def forest_for(n: int, seed: int, p: int = P, trees: int = 200):
    d = generate(SimSpec(model="aft", n=n, p=p, seed=seed))
    cfg = ForestConfig.default_for(SplitRule.CART_VARIANCE, p, num_trees=trees, min_node_size=20, seed=seed)
    return d, fit(d, cfg, threads=THREADS)


# --- Consistency trend ---
rows = []
for n in SIZES:
    score_gaps, quantile_gaps = [], []
    for seed in range(SEEDS):
        d, forest = forest_for(n, seed)
        for x in points:
            w = forest_weights(forest, x)
            g = beran_forest(d, w)
            grid = np.linspace(0.5, true_quantile("aft", x, 0.9), 50)
            score_gaps.append(np.max(np.abs(score(grid, TAU, g, w, d.y) - true_score("aft", x, grid, TAU))))
            quantile_gaps.append(abs(solve(w, d.y, g, TAU).q_hat - true_quantile("aft", x, TAU)))
    rows.append({"n": n, "sup_score_gap": np.mean(score_gaps), "quantile_gap": np.mean(quantile_gaps)})
    print(f"✅ n={n} done")

trend = pd.DataFrame(rows)
print(trend.to_string(index=False))

# --- Query cost ---
costs = []
for n in COST_SIZES:
    d, forest = forest_for(n, 1, p=5, trees=50)
    started = time.perf_counter()
    for x in d.features[:50]:
        estimate_quantile(forest, d, QuantileQuery(x, TAU))
    costs.append((time.perf_counter() - started) / 50)

slope = np.polyfit(np.log(COST_SIZES), np.log(costs), 1)[0]
print(pd.DataFrame({"n": COST_SIZES, "seconds_per_query": costs}).to_string(index=False))
print(f"log-log slope: {slope:.2f} ({'subquadratic' if slope < 2 else '❌ not subquadratic'})")
