"""
Estimating-equation and solver tests.

The no-censoring reduction is checked against an independent weighted
empirical quantile; slow Monte-Carlo checks run with CQRF_SLOW_TESTS=1.
"""

import logging
import os
import time
import unittest
from unittest.mock import patch

import numpy as np

from crforest.config import ForestConfig, SplitRule, SurvivalSpec
from crforest.cqrf import (
    CensoredQuantileForest,
    PREDICTION_COLUMNS,
    QuantileEstimate,
    QuantileQuery,
    candidate_set,
    estimate_quantile,
    interval_taus,
    predict_batch,
    predict_intervals,
    prediction_interval,
    score,
    solve,
)
from crforest.data_model import Dataset
from crforest.errors import ParameterError
from crforest.forest import Forest, LeafNode, fit
from crforest.simgen import SimSpec, generate, true_quantile, true_score
from crforest.survival import SurvivalCurve, beran_forest
from crforest.weights import WeightVector, forest_weights

SLOW = os.getenv("CQRF_SLOW_TESTS") == "1"


def nearest_cdf_quantile(w: WeightVector, y: np.ndarray, tau: float) -> float:
    """Smallest support value whose weighted CDF is closest to tau."""
    values = sorted(set(y[w.indices].tolist()))
    gaps = []
    for c in values:
        cdf = sum(weight for i, weight in zip(w.indices, w.values) if y[i] <= c)
        gaps.append(abs(cdf - tau))
    smallest = min(gaps)
    return next(c for c, gap in zip(values, gaps) if gap <= smallest + 1e-12)


def dense_score(q, tau, g, w, y) -> float:
    dense = w.dense(len(y))
    return (1.0 - tau) * g(q) - sum(dense[i] for i in range(len(y)) if y[i] > q)


class TestScore(unittest.TestCase):
    def test_hand_value_is_zero_at_median(self):
        w = WeightVector.uniform(range(4))
        y = np.array([1.0, 2.0, 3.0, 4.0])
        self.assertEqual(score(2.0, 0.5, SurvivalCurve.constant_one(), w, y), 0.0)

    def test_below_all_responses(self):
        w = WeightVector.uniform(range(3))
        y = np.array([4.0, 5.0, 6.0])
        self.assertAlmostEqual(score(0.0, 0.3, SurvivalCurve.constant_one(), w, y), -0.3, places=15)

    def test_matches_dense_evaluation(self):
        rng = np.random.default_rng(0)
        for _ in range(100):
            n = int(rng.integers(2, 30))
            y = np.round(rng.exponential(size=n), 1)
            delta = (rng.random(n) < 0.6).astype(int)
            support = np.sort(rng.choice(n, size=int(rng.integers(1, n + 1)), replace=False))
            raw = rng.random(support.size)
            w = WeightVector(indices=support, values=raw / raw.sum())
            g = beran_forest(Dataset(features=np.zeros((n, 1)), y=y, delta=delta), w)
            tau = float(rng.uniform(0.05, 0.95))
            for q in rng.uniform(-0.5, y.max() + 0.5, size=5):
                self.assertAlmostEqual(score(q, tau, g, w, y), dense_score(q, tau, g, w, y), places=12)

    def test_constant_between_candidates(self):
        rng = np.random.default_rng(1)
        y = np.round(rng.exponential(size=25), 2)
        delta = (rng.random(25) < 0.5).astype(int)
        w = WeightVector.uniform(range(25))
        g = beran_forest(Dataset(features=np.zeros((25, 1)), y=y, delta=delta), w)
        c = candidate_set(w, y)
        mids = (c[:-1] + c[1:]) / 2.0
        np.testing.assert_array_equal(score(mids, 0.4, g, w, y), score(c[:-1], 0.4, g, w, y))


class TestCandidateSet(unittest.TestCase):
    def test_support_readoff(self):
        w = WeightVector.from_dict({1: 0.5, 3: 0.5})
        np.testing.assert_array_equal(candidate_set(w, np.array([5.0, 7.0, 2.0, 9.0])), [7.0, 9.0])

    def test_uniform_gives_all_distinct(self):
        y = np.array([3.0, 1.0, 3.0, 2.0])
        np.testing.assert_array_equal(candidate_set(WeightVector.uniform(range(4)), y), [1.0, 2.0, 3.0])


class TestSolve(unittest.TestCase):
    def test_degenerate_tail_is_flagged(self):
        d = Dataset(features=np.zeros((3, 1)), y=np.array([1.0, 2.0, 3.0]), delta=np.array([1, 0, 0]))
        w = WeightVector.uniform(range(3))
        est = solve(w, d.y, beran_forest(d, w), 0.9)
        self.assertEqual(est.q_hat, 3.0)
        self.assertTrue(est.degenerate)
        self.assertEqual(est.candidates_evaluated, 3)

    def test_censored_maximum_does_not_pin_the_estimate(self):
        # G drops to 0 at the censored top response, where S_n is exactly 0
        d = Dataset(features=np.zeros((5, 1)), y=np.arange(1.0, 6.0), delta=np.array([1, 1, 1, 1, 0]))
        w = WeightVector.uniform(range(5))
        g = beran_forest(d, w)
        self.assertEqual(g(5.0), 0.0)
        low = solve(w, d.y, g, 0.1)
        self.assertEqual(low.q_hat, 1.0)
        self.assertAlmostEqual(low.score_abs, 0.1, places=12)
        self.assertFalse(low.degenerate)
        middle = solve(w, d.y, g, 0.5)
        self.assertEqual(middle.q_hat, nearest_cdf_quantile(w, d.y, 0.5))
        self.assertFalse(middle.degenerate)

    def test_censored_maximum_in_random_supports(self):
        rng = np.random.default_rng(5)
        for _ in range(100):
            n = int(rng.integers(4, 30))
            y = rng.exponential(size=n)
            delta = (rng.random(n) < 0.7).astype(int)
            delta[np.argmax(y)] = 0
            w = WeightVector.uniform(range(n))
            g = beran_forest(Dataset(features=np.zeros((n, 1)), y=y, delta=delta), w)
            est = solve(w, y, g, 0.1)
            if not est.degenerate:
                self.assertLess(est.q_hat, y.max())
                self.assertGreater(float(g(est.q_hat)), 0.0)

    def test_uncensored_is_never_degenerate(self):
        w = WeightVector.uniform(range(5))
        est = solve(w, np.arange(1.0, 6.0), SurvivalCurve.constant_one(), 0.95)
        self.assertFalse(est.degenerate)
        self.assertEqual(est.q_hat, 5.0)

    def test_ties_go_to_smallest_candidate(self):
        # |S| is 0.25 at both 1 and 2 for tau = 0.5 with weights (0.25, 0.5, 0.25)
        w = WeightVector(indices=np.arange(3), values=np.array([0.25, 0.5, 0.25]))
        est = solve(w, np.array([1.0, 2.0, 3.0]), SurvivalCurve.constant_one(), 0.5)
        self.assertEqual(est.q_hat, 1.0)
        self.assertEqual(est.score_abs, 0.25)

    def test_tau_outside_unit_interval(self):
        with self.assertRaises(ParameterError):
            QuantileQuery(x=np.zeros(1), tau=1.0)
        with self.assertRaises(ParameterError):
            solve(WeightVector.uniform([0]), np.ones(1), SurvivalCurve.constant_one(), 0.0)


class TestNoCensoringReduction(unittest.TestCase):
    def test_matches_weighted_empirical_quantile(self):
        rng = np.random.default_rng(2024)
        taus = [0.1, 0.25, 0.5, 0.75, 0.9]
        for case in range(200):
            n, p = int(rng.integers(5, 51)), int(rng.integers(1, 6))
            d = Dataset(
                features=rng.random((n, p)),
                y=np.round(rng.exponential(size=n) * 10.0, int(rng.integers(0, 3))),
                delta=np.ones(n, dtype=int),
            )
            rule = SplitRule.GRF_QUANTILE if case % 2 else SplitRule.CART_VARIANCE
            forest = fit(d, ForestConfig.default_for(rule, p, num_trees=5, min_node_size=int(rng.integers(1, 4)), seed=case))
            x = rng.random(p)
            w = forest_weights(forest, x)
            for tau in taus:
                est = estimate_quantile(forest, d, QuantileQuery(x=x, tau=tau))
                self.assertEqual(est.q_hat, nearest_cdf_quantile(w, d.y, tau), msg=f"case {case}, tau {tau}")
                self.assertLessEqual(est.candidates_evaluated, w.support_size)


class TestIntervals(unittest.TestCase):
    def test_level_maps_to_tail_taus(self):
        lo, hi = interval_taus(0.95)
        self.assertAlmostEqual(lo, 0.025)
        self.assertAlmostEqual(hi, 0.975)

    def test_brackets_weighted_median(self):
        rng = np.random.default_rng(4)
        d = Dataset(features=rng.random((80, 1)), y=rng.normal(10.0, 1.0, 80), delta=np.ones(80, dtype=int))
        forest = fit(d, ForestConfig.default_for(SplitRule.CART_VARIANCE, 1, num_trees=20, min_node_size=5, seed=1))
        x = np.array([0.5])
        interval = prediction_interval(forest, d, x, 0.5)
        median = nearest_cdf_quantile(forest_weights(forest, x), d.y, 0.5)
        self.assertLessEqual(interval.lower, median)
        self.assertGreaterEqual(interval.upper, median)
        self.assertFalse(interval.swapped)

    def test_crossed_endpoints_swapped_and_flagged(self):
        d = Dataset(features=np.zeros((3, 1)), y=np.array([1.0, 2.0, 3.0]), delta=np.ones(3, dtype=int))
        forest = fit(d, ForestConfig(num_trees=2, min_node_size=3))
        crossed = [QuantileEstimate(3.0, 0.0, 3, False), QuantileEstimate(1.0, 0.0, 3, False)]
        with patch("crforest.cqrf.solve", side_effect=crossed):
            interval = prediction_interval(forest, d, np.zeros(1), 0.9)
        self.assertEqual((interval.lower, interval.upper, interval.swapped), (1.0, 3.0, True))


class TestBatchPrediction(unittest.TestCase):
    def setUp(self):
        self.d = generate(SimSpec(model="aft", n=150, p=3, seed=5))
        self.forest = fit(self.d, ForestConfig.default_for(SplitRule.CART_VARIANCE, 3, num_trees=30, min_node_size=5, seed=5))

    def test_layout(self):
        table = predict_batch(self.forest, self.d, self.d.features[:10], [0.3, 0.7])
        self.assertEqual(list(table.columns), PREDICTION_COLUMNS)
        self.assertEqual(len(table), 20)
        self.assertEqual(table["row"].tolist(), [r for r in range(10) for _ in range(2)])

    def test_rows_match_single_queries(self):
        table = predict_batch(self.forest, self.d, self.d.features[:5], [0.5], survival=SurvivalSpec.parse("km-knn10"))
        for r in range(5):
            est = estimate_quantile(self.forest, self.d, QuantileQuery(self.d.features[r], 0.5, SurvivalSpec.parse("km-knn10")))
            self.assertEqual(table.loc[r, "q_hat"], est.q_hat)

    def test_thread_count_does_not_change_results(self):
        one = predict_batch(self.forest, self.d, self.d.features, [0.5, 0.9], threads=1)
        many = predict_batch(self.forest, self.d, self.d.features, [0.5, 0.9], threads=6)
        self.assertTrue(one.equals(many))

    def test_oob_prediction_on_training_rows(self):
        table = predict_intervals(self.forest, self.d, self.d.features, 0.8, oob=True)
        self.assertEqual(len(table), self.d.n)
        self.assertTrue((table["lower"] <= table["upper"]).all())

    def test_degenerate_estimates_logged(self):
        d = Dataset(features=np.zeros((3, 1)), y=np.array([1.0, 2.0, 3.0]), delta=np.array([1, 0, 0]))
        forest = Forest(
            trees=[LeafNode(np.arange(3))], config=ForestConfig(num_trees=1), training_n=3, inbag=[np.arange(3)]
        )
        with self.assertLogs("crforest.cqrf", level=logging.WARNING):
            table = predict_batch(forest, d, np.zeros((1, 1)), [0.99])
        self.assertTrue(bool(table.loc[0, "degenerate"]))


class TestFacade(unittest.TestCase):
    def test_predict_before_fit(self):
        model = CensoredQuantileForest.with_defaults(SplitRule.CART_VARIANCE, 2)
        with self.assertRaises(ParameterError):
            model.predict(np.zeros((1, 2)), [0.5])

    def test_fit_then_predict(self):
        d = generate(SimSpec(model="sine", n=120, seed=2))
        model = CensoredQuantileForest.with_defaults(SplitRule.GRF_QUANTILE, 1, num_trees=20, min_node_size=5).fit(d)
        table = model.predict(np.array([[1.0], [4.0]]), [0.5])
        self.assertEqual(len(table), 2)
        self.assertEqual(len(model.predict_interval(d.features[:3], 0.9, oob=True)), 3)


class TestPointEstimateScaled(unittest.TestCase):
    def test_aft_upper_quantile_near_truth(self):
        x = np.ones(3)
        estimates = []
        for seed in range(2):
            d = generate(SimSpec(model="aft", n=400, p=3, seed=seed))
            cfg = ForestConfig.default_for(SplitRule.CART_VARIANCE, 3, num_trees=100, min_node_size=10, seed=seed)
            estimates.append(estimate_quantile(fit(d, cfg, threads=2), d, QuantileQuery(x, 0.9)).q_hat)
        self.assertAlmostEqual(float(np.mean(estimates)), true_quantile("aft", x, 0.9), delta=0.8)


@unittest.skipUnless(SLOW, "set CQRF_SLOW_TESTS=1 for Monte-Carlo checks")
class TestMonteCarlo(unittest.TestCase):
    def test_aft_point_estimate(self):
        x = np.ones(20)
        estimates = []
        for seed in range(10):
            d = generate(SimSpec(model="aft", n=1000, p=20, seed=seed))
            forest = fit(d, ForestConfig.default_for(SplitRule.CART_VARIANCE, 20, num_trees=1000, min_node_size=20, seed=seed), threads=4)
            estimates.append(estimate_quantile(forest, d, QuantileQuery(x, 0.9)).q_hat)
        self.assertAlmostEqual(float(np.mean(estimates)), true_quantile("aft", x, 0.9), delta=0.6)

    def test_consistency_trend(self):
        rng = np.random.default_rng(0)
        points = np.column_stack([np.linspace(0.3, 1.7, 5), rng.random((5, 19)) * 2.0])
        tau = 0.5
        score_gaps, quantile_gaps = [], []
        for n in (500, 2000, 8000):
            s_gap, q_gap = [], []
            for seed in range(5):
                d = generate(SimSpec(model="aft", n=n, p=20, seed=seed))
                forest = fit(d, ForestConfig.default_for(SplitRule.CART_VARIANCE, 20, num_trees=200, min_node_size=20, seed=seed), threads=4)
                for x in points:
                    w = forest_weights(forest, x)
                    g = beran_forest(d, w)
                    grid = np.linspace(0.5, true_quantile("aft", x, 0.9), 50)
                    s_gap.append(np.max(np.abs(score(grid, tau, g, w, d.y) - true_score("aft", x, grid, tau))))
                    q_gap.append(abs(solve(w, d.y, g, tau).q_hat - true_quantile("aft", x, tau)))
            score_gaps.append(np.mean(s_gap))
            quantile_gaps.append(np.mean(q_gap))
        self.assertTrue(score_gaps[0] > score_gaps[1] > score_gaps[2], score_gaps)
        self.assertTrue(quantile_gaps[0] > quantile_gaps[1] > quantile_gaps[2], quantile_gaps)

    def test_query_cost_grows_subquadratically(self):
        sizes, costs = [1000, 4000, 16000], []
        for n in sizes:
            d = generate(SimSpec(model="aft", n=n, p=5, seed=1))
            forest = fit(d, ForestConfig.default_for(SplitRule.CART_VARIANCE, 5, num_trees=50, min_node_size=20, seed=1), threads=4)
            X = d.features[:50]
            started = time.perf_counter()
            for x in X:
                est = estimate_quantile(forest, d, QuantileQuery(x, 0.5))
                self.assertLessEqual(est.candidates_evaluated, forest_weights(forest, x).support_size)
            costs.append((time.perf_counter() - started) / len(X))
        slope = np.polyfit(np.log(sizes), np.log(costs), 1)[0]
        self.assertLess(slope, 2.0)


if __name__ == "__main__":
    unittest.main()
