"""
Forest tests: split search against brute force, tree invariants, determinism
and serialization.
"""

import itertools
import os
import unittest

import numpy as np

from crforest.config import ForestConfig, SplitRule
from crforest.data_model import Dataset
from crforest.errors import ConfigError, SchemaError
from crforest.forest import (
    Forest,
    LeafNode,
    SplitNode,
    TreeBuilder,
    best_split_cart,
    best_split_grf,
    fit,
    heterogeneity,
    midpoint,
    min_child_size,
    route,
    tree_leaves,
)
from crforest.simgen import SimSpec, generate

SLOW = os.getenv("CQRF_SLOW_TESTS") == "1"


def random_dataset(rng: np.random.Generator, n: int, p: int, censor: bool = True) -> Dataset:
    X = rng.random((n, p))
    y = rng.exponential(1.0, n) + X[:, 0]
    delta = (rng.random(n) < 0.7).astype(int) if censor else np.ones(n, dtype=int)
    return Dataset(features=X, y=y, delta=delta)


def inverted_cdf_quantile(y: np.ndarray, tau: float) -> float:
    ys = np.sort(y)
    return float(ys[int(np.ceil(tau * len(ys) - 1e-12)) - 1])


def brute_force_split(X, rho, min_node_size, gamma):
    """Every (feature, midpoint) pair scored by the direct formula; first maximum wins."""
    k = len(rho)
    min_child = min_child_size(k, min_node_size, gamma)
    parent = heterogeneity(rho, np.ones(k, dtype=bool))
    best = None
    for f in range(X.shape[1]):
        values = np.unique(X[:, f])
        for lo, hi in zip(values[:-1], values[1:]):
            threshold = (lo + hi) / 2.0
            mask = X[:, f] <= threshold
            if min(mask.sum(), (~mask).sum()) < min_child:
                continue
            score = 0.0
            for side in (mask, ~mask):
                for col in range(rho.shape[1]):
                    score += rho[side, col].sum() ** 2 / side.sum()
            gain = score - parent
            if gain > 1e-9 and (best is None or gain > best[2] + 1e-12):
                best = (f, threshold, gain)
    return best


def node_box_contains(tree, x) -> bool:
    """Walks to x's leaf keeping the axis-aligned box of the current node."""
    lower = np.full(x.shape, -np.inf)
    upper = np.full(x.shape, np.inf)
    node = tree
    while isinstance(node, SplitNode):
        if x[node.split_feature] <= node.split_threshold:
            upper[node.split_feature] = min(upper[node.split_feature], node.split_threshold)
            node = node.left
        else:
            lower[node.split_feature] = max(lower[node.split_feature], node.split_threshold)
            node = node.right
    return node is route(tree, x) and bool(np.all((lower < x) & (x <= upper)))


def node_members(node) -> np.ndarray:
    return np.concatenate([leaf.member_indices for leaf in tree_leaves(node)])


class TestBestSplitCart(unittest.TestCase):
    def test_perfect_separation_splits_at_midpoint(self):
        x0 = np.array([0.0, 1.0] * 5)
        d = Dataset(features=np.column_stack([x0, np.arange(10.0) % 3]), y=x0, delta=np.ones(10))
        split = best_split_cart(np.arange(10), d, [0, 1])
        self.assertEqual((split.feature, split.threshold), (0, 0.5))

    def test_constant_response_has_no_split(self):
        d = Dataset(features=np.arange(8.0).reshape(4, 2), y=np.ones(4), delta=np.ones(4))
        self.assertIsNone(best_split_cart(np.arange(4), d, [0, 1]))

    def test_adjacent_doubles_still_separate(self):
        lo = np.nextafter(1.0, 2.0)
        hi = np.nextafter(lo, 2.0)
        x = np.r_[np.full(5, lo), np.full(5, hi)]
        d = Dataset(features=x[:, None], y=np.r_[np.zeros(5), np.ones(5)], delta=np.ones(10))
        split = best_split_cart(np.arange(10), d, [0])
        self.assertGreaterEqual(split.threshold, lo)
        self.assertLess(split.threshold, hi)
        self.assertEqual(int((x <= split.threshold).sum()), 5)

    def test_midpoint_never_reaches_upper_value(self):
        lo = np.nextafter(1.0, 2.0)
        self.assertEqual(midpoint(lo, np.nextafter(lo, 2.0)), lo)
        self.assertEqual(midpoint(0.0, 1.0), 0.5)

    def test_six_point_instance_matches_exhaustive_search(self):
        X = np.array([[0.1, 5.0], [0.4, 3.0], [0.2, 1.0], [0.9, 4.0], [0.7, 2.0], [0.5, 6.0]])
        y = np.array([1.0, 2.0, 1.5, 6.0, 5.5, 2.5])
        d = Dataset(features=X, y=y, delta=np.ones(6))
        split = best_split_cart(np.arange(6), d, [0, 1])
        expected = brute_force_split(X, (y - y.mean())[:, None], 1, 0.05)
        self.assertEqual((split.feature, split.threshold), expected[:2])
        self.assertAlmostEqual(split.gain, expected[2], places=12)

    def test_random_instances_match_exhaustive_search(self):
        rng = np.random.default_rng(5)
        for _ in range(30):
            n, p = int(rng.integers(4, 15)), int(rng.integers(1, 4))
            X = np.round(rng.random((n, p)), 1)
            y = np.round(rng.normal(size=n), 2)
            d = Dataset(features=X, y=y, delta=np.ones(n))
            split = best_split_cart(np.arange(n), d, list(range(p)), min_node_size=2, gamma=0.2)
            expected = brute_force_split(X, (y - y.mean())[:, None], 2, 0.2)
            if expected is None:
                self.assertIsNone(split)
            else:
                self.assertAlmostEqual(split.gain, expected[2], places=9)

    def test_balance_floor_respected(self):
        X = np.arange(20.0)[:, None]
        y = np.r_[np.zeros(19), 100.0]
        d = Dataset(features=X, y=y, delta=np.ones(20))
        split = best_split_cart(np.arange(20), d, [0], min_node_size=1, gamma=0.25)
        self.assertGreaterEqual(int((X[:, 0] > split.threshold).sum()), 5)


class TestBestSplitGrf(unittest.TestCase):
    def test_constant_response_has_no_split(self):
        d = Dataset(features=np.arange(6.0)[:, None], y=np.full(6, 2.0), delta=np.ones(6))
        self.assertIsNone(best_split_grf(np.arange(6), d, [0], [0.5]))

    def test_eight_point_instance_matches_direct_formula(self):
        X = np.array([[0.3, 1.0], [0.8, 0.0], [0.1, 1.0], [0.6, 0.0], [0.2, 1.0], [0.9, 0.0], [0.4, 0.0], [0.7, 1.0]])
        y = np.array([1.0, 4.0, 2.0, 5.0, 1.5, 6.0, 3.0, 4.5])
        d = Dataset(features=X, y=y, delta=np.ones(8))
        q = inverted_cdf_quantile(y, 0.5)
        self.assertEqual(q, 3.0)
        rho = ((y > q).astype(float) - 0.5)[:, None]

        split = best_split_grf(np.arange(8), d, [0, 1], [0.5])
        expected = brute_force_split(X, rho, 1, 0.05)
        self.assertEqual((split.feature, split.threshold), expected[:2])
        # x0 <= 0.5 isolates the four responses at or below the median
        self.assertEqual(split.feature, 0)
        self.assertAlmostEqual(split.threshold, 0.5)

    def test_heteroscedastic_signal_chosen(self):
        hits = 0
        for seed in range(50):
            d = generate(SimSpec(model="hetero", n=400, p=5, seed=seed)).oracle()
            split = best_split_grf(np.arange(d.n), d, range(5), [0.1, 0.9])
            hits += split is not None and split.feature == 0
        self.assertGreaterEqual(hits, 45)


class TestRoute(unittest.TestCase):
    def test_single_leaf(self):
        leaf = LeafNode(np.array([0, 1, 2]))
        self.assertIs(route(leaf, np.array([9.0])), leaf)

    def test_depth_one(self):
        left, right = LeafNode(np.array([0])), LeafNode(np.array([1]))
        tree = SplitNode(split_feature=0, split_threshold=0.5, left=left, right=right)
        self.assertIs(route(tree, np.array([0.3, 7.0])), left)
        self.assertIs(route(tree, np.array([0.5, 7.0])), left)
        self.assertIs(route(tree, np.array([0.51, 7.0])), right)

    def test_box_containment(self):
        rng = np.random.default_rng(2)
        d = random_dataset(rng, 200, 3)
        forest = fit(d, ForestConfig.default_for(SplitRule.CART_VARIANCE, 3, num_trees=3, min_node_size=3, seed=1))
        for x in rng.random((1000, 3)) * 1.2 - 0.1:
            self.assertTrue(node_box_contains(forest.trees[int(rng.integers(3))], x))


class TestFit(unittest.TestCase):
    def setUp(self):
        self.d = random_dataset(np.random.default_rng(0), 120, 4)

    def test_min_node_size_equal_to_n_gives_single_leaves(self):
        d = random_dataset(np.random.default_rng(1), 10, 2)
        forest = fit(d, ForestConfig(num_trees=5, min_node_size=10, seed=3))
        for tree, inbag in zip(forest.trees, forest.inbag):
            self.assertIsInstance(tree, LeafNode)
            np.testing.assert_array_equal(tree.member_indices, inbag)

    def test_min_node_size_above_n_is_config_error(self):
        d = random_dataset(np.random.default_rng(1), 10, 2)
        with self.assertRaises(ConfigError):
            fit(d, ForestConfig(num_trees=2, min_node_size=11))

    def test_mtry_above_p_is_config_error(self):
        with self.assertRaises(ConfigError):
            fit(self.d, ForestConfig(num_trees=2, mtry=5))

    def test_adjacent_doubles_grow_shallow_trees(self):
        lo = np.nextafter(1.0, 2.0)
        x = np.r_[np.full(5, lo), np.full(5, np.nextafter(lo, 2.0))]
        d = Dataset(features=x[:, None], y=np.r_[np.zeros(5), np.ones(5)], delta=np.ones(10))
        forest = fit(d, ForestConfig(num_trees=5, min_node_size=1, mtry=1, seed=2))
        for tree in forest.trees:
            leaves = tree_leaves(tree)
            self.assertLessEqual(len(leaves), 2)
            self.assertTrue(all(leaf.size >= 1 for leaf in leaves))

    def test_every_leaf_nonempty(self):
        for rule in SplitRule:
            forest = fit(self.d, ForestConfig.default_for(rule, 4, num_trees=20, min_node_size=2, seed=4))
            for tree in forest.trees:
                self.assertTrue(all(leaf.size >= 1 for leaf in tree_leaves(tree)))

    def test_balance_and_min_node_size_on_every_split(self):
        cfg = ForestConfig(num_trees=10, min_node_size=3, gamma=0.2, subsample_fraction=0.7, honest=False, mtry=4, seed=8)
        forest = fit(self.d, cfg)

        def check(node):
            if isinstance(node, LeafNode):
                return
            k = node_members(node).size
            left, right = node_members(node.left).size, node_members(node.right).size
            self.assertGreaterEqual(min(left, right), max(3, 0.2 * k))
            check(node.left)
            check(node.right)

        for tree in forest.trees:
            check(tree)

    def test_honest_leaves_come_from_estimation_half(self):
        cfg = ForestConfig.default_for(SplitRule.GRF_QUANTILE, 4, num_trees=1, min_node_size=2)
        builder = TreeBuilder(self.d, cfg, cfg.resolved_mtry(4))
        seeds = np.random.SeedSequence(17).spawn(5)
        for seq in seeds:
            split_idx, est_idx, inbag = builder.draw_samples(np.random.Generator(np.random.PCG64(seq)))
            self.assertEqual(np.intersect1d(split_idx, est_idx).size, 0)
            np.testing.assert_array_equal(np.sort(np.concatenate([split_idx, est_idx])), inbag)
            root, _ = builder.build(seq)
            self.assertTrue(np.isin(node_members(root), est_idx).all())

    def test_constant_features_with_grf_rule_give_leaves(self):
        d = Dataset(features=np.ones((30, 2)), y=np.arange(30.0), delta=np.ones(30))
        forest = fit(d, ForestConfig.default_for(SplitRule.GRF_QUANTILE, 2, num_trees=4, min_node_size=1))
        self.assertTrue(all(isinstance(t, LeafNode) for t in forest.trees))

    def test_same_seed_same_forest_across_thread_counts(self):
        cfg = ForestConfig.default_for(SplitRule.GRF_QUANTILE, 4, num_trees=16, min_node_size=3, seed=21)
        self.assertEqual(fit(self.d, cfg, threads=1).to_json(), fit(self.d, cfg, threads=8).to_json())

    def test_signal_feature_at_root(self):
        n, trees = (1000, 1000) if SLOW else (500, 60)
        d = generate(SimSpec(model="aft", n=n, p=20, seed=3))
        cfg = ForestConfig.default_for(SplitRule.CART_VARIANCE, 20, num_trees=trees, min_node_size=20, mtry=20, seed=3)
        roots = [t.split_feature for t in fit(d, cfg, threads=4).trees if isinstance(t, SplitNode)]
        self.assertGreaterEqual(sum(f == 0 for f in roots), 0.9 * trees)


class TestSerialization(unittest.TestCase):
    def test_json_round_trip_is_stable(self):
        d = random_dataset(np.random.default_rng(6), 60, 3)
        forest = fit(d, ForestConfig.default_for(SplitRule.GRF_QUANTILE, 3, num_trees=5, min_node_size=2, seed=2))
        payload = forest.to_json()
        again = Forest.from_json(payload)
        self.assertEqual(again.to_json(), payload)
        self.assertEqual(again.config, forest.config)
        for a, b in itertools.zip_longest(forest.trees, again.trees):
            np.testing.assert_array_equal(node_members(a), node_members(b))

    def test_format_tag_checked(self):
        with self.assertRaises(SchemaError):
            Forest.from_json(b'{"format": "something-else", "trees": []}')

    def test_invalid_json(self):
        with self.assertRaises(SchemaError):
            Forest.from_json(b"not json")


if __name__ == "__main__":
    unittest.main()
