"""Regression trees and forests grown on the observed (censored) response.

Two splitting rules share one scorer. Both maximise the heterogeneity

    Δ̃(C1, C2) = Σ_j (Σ_{i ∈ C_j} ρ_i)² / |C_j|

over admissible thresholds; they differ only in the pseudo-response ρ:

* ``cart_variance``: ρ_i = y_i - ȳ_P, which makes Δ̃ the usual variance reduction;
* ``grf_quantile``: one column per τ, ρ_i(τ) = 1{y_i > q̂_P(τ)} - (1 - τ).

The censoring indicator never enters splitting.
"""

import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Any, Dict, List, Optional, Sequence, Union

import numpy as np
import orjson
from tqdm import tqdm

from crforest.config import ForestConfig, SplitRule
from crforest.data_model import Dataset, round_half_away, validate
from crforest.errors import ConfigError, SchemaError
from crforest.utils import write_bytes

logger = logging.getLogger(__name__)

FORMAT_TAG = "crforest-forest/1"
# orjson refuses documents nested deeper than 254 levels
MAX_SERIALIZABLE_DEPTH = 240
GAIN_RTOL = 1e-10


# ======================================================
# 🌳 Tree structure
# ======================================================

@dataclass(frozen=True, eq=False)
class LeafNode:
    member_indices: np.ndarray  # sorted distinct training indices used for weighting

    @property
    def size(self) -> int:
        return int(self.member_indices.size)


@dataclass(frozen=True)
class SplitNode:
    split_feature: int
    split_threshold: float
    left: "TreeNode"
    right: "TreeNode"


TreeNode = Union[SplitNode, LeafNode]


@dataclass(frozen=True)
class Split:
    feature: int
    threshold: float
    gain: float


@dataclass(frozen=True, eq=False)
class Forest:
    trees: List[TreeNode]
    config: ForestConfig
    training_n: int
    inbag: List[np.ndarray]  # per tree, sorted distinct indices drawn for it

    @property
    def num_trees(self) -> int:
        return len(self.trees)

    def to_json(self) -> bytes:
        document = {
            "format": FORMAT_TAG,
            "config": self.config.model_dump(mode="json"),
            "training_n": self.training_n,
            "trees": [
                {"inbag": inbag.tolist(), "root": _node_to_dict(root)}
                for root, inbag in zip(self.trees, self.inbag)
            ],
        }
        return orjson.dumps(document, option=orjson.OPT_SORT_KEYS)

    @classmethod
    def from_json(cls, payload: Union[bytes, str]) -> "Forest":
        try:
            document = orjson.loads(payload)
        except orjson.JSONDecodeError as e:
            raise SchemaError(f"forest file is not valid JSON: {e}") from e
        if document.get("format") != FORMAT_TAG:
            raise SchemaError(f"unsupported forest format {document.get('format')!r}, expected {FORMAT_TAG}")
        return cls(
            trees=[_node_from_dict(tree["root"]) for tree in document["trees"]],
            config=ForestConfig.build(**document["config"]),
            training_n=int(document["training_n"]),
            inbag=[np.asarray(tree["inbag"], dtype=np.int64) for tree in document["trees"]],
        )

    def save(self, path: str) -> None:
        write_bytes(path, self.to_json())

    @classmethod
    def load(cls, path: str) -> "Forest":
        with open(path, "rb") as f:
            return cls.from_json(f.read())


def _node_to_dict(node: TreeNode) -> Dict[str, Any]:
    if isinstance(node, LeafNode):
        return {"leaf": node.member_indices.tolist()}
    return {
        "feature": node.split_feature,
        "threshold": node.split_threshold,
        "left": _node_to_dict(node.left),
        "right": _node_to_dict(node.right),
    }


def _node_from_dict(data: Dict[str, Any]) -> TreeNode:
    if "leaf" in data:
        return LeafNode(np.asarray(data["leaf"], dtype=np.int64))
    return SplitNode(
        split_feature=int(data["feature"]),
        split_threshold=float(data["threshold"]),
        left=_node_from_dict(data["left"]),
        right=_node_from_dict(data["right"]),
    )


def route(tree: TreeNode, x: np.ndarray) -> LeafNode:
    """The unique leaf reached by threshold routing (x[f] <= t goes left)."""
    node = tree
    while isinstance(node, SplitNode):
        node = node.left if x[node.split_feature] <= node.split_threshold else node.right
    return node


def apply(tree: TreeNode, X: np.ndarray) -> List[LeafNode]:
    """Routes every row of X at once; returns the leaf per row."""
    X = np.atleast_2d(X)
    leaves: List[Optional[LeafNode]] = [None] * X.shape[0]
    stack = [(tree, np.arange(X.shape[0]))]
    while stack:
        node, rows = stack.pop()
        if rows.size == 0:
            continue
        if isinstance(node, LeafNode):
            for r in rows:
                leaves[r] = node
            continue
        go_left = X[rows, node.split_feature] <= node.split_threshold
        stack.append((node.left, rows[go_left]))
        stack.append((node.right, rows[~go_left]))
    return leaves


def tree_depth(node: TreeNode) -> int:
    if isinstance(node, LeafNode):
        return 0
    return 1 + max(tree_depth(node.left), tree_depth(node.right))


def tree_leaves(node: TreeNode) -> List[LeafNode]:
    if isinstance(node, LeafNode):
        return [node]
    return tree_leaves(node.left) + tree_leaves(node.right)


# ======================================================
# ✂️ Split search
# ======================================================

def heterogeneity(rho: np.ndarray, left_mask: np.ndarray) -> float:
    """Direct evaluation of Δ̃(C1, C2) summed over pseudo-response columns."""
    rho = rho.reshape(rho.shape[0], -1)
    total = 0.0
    for mask in (left_mask, ~left_mask):
        count = int(mask.sum())
        if count:
            total += float((rho[mask].sum(axis=0) ** 2).sum() / count)
    return total


def cart_pseudo_responses(y: np.ndarray) -> np.ndarray:
    return (y - y.mean())[:, None]


def grf_pseudo_responses(y: np.ndarray, taus: Sequence[float]) -> np.ndarray:
    q = np.quantile(y, taus, method="inverted_cdf")
    return (y[:, None] > q[None, :]).astype(np.float64) - (1.0 - np.asarray(taus))[None, :]


def min_child_size(k: int, min_node_size: int, gamma: float) -> int:
    return max(min_node_size, math.ceil(gamma * k - 1e-9), 1)


def midpoint(lo: float, hi: float) -> float:
    """Threshold t with lo <= t < hi; falls back to lo when (lo + hi)/2 rounds up to hi."""
    mid = (float(lo) + float(hi)) / 2.0
    return mid if mid < hi else float(lo)


def best_split_from_pseudo(
    X_node: np.ndarray,
    rho: np.ndarray,
    candidate_features: Sequence[int],
    min_node_size: int,
    gamma: float,
) -> Optional[Split]:
    """Maximises Δ̃ over midpoints between distinct sorted values.

    Ties go to the lowest feature index, then the smallest threshold.
    """
    k = rho.shape[0]
    min_child = min_child_size(k, min_node_size, gamma)
    if k < 2 * min_child:
        return None
    total = rho.sum(axis=0)
    parent = float((total ** 2).sum() / k)
    tolerance = GAIN_RTOL * float((rho ** 2).sum())
    n_left = np.arange(1, k, dtype=np.float64)
    admissible_size = (n_left >= min_child) & (k - n_left >= min_child)

    best: Optional[Split] = None
    for f in sorted(candidate_features):
        xs = X_node[:, f]
        order = np.argsort(xs, kind="stable")
        xs_sorted = xs[order]
        valid = admissible_size & (xs_sorted[:-1] < xs_sorted[1:])
        if not valid.any():
            continue
        left = np.cumsum(rho[order], axis=0)[:-1]
        right = total[None, :] - left
        score = (left ** 2).sum(axis=1) / n_left + (right ** 2).sum(axis=1) / (k - n_left)
        score = np.where(valid, score, -np.inf)
        pos = int(np.argmax(score))
        gain = float(score[pos]) - parent
        if gain > tolerance and gain > 0.0 and (best is None or gain > best.gain):
            best = Split(feature=int(f), threshold=midpoint(xs_sorted[pos], xs_sorted[pos + 1]), gain=gain)
    return best


def best_split_cart(
    indices: np.ndarray,
    d: Dataset,
    candidate_features: Sequence[int],
    min_node_size: int = 1,
    gamma: float = 0.05,
) -> Optional[Split]:
    indices = np.asarray(indices, dtype=np.int64)
    y = d.y[indices]
    if y.size < 2 or np.ptp(y) == 0.0:
        return None
    return best_split_from_pseudo(d.features[indices], cart_pseudo_responses(y), candidate_features, min_node_size, gamma)


def best_split_grf(
    indices: np.ndarray,
    d: Dataset,
    candidate_features: Sequence[int],
    taus: Sequence[float],
    min_node_size: int = 1,
    gamma: float = 0.05,
) -> Optional[Split]:
    indices = np.asarray(indices, dtype=np.int64)
    y = d.y[indices]
    if y.size < 2 or np.ptp(y) == 0.0:
        return None
    return best_split_from_pseudo(d.features[indices], grf_pseudo_responses(y, taus), candidate_features, min_node_size, gamma)


# ======================================================
# 🌲 Growing
# ======================================================

class TreeBuilder:
    """Grows one tree from its own RNG stream."""

    def __init__(self, d: Dataset, cfg: ForestConfig, mtry: int):
        self.X = d.features
        self.y = d.y
        self.n, self.p = d.n, d.p
        self.cfg = cfg
        self.mtry = mtry
        self.max_depth = MAX_SERIALIZABLE_DEPTH

    def draw_samples(self, rng: np.random.Generator):
        """Returns (splitting sample, weighting sample, in-bag set)."""
        cfg = self.cfg
        if cfg.bootstrap:
            sample = rng.integers(0, self.n, size=self.n)
            return sample, sample, np.unique(sample)
        s = min(self.n, max(1, round_half_away(cfg.subsample_fraction * self.n)))
        sample = rng.choice(self.n, size=s, replace=False)
        if not cfg.honest:
            return sample, sample, np.sort(sample)
        if s < 2:
            raise ConfigError(f"honest trees need a subsample of at least 2, got {s}")
        half = s // 2
        return sample[:half], sample[half:], np.sort(sample)

    def build(self, seed_seq: np.random.SeedSequence):
        rng = np.random.Generator(np.random.PCG64(seed_seq))
        split_idx, est_idx, inbag = self.draw_samples(rng)
        root = self._grow(rng, split_idx, est_idx, 0)
        return root, inbag

    def _find_split(self, rng: np.random.Generator, split_idx: np.ndarray) -> Optional[Split]:
        y = self.y[split_idx]
        if np.ptp(y) == 0.0:
            return None
        features = np.sort(rng.choice(self.p, size=self.mtry, replace=False))
        if self.cfg.split_rule is SplitRule.GRF_QUANTILE:
            rho = grf_pseudo_responses(y, self.cfg.grf_taus)
        else:
            rho = cart_pseudo_responses(y)
        X_node = self.X[split_idx]
        return best_split_from_pseudo(X_node, rho, features, self.cfg.min_node_size, self.cfg.gamma)

    def _grow(self, rng, split_idx: np.ndarray, est_idx: np.ndarray, depth: int) -> TreeNode:
        split = None
        if split_idx.size >= 2 * self.cfg.min_node_size and depth < self.max_depth:
            split = self._find_split(rng, split_idx)
        if split is None:
            return LeafNode(np.unique(est_idx))

        f, threshold = split.feature, split.threshold
        go_left = self.X[split_idx, f] <= threshold
        est_left = self.X[est_idx, f] <= threshold
        left = self._grow(rng, split_idx[go_left], est_idx[est_left], depth + 1)
        right = self._grow(rng, split_idx[~go_left], est_idx[~est_left], depth + 1)
        if self.cfg.honest and self.cfg.prune_empty_leaves and (_is_empty_leaf(left) or _is_empty_leaf(right)):
            return LeafNode(np.unique(est_idx))
        return SplitNode(split_feature=f, split_threshold=threshold, left=left, right=right)


def _is_empty_leaf(node: TreeNode) -> bool:
    return isinstance(node, LeafNode) and node.size == 0


def fit(d: Dataset, cfg: ForestConfig, threads: int = 1, progress: bool = False) -> Forest:
    """Trains cfg.num_trees trees; the result depends only on (d, cfg)."""
    validate(d)
    if cfg.min_node_size > d.n:
        raise ConfigError(f"min_node_size={cfg.min_node_size} exceeds n={d.n}")
    builder = TreeBuilder(d, cfg, cfg.resolved_mtry(d.p))
    seeds = np.random.SeedSequence(cfg.seed).spawn(cfg.num_trees)

    started = time.perf_counter()
    logger.info(
        "Fitting %d trees (%s, honest=%s, m=%d) on n=%d p=%d",
        cfg.num_trees, cfg.split_rule.value, cfg.honest, cfg.min_node_size, d.n, d.p,
    )
    with ThreadPoolExecutor(max_workers=max(1, threads)) as pool:
        results = pool.map(builder.build, seeds)
        if progress:
            results = tqdm(results, total=cfg.num_trees, desc="trees", leave=False)
        built = list(results)

    trees = [root for root, _ in built]
    if logger.isEnabledFor(logging.DEBUG):
        depths = [tree_depth(t) for t in trees]
        logger.debug("Tree depth min/mean/max: %d/%.1f/%d", min(depths), float(np.mean(depths)), max(depths))
    logger.info("Forest fitted in %.2fs", time.perf_counter() - started)
    return Forest(trees=trees, config=cfg, training_n=d.n, inbag=[inbag for _, inbag in built])
