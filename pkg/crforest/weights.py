"""Forest locality weights w(X_i, x): per-tree leaf shares averaged over trees."""

import logging
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence

import numpy as np

from crforest.errors import EmptyLeafError, EstimationError
from crforest.forest import Forest, LeafNode, TreeNode, apply, route

logger = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class WeightVector:
    """Sparse nonnegative weights over training indices; zero entries are omitted."""

    indices: np.ndarray  # ascending training indices
    values: np.ndarray

    @classmethod
    def from_dict(cls, weights: Dict[int, float]) -> "WeightVector":
        items = sorted((int(i), float(w)) for i, w in weights.items() if w > 0)
        return cls(
            indices=np.array([i for i, _ in items], dtype=np.int64),
            values=np.array([w for _, w in items], dtype=np.float64),
        )

    @classmethod
    def uniform(cls, indices: Sequence[int]) -> "WeightVector":
        idx = np.unique(np.asarray(indices, dtype=np.int64))
        return cls(indices=idx, values=np.full(idx.size, 1.0 / idx.size))

    @property
    def support_size(self) -> int:
        return int(self.indices.size)

    def total(self) -> float:
        return float(self.values.sum())

    def as_dict(self) -> Dict[int, float]:
        return {int(i): float(w) for i, w in zip(self.indices, self.values)}

    def dense(self, n: int) -> np.ndarray:
        out = np.zeros(n, dtype=np.float64)
        out[self.indices] = self.values
        return out

    def __len__(self) -> int:
        return self.support_size


def tree_weights(tree: TreeNode, x: np.ndarray) -> WeightVector:
    """1/k on each of the k members of the leaf reached by x."""
    return _leaf_weights(route(tree, x))


def _leaf_weights(leaf: LeafNode) -> WeightVector:
    if leaf.size == 0:
        raise EmptyLeafError("leaf reached by the query holds no weighting sample")
    return WeightVector(indices=leaf.member_indices, values=np.full(leaf.size, 1.0 / leaf.size))


def _average_leaves(leaves: List[LeafNode], training_n: int) -> WeightVector:
    contributing = [leaf for leaf in leaves if leaf.size > 0]
    if not contributing:
        raise EstimationError("every tree has an empty leaf at the query point")
    skipped = len(leaves) - len(contributing)
    if skipped:
        logger.debug("Skipped %d trees with empty leaves", skipped)
    members = np.concatenate([leaf.member_indices for leaf in contributing])
    shares = np.concatenate([np.full(leaf.size, 1.0 / leaf.size) for leaf in contributing])
    dense = np.bincount(members, weights=shares, minlength=training_n) / len(contributing)
    support = np.flatnonzero(dense > 0.0)
    return WeightVector(indices=support, values=dense[support])


def _out_of_bag(f: Forest, exclude: Optional[int]) -> List[int]:
    if exclude is None:
        return list(range(f.num_trees))
    return [t for t, inbag in enumerate(f.inbag) if not _contains(inbag, exclude)]


def _contains(sorted_indices: np.ndarray, i: int) -> bool:
    pos = int(np.searchsorted(sorted_indices, i))
    return pos < sorted_indices.size and sorted_indices[pos] == i


def forest_weights(f: Forest, x: np.ndarray, exclude: Optional[int] = None) -> WeightVector:
    """Average of tree_weights over trees with a nonempty leaf at x.

    With `exclude=i` only trees for which training row i is out-of-bag vote.
    """
    trees = _out_of_bag(f, exclude)
    if not trees:
        raise EstimationError(f"training row {exclude} is in-bag for every tree")
    return _average_leaves([route(f.trees[t], x) for t in trees], f.training_n)


def forest_weights_batch(
    f: Forest, X: np.ndarray, exclude: Optional[Sequence[int]] = None
) -> List[WeightVector]:
    """forest_weights for every row of X, routing each tree once for the whole batch."""
    X = np.atleast_2d(X)
    routed = [apply(tree, X) for tree in f.trees]
    out = []
    for r in range(X.shape[0]):
        trees = _out_of_bag(f, None if exclude is None else int(exclude[r]))
        if not trees:
            raise EstimationError(f"training row {exclude[r]} is in-bag for every tree")
        out.append(_average_leaves([routed[t][r] for t in trees], f.training_n))
    return out


def weighted_mean(w: WeightVector, y: np.ndarray) -> float:
    return float(np.dot(w.values, y[w.indices]))


def forest_mean_prediction(f: Forest, y: np.ndarray, x: np.ndarray) -> float:
    """Average over trees of the leaf mean of y; equals weighted_mean(forest_weights)."""
    means = [float(np.mean(y[leaf.member_indices])) for leaf in (route(t, x) for t in f.trees) if leaf.size]
    return float(np.mean(means))
