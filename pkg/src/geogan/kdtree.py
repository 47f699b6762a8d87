"""Exact Euclidean k-nearest-neighbour search over feature vectors.

A small KD-tree (median split on the widest dimension) with a linear-scan
fallback. Both paths compute distances with the same routine and order
candidates by ``(distance, id)``, so they return identical answers,
including on ties.
"""
from __future__ import annotations

import heapq
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .exceptions import ValidationError

ALGORITHMS = ("auto", "kd_tree", "brute")
# beyond this many dimensions pruning rarely pays off
AUTO_MAX_DIM = 16


def _sq_dists(points: np.ndarray, q: np.ndarray) -> np.ndarray:
    diff = points - q
    return np.einsum("ij,ij->i", diff, diff)


@dataclass
class _Node:
    idx: np.ndarray                  # point indices (leaves only)
    dim: int = -1
    split: float = 0.0
    left: Optional["_Node"] = None
    right: Optional["_Node"] = None

    @property
    def is_leaf(self) -> bool:
        return self.left is None


class KDTree:
    def __init__(self, points: np.ndarray, leaf_size: int = 16):
        self.points = np.ascontiguousarray(points, dtype=np.float64)
        if self.points.ndim != 2:
            raise ValidationError("KDTree points must be (n, d)")
        if leaf_size < 1:
            raise ValidationError("leaf_size must be >= 1")
        self.leaf_size = leaf_size
        self.root = self._build(np.arange(self.points.shape[0]))

    def _build(self, idx: np.ndarray) -> _Node:
        if idx.size <= self.leaf_size:
            return _Node(idx)
        pts = self.points[idx]
        spread = pts.max(axis=0) - pts.min(axis=0)
        dim = int(np.argmax(spread))
        if spread[dim] == 0:
            return _Node(idx)
        order = np.argsort(pts[:, dim], kind="stable")
        mid = idx.size // 2
        split = float(pts[order[mid], dim])
        left = idx[order[:mid]]
        right = idx[order[mid:]]
        return _Node(np.empty(0, np.int64), dim, split, self._build(left), self._build(right))

    def query(self, q: np.ndarray, k: int, rank: np.ndarray) -> List[Tuple[float, int]]:
        """k best ``(sq_dist, index)`` pairs ordered by (distance, rank[index])."""
        # max-heap of the current best k as (-d, -rank, index)
        heap: List[Tuple[float, int, int]] = []

        def worse_than_worst(d: float, r: int) -> bool:
            if len(heap) < k:
                return False
            wd, wr = -heap[0][0], -heap[0][1]
            return (d, r) > (wd, wr)

        def visit(node: _Node) -> None:
            if node.is_leaf:
                if node.idx.size == 0:
                    return
                dists = _sq_dists(self.points[node.idx], q)
                for d, i in zip(dists.tolist(), node.idx.tolist()):
                    r = int(rank[i])
                    if not worse_than_worst(d, r):
                        heapq.heappush(heap, (-d, -r, i))
                        if len(heap) > k:
                            heapq.heappop(heap)
                return
            diff = q[node.dim] - node.split
            near, far = (node.left, node.right) if diff < 0 else (node.right, node.left)
            visit(near)
            # equality keeps tied candidates reachable
            if len(heap) < k or diff * diff <= -heap[0][0]:
                visit(far)

        visit(self.root)
        return sorted(((-nd, i) for nd, _, i in heap), key=lambda t: (t[0], rank[t[1]]))


class SimilarityIndex:
    """Nearest-neighbour index over discriminator feature vectors."""

    def __init__(self, vectors, ids: Sequence[str], algorithm: str = "auto", leaf_size: int = 16):
        X = np.asarray(vectors, dtype=np.float64)
        if X.ndim != 2:
            raise ValidationError("feature vectors must be a 2-D (n, d) array")
        if X.shape[0] == 0:
            raise ValidationError("cannot build an empty similarity index")
        ids = [str(i) for i in ids]
        if len(ids) != X.shape[0]:
            raise ValidationError(f"{len(ids)} ids for {X.shape[0]} vectors")
        if len(set(ids)) != len(ids):
            raise ValidationError("ids must be unique")
        if not np.all(np.isfinite(X)):
            raise ValidationError("feature vectors contain non-finite values")
        if algorithm not in ALGORITHMS:
            raise ValidationError(f"algorithm must be one of {ALGORITHMS}")
        if algorithm == "auto":
            algorithm = "kd_tree" if X.shape[1] <= AUTO_MAX_DIM else "brute"
        self.vectors = np.ascontiguousarray(X)
        self.ids = ids
        self.algorithm = algorithm
        # position of each id in sorted order, used for tie-breaking
        self._rank = np.empty(len(ids), dtype=np.int64)
        self._rank[np.argsort(np.array(ids), kind="stable")] = np.arange(len(ids))
        self.tree = KDTree(self.vectors, leaf_size) if algorithm == "kd_tree" else None

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    def __len__(self) -> int:
        return len(self.ids)

    def query(self, vector, k: int = 1) -> Tuple[List[str], np.ndarray]:
        """The ``k`` nearest ids and their Euclidean distances."""
        q = np.asarray(vector, dtype=np.float64).reshape(-1)
        if q.size != self.dim:
            raise ValidationError(f"query has dimension {q.size}, index has {self.dim}")
        if not 1 <= k <= len(self):
            raise ValidationError(f"k must be in [1, {len(self)}], got {k}")
        if self.tree is not None:
            best = self.tree.query(q, k, self._rank)
        else:
            d = _sq_dists(self.vectors, q)
            order = np.lexsort((self._rank, d))[:k]
            best = [(float(d[i]), int(i)) for i in order]
        return [self.ids[i] for _, i in best], np.sqrt(np.array([d for d, _ in best]))


def build_similarity_index(vectors, ids: Sequence[str], algorithm: str = "auto") -> SimilarityIndex:
    return SimilarityIndex(vectors, ids, algorithm)


def knn_query(index: SimilarityIndex, vector, k: int = 1) -> Tuple[List[str], np.ndarray]:
    return index.query(vector, k)
