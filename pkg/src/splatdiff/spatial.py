"""k-d tree over primitive centres (thin wrapper over scipy's cKDTree)."""

from __future__ import annotations

import numpy as np
from scipy.spatial import cKDTree


class SpatialIndex:
    """Read-only index over one scene's primitive positions.

    Safe for concurrent queries once built.
    """

    def __init__(self, points: np.ndarray):
        self.points = np.ascontiguousarray(points, dtype=np.float64).reshape(-1, 3)
        self._tree = cKDTree(self.points, balanced_tree=True, compact_nodes=True)

    def __len__(self) -> int:
        return len(self.points)

    def nearest(self, queries: np.ndarray):
        """Euclidean nearest neighbour of each query: ``(distance, index)``."""
        queries = np.asarray(queries, dtype=np.float64).reshape(-1, 3)
        if len(self.points) == 0:
            raise ValueError("nearest-neighbour query on an empty index")
        dist, idx = self._tree.query(queries, k=1)
        return dist, idx.astype(np.int64)

    def ball(self, query: np.ndarray, radius: float) -> np.ndarray:
        """Sorted indices ``j`` with ``|query - p_j| <= radius``."""
        idx = self._tree.query_ball_point(np.asarray(query, dtype=np.float64), float(radius))
        return np.array(sorted(idx), dtype=np.int64)

    def balls(self, queries: np.ndarray, radii: np.ndarray) -> list:
        """Batched :meth:`ball`; each entry is a sorted index array."""
        queries = np.asarray(queries, dtype=np.float64).reshape(-1, 3)
        radii = np.asarray(radii, dtype=np.float64).reshape(-1)
        if len(queries) == 0:
            return []
        out = self._tree.query_ball_point(queries, radii, return_sorted=True)
        return [np.asarray(o, dtype=np.int64) for o in out]
