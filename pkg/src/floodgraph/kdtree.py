"""Exact 2D k-d tree for nearest-node queries.

Axis-aligned median splits; queries return the Euclidean-nearest point with
ties broken deterministically by the lowest point index, which a linear scan
with the same rule reproduces exactly.
"""

from __future__ import annotations

import numpy as np

_LEAF_SIZE = 8


class KDTree:
    def __init__(self, points: np.ndarray):
        pts = np.asarray(points, dtype=float)
        if pts.ndim != 2 or pts.shape[1] != 2 or pts.shape[0] == 0:
            raise ValueError("need a non-empty (n, 2) point array")
        self.points = pts
        # nodes stored as tuples: (axis, split, left, right) or ("leaf", indices)
        self._root = self._build(np.arange(pts.shape[0], dtype=np.int64), 0)

    def _build(self, idx: np.ndarray, depth: int):
        if idx.size <= _LEAF_SIZE:
            return ("leaf", np.sort(idx))
        axis = depth % 2
        coords = self.points[idx, axis]
        order = np.argsort(coords, kind="stable")
        mid = idx.size // 2
        left = idx[order[:mid]]
        right = idx[order[mid:]]
        split = float(self.points[idx[order[mid]], axis])
        return (axis, split, self._build(left, depth + 1), self._build(right, depth + 1))

    def query(self, x: float, y: float) -> tuple[int, float]:
        """Nearest point index and squared distance; ties go to the lowest index."""
        best = [np.inf, -1]

        def visit(node):
            if node[0] == "leaf":
                for i in node[1]:
                    p = self.points[i]
                    d2 = (p[0] - x) ** 2 + (p[1] - y) ** 2
                    if d2 < best[0] or (d2 == best[0] and i < best[1]):
                        best[0], best[1] = d2, int(i)
                return
            axis, split, left, right = node
            q = x if axis == 0 else y
            near, far = (left, right) if q < split else (right, left)
            visit(near)
            if (q - split) ** 2 <= best[0]:
                visit(far)

        visit(self._root)
        return best[1], best[0]

    def query_many(self, points: np.ndarray) -> np.ndarray:
        pts = np.asarray(points, dtype=float)
        out = np.empty(pts.shape[0], dtype=np.int64)
        for k in range(pts.shape[0]):
            out[k] = self.query(float(pts[k, 0]), float(pts[k, 1]))[0]
        return out


def nearest_linear_scan(points: np.ndarray, queries: np.ndarray) -> np.ndarray:
    """Brute-force oracle with the same lowest-index tie rule."""
    pts = np.asarray(points, dtype=float)
    qs = np.asarray(queries, dtype=float)
    d2 = ((qs[:, None, :] - pts[None, :, :]) ** 2).sum(axis=2)
    return np.argmin(d2, axis=1).astype(np.int64)   # argmin takes the first minimum
