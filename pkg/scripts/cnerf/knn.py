"""Mean distance to the k nearest neighbours of every point.

Exact brute force below EXACT_LIMIT points, a KD-tree above it. Both paths
return the k smallest distances to *other* points (duplicates of a point
count as neighbours at distance 0), summed in ascending order.
"""

from __future__ import annotations

import numpy as np
from scipy.spatial import cKDTree

from cnerf.errors import PreconditionError
from cnerf.workers import chunk_bounds, get_max_threads, ordered_map

EXACT_LIMIT = 20_000

# Upper bound on (rows x points) per brute-force block.
_BLOCK_ELEMENTS = 2_000_000


def _brute_block(points: np.ndarray, start: int, stop: int, k: int) -> np.ndarray:
    block = points[start:stop]
    dx = block[:, None, 0] - points[None, :, 0]
    dy = block[:, None, 1] - points[None, :, 1]
    dz = block[:, None, 2] - points[None, :, 2]
    dist = np.sqrt(dx * dx + dy * dy + dz * dz)
    rows = np.arange(stop - start)
    dist[rows, start + rows] = np.inf
    nearest = np.sort(np.partition(dist, k - 1, axis=1)[:, :k], axis=1)
    return nearest


def knn_distances(points: np.ndarray, k: int, exact_limit: int = EXACT_LIMIT) -> np.ndarray:
    """(n, k) ascending distances to each point's k nearest other points."""
    P = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    n = len(P)
    if k < 1:
        raise PreconditionError(f"k must be >= 1, got {k}")
    if n <= k:
        raise PreconditionError(f"need more than k={k} points for kNN statistics, got {n}")

    if n <= exact_limit:
        rows = max(1, _BLOCK_ELEMENTS // n)
        blocks = chunk_bounds(n, rows)
        parts = ordered_map(lambda b: _brute_block(P, b[0], b[1], k), blocks)
        return np.concatenate(parts, axis=0)

    tree = cKDTree(P)
    dist, _ = tree.query(P, k=k + 1, workers=get_max_threads())
    # Column 0 is a zero-distance hit (the point itself or an exact duplicate).
    return dist[:, 1:]


def mean_knn_distances(points: np.ndarray, k: int, exact_limit: int = EXACT_LIMIT) -> np.ndarray:
    """Mean of each point's k nearest-neighbour distances."""
    nearest = knn_distances(points, k, exact_limit)
    total = np.zeros(len(nearest))
    for j in range(nearest.shape[1]):
        total += nearest[:, j]
    return total / k
