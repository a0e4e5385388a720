"""k-nearest-neighbour distance statistics (brute force and KD-tree paths).

Run: python -m pytest tests/one-offs/test_knn.py -v
"""

from __future__ import annotations

import numpy as np
import pytest

from cnerf.errors import PreconditionError
from cnerf.knn import knn_distances, mean_knn_distances


class TestKnnDistances:
    def test_points_on_a_line(self):
        P = np.array([[0.0, 0, 0], [1.0, 0, 0], [3.0, 0, 0], [6.0, 0, 0]])
        d = knn_distances(P, k=2)
        np.testing.assert_allclose(d, [[1, 3], [1, 2], [2, 3], [3, 5]])

    def test_ascending_rows(self):
        P = np.random.default_rng(0).normal(size=(300, 3))
        d = knn_distances(P, k=5)
        assert d.shape == (300, 5)
        assert np.all(np.diff(d, axis=1) >= 0)
        assert np.all(d > 0)

    def test_exact_and_tree_paths_agree(self):
        P = np.random.default_rng(1).uniform(-1, 1, size=(500, 3))
        exact = knn_distances(P, k=4)
        tree = knn_distances(P, k=4, exact_limit=10)
        np.testing.assert_allclose(exact, tree, rtol=0, atol=1e-12)

    def test_duplicates_count_at_zero_distance(self):
        P = np.array([[0.0, 0, 0], [0.0, 0, 0], [2.0, 0, 0]])
        for limit in (100, 1):
            d = knn_distances(P, k=1, exact_limit=limit)
            np.testing.assert_allclose(d[:, 0], [0.0, 0.0, 2.0])

    def test_too_few_points(self):
        with pytest.raises(PreconditionError):
            knn_distances(np.zeros((3, 3)), k=3)
        with pytest.raises(PreconditionError):
            knn_distances(np.zeros((5, 3)), k=0)


class TestMeanKnn:
    def test_mean_of_neighbours(self):
        P = np.array([[0.0, 0, 0], [1.0, 0, 0], [3.0, 0, 0], [6.0, 0, 0]])
        np.testing.assert_allclose(mean_knn_distances(P, k=2), [2.0, 1.5, 2.5, 4.0])

    def test_isolated_point_stands_out(self):
        rng = np.random.default_rng(2)
        P = np.vstack([rng.normal(scale=0.01, size=(100, 3)), [[5.0, 5.0, 5.0]]])
        means = mean_knn_distances(P, k=8)
        assert int(np.argmax(means)) == 100
