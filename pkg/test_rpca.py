#!/usr/bin/env python3
"""
Tests for robust PCA by ADMM and component score rasters
"""

import numpy as np
import pytest

from errors import DataError
from pointcloud_io import RasterGrid
from rpca import rpca, soft_threshold, pc_score_rasters, stack_to_matrix, reduce_features


def low_rank_plus_sparse(m=200, n=60, rank=2, fraction=0.05, seed=0):
    rng = np.random.default_rng(seed)
    L = rng.normal(size=(m, rank)) @ rng.normal(size=(rank, n))
    S = np.zeros((m, n))
    mask = rng.random((m, n)) < fraction
    S[mask] = rng.choice([-10.0, 10.0], int(mask.sum()))
    return L, S


def test_soft_threshold():
    np.testing.assert_array_equal(soft_threshold(np.array([-3.0, -0.5, 0.0, 2.0]), 1.0), [-2.0, 0.0, 0.0, 1.0])


def test_recovers_low_rank_part():
    L, S = low_rank_plus_sparse()
    result = rpca(L + S, max_iter=500)
    assert result.converged
    assert result.iterations <= 500
    assert np.linalg.norm(result.L - L) / np.linalg.norm(L) < 1e-3
    assert result.lam == pytest.approx(1 / np.sqrt(200))


def test_incumbent_objective_never_increases():
    L, S = low_rank_plus_sparse(m=80, n=30, seed=1)
    history = rpca(L + S, max_iter=300).incumbent_history
    assert all(b <= a + 1e-9 for a, b in zip(history, history[1:]))


def test_rank_one_without_corruption():
    u = 1.0 + 0.1 * np.arange(10)
    M = np.outer(u, u[:6])
    result = rpca(M, tol=1e-9, max_iter=2000)
    np.testing.assert_allclose(result.L, M, atol=1e-4 * np.abs(M).max())
    assert np.abs(result.S).max() < 1e-4 * np.abs(M).max()


def test_zero_matrix():
    result = rpca(np.zeros((5, 4)))
    assert result.converged
    assert not result.L.any() and not result.S.any()


def test_iteration_cap_is_reported():
    L, S = low_rank_plus_sparse(m=60, n=20, seed=2)
    result = rpca(L + S, max_iter=3)
    assert not result.converged
    assert result.iterations == 3


def test_rejects_non_finite_input():
    with pytest.raises(DataError):
        rpca(np.array([[1.0, np.nan]]))


def test_score_rasters_follow_geometry():
    geometry = RasterGrid((0.0, 0.0), 1.0, np.zeros((4, 5)))
    rng = np.random.default_rng(4)
    L = rng.normal(size=(20, 6))
    rasters = pc_score_rasters(L, geometry, components=(2, 5))
    assert len(rasters) == 4
    assert all(r.same_geometry(geometry) for r in rasters)
    _, s, _ = np.linalg.svd(L, full_matrices=False)
    assert np.linalg.norm(rasters[0].values) == pytest.approx(s[1])


def test_split_scales_with_the_input():
    L, S = low_rank_plus_sparse(m=80, n=30, seed=3)
    base = rpca(L + S, max_iter=500)
    for c in (2.0 ** -6, 2.0 ** 10, 37.5):
        scaled = rpca(c * (L + S), max_iter=500)
        assert scaled.converged == base.converged
        assert np.linalg.norm(scaled.L - c * base.L) <= 1e-5 * c * np.linalg.norm(base.L)
        assert np.linalg.norm(scaled.S - c * base.S) <= 1e-5 * c * np.linalg.norm(base.S)


def test_score_rasters_are_mutually_orthogonal():
    geometry = RasterGrid((0.0, 0.0), 1.0, np.zeros((6, 7)))
    rng = np.random.default_rng(8)
    for _ in range(10):
        L = rng.normal(size=(42, 3)) @ rng.normal(size=(3, 9)) + 0.1 * rng.normal(size=(42, 9))
        rasters = pc_score_rasters(L, geometry, components=(1, 6))
        scores = np.column_stack([r.values.ravel() for r in rasters])
        gram = scores.T @ scores
        off_diagonal = gram - np.diag(np.diag(gram))
        assert np.abs(off_diagonal).max() <= 1e-10 * gram[0, 0]


def test_score_rasters_need_enough_rank():
    geometry = RasterGrid((0.0, 0.0), 1.0, np.zeros((4, 5)))
    L = np.outer(np.arange(20.0), np.ones(6))
    with pytest.raises(DataError, match="rank 1 < component 5"):
        pc_score_rasters(L, geometry, components=(2, 5))


def test_stack_to_matrix_checks_geometry():
    a = RasterGrid((0.0, 0.0), 1.0, np.ones((2, 3)))
    b = RasterGrid((1.0, 0.0), 1.0, np.ones((2, 3)))
    with pytest.raises(DataError):
        stack_to_matrix([a, b])
    M, geometry = stack_to_matrix([a, a.with_values(np.full((2, 3), 2.0))])
    assert M.shape == (6, 2)
    assert geometry is a


def test_reduce_features_end_to_end():
    rng = np.random.default_rng(5)
    geometry = RasterGrid((0.0, 0.0), 1.0, np.zeros((10, 10)))
    pixels = rng.random((100, 6)) @ rng.random((6, 8))
    bands = [geometry.with_values(pixels[:, b].reshape(10, 10)) for b in range(8)]
    rasters, result = reduce_features(bands, components=(2, 3), max_iter=300)
    assert len(rasters) == 2
    assert result.L.shape == (100, 8)
