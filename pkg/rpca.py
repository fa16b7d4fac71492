"""
Robust PCA (principal component pursuit) by ADMM and principal-component
score rasters for hyperspectral feature reduction.

    min ||L||_* + lambda ||S||_1   subject to   M = L + S
"""

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.sparse.linalg import svds

from errors import DataError
from pointcloud_io import RasterGrid

logger = logging.getLogger(__name__)

# below this size every singular value thresholding step uses a dense SVD
DENSE_SVD_LIMIT = 1000


@dataclass
class RpcaResult:
    L: np.ndarray
    S: np.ndarray
    iterations: int
    primal_residual: float
    converged: bool
    lam: float
    objective_history: list = field(default_factory=list, repr=False)
    incumbent_history: list = field(default_factory=list, repr=False)


def soft_threshold(X, tau):
    return np.sign(X) * np.maximum(np.abs(X) - tau, 0.0)


def _svt(X, tau, rank_hint):
    """Singular value thresholding; returns (thresholded matrix, nuclear norm, rank)"""
    m, n = X.shape
    if max(m, n) < DENSE_SVD_LIMIT or min(m, n) <= rank_hint + 6:
        U, s, Vt = np.linalg.svd(X, full_matrices=False)
    else:
        k = min(rank_hint + 5, min(m, n) - 1)
        while True:
            U, s, Vt = svds(X, k=k, v0=np.ones(min(m, n)))
            order = np.argsort(s)[::-1]
            U, s, Vt = U[:, order], s[order], Vt[order]
            if s[-1] <= tau or k >= min(m, n) - 1:
                break
            k = min(2 * k, min(m, n) - 1)
        if s[-1] > tau and k >= min(m, n) - 1:
            U, s, Vt = np.linalg.svd(X, full_matrices=False)

    s = np.maximum(s - tau, 0.0)
    rank = int((s > 0).sum())
    L = (U[:, :rank] * s[:rank]) @ Vt[:rank]
    return L, float(s.sum()), rank


def rpca(M, lam=None, tol=1e-7, max_iter=1000, rho=None):
    """Split M into low-rank L and sparse S with fixed-penalty ADMM.

    Stops once ||M - L - S||_F <= tol * ||M||_F or after max_iter; a run
    that hits the cap is flagged as not converged.
    """
    M = np.asarray(M, dtype=float)
    if M.ndim != 2:
        raise DataError(f"rpca expects a 2D matrix, got shape {M.shape}")
    if not np.all(np.isfinite(M)):
        raise DataError("rpca input contains non-finite entries")

    m, n = M.shape
    lam = 1.0 / np.sqrt(max(m, n)) if lam is None else float(lam)
    if lam <= 0:
        raise DataError("lambda must be positive")

    norm_fro = np.linalg.norm(M)
    norm_l1 = np.abs(M).sum()
    if rho is None:
        rho = 0.25 * m * n / norm_l1 if norm_l1 > 0 else 1.0

    L = np.zeros_like(M)
    S = np.zeros_like(M)
    Y = np.zeros_like(M)
    rank = 1
    objectives, incumbents = [], []
    residual = norm_fro
    converged = False

    iteration = 0
    for iteration in range(1, max_iter + 1):
        L, nuclear, rank = _svt(M - S + Y / rho, 1.0 / rho, rank)
        S = soft_threshold(M - L + Y / rho, lam / rho)
        R = M - L - S
        Y = Y + rho * R

        residual = float(np.linalg.norm(R))
        objectives.append(nuclear + lam * np.abs(S).sum())
        feasible = nuclear + lam * np.abs(M - L).sum()
        incumbents.append(min(feasible, incumbents[-1]) if incumbents else feasible)

        if residual <= tol * norm_fro:
            converged = True
            break

    if converged:
        logger.info(f"rPCA converged in {iteration} iterations (rank {rank}, residual {residual:.3e})")
    else:
        logger.warning(f"rPCA stopped after {iteration} iterations without converging "
                       f"(residual {residual:.3e}, target {tol * norm_fro:.3e})")

    return RpcaResult(L, S, iteration, residual, converged, lam, objectives, incumbents)


def numerical_rank(s, shape):
    if len(s) == 0 or s[0] == 0:
        return 0
    return int((s > s[0] * max(shape) * np.finfo(float).eps).sum())


def pc_score_rasters(L, geometry, components=(2, 5)):
    """Principal-component score rasters of L (uncentered SVD, 1-indexed components).

    `components` is an inclusive (first, last) range; pixel rows of L follow
    the row-major layout of `geometry`.
    """
    L = np.asarray(L, dtype=float)
    first, last = components
    if first < 1 or last < first:
        raise DataError(f"invalid component range {components}")
    if L.shape[0] != geometry.values.size:
        raise DataError(f"L has {L.shape[0]} pixels, geometry has {geometry.values.size}")

    U, s, _ = np.linalg.svd(L, full_matrices=False)
    rank = numerical_rank(s, L.shape)
    if last > rank:
        raise DataError(f"rank {rank} < component {last}")

    rasters = []
    for c in range(first, last + 1):
        scores = U[:, c - 1] * s[c - 1]
        rasters.append(RasterGrid(geometry.origin, geometry.cell_size, scores.reshape(geometry.values.shape)))
    return rasters


def stack_to_matrix(rasters):
    """Flatten a band stack into a pixels x bands matrix (row-major pixels)"""
    if not rasters:
        raise DataError("band stack is empty")
    reference = rasters[0]
    for grid in rasters[1:]:
        if not grid.same_geometry(reference):
            raise DataError("band rasters must share origin, cell size and dimensions")
    M = np.column_stack([grid.values.astype(float).reshape(-1) for grid in rasters])
    if not np.all(np.isfinite(M)):
        raise DataError("band rasters contain NODATA or non-finite pixels")
    return M, reference


def reduce_features(bands, components=(2, 5), lam=None, tol=1e-7, max_iter=1000):
    """Band stack -> rPCA low-rank part -> principal-component score rasters"""
    M, geometry = stack_to_matrix(bands)
    result = rpca(M, lam=lam, tol=tol, max_iter=max_iter)
    rasters = pc_score_rasters(result.L, geometry, components)
    logger.info(f"Reduced {len(bands)} bands to {len(rasters)} score rasters")
    return rasters, result
