"""
Sparse d-neighbourhood affinity graph over LiDAR points.

    w_ij = exp(-|xy_i - xy_j|^2 / s_xy^2) * exp(-(z_i - z_j)^2 / s_z^2)
           * exp(-|f_i - f_j|^2 / s_fts^2)

for every pair within 3D distance d. The feature factor is 1 when either
point lacks features.
"""

import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import pandas as pd
from scipy import sparse
from scipy.sparse import csgraph
from scipy.spatial import cKDTree

from errors import DataError

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class GraphParams:
    d: float = 1.0
    sigma_xy: float = 1.0
    sigma_z: float = 3.0
    sigma_fts: Optional[float] = None

    def __post_init__(self):
        if not self.d > 0:
            raise DataError(f"neighbourhood radius d must be positive, got {self.d}")
        for name in ('sigma_xy', 'sigma_z', 'sigma_fts'):
            value = getattr(self, name)
            if value is not None and not value > 0:
                raise DataError(f"{name} must be positive, got {value}")
        if not 0.5 <= self.d <= 2.0:
            logger.warning(f"d = {self.d} m is outside the usual 0.5-2 m range")


@dataclass(frozen=True)
class SparseAffinity:
    """Symmetric weight matrix W, degree vector and the original vertex ids"""
    weights: sparse.csr_matrix = field(repr=False)
    index_map: np.ndarray = field(repr=False)
    degrees: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        W = sparse.csr_matrix(self.weights, dtype=float)
        W = (W - sparse.diags(W.diagonal())).tocsr()
        W.eliminate_zeros()
        object.__setattr__(self, 'weights', W)
        object.__setattr__(self, 'index_map', np.asarray(self.index_map, dtype=np.int64))
        object.__setattr__(self, 'degrees', np.asarray(W.sum(axis=1)).ravel())

    @property
    def n(self):
        return self.weights.shape[0]

    @property
    def n_edges(self):
        return self.weights.nnz // 2

    @property
    def isolated(self):
        return self.degrees <= 0

    def edges(self):
        """Upper-triangle edge list (i, j, w) with i < j"""
        upper = sparse.triu(self.weights, k=1).tocoo()
        return upper.row, upper.col, upper.data


def build_graph(cloud, params):
    """d-neighbourhood graph with the fused spatial/feature Gaussian weights"""
    has_features = cloud.has_features
    if has_features and params.sigma_fts is None:
        raise DataError("sigma_fts is required when points carry features")
    if not has_features and params.sigma_fts is not None:
        raise DataError("sigma_fts given but no point carries features")

    tree = cKDTree(cloud.xyz)
    pairs = tree.query_pairs(r=params.d, output_type='ndarray')
    i, j = pairs[:, 0], pairs[:, 1]

    dxy2 = ((cloud.xyz[i, :2] - cloud.xyz[j, :2]) ** 2).sum(axis=1)
    dz2 = (cloud.xyz[i, 2] - cloud.xyz[j, 2]) ** 2
    exponent = dxy2 / params.sigma_xy ** 2 + dz2 / params.sigma_z ** 2

    if has_features:
        present = cloud.feature_present
        both = present[i] & present[j]
        dfts2 = np.zeros(len(i))
        dfts2[both] = ((cloud.features[i[both]] - cloud.features[j[both]]) ** 2).sum(axis=1)
        exponent = exponent + dfts2 / params.sigma_fts ** 2

    w = np.exp(-exponent)
    keep = w > 0
    i, j, w = i[keep], j[keep], w[keep]

    n = cloud.n_points
    W = sparse.coo_matrix((np.concatenate([w, w]), (np.concatenate([i, j]), np.concatenate([j, i]))),
                          shape=(n, n)).tocsr()
    graph = SparseAffinity(W, np.arange(n))

    n_isolated = int(graph.isolated.sum())
    logger.info(f"Graph: {n} vertices, {graph.n_edges} edges (d={params.d} m)"
                + (f", {n_isolated} isolated" if n_isolated else ""))
    return graph


def subgraph(g, indices):
    """Induced subgraph; `index_map` keeps pointing at the original vertices"""
    indices = np.asarray(indices, dtype=np.int64).reshape(-1)
    if indices.size and (indices.min() < 0 or indices.max() >= g.n):
        raise DataError(f"subgraph index out of range [0, {g.n})")
    W = g.weights[indices][:, indices]
    return SparseAffinity(W, g.index_map[indices])


def connected_components(g):
    """Component label per vertex"""
    _, labels = csgraph.connected_components(g.weights, directed=False)
    return labels


def write_edge_list(g, path):
    i, j, w = g.edges()
    pd.DataFrame({'i': i, 'j': j, 'w': w}).to_csv(path, index=False, float_format='%.17g')
