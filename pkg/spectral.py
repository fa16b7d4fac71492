"""
Normalized-cut machinery: eigensolver, binary cut, multiclass cut with
priors, and recursive binary cut with an Ncut stopping threshold.

All cuts work on the normalized Laplacian D^-1/2 (D - W) D^-1/2 of a
SparseAffinity graph.
"""

import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import pandas as pd
import scipy.linalg
from scipy import sparse
from scipy.sparse.linalg import eigsh, ArpackNoConvergence

from affinity_graph import subgraph, connected_components
from errors import DataError, NonConvergenceError

logger = logging.getLogger(__name__)

# graphs up to this size are solved with a dense symmetric eigensolver
DENSE_EIGEN_LIMIT = 800
EIGEN_TOL = 1e-10
DEGENERATE_GAP = 1e-10

DEFAULT_TAU = 0.3
DEFAULT_MIN_POINTS = 5
DEFAULT_KAPPA = 0.8


@dataclass
class EigenPairs:
    values: np.ndarray
    vectors: np.ndarray
    residuals: np.ndarray


@dataclass
class SolveRecord:
    """One eigen solve or recursion node, kept for the diagnostics CSV"""
    kind: str
    node: str
    size: int
    ncut: Optional[float] = None
    accepted: Optional[bool] = None
    eigenvalues: tuple = ()
    residuals: tuple = ()


@dataclass
class PriorCorrelation:
    cluster: int
    correlation: float
    coverage: float
    kappa: float

    @property
    def satisfied(self):
        return self.correlation >= self.kappa


@dataclass
class CutResult:
    labels: np.ndarray
    ncut_energy: float
    C: int
    records: list = field(default_factory=list, repr=False)
    correlations: list = field(default_factory=list, repr=False)


def normalized_laplacian(g):
    if np.any(g.isolated):
        raise DataError(f"{int(g.isolated.sum())} isolated vertices; remove them before the eigen solve")
    scale = sparse.diags(1.0 / np.sqrt(g.degrees))
    N = (scale @ g.weights @ scale).tocsr()
    return (sparse.identity(g.n, format='csr') - N).tocsr(), N


def _canonical_signs(vectors):
    pivots = np.argmax(np.abs(vectors), axis=0)
    signs = np.sign(vectors[pivots, np.arange(vectors.shape[1])])
    signs[signs == 0] = 1.0
    return vectors * signs


def _eigenpairs(g, k, tol=EIGEN_TOL):
    """k smallest eigenpairs; k may equal n on the dense path"""
    laplacian, N = normalized_laplacian(g)
    n = g.n

    if n <= DENSE_EIGEN_LIMIT or k >= n - 1:
        values, vectors = scipy.linalg.eigh(laplacian.toarray(), subset_by_index=[0, k - 1])
    else:
        # largest eigenvalues of I + N = 2I - L are the smallest of L
        shifted = (sparse.identity(n, format='csr') + N).tocsr()
        v0 = np.random.default_rng(0).standard_normal(n)
        try:
            mu, vectors = eigsh(shifted, k=k, which='LA', tol=tol, v0=v0,
                                ncv=min(n, max(2 * k + 1, 20)), maxiter=max(1000, 10 * n))
        except ArpackNoConvergence as e:
            # ||(I + N)v - mu v|| equals ||L v - (2 - mu) v||
            partial = np.linalg.norm(shifted @ e.eigenvectors - e.eigenvectors * e.eigenvalues, axis=0)
            raise NonConvergenceError(
                f"eigensolver did not converge for k={k} on {n} vertices "
                f"({len(e.eigenvalues)} of {k} pairs converged)",
                residuals=tuple(partial),
            ) from e
        values = 2.0 - mu

    order = np.argsort(values, kind='stable')
    values = np.clip(values[order], 0.0, 2.0)
    vectors = _canonical_signs(vectors[:, order])
    residuals = np.linalg.norm(laplacian @ vectors - vectors * values, axis=0)
    return EigenPairs(values, vectors, residuals)


def smallest_eigenpairs(g, k, tol=EIGEN_TOL):
    """k smallest eigenpairs of the normalized Laplacian (ascending)"""
    if not 1 <= k < g.n:
        raise DataError(f"need 1 <= k < n, got k={k}, n={g.n}")
    return _eigenpairs(g, k, tol)


def ncut_energy(g, labels):
    """Sum over clusters of cut(c, V - c) / assoc(c, V)"""
    labels = np.asarray(labels)
    _, inverse = np.unique(labels, return_inverse=True)
    n_clusters = int(inverse.max()) + 1 if len(inverse) else 0

    coo = g.weights.tocoo()
    crossing = inverse[coo.row] != inverse[coo.col]
    cut = np.bincount(inverse[coo.row[crossing]], weights=coo.data[crossing], minlength=n_clusters)
    assoc = np.bincount(inverse, weights=g.degrees, minlength=n_clusters)

    terms = np.zeros(n_clusters)
    positive = assoc > 0
    terms[positive] = cut[positive] / assoc[positive]
    return float(terms.sum())


def binary_ncut(g, node='root'):
    """Two-way cut from the second-smallest eigenvector, thresholded at its mean.

    A disconnected graph is split along its components (Ncut 0). The side
    holding vertex 0 is always label 0.
    """
    if g.n < 2:
        raise DataError("binary cut needs at least two vertices")

    components = connected_components(g)
    eigenvalues, residuals = (), ()
    if components.max() > 0:
        side = components == components[0]
    elif g.n == 2:
        side = np.array([True, False])
    else:
        pairs = _eigenpairs(g, 2)
        eigenvalues, residuals = tuple(pairs.values), tuple(pairs.residuals)
        x = pairs.vectors[:, 1] / np.sqrt(g.degrees)
        side = x > x.mean()
        if side.all() or not side.any():
            side = x > np.median(x)
        if side.all() or not side.any():
            raise DataError("indivisible")

    labels = np.where(side == side[0], 0, 1)
    energy = ncut_energy(g, labels)
    record = SolveRecord('binary', node, g.n, energy, None, eigenvalues, residuals)
    return CutResult(labels, energy, 2, [record])


def _seeded_discretization(g, seeds, max_iter):
    """Nearest-centroid assignment in the spectral embedding with frozen seeds.

    `seeds` holds local cluster ids 0..C-1 for prior points and -1 elsewhere.
    """
    C = int(seeds.max()) + 1
    k = min(C + 1, g.n)
    pairs = _eigenpairs(g, k)

    dim = C
    if k > C and pairs.values[C] - pairs.values[C - 1] < DEGENERATE_GAP:
        dim = C + 1
    embedding = pairs.vectors[:, :dim] / np.sqrt(g.degrees)[:, None]

    fixed = seeds >= 0
    assign = seeds.copy()
    centroids = np.array([embedding[seeds == c].mean(axis=0) for c in range(C)])
    row_norms = (embedding ** 2).sum(axis=1)

    for _ in range(max_iter):
        dist = row_norms[:, None] - 2.0 * embedding @ centroids.T + (centroids ** 2).sum(axis=1)[None, :]
        updated = np.where(fixed, seeds, np.argmin(dist, axis=1))
        if np.array_equal(updated, assign):
            break
        assign = updated
        centroids = np.array([embedding[assign == c].mean(axis=0) for c in range(C)])

    # relaxed indicators: each cluster's indicator projected onto the eigenvector basis
    root = np.sqrt(g.degrees)[:, None]
    basis = pairs.vectors[:, :dim]
    indicators = (assign[:, None] == np.arange(C)[None, :]) * root
    relaxed = basis @ (basis.T @ indicators) / root
    return assign, pairs, relaxed


def prior_correlations(labels, prior_labels, C, kappa, relaxed=None):
    """Correlation of each output cluster with its prior.

    `correlation` is the cosine between the prior indicator and the relaxed
    cluster indicator, both taken on the prior support (rows where the prior
    matrix is non-zero). `relaxed` holds one column per cluster; without it
    the hard indicators stand in. `coverage` is the cosine of the hard
    indicators over all vertices.
    """
    if relaxed is None:
        relaxed = (labels[:, None] == np.arange(C)[None, :]).astype(float)
    support = prior_labels >= 0
    rows = []
    for c in range(C):
        prior = prior_labels == c
        output = labels == c
        shared = float((prior & output).sum())
        n_prior = float(prior.sum())
        on_support = float((relaxed[support, c] ** 2).sum())
        aligned = float(relaxed[prior, c].sum())
        correlation = aligned / np.sqrt(on_support * n_prior) if on_support and n_prior else 0.0
        coverage = shared / np.sqrt(float(output.sum()) * n_prior) if output.any() and n_prior else 0.0
        rows.append(PriorCorrelation(c, correlation, coverage, kappa))
    return rows


def multiclass_ncut_with_priors(g, priors, kappa=DEFAULT_KAPPA, max_iter=300):
    """C-way cut where prior points keep their cluster label.

    Each connected component is solved on its own: a component with one
    prior takes that label, a component with several priors is split by
    seeded discretization of its spectral embedding, and components with no
    prior join the lowest cluster id.
    """
    if not 0 < kappa <= 1:
        raise DataError(f"kappa must lie in (0, 1], got {kappa}")
    C = priors.C
    if C >= g.n:
        raise DataError(f"need fewer clusters than vertices (C={C}, n={g.n})")
    merged = np.concatenate(priors.clusters)
    if merged.min() < 0 or merged.max() >= g.n:
        raise DataError("prior index out of range")

    prior_labels = priors.labels(g.n)
    labels = np.zeros(g.n, dtype=np.int64)
    records, spectral_parts = [], []

    if C > 1:
        components = connected_components(g)
        unseeded = 0
        for comp in np.unique(components):
            members = np.flatnonzero(components == comp)
            seeds = prior_labels[members]
            ids = np.unique(seeds[seeds >= 0])

            if len(ids) == 0:
                labels[members] = 0
                unseeded += len(members)
            elif len(ids) == 1:
                labels[members] = ids[0]
            elif (seeds >= 0).all():
                labels[members] = seeds
            else:
                local_seeds = np.searchsorted(ids, seeds)
                local_seeds[seeds < 0] = -1
                assign, pairs, local_relaxed = _seeded_discretization(subgraph(g, members), local_seeds, max_iter)
                labels[members] = ids[assign]
                spectral_parts.append((members, ids, local_relaxed))
                records.append(SolveRecord('multiclass', f"component {comp}", len(members), None, None,
                                           tuple(pairs.values), tuple(pairs.residuals)))
        if unseeded:
            logger.info(f"{unseeded} vertices in components without priors joined cluster 0")

    relaxed = (labels[:, None] == np.arange(C)[None, :]).astype(float)
    for members, ids, local_relaxed in spectral_parts:
        relaxed[np.ix_(members, ids)] = local_relaxed
    correlations = prior_correlations(labels, prior_labels, C, kappa, relaxed)
    violations = [r.cluster for r in correlations if not r.satisfied]
    if violations:
        logger.warning(f"Prior correlation below kappa={kappa} for clusters {violations}")

    energy = ncut_energy(g, labels)
    logger.info(f"Multiclass cut: {C} clusters, Ncut energy {energy:.4f}")
    return CutResult(labels, energy, C, records, correlations)


def _split_node(g, indices, name, tau, min_points):
    sub = subgraph(g, indices)
    components = connected_components(sub)
    if components.max() > 0:
        children = [np.flatnonzero(components == c) for c in range(int(components.max()) + 1)]
        return children, SolveRecord('components', name, sub.n, 0.0, True)

    if sub.n < 2 * min_points:
        return None, SolveRecord('leaf', name, sub.n)

    try:
        cut = binary_ncut(sub, node=name)
    except DataError as e:
        logger.debug(f"Node {name} kept whole: {e}")
        return None, SolveRecord('leaf', name, sub.n)

    record = cut.records[0]
    sizes = np.bincount(cut.labels, minlength=2)
    record.accepted = bool(cut.ncut_energy <= tau and sizes.min() >= min_points)
    if not record.accepted:
        return None, record
    return [np.flatnonzero(cut.labels == 0), np.flatnonzero(cut.labels == 1)], record


def recursive_ncut(g, tau=DEFAULT_TAU, min_points=DEFAULT_MIN_POINTS, workers=1):
    """Recursive binary cuts until the Ncut exceeds tau or a side would be too small.

    Connected components are separated first (their Ncut is 0). Sibling
    nodes are solved concurrently; leaves are numbered by their smallest
    vertex so the result does not depend on scheduling.
    """
    if not tau > 0:
        raise DataError("tau must be positive")
    if min_points < 2:
        raise DataError("min_points must be >= 2")

    frontier = [('r', np.arange(g.n))]
    leaves, records = [], []
    executor = ThreadPoolExecutor(max_workers=workers) if workers > 1 else None
    try:
        while frontier:
            jobs = [(g, indices, name, tau, min_points) for name, indices in frontier]
            if executor is not None:
                outcomes = list(executor.map(lambda job: _split_node(*job), jobs))
            else:
                outcomes = [_split_node(*job) for job in jobs]

            next_frontier = []
            for (name, indices), (children, record) in zip(frontier, outcomes):
                records.append(record)
                if children is None:
                    leaves.append(indices)
                else:
                    next_frontier.extend((f"{name}.{t}", indices[child]) for t, child in enumerate(children))
            frontier = next_frontier
    finally:
        if executor is not None:
            executor.shutdown()

    leaves.sort(key=lambda idx: int(idx.min()))
    labels = np.empty(g.n, dtype=np.int64)
    for leaf_id, indices in enumerate(leaves):
        labels[indices] = leaf_id

    energy = ncut_energy(g, labels)
    logger.debug(f"Recursive cut: {len(leaves)} leaves from {g.n} vertices")
    return CutResult(labels, energy, len(leaves), records)


def write_diagnostics(results, path):
    """Write solve records (and prior correlations, if any) as CSV.

    Correlations go to `<stem>_priors.csv` next to `path`.
    """
    if isinstance(results, CutResult):
        results = [results]

    def joined(values):
        return ';'.join(f"{v:.6e}" for v in values)

    records = [r for result in results for r in result.records]
    pd.DataFrame(
        [(r.kind, r.node, r.size, r.ncut, r.accepted, joined(r.eigenvalues), joined(r.residuals))
         for r in records],
        columns=['kind', 'node', 'size', 'ncut', 'accepted', 'eigenvalues', 'residuals'],
    ).to_csv(path, index=False)

    correlations = [c for result in results for c in result.correlations]
    if correlations:
        stem, ext = os.path.splitext(str(path))
        pd.DataFrame(
            [(c.cluster, c.correlation, c.coverage, c.kappa, c.satisfied) for c in correlations],
            columns=['cluster', 'correlation', 'coverage', 'kappa', 'satisfied'],
        ).to_csv(f"{stem}_priors{ext or '.csv'}", index=False)
