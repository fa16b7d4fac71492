"""
Treetop detection on the CHM and conversion of treetops into point priors
"""

import logging
from dataclasses import dataclass, field

import numpy as np
import pandas as pd
from scipy import ndimage, sparse
from scipy.sparse.csgraph import connected_components
from scipy.spatial import cKDTree
from skimage.segmentation import watershed

from errors import DataError

logger = logging.getLogger(__name__)

DEFAULT_PRIOR_RADIUS = 0.7
DEFAULT_MIN_HEIGHT = 2.0


@dataclass(frozen=True)
class ApexSet:
    """Candidate treetops: one per CHM cell, stored with their grid cell"""
    x: np.ndarray
    y: np.ndarray
    height: np.ndarray
    rows: np.ndarray = field(default=None, repr=False)
    cols: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        for name in ('x', 'y', 'height', 'rows', 'cols'):
            value = getattr(self, name)
            if value is not None:
                dtype = np.int64 if name in ('rows', 'cols') else float
                object.__setattr__(self, name, np.asarray(value, dtype=dtype).reshape(-1))
        if not (len(self.x) == len(self.y) == len(self.height)):
            raise DataError("apex coordinate arrays differ in length")

    def __len__(self):
        return len(self.x)

    @classmethod
    def empty(cls):
        return cls(np.empty(0), np.empty(0), np.empty(0), np.empty(0, dtype=np.int64), np.empty(0, dtype=np.int64))


@dataclass(frozen=True)
class PriorSet:
    """C disjoint seed clusters of point indices (the prior matrix as indicator sets)"""
    clusters: list
    source_apex: list

    def __post_init__(self):
        clusters = [np.asarray(c, dtype=np.int64) for c in self.clusters]
        if not clusters:
            raise DataError("a prior set needs at least one cluster")
        if any(len(c) == 0 for c in clusters):
            raise DataError("prior clusters must be non-empty")
        merged = np.concatenate(clusters)
        if len(np.unique(merged)) != len(merged):
            raise DataError("prior clusters must be pairwise disjoint")
        object.__setattr__(self, 'clusters', clusters)

    @property
    def C(self):
        return len(self.clusters)

    def labels(self, n):
        """Per-point prior label, -1 for unseeded points"""
        labels = np.full(n, -1, dtype=np.int64)
        for c, members in enumerate(self.clusters):
            labels[members] = c
        return labels


def local_maxima_mwf(chm, window_radius=3, min_height=DEFAULT_MIN_HEIGHT):
    """Moving-window maxima: cells that top their (2r+1)^2 window and reach min_height.

    Plateaus are not maxima. Equal peaks inside one window keep the
    lexicographically smallest (row, col).
    """
    if window_radius < 1:
        raise DataError("window_radius must be >= 1")

    values = np.where(np.isnan(chm.values), -np.inf, chm.values.astype(float))
    size = 2 * window_radius + 1
    window_max = ndimage.maximum_filter(values, size=size, mode='constant', cval=-np.inf)
    window_min = ndimage.minimum_filter(values, size=size, mode='nearest')
    candidate = (values == window_max) & (values > window_min) & (values >= min_height)

    kept = []
    for row, col in zip(*np.nonzero(candidate)):
        tied = any(abs(row - r) <= window_radius and abs(col - c) <= window_radius
                   and values[r, c] == values[row, col] for r, c in kept)
        if not tied:
            kept.append((row, col))

    if not kept:
        logger.info("No local maxima found on the CHM")
        return ApexSet.empty()

    rows, cols = (np.array(v, dtype=np.int64) for v in zip(*kept))
    x, y = chm.cell_center(rows, cols)
    logger.info(f"Moving-window filter found {len(rows)} treetops")
    return ApexSet(x, y, values[rows, cols], rows, cols)


def _apex_cells(chm, apexes):
    if apexes.rows is not None and apexes.cols is not None:
        return apexes.rows, apexes.cols
    rows, cols, inside = chm.cell_index(apexes.x, apexes.y)
    if not inside.all():
        raise DataError("apex outside the CHM extent")
    return rows, cols


def watershed_markers(chm, markers, min_height=0.0):
    """Marker-controlled watershed on the inverted CHM.

    Returns an integer label raster: label i+1 belongs to marker i, 0 marks
    cells at or below min_height (or unreachable from any marker).
    """
    if len(markers) == 0:
        raise DataError("watershed needs at least one marker")
    values = np.nan_to_num(chm.values.astype(float), nan=0.0)
    rows, cols = _apex_cells(chm, markers)
    if np.any(values[rows, cols] <= 0):
        raise DataError("marker on a zero-height cell")
    if len(set(zip(rows.tolist(), cols.tolist()))) != len(rows):
        raise DataError("two markers share a cell")

    marker_image = np.zeros(values.shape, dtype=np.int64)
    marker_image[rows, cols] = np.arange(1, len(rows) + 1)
    mask = (values > min_height) | (marker_image > 0)

    labels = watershed(-values, markers=marker_image, mask=mask, connectivity=1)
    return chm.with_values(labels.astype(np.int64))


def refine_apexes(chm, labels, apexes):
    """Move each apex to the highest raw-CHM cell of its watershed region"""
    values = np.nan_to_num(chm.values.astype(float), nan=0.0)
    region_ids = np.arange(1, len(apexes) + 1)
    peaks = ndimage.maximum_position(values, labels=labels.values, index=region_ids)

    rows = np.array([p[0] for p in peaks], dtype=np.int64)
    cols = np.array([p[1] for p in peaks], dtype=np.int64)
    x, y = chm.cell_center(rows, cols)
    return ApexSet(x, y, values[rows, cols], rows, cols)


def build_priors(cloud, apexes, radius=DEFAULT_PRIOR_RADIUS):
    """Seed clusters: points within a horizontal radius of each apex.

    Seed sets sharing a point are merged into one cluster; apexes without
    nearby points are dropped.
    """
    if len(apexes) == 0:
        raise DataError("no usable priors")

    tree = cKDTree(cloud.xyz[:, :2])
    seeds = tree.query_ball_point(np.column_stack([apexes.x, apexes.y]), r=radius)

    usable = [i for i, members in enumerate(seeds) if members]
    dropped = len(apexes) - len(usable)
    if dropped:
        logger.warning(f"Dropped {dropped} apexes with no points within {radius} m")
    if not usable:
        raise DataError("no usable priors")

    # apex-point incidence; apexes sharing a point end up in one component
    apex_ids = np.concatenate([np.full(len(seeds[i]), k) for k, i in enumerate(usable)])
    point_ids = np.concatenate([np.asarray(seeds[i], dtype=np.int64) for i in usable])
    n_apex = len(usable)
    incidence = sparse.coo_matrix(
        (np.ones(len(apex_ids)), (apex_ids, n_apex + point_ids)),
        shape=(n_apex + cloud.n_points, n_apex + cloud.n_points),
    )
    _, component = connected_components(incidence, directed=False)

    clusters, sources = [], []
    for comp in pd.unique(component[:n_apex]):
        members = np.flatnonzero(component[:n_apex] == comp)
        clusters.append(np.unique(np.concatenate([seeds[usable[k]] for k in members])).astype(np.int64))
        sources.append([usable[k] for k in members])

    if len(clusters) < n_apex:
        logger.info(f"Merged {n_apex - len(clusters)} overlapping seed sets")
    return PriorSet(clusters, sources)


def write_apexes(apexes, path):
    pd.DataFrame({'x': apexes.x, 'y': apexes.y, 'height': apexes.height}).to_csv(
        path, index=False, float_format='%.10g')


def read_apexes(path):
    frame = pd.read_csv(path)
    if list(frame.columns[:3]) != ['x', 'y', 'height']:
        raise DataError(f"{path}: expected header x,y,height")
    return ApexSet(frame['x'].to_numpy(), frame['y'].to_numpy(), frame['height'].to_numpy())
