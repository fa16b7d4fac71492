"""
Ground filtering and terrain/canopy rasters (DTM, CHM).

Ground points come from a progressive morphological filter on the grid
minimum surface; the DTM is the per-cell ground minimum and the CHM the
per-cell maximum of object heights above it.
"""

import logging
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from errors import DataError
from pointcloud_io import RasterGrid, GROUND, OBJECT

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class TerrainParams:
    cell_size: float = 0.5
    max_window: float = 10.0
    slope_tolerance: float = 0.3
    elevation_threshold: float = 0.5

    def __post_init__(self):
        for name in ('cell_size', 'max_window', 'slope_tolerance', 'elevation_threshold'):
            if not getattr(self, name) > 0:
                raise DataError(f"terrain.{name} must be positive")
        if self.max_window < self.cell_size:
            raise DataError("terrain.max_window must be >= terrain.cell_size")

    def window_sizes(self):
        """Window widths in cells, doubling from 1 up to max_window"""
        sizes = [1]
        while sizes[-1] * 2 * self.cell_size <= self.max_window:
            sizes.append(sizes[-1] * 2)
        return sizes


def grid_for_cloud(cloud, cell_size, fill=np.nan):
    """Empty grid whose half-open cells cover every point of the cloud"""
    x0, y0 = float(cloud.x.min()), float(cloud.y.min())
    width = int(np.floor((cloud.x.max() - x0) / cell_size)) + 1
    height = int(np.floor((cloud.y.max() - y0) / cell_size)) + 1
    return RasterGrid((x0, y0), cell_size, np.full((height, width), fill, dtype=float))


def sample_raster(grid, x, y):
    """Grid value at each (x, y); points beyond the extent take the nearest edge cell"""
    rows, cols, _ = grid.cell_index(x, y)
    rows = np.clip(rows, 0, grid.height - 1)
    cols = np.clip(cols, 0, grid.width - 1)
    return grid.values[rows, cols]


def _fill_nearest(values):
    empty = np.isnan(values)
    if not empty.any():
        return values
    if empty.all():
        raise DataError("cannot fill a raster with no data cells")
    _, (ri, ci) = ndimage.distance_transform_edt(empty, return_indices=True)
    return values[ri, ci]


def _cell_minimum(grid, x, y, z):
    rows, cols, _ = grid.cell_index(x, y)
    surface = grid.values.copy()
    np.fmin.at(surface, (rows, cols), z)
    return surface


def classify_ground(cloud, params=None):
    """Label every point GROUND or OBJECT with a progressive morphological filter"""
    params = params or TerrainParams()
    grid = grid_for_cloud(cloud, params.cell_size)
    rows, cols, _ = grid.cell_index(cloud.x, cloud.y)

    surface = _fill_nearest(_cell_minimum(grid, cloud.x, cloud.y, cloud.z))
    is_object = np.zeros(cloud.n_points, dtype=bool)

    for step, window in enumerate(params.window_sizes()):
        if window > 1:
            surface = ndimage.grey_opening(surface, size=(window, window), mode='nearest')
        threshold = params.elevation_threshold + params.slope_tolerance * step
        is_object |= (cloud.z - surface[rows, cols]) > threshold

    labels = np.where(is_object, OBJECT, GROUND)
    logger.info(f"Ground filter: {int((~is_object).sum())} ground, {int(is_object.sum())} object points")
    return cloud.with_labels(labels)


def rasterize_dtm(cloud, cell_size=0.5):
    """Per-cell minimum ground elevation over the whole cloud extent"""
    ground = cloud.ground_mask if cloud.class_label is not None else np.ones(cloud.n_points, dtype=bool)
    if not ground.any():
        raise DataError("no ground points")

    grid = grid_for_cloud(cloud, cell_size)
    surface = _cell_minimum(grid, cloud.x[ground], cloud.y[ground], cloud.z[ground])
    return grid.with_values(_fill_nearest(surface))


def heights_above_ground(cloud, dtm):
    return cloud.z - sample_raster(dtm, cloud.x, cloud.y)


def rasterize_chm(cloud, dtm, cell_size=None):
    """Per-cell maximum object height above the DTM; empty cells are 0"""
    if cell_size is None or cell_size == dtm.cell_size:
        grid = dtm.with_values(np.zeros(dtm.values.shape))
    else:
        grid = grid_for_cloud(cloud, cell_size, fill=0.0)

    objects = cloud.object_mask if cloud.class_label is not None else np.ones(cloud.n_points, dtype=bool)
    chm = grid.values.copy()
    if objects.any():
        subset = cloud.subset(np.flatnonzero(objects))
        heights = np.maximum(heights_above_ground(subset, dtm), 0.0)
        rows, cols, inside = grid.cell_index(subset.x, subset.y)
        np.maximum.at(chm, (rows[inside], cols[inside]), heights[inside])
    return grid.with_values(chm)


def smooth_raster(grid, sigma):
    """Gaussian smoothing truncated at 3 sigma; NODATA cells are excluded and renormalized"""
    if sigma < 0:
        raise DataError("smoothing sigma must be >= 0")
    if sigma == 0:
        return grid.with_values(grid.values.astype(float).copy())

    values = grid.values.astype(float)
    valid = ~np.isnan(values)
    numerator = ndimage.gaussian_filter(np.where(valid, values, 0.0), sigma, mode='constant', truncate=3.0)
    weight = ndimage.gaussian_filter(valid.astype(float), sigma, mode='constant', truncate=3.0)

    smoothed = np.full(values.shape, np.nan)
    ok = valid & (weight > 0)
    smoothed[ok] = numerator[ok] / weight[ok]
    return grid.with_values(smoothed)
