"""
Point cloud and raster containers plus their file formats.

Formats:
    xyz_csv     x,y,z[,f1..fk] with an optional single header line
    xyz_binary  little-endian: b"PCLD", u32 count, u32 k, then 3+k float64 per point
    ASCII grid  ESRI-style header (ncols, nrows, xllcorner, yllcorner,
                cellsize, NODATA_value) followed by rows north to south
"""

import os
import struct
import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import pandas as pd

from errors import DataError

logger = logging.getLogger(__name__)

UNCLASSIFIED = 0
GROUND = 1
OBJECT = 2

BINARY_MAGIC = b'PCLD'
_BINARY_HEADER = struct.Struct('<4sII')

NODATA_SENTINEL = -9999.0

FORMATS = ('xyz_csv', 'xyz_binary')


@dataclass(frozen=True)
class PointCloud:
    """3D returns with optional class labels and per-point feature vectors.

    A feature row filled with NaN marks a point whose features are absent
    (e.g. it fell outside the feature raster).
    """
    xyz: np.ndarray
    class_label: Optional[np.ndarray] = None
    features: Optional[np.ndarray] = None

    def __post_init__(self):
        xyz = np.array(self.xyz, dtype=float)
        if xyz.ndim != 2 or xyz.shape[1] != 3:
            raise DataError(f"points must have shape (n, 3), got {xyz.shape}")
        if len(xyz) == 0:
            raise DataError("no points")
        if not np.all(np.isfinite(xyz)):
            raise DataError("point coordinates must be finite")
        xyz.setflags(write=False)
        object.__setattr__(self, 'xyz', xyz)

        if self.class_label is not None:
            labels = np.array(self.class_label, dtype=np.int8)
            if labels.shape != (len(xyz),):
                raise DataError("class labels must have one entry per point")
            labels.setflags(write=False)
            object.__setattr__(self, 'class_label', labels)

        if self.features is not None:
            features = np.array(self.features, dtype=float)
            if features.ndim == 1:
                features = features.reshape(-1, 1)
            if features.shape[0] != len(xyz):
                raise DataError("features must have one row per point")
            missing = np.isnan(features)
            if np.isinf(features).any() or (missing.any(axis=1) & ~missing.all(axis=1)).any():
                raise DataError("feature values must be finite, or NaN across the whole row for an absent point")
            features.setflags(write=False)
            object.__setattr__(self, 'features', features)

    def __len__(self):
        return len(self.xyz)

    @property
    def n_points(self):
        return len(self.xyz)

    @property
    def x(self):
        return self.xyz[:, 0]

    @property
    def y(self):
        return self.xyz[:, 1]

    @property
    def z(self):
        return self.xyz[:, 2]

    @property
    def feature_dim(self):
        return 0 if self.features is None else self.features.shape[1]

    @property
    def feature_present(self):
        """Boolean mask of points carrying a complete feature vector"""
        if self.features is None:
            return np.zeros(len(self), dtype=bool)
        return ~np.isnan(self.features).any(axis=1)

    @property
    def has_features(self):
        return bool(self.feature_present.any())

    @property
    def ground_mask(self):
        if self.class_label is None:
            return np.zeros(len(self), dtype=bool)
        return self.class_label == GROUND

    @property
    def object_mask(self):
        if self.class_label is None:
            return np.zeros(len(self), dtype=bool)
        return self.class_label == OBJECT

    def subset(self, indices):
        """Cloud restricted to `indices` (in the given order)"""
        indices = np.asarray(indices, dtype=np.int64)
        return PointCloud(
            self.xyz[indices],
            None if self.class_label is None else self.class_label[indices],
            None if self.features is None else self.features[indices],
        )

    def with_labels(self, labels):
        return PointCloud(self.xyz, labels, self.features)

    def with_features(self, features):
        return PointCloud(self.xyz, self.class_label, features)

    def without_features(self):
        return PointCloud(self.xyz, self.class_label, None)


@dataclass(frozen=True)
class RasterGrid:
    """Georeferenced 2D grid.

    `origin` is the lower-left corner. `values[row, col]` covers
    [x0 + col*cell, x0 + (col+1)*cell) x [y0 + row*cell, y0 + (row+1)*cell),
    so row 0 is the southern edge. NaN is NODATA for float grids.
    """
    origin: tuple
    cell_size: float
    values: np.ndarray = field(repr=False)

    def __post_init__(self):
        if not self.cell_size > 0:
            raise DataError(f"cell_size must be positive, got {self.cell_size}")
        values = np.asarray(self.values)
        if values.ndim != 2 or values.size == 0:
            raise DataError(f"raster values must be a non-empty 2D array, got {values.shape}")
        object.__setattr__(self, 'origin', (float(self.origin[0]), float(self.origin[1])))
        object.__setattr__(self, 'cell_size', float(self.cell_size))
        object.__setattr__(self, 'values', values)

    @property
    def height(self):
        return self.values.shape[0]

    @property
    def width(self):
        return self.values.shape[1]

    @property
    def nodata_mask(self):
        if np.issubdtype(self.values.dtype, np.floating):
            return np.isnan(self.values)
        return np.zeros(self.values.shape, dtype=bool)

    def same_geometry(self, other):
        return (self.origin == other.origin
                and self.cell_size == other.cell_size
                and self.values.shape == other.values.shape)

    def with_values(self, values):
        values = np.asarray(values)
        if values.shape != self.values.shape:
            raise DataError(f"expected values of shape {self.values.shape}, got {values.shape}")
        return RasterGrid(self.origin, self.cell_size, values)

    def cell_index(self, x, y):
        """Half-open cell lookup: returns (rows, cols, inside)"""
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        cols = np.floor((x - self.origin[0]) / self.cell_size).astype(np.int64)
        rows = np.floor((y - self.origin[1]) / self.cell_size).astype(np.int64)
        inside = (rows >= 0) & (rows < self.height) & (cols >= 0) & (cols < self.width)
        return rows, cols, inside

    def cell_center(self, row, col):
        x = self.origin[0] + (np.asarray(col) + 0.5) * self.cell_size
        y = self.origin[1] + (np.asarray(row) + 0.5) * self.cell_size
        return x, y


# ---------------------------------------------------------------------------
# Point clouds
# ---------------------------------------------------------------------------

def infer_format(path):
    """Pick the cloud format from the file extension"""
    ext = os.path.splitext(str(path))[1].lower()
    return 'xyz_binary' if ext in ('.bin', '.pcld') else 'xyz_csv'


def load_cloud(path, format=None):
    """Load a point cloud from an xyz CSV or the PCLD binary format"""
    format = format or infer_format(path)
    if format not in FORMATS:
        raise DataError(f"unknown cloud format '{format}'")
    if not os.path.exists(path):
        raise DataError(f"cloud file not found: {path}")

    if format == 'xyz_binary':
        cloud = _load_binary(path)
    else:
        cloud = _load_csv(path)

    logger.info(f"Loaded {cloud.n_points} points (k={cloud.feature_dim}) from {path}")
    return cloud


def _is_header(line):
    """A header names its columns; a row with any numeric coordinate is data"""
    for value in line.split(',')[:3]:
        try:
            float(value.strip())
            return False
        except ValueError:
            continue
    return True


def _load_csv(path):
    with open(path, 'r') as f:
        lines = f.read().splitlines()

    # physical line numbers of data rows, 1-based
    offset = 0
    while offset < len(lines) and not lines[offset].strip():
        offset += 1
    if offset == len(lines):
        raise DataError("no points")
    has_header = _is_header(lines[offset])
    first_data = offset + (1 if has_header else 0)
    data_lines = [(i + 1, line) for i, line in enumerate(lines[first_data:], start=first_data)
                  if line.strip()]
    if not data_lines:
        raise DataError("no points")

    arity = len(data_lines[0][1].split(','))
    if arity < 3:
        raise DataError(f"line {data_lines[0][0]}: expected at least 3 columns, got {arity}")

    rows = []
    for line_no, line in data_lines:
        fields = line.split(',')
        if len(fields) != arity:
            raise DataError(f"line {line_no}: expected {arity} columns, got {len(fields)}")
        rows.append([v.strip() for v in fields])

    try:
        frame = pd.DataFrame(rows).apply(pd.to_numeric, errors='raise')
    except (ValueError, TypeError) as e:
        bad = _first_unparsable(rows, data_lines)
        raise DataError(f"line {bad}: could not parse number ({e})") from e

    data = frame.to_numpy(dtype=float)
    bad = _malformed_rows(data)
    if bad.any():
        raise DataError(f"line {data_lines[int(np.argmax(bad))][0]}: non-finite value")

    features = data[:, 3:] if arity > 3 else None
    return PointCloud(data[:, :3], features=features)


def _malformed_rows(data):
    """Rows with a non-finite coordinate, an infinite feature or a partly-NaN feature vector.

    A feature vector that is entirely NaN is the absent marker and is kept.
    """
    bad = ~np.isfinite(data[:, :3]).all(axis=1)
    if data.shape[1] > 3:
        features = data[:, 3:]
        missing = np.isnan(features)
        bad |= np.isinf(features).any(axis=1) | (missing.any(axis=1) & ~missing.all(axis=1))
    return bad


def _first_unparsable(rows, data_lines):
    for fields, (line_no, _) in zip(rows, data_lines):
        try:
            [float(v) for v in fields]
        except ValueError:
            return line_no
    return data_lines[0][0]


def _load_binary(path):
    with open(path, 'rb') as f:
        blob = f.read()
    if len(blob) < _BINARY_HEADER.size:
        raise DataError("no points")
    magic, count, k = _BINARY_HEADER.unpack_from(blob, 0)
    if magic != BINARY_MAGIC:
        raise DataError(f"bad magic {magic!r}, expected {BINARY_MAGIC!r}")
    if count == 0:
        raise DataError("no points")
    expected = _BINARY_HEADER.size + count * (3 + k) * 8
    if len(blob) != expected:
        raise DataError(f"binary cloud truncated: expected {expected} bytes, got {len(blob)}")

    data = np.frombuffer(blob, dtype='<f8', offset=_BINARY_HEADER.size).reshape(count, 3 + k)
    bad = _malformed_rows(data)
    if bad.any():
        raise DataError(f"point {int(np.argmax(bad))}: non-finite value")
    features = data[:, 3:].copy() if k else None
    return PointCloud(data[:, :3].copy(), features=features)


def write_cloud(cloud, path, format=None):
    """Write a cloud in either supported format (labels are not stored)"""
    format = format or infer_format(path)
    if format not in FORMATS:
        raise DataError(f"unknown cloud format '{format}'")

    data = cloud.xyz if cloud.features is None else np.hstack([cloud.xyz, cloud.features])
    if format == 'xyz_binary':
        with open(path, 'wb') as f:
            f.write(_BINARY_HEADER.pack(BINARY_MAGIC, cloud.n_points, cloud.feature_dim))
            f.write(np.ascontiguousarray(data, dtype='<f8').tobytes())
    else:
        columns = ['x', 'y', 'z'] + [f"f{i + 1}" for i in range(cloud.feature_dim)]
        pd.DataFrame(data, columns=columns).to_csv(path, index=False, float_format='%.17g', na_rep='nan')
    logger.info(f"Wrote {cloud.n_points} points to {path}")


def attach_features(cloud, raster_stack, overwrite=False):
    """Give each point the feature vector of the pixel containing its (x, y).

    Points outside the raster extent (or over NODATA pixels) receive the
    absent marker.
    """
    if not raster_stack:
        raise DataError("feature raster stack is empty")
    reference = raster_stack[0]
    for grid in raster_stack[1:]:
        if not grid.same_geometry(reference):
            raise DataError("feature rasters must share origin, cell size and dimensions")
    if cloud.features is not None and not overwrite:
        raise DataError("cloud already has features; pass overwrite=True to replace them")

    rows, cols, inside = reference.cell_index(cloud.x, cloud.y)
    features = np.full((cloud.n_points, len(raster_stack)), np.nan)
    for band, grid in enumerate(raster_stack):
        features[inside, band] = grid.values[rows[inside], cols[inside]]
    features[np.isnan(features).any(axis=1)] = np.nan

    n_absent = int(np.isnan(features[:, 0]).sum())
    if n_absent:
        logger.warning(f"{n_absent} points fall outside the feature raster; features marked absent")
    return cloud.with_features(features)


# ---------------------------------------------------------------------------
# Segmentations
# ---------------------------------------------------------------------------

TREE_COLUMNS = ['tree_id', 'apex_x', 'apex_y', 'height_m', 'crown_area_m2', 'n_points']


def tree_table_path(path):
    stem, ext = os.path.splitext(str(path))
    return f"{stem}_trees{ext or '.csv'}"


def write_segmentation(seg, path):
    """Write `point_index,tree_id` plus the tree table next to it"""
    labels = np.asarray(seg.labels)
    if labels.size == 0:
        raise DataError("segmentation is empty")

    try:
        pd.DataFrame({'point_index': np.arange(len(labels)), 'tree_id': labels}).to_csv(
            path, index=False)
        trees = pd.DataFrame(
            [(t.tree_id, t.apex[0], t.apex[1], t.height, t.crown_area, t.n_points) for t in seg.trees],
            columns=TREE_COLUMNS,
        )
        trees.to_csv(tree_table_path(path), index=False, float_format='%.10g')
    except OSError as e:
        raise DataError(f"could not write segmentation to {path}: {e}") from e

    logger.info(f"Wrote segmentation of {len(labels)} points / {len(seg.trees)} trees to {path}")


def read_segmentation(path):
    """Read labels (ordered by point index) and the tree table"""
    frame = pd.read_csv(path)
    if list(frame.columns) != ['point_index', 'tree_id']:
        raise DataError(f"{path}: expected header point_index,tree_id")
    frame = frame.sort_values('point_index')
    labels = frame['tree_id'].to_numpy(dtype=np.int64)

    trees_path = tree_table_path(path)
    trees = pd.read_csv(trees_path) if os.path.exists(trees_path) else pd.DataFrame(columns=TREE_COLUMNS)
    return labels, trees


# ---------------------------------------------------------------------------
# Rasters
# ---------------------------------------------------------------------------

def write_raster(grid, path):
    """Write an ESRI ASCII grid (north row first)"""
    values = grid.values
    integer = np.issubdtype(values.dtype, np.integer)
    out = values[::-1].astype(float)
    out[np.isnan(out)] = NODATA_SENTINEL

    header = (
        f"ncols {grid.width}\n"
        f"nrows {grid.height}\n"
        f"xllcorner {grid.origin[0]!r}\n"
        f"yllcorner {grid.origin[1]!r}\n"
        f"cellsize {grid.cell_size!r}\n"
        f"NODATA_value {NODATA_SENTINEL:g}"
    )
    np.savetxt(path, out, fmt='%d' if integer else '%.10g', header=header, comments='')


def read_raster(path):
    """Read an ESRI ASCII grid written by write_raster (or compatible tools)"""
    header = {}
    with open(path, 'r') as f:
        for _ in range(6):
            key, value = f.readline().split()
            header[key.lower()] = value
    required = ('ncols', 'nrows', 'xllcorner', 'yllcorner', 'cellsize', 'nodata_value')
    missing = [k for k in required if k not in header]
    if missing:
        raise DataError(f"{path}: missing raster header keys {missing}")

    values = np.loadtxt(path, skiprows=6, ndmin=2)
    shape = (int(header['nrows']), int(header['ncols']))
    if values.shape != shape:
        raise DataError(f"{path}: header says {shape}, data has {values.shape}")
    values = values[::-1].copy()
    values[values == float(header['nodata_value'])] = np.nan

    return RasterGrid(
        (float(header['xllcorner']), float(header['yllcorner'])),
        float(header['cellsize']),
        values,
    )
