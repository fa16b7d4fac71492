"""
End-to-end crown delineation:

    ground filter -> DTM / CHM -> smoothing -> treetops -> priors
    -> multiclass cut on the object graph -> recursive cut per cluster
    -> per-tree metrics

plus the two baselines it is compared against (recursive cut on the whole
graph, marker watershed on the CHM) and the flat `key = value` config file.
"""

import logging
import time
from concurrent.futures import ThreadPoolExecutor
from contextlib import contextmanager
from dataclasses import dataclass, field, fields, is_dataclass, replace
from typing import Optional

import numpy as np
from scipy import ndimage
from scipy.spatial import ConvexHull, QhullError

import settings
from affinity_graph import GraphParams, build_graph, subgraph
from errors import ConfigError, DataError, McrcError
from spectral import multiclass_ncut_with_priors, recursive_ncut
from terrain import (TerrainParams, classify_ground, rasterize_dtm, rasterize_chm,
                     smooth_raster, heights_above_ground)
from treetops import local_maxima_mwf, watershed_markers, refine_apexes, build_priors

logger = logging.getLogger(__name__)

PRIOR_METHODS = ('watershed', 'mwf')

# bandwidths per site type; applied before any other config key
PRESETS = {
    'benchmark': {
        'graph_mc.sigma_xy': '2.0', 'graph_mc.sigma_z': '5.0',
        'graph_rc.sigma_xy': '2.0', 'graph_rc.sigma_z': '5.0',
    },
    'italian': {
        'graph_mc.sigma_xy': '1.0', 'graph_mc.sigma_z': '3.0', 'graph_mc.sigma_fts': '0.005',
        'graph_rc.sigma_xy': '0.5', 'graph_rc.sigma_z': '2.0', 'graph_rc.sigma_fts': '0.005',
    },
}


@dataclass(frozen=True)
class McrcConfig:
    terrain: TerrainParams = field(default_factory=TerrainParams)
    chm_smoothing_sigma: float = 1.0
    mwf_window: int = 3
    min_tree_height: float = 2.0
    prior_radius: float = 0.7
    prior_method: str = 'watershed'
    graph_mc: GraphParams = field(default_factory=lambda: GraphParams(d=1.0, sigma_xy=1.0, sigma_z=3.0))
    graph_rc: GraphParams = field(default_factory=lambda: GraphParams(d=1.0, sigma_xy=0.5, sigma_z=2.0))
    tau_ncut: float = 0.05
    min_points: int = 5
    kappa: float = 0.8
    use_features: bool = False
    threads: int = field(default_factory=lambda: settings.MCRC_THREADS)

    def __post_init__(self):
        if self.chm_smoothing_sigma < 0:
            raise ConfigError("chm_smoothing_sigma must be >= 0")
        if self.mwf_window < 1:
            raise ConfigError("mwf_window must be >= 1")
        if not self.prior_radius > 0:
            raise ConfigError("prior_radius must be positive")
        if self.prior_method not in PRIOR_METHODS:
            raise ConfigError(f"prior_method must be one of {PRIOR_METHODS}, got {self.prior_method!r}")
        if not self.tau_ncut > 0:
            raise ConfigError("tau_ncut must be positive")
        if self.min_points < 2:
            raise ConfigError("min_points must be >= 2")
        if not 0 < self.kappa <= 1:
            raise ConfigError("kappa must lie in (0, 1]")
        if self.threads < 1:
            raise ConfigError("threads must be >= 1")


@dataclass
class TreeRecord:
    tree_id: int
    apex: tuple
    height: float
    crown_area: float
    n_points: int


@dataclass
class Segmentation:
    """Per-point tree ids (-1 for ground) and one TreeRecord per tree"""
    labels: np.ndarray
    trees: list
    timings: dict = field(default_factory=dict)
    n_priors: int = 0
    diagnostics: list = field(default_factory=list, repr=False)

    @property
    def n_trees(self):
        return len(self.trees)


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------

def _parse_bool(text):
    lowered = text.lower()
    if lowered in ('true', 'yes', 'on', '1'):
        return True
    if lowered in ('false', 'no', 'off', '0'):
        return False
    raise ValueError(f"expected a boolean, got {text!r}")


def _coerce(f, text):
    if f.type is bool:
        return _parse_bool(text)
    if f.type is int:
        return int(text)
    if f.type is float:
        return float(text)
    if f.type == Optional[float]:
        return None if text.lower() == 'none' else float(text)
    if f.type is str:
        return text
    raise ValueError(f"{f.name} cannot be set from text")


def _field(obj, name):
    for f in fields(obj):
        if f.name == name:
            return f
    raise ConfigError(f"unknown config key {name!r}")


def set_config_value(config, key, text):
    """Return a copy of `config` with the dotted `key` parsed from `text`"""
    head, _, tail = key.partition('.')
    f = _field(config, head)
    current = getattr(config, head)

    try:
        if tail:
            if not is_dataclass(current):
                raise ConfigError(f"unknown config key {key!r}")
            return replace(config, **{head: set_config_value(current, tail, text)})
        if is_dataclass(current):
            raise ConfigError(f"{key!r} is a section, set one of its keys instead")
        return replace(config, **{head: _coerce(f, text.strip())})
    except ConfigError:
        raise
    except (McrcError, ValueError) as e:
        raise ConfigError(f"bad value for {key!r}: {e}") from e


def preset_config(name):
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r} (choose from {sorted(PRESETS)})")
    config = McrcConfig()
    for key, value in PRESETS[name].items():
        config = set_config_value(config, key, value)
    return config


def load_config(path, base=None):
    """Read a flat `key = value` file with dotted keys.

    `preset = <name>` is applied first wherever it appears. Unknown keys,
    duplicates and bad values raise ConfigError naming the line.
    """
    entries = {}
    try:
        with open(path, 'r', encoding='utf-8') as f:
            lines = f.readlines()
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from e

    for lineno, raw in enumerate(lines, start=1):
        line = raw.split('#', 1)[0].strip()
        if not line:
            continue
        if '=' not in line:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
        key, value = (part.strip() for part in line.split('=', 1))
        if key in entries:
            raise ConfigError(f"{path}:{lineno}: duplicate key {key!r} (first set on line {entries[key][0]})")
        entries[key] = (lineno, value)

    config = base or McrcConfig()
    if 'preset' in entries:
        lineno, name = entries.pop('preset')
        try:
            config = preset_config(name)
        except ConfigError as e:
            raise ConfigError(f"{path}:{lineno}: {e}") from e

    for key, (lineno, value) in entries.items():
        try:
            config = set_config_value(config, key, value)
        except ConfigError as e:
            raise ConfigError(f"{path}:{lineno}: {e}") from e

    logger.info(f"Loaded config from {path} ({len(entries)} keys)")
    return config


def config_items(config, prefix=''):
    """Flatten a config into (dotted key, value) pairs in field order"""
    items = []
    for f in fields(config):
        value = getattr(config, f.name)
        if is_dataclass(value):
            items.extend(config_items(value, f"{prefix}{f.name}."))
        else:
            items.append((f"{prefix}{f.name}", value))
    return items


# ---------------------------------------------------------------------------
# Shared stages
# ---------------------------------------------------------------------------

@contextmanager
def _stage(name, timings):
    start = time.perf_counter()
    yield
    timings[name] = timings.get(name, 0.0) + time.perf_counter() - start
    logger.debug(f"Stage {name} took {timings[name]:.3f} s")


def _graph_params(params, use_features):
    return params if use_features else replace(params, sigma_fts=None)


def _prepare(cloud, config, timings):
    """Ground filter, rasters and object subset shared by every method"""
    if config.use_features and not cloud.has_features:
        raise DataError("use_features is set but the cloud carries no features")
    if not config.use_features and cloud.features is not None:
        cloud = cloud.without_features()

    with _stage('ground', timings):
        classified = classify_ground(cloud, config.terrain)
    objects = np.flatnonzero(classified.object_mask)
    if len(objects) == 0:
        raise DataError("no object returns")

    with _stage('rasters', timings):
        dtm = rasterize_dtm(classified, config.terrain.cell_size)
        chm = rasterize_chm(classified, dtm)
        smoothed = smooth_raster(chm, config.chm_smoothing_sigma)
    return classified, objects, dtm, chm, smoothed


def _detect_apexes(chm, smoothed, config):
    apexes = local_maxima_mwf(smoothed, config.mwf_window, config.min_tree_height)
    if len(apexes) == 0 or config.prior_method == 'mwf':
        return apexes
    regions = watershed_markers(smoothed, apexes)
    return refine_apexes(chm, regions, apexes)


def _finish(classified, objects, object_labels, dtm, timings, n_priors=0, diagnostics=()):
    labels = np.full(classified.n_points, -1, dtype=np.int64)
    labels[objects] = object_labels
    with _stage('metrics', timings):
        trees = extract_tree_metrics(labels, classified, dtm)
    logger.info(f"Delineated {len(trees)} trees from {len(objects)} object points")
    return Segmentation(labels, trees, timings, n_priors, list(diagnostics))


def _crown_area(xy):
    unique = np.unique(xy, axis=0)
    if len(unique) < 3:
        return 0.0
    if np.linalg.matrix_rank(unique - unique.mean(axis=0)) < 2:
        return 0.0
    try:
        return float(ConvexHull(unique).volume)
    except QhullError:
        return 0.0


def extract_tree_metrics(labels, cloud, dtm):
    """Height, apex and convex-hull crown area for every tree id >= 0"""
    labels = np.asarray(labels)
    heights = heights_above_ground(cloud, dtm)
    trees = []
    for tree_id in np.unique(labels[labels >= 0]):
        members = np.flatnonzero(labels == tree_id)
        top = members[np.argmax(heights[members])]
        trees.append(TreeRecord(
            tree_id=int(tree_id),
            apex=(float(cloud.x[top]), float(cloud.y[top])),
            height=float(heights[top]),
            crown_area=_crown_area(cloud.xyz[members, :2]),
            n_points=len(members),
        ))
    return trees


# ---------------------------------------------------------------------------
# Methods
# ---------------------------------------------------------------------------

def _recursive_on_objects(object_cloud, config, timings):
    with _stage('graph_rc', timings):
        graph = build_graph(object_cloud, _graph_params(config.graph_rc, config.use_features))
    with _stage('rc', timings):
        result = recursive_ncut(graph, config.tau_ncut, config.min_points, workers=config.threads)
    return result


def mcrc(cloud, config=None):
    """Multiclass cut seeded by CHM treetops, then a recursive cut inside every cluster"""
    config = config or McrcConfig()
    timings = {}
    classified, objects, dtm, chm, smoothed = _prepare(cloud, config, timings)
    object_cloud = classified.subset(objects)

    with _stage('treetops', timings):
        apexes = _detect_apexes(chm, smoothed, config)
        try:
            priors = build_priors(object_cloud, apexes, config.prior_radius)
        except DataError as e:
            logger.warning(f"{e}; falling back to the recursive cut on all object points")
            priors = None

    if priors is None:
        result = _recursive_on_objects(object_cloud, config, timings)
        return _finish(classified, objects, result.labels, dtm, timings, 0, [result])

    if priors.C >= len(objects):
        raise DataError(f"{priors.C} priors for only {len(objects)} object points")

    with _stage('graph_mc', timings):
        graph_mc = build_graph(object_cloud, _graph_params(config.graph_mc, config.use_features))
    with _stage('mc', timings):
        mc = multiclass_ncut_with_priors(graph_mc, priors, config.kappa)

    with _stage('graph_rc', timings):
        graph_rc = build_graph(object_cloud, _graph_params(config.graph_rc, config.use_features))
    clusters = [np.flatnonzero(mc.labels == c) for c in range(mc.C)]

    def split(members):
        return recursive_ncut(subgraph(graph_rc, members), config.tau_ncut, config.min_points)

    with _stage('rc', timings):
        if config.threads > 1:
            with ThreadPoolExecutor(max_workers=config.threads) as executor:
                results = list(executor.map(split, clusters))
        else:
            results = [split(members) for members in clusters]

    object_labels = np.empty(len(objects), dtype=np.int64)
    next_id = 0
    for members, result in zip(clusters, results):
        object_labels[members] = result.labels + next_id
        next_id += result.C

    logger.info(f"MC produced {mc.C} clusters, RC split them into {next_id} trees")
    return _finish(classified, objects, object_labels, dtm, timings, priors.C, [mc, *results])


def rc_only(cloud, config=None):
    """Recursive cut on the whole object graph, no priors"""
    config = config or McrcConfig()
    timings = {}
    classified, objects, dtm, _, _ = _prepare(cloud, config, timings)
    result = _recursive_on_objects(classified.subset(objects), config, timings)
    return _finish(classified, objects, result.labels, dtm, timings, 0, [result])


def watershed_only(cloud, config=None):
    """CHM baseline: each object point takes the watershed region of its cell"""
    config = config or McrcConfig()
    timings = {}
    classified, objects, dtm, _, smoothed = _prepare(cloud, config, timings)

    with _stage('treetops', timings):
        apexes = local_maxima_mwf(smoothed, config.mwf_window, config.min_tree_height)
    if len(apexes) == 0:
        logger.warning("No treetops found; all object points form one tree")
        return _finish(classified, objects, np.zeros(len(objects), dtype=np.int64), dtm, timings)

    with _stage('watershed', timings):
        regions = watershed_markers(smoothed, apexes).values
        unassigned = regions == 0
        if unassigned.any():
            _, (ri, ci) = ndimage.distance_transform_edt(unassigned, return_indices=True)
            regions = regions[ri, ci]
        rows, cols, _ = smoothed.cell_index(classified.x[objects], classified.y[objects])
        rows = np.clip(rows, 0, smoothed.height - 1)
        cols = np.clip(cols, 0, smoothed.width - 1)
        _, object_labels = np.unique(regions[rows, cols], return_inverse=True)

    return _finish(classified, objects, object_labels.astype(np.int64), dtm, timings, len(apexes))
