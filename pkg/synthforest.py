"""
Synthetic forest plots with exact ground truth.

Pulses land uniformly (Poisson count = density x area) on a sloped ground
plane carrying cone or dome crowns. Each pulse returns from the highest
surface above it and, with probability `penetration`, a second time from
the next surface down (a lower crown or the ground). Understory trees sit
under canopy crowns with a vertical gap below the crown base.
"""

import logging
import os
from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from errors import DataError
from pointcloud_io import PointCloud, GROUND, OBJECT, write_cloud
from terrain import grid_for_cloud
from validation import GroundTruthTree

logger = logging.getLogger(__name__)

CROWN_MODELS = ('cone', 'hemisphere')
MAX_PLACEMENT_ATTEMPTS = 5000
# densest packing of equal disks in the plane
_DISK_PACKING = np.pi / (2 * np.sqrt(3))


@dataclass(frozen=True)
class ForestSpec:
    extent: tuple = (34.0, 34.0)
    n_canopy: int = 30
    n_understory: int = 0
    crown_model: str = 'cone'
    height_range: tuple = (15.0, 25.0)
    crown_radius_range: tuple = (2.0, 3.5)
    point_density: float = 80.0
    ground_slope: float = 0.0
    noise_sigma: float = 0.05
    seed: int = 0
    crown_overlap: float = 0.2
    crown_ratio: float = 0.5
    penetration: float = 0.5
    feature_dim: int = 0
    feature_noise: float = 0.002

    def __post_init__(self):
        if not (len(self.extent) == 2 and min(self.extent) > 0):
            raise DataError(f"extent must be two positive lengths, got {self.extent}")
        if not self.point_density > 0:
            raise DataError("point_density must be positive")
        for name in ('height_range', 'crown_radius_range'):
            low, high = getattr(self, name)
            if not 0 < low <= high:
                raise DataError(f"{name} must be positive and ordered, got {(low, high)}")
        if self.crown_model not in CROWN_MODELS:
            raise DataError(f"crown_model must be one of {CROWN_MODELS}")
        if self.n_canopy < 0 or self.n_understory < 0:
            raise DataError("tree counts must be >= 0")
        if self.n_understory and not self.n_canopy:
            raise DataError("understory trees need a canopy layer above them")
        if not 0 <= self.crown_overlap < 1:
            raise DataError("crown_overlap must lie in [0, 1)")
        if not 0 < self.crown_ratio <= 1:
            raise DataError("crown_ratio must lie in (0, 1]")
        if not 0 <= self.penetration <= 1:
            raise DataError("penetration must lie in [0, 1]")
        if self.noise_sigma < 0 or self.feature_noise < 0:
            raise DataError("noise levels must be >= 0")
        if self.feature_dim < 0:
            raise DataError("feature_dim must be >= 0")

    @property
    def area(self):
        return float(self.extent[0] * self.extent[1])


@dataclass
class SyntheticTree:
    tree_id: int
    x: float
    y: float
    height: float
    crown_radius: float
    crown_depth: float
    base_z: float
    layer: str = 'canopy'

    def truth(self):
        return GroundTruthTree(self.x, self.y, self.height, self.tree_id, self.layer)


@dataclass
class SyntheticForest:
    cloud: PointCloud
    trees: list
    point_tree_ids: np.ndarray = field(repr=False)
    spec: ForestSpec = field(default=None, repr=False)

    def truth(self, layer=None):
        return [t.truth() for t in self.trees if layer is None or t.layer == layer]


def _ground(spec, x):
    return spec.ground_slope * np.asarray(x, dtype=float)


def _crown_surface(tree, model, x, y):
    """Absolute crown-top elevation at (x, y); -inf outside the crown"""
    rho = np.hypot(x - tree.x, y - tree.y) / tree.crown_radius
    inside = rho <= 1.0
    apex_z = tree.base_z + tree.height
    if model == 'cone':
        surface = apex_z - tree.crown_depth * rho
    else:
        surface = apex_z - tree.crown_depth + tree.crown_depth * np.sqrt(np.clip(1.0 - rho ** 2, 0.0, None))
    return np.where(inside, surface, -np.inf)


def _surfaces(trees, model, x, y):
    if not trees:
        return np.empty((len(x), 0))
    return np.column_stack([_crown_surface(t, model, x, y) for t in trees])


def _place_canopy(spec, rng):
    width, height = spec.extent
    radii = rng.uniform(*spec.crown_radius_range, spec.n_canopy)
    heights = rng.uniform(*spec.height_range, spec.n_canopy)

    # crowns stay inside the plot, so centres keep r away from every edge
    r_min, r_max = spec.crown_radius_range
    if spec.n_canopy and 2 * r_max > min(width, height):
        raise DataError(f"extent {spec.extent} too small for crowns of radius up to {r_max}")
    min_half_spacing = (1.0 - spec.crown_overlap) * r_min
    reachable = (width - 2 * r_min + 2 * min_half_spacing) * (height - 2 * r_min + 2 * min_half_spacing)
    if spec.n_canopy * np.pi * min_half_spacing ** 2 > _DISK_PACKING * reachable:
        raise DataError(f"extent {spec.extent} too small for {spec.n_canopy} canopy trees "
                        f"at the minimum crown spacing")

    centres = []
    for k, r in enumerate(radii):
        for _ in range(MAX_PLACEMENT_ATTEMPTS):
            x, y = rng.uniform(r, width - r), rng.uniform(r, height - r)
            if all(np.hypot(x - cx, y - cy) >= (1.0 - spec.crown_overlap) * (r + radii[j])
                   for j, (cx, cy) in enumerate(centres)):
                centres.append((x, y))
                break
        else:
            raise DataError(f"extent {spec.extent} too small for {spec.n_canopy} canopy trees "
                            f"at the minimum crown spacing (placed {k})")

    trees = []
    for k, ((x, y), r, h) in enumerate(zip(centres, radii, heights)):
        base = float(_ground(spec, x))
        trees.append(SyntheticTree(k, float(x), float(y), float(h), float(r), spec.crown_ratio * h, base))
    return trees


def _place_understory(spec, canopy, rng):
    """Small trees under canopy crowns, topping out below the lowest crown base above them"""
    trees = []
    for k in range(spec.n_understory):
        host = canopy[int(rng.integers(len(canopy)))]
        angle = rng.uniform(0, 2 * np.pi)
        offset = rng.uniform(0, 0.5) * host.crown_radius
        x, y = host.x + offset * np.cos(angle), host.y + offset * np.sin(angle)

        covering = [t for t in canopy if np.hypot(x - t.x, y - t.y) <= t.crown_radius]
        crown_base = min(t.height - t.crown_depth for t in covering)
        h = rng.uniform(0.4, 0.6) * crown_base
        r = rng.uniform(0.5, 1.0) * spec.crown_radius_range[0]
        base = float(_ground(spec, x))
        trees.append(SyntheticTree(len(canopy) + k, float(x), float(y), float(h), float(r),
                                   spec.crown_ratio * h, base, layer='understory'))
    return trees


def generate_forest(spec):
    """Sample a plot; deterministic for a given spec (seed included)"""
    rng = np.random.default_rng(spec.seed)
    canopy = _place_canopy(spec, rng)
    trees = canopy + _place_understory(spec, canopy, rng)

    n_pulses = int(rng.poisson(spec.point_density * spec.area))
    px = rng.uniform(0, spec.extent[0], n_pulses)
    py = rng.uniform(0, spec.extent[1], n_pulses)

    ground_z = _ground(spec, px)
    surfaces = _surfaces(trees, spec.crown_model, px, py)
    surfaces[surfaces <= ground_z[:, None]] = -np.inf
    stacked = np.column_stack([surfaces, ground_z])
    ids = np.append(np.arange(len(trees)), -1)

    order = np.argsort(-stacked, axis=1, kind='stable')
    rows = np.arange(n_pulses)
    first = order[:, 0]
    second = order[:, 1] if stacked.shape[1] > 1 else first
    has_second = (ids[first] >= 0) & (rng.random(n_pulses) < spec.penetration)

    xs = np.concatenate([px, px[has_second]])
    ys = np.concatenate([py, py[has_second]])
    zs = np.concatenate([stacked[rows, first], stacked[rows[has_second], second[has_second]]])
    tree_ids = np.concatenate([ids[first], ids[second[has_second]]])

    # trees hidden from every pulse still get their apex return
    hit = np.zeros(len(trees), dtype=bool)
    hit[tree_ids[tree_ids >= 0]] = True
    hidden = [t for t in trees if not hit[t.tree_id]]
    if hidden:
        xs = np.append(xs, [t.x for t in hidden])
        ys = np.append(ys, [t.y for t in hidden])
        zs = np.append(zs, [t.base_z + t.height for t in hidden])
        tree_ids = np.append(tree_ids, [t.tree_id for t in hidden])

    zs = zs + rng.normal(0.0, spec.noise_sigma, len(zs)) if spec.noise_sigma > 0 else zs
    labels = np.where(tree_ids >= 0, OBJECT, GROUND)

    features = None
    if spec.feature_dim:
        signatures = rng.normal(0.0, 0.01, (len(trees) + 1, spec.feature_dim))
        features = signatures[tree_ids] + rng.normal(0.0, spec.feature_noise, (len(zs), spec.feature_dim))

    cloud = PointCloud(np.column_stack([xs, ys, zs]), labels, features)
    logger.info(f"Generated {cloud.n_points} returns for {len(canopy)} canopy and "
                f"{len(trees) - len(canopy)} understory trees")
    return SyntheticForest(cloud, trees, tree_ids.astype(np.int64), spec)


def write_forest(forest, out_dir):
    """Write cloud.csv, truth.csv and point_truth.csv; returns their paths"""
    os.makedirs(out_dir, exist_ok=True)
    paths = {
        'cloud': os.path.join(out_dir, 'cloud.csv'),
        'truth': os.path.join(out_dir, 'truth.csv'),
        'point_truth': os.path.join(out_dir, 'point_truth.csv'),
    }
    write_cloud(forest.cloud, paths['cloud'])
    pd.DataFrame(
        [(t.tree_id, t.x, t.y, t.height, t.crown_radius, t.layer) for t in forest.trees],
        columns=['tree_id', 'x', 'y', 'height', 'crown_radius', 'layer'],
    ).to_csv(paths['truth'], index=False, float_format='%.10g')
    pd.DataFrame({'point_index': np.arange(len(forest.point_tree_ids)), 'tree_id': forest.point_tree_ids}).to_csv(
        paths['point_truth'], index=False)
    logger.info(f"Wrote synthetic plot to {out_dir}")
    return paths


def synthesize_bands(forest, n_bands=10, cell_size=1.0, seed=0, spike_fraction=0.02, spike_size=10.0):
    """Low-rank band stack over the plot with sparse spikes.

    Ground pixels share one spectrum; each canopy pixel mixes five vegetation
    endmembers with weights fixed per tree.
    """
    n_endmembers = 5
    if n_bands <= n_endmembers:
        raise DataError(f"need more than {n_endmembers} bands, got {n_bands}")
    rng = np.random.default_rng(seed)
    geometry = grid_for_cloud(forest.cloud, cell_size)

    rows, cols = np.indices(geometry.values.shape)
    cx, cy = geometry.cell_center(rows.ravel(), cols.ravel())
    model = forest.spec.crown_model if forest.spec is not None else CROWN_MODELS[0]
    surfaces = _surfaces(forest.trees, model, cx, cy)
    covered = np.isfinite(surfaces).any(axis=1) if surfaces.shape[1] else np.zeros(len(cx), dtype=bool)
    top = np.argmax(surfaces, axis=1) if surfaces.shape[1] else np.zeros(len(cx), dtype=np.int64)

    ground_spectrum = rng.uniform(0.05, 0.2, n_bands)
    endmembers = rng.uniform(0.1, 0.6, (n_endmembers, n_bands))
    mixtures = rng.dirichlet(np.ones(n_endmembers), max(len(forest.trees), 1))

    pixels = np.tile(ground_spectrum, (len(cx), 1))
    pixels[covered] = mixtures[top[covered]] @ endmembers

    spikes = rng.random(pixels.shape) < spike_fraction
    pixels[spikes] += rng.choice([-spike_size, spike_size], int(spikes.sum()))

    shape = geometry.values.shape
    return [geometry.with_values(pixels[:, b].reshape(shape)) for b in range(n_bands)]
