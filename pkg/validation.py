"""
Scoring delineated trees against field truth.

A candidate tree and a truth tree can be paired when they lie within 5 m
horizontally and 5 m in height. Pairs are taken greedily by combined
distance, each tree used at most once.
"""

import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import pandas as pd

from errors import DataError
from pipeline import TreeRecord
from pointcloud_io import TREE_COLUMNS

logger = logging.getLogger(__name__)

MAX_XY = 5.0
MAX_DZ = 5.0

# (label, lower bound inclusive, upper bound exclusive)
HEIGHT_BANDS = [
    ('>= 20', 20.0, np.inf),
    ('15-20', 15.0, 20.0),
    ('10-15', 10.0, 15.0),
    ('5-10', 5.0, 10.0),
    ('2-5', 2.0, 5.0),
    ('< 2', -np.inf, 2.0),
]


@dataclass
class GroundTruthTree:
    x: float
    y: float
    height: float
    tree_id: Optional[int] = None
    layer: str = 'canopy'

    def __post_init__(self):
        if not self.height > 0:
            raise DataError(f"truth tree height must be positive, got {self.height}")


@dataclass
class MatchPair:
    candidate_id: int
    truth_id: int
    d_xy: float
    d_z: float

    @property
    def score(self):
        return float(np.hypot(self.d_xy, self.d_z))


@dataclass
class MatchReport:
    pairs: list
    candidates: list = field(repr=False)
    truth: list = field(repr=False)

    @property
    def n_extracted(self):
        return len(self.candidates)

    @property
    def n_truth(self):
        return len(self.truth)

    @property
    def n_matched(self):
        return len(self.pairs)

    def matched_truth_ids(self):
        return {p.truth_id for p in self.pairs}


def _truth_ids(truth):
    return np.array([t.tree_id if t.tree_id is not None else i for i, t in enumerate(truth)], dtype=np.int64)


def match_trees(candidates, truth, max_xy=MAX_XY, max_dz=MAX_DZ):
    """Greedy one-to-one matching inside the horizontal and vertical gates.

    Pairs are taken in ascending sqrt(d_xy^2 + d_z^2); equal scores go to the
    lower truth id, then the lower candidate id.
    """
    candidates, truth = list(candidates), list(truth)
    if not candidates or not truth:
        return MatchReport([], candidates, truth)

    cand_xy = np.array([c.apex for c in candidates], dtype=float).reshape(-1, 2)
    cand_h = np.array([c.height for c in candidates], dtype=float)
    cand_ids = np.array([c.tree_id for c in candidates], dtype=np.int64)
    truth_xy = np.array([(t.x, t.y) for t in truth], dtype=float)
    truth_h = np.array([t.height for t in truth], dtype=float)
    truth_ids = _truth_ids(truth)

    d_xy = np.linalg.norm(cand_xy[:, None, :] - truth_xy[None, :, :], axis=2)
    d_z = cand_h[:, None] - truth_h[None, :]
    ci, ti = np.nonzero((d_xy <= max_xy) & (np.abs(d_z) <= max_dz))
    score = np.hypot(d_xy[ci, ti], d_z[ci, ti])
    order = np.lexsort((cand_ids[ci], truth_ids[ti], score))

    used_c, used_t, pairs = set(), set(), []
    for k in order:
        c, t = ci[k], ti[k]
        if c in used_c or t in used_t:
            continue
        used_c.add(c)
        used_t.add(t)
        pairs.append(MatchPair(int(cand_ids[c]), int(truth_ids[t]), float(d_xy[c, t]), float(d_z[c, t])))

    pairs.sort(key=lambda p: p.truth_id)
    logger.info(f"Matched {len(pairs)} of {len(truth)} truth trees ({len(candidates)} extracted)")
    return MatchReport(pairs, candidates, truth)


def _band_of(height):
    for label, low, high in HEIGHT_BANDS:
        if low <= height < high:
            return label
    return HEIGHT_BANDS[-1][0]


def band_summary(report, truth=None):
    """Truth/extracted/matched counts per height band plus an Overall row.

    Candidates are banded by their own height, truth and matched trees by
    the truth height.
    """
    truth = report.truth if truth is None else list(truth)
    matched = report.matched_truth_ids()
    truth_ids = _truth_ids(truth)

    counts = {label: [0, 0, 0] for label, _, _ in HEIGHT_BANDS}
    for t, tid in zip(truth, truth_ids):
        counts[_band_of(t.height)][0] += 1
        if tid in matched:
            counts[_band_of(t.height)][2] += 1
    for c in report.candidates:
        counts[_band_of(c.height)][1] += 1

    rows = [(label, *counts[label]) for label, _, _ in HEIGHT_BANDS]
    summary = pd.DataFrame(rows, columns=['band', 'truth', 'extracted', 'matched'])
    overall = summary[['truth', 'extracted', 'matched']].sum()
    summary.loc[len(summary)] = ['Overall', int(overall['truth']), int(overall['extracted']), int(overall['matched'])]
    return summary


def detection_rate(report, layer=None):
    """Matched share of the truth trees, optionally for one layer only"""
    truth_ids = _truth_ids(report.truth)
    selected = [tid for t, tid in zip(report.truth, truth_ids) if layer is None or t.layer == layer]
    if not selected:
        return 0.0
    matched = report.matched_truth_ids()
    return sum(1 for tid in selected if tid in matched) / len(selected)


def read_truth(path):
    frame = pd.read_csv(path)
    missing = {'x', 'y', 'height'} - set(frame.columns)
    if missing:
        raise DataError(f"{path}: missing truth columns {sorted(missing)}")
    has_id = 'tree_id' in frame.columns
    has_layer = 'layer' in frame.columns
    return [
        GroundTruthTree(
            float(row.x), float(row.y), float(row.height),
            int(row.tree_id) if has_id else i,
            str(row.layer) if has_layer else 'canopy',
        )
        for i, row in enumerate(frame.itertuples(index=False))
    ]


def read_tree_table(path):
    frame = pd.read_csv(path)
    if list(frame.columns) != TREE_COLUMNS:
        raise DataError(f"{path}: expected header {','.join(TREE_COLUMNS)}")
    return [
        TreeRecord(int(row.tree_id), (float(row.apex_x), float(row.apex_y)), float(row.height_m),
                   float(row.crown_area_m2), int(row.n_points))
        for row in frame.itertuples(index=False)
    ]


def write_match_report(report, summary, path):
    """Pair rows, a blank line, then the per-band summary block"""
    pairs = pd.DataFrame(
        [(p.candidate_id, p.truth_id, p.d_xy, p.d_z) for p in report.pairs],
        columns=['candidate_id', 'truth_id', 'd_xy', 'd_z'],
    )
    with open(path, 'w', encoding='utf-8', newline='') as f:
        pairs.to_csv(f, index=False, float_format='%.6f')
        f.write('\n')
        summary.to_csv(f, index=False)
    logger.info(f"Wrote match report to {path}")
