#!/usr/bin/env python3
"""
Tests for point cloud / raster containers and their file formats
"""

import numpy as np
import pytest

from errors import DataError
from pointcloud_io import (PointCloud, RasterGrid, GROUND, OBJECT, load_cloud, write_cloud,
                           attach_features, write_raster, read_raster, write_segmentation,
                           read_segmentation, tree_table_path)
from pipeline import Segmentation, TreeRecord


def test_csv_with_header_and_features(tmp_path):
    path = tmp_path / 'cloud.csv'
    path.write_text("x,y,z,f1\n0,0,1,0.5\n1, 2, 3, 0.25\n")
    cloud = load_cloud(path)
    assert cloud.n_points == 2
    assert cloud.feature_dim == 1
    np.testing.assert_array_equal(cloud.xyz[1], [1, 2, 3])


def test_csv_bad_number_names_line(tmp_path):
    path = tmp_path / 'cloud.csv'
    path.write_text("x,y,z\n0,0,1\n1,abc,3\n")
    with pytest.raises(DataError, match="line 3"):
        load_cloud(path)


def test_csv_ragged_row(tmp_path):
    path = tmp_path / 'cloud.csv'
    path.write_text("0,0,1\n1,2\n")
    with pytest.raises(DataError, match="line 2"):
        load_cloud(path)


@pytest.mark.parametrize('rows, line', [
    ("0,0,1,inf\n0.1,0,1,0.5\n", "line 2"),
    ("0,0,1,0.5,0.5\n0.1,0,1,nan,0.5\n", "line 3"),
    ("0,0,1\n0,nan,1\n", "line 3"),
])
def test_csv_non_finite_values_name_line(tmp_path, rows, line):
    path = tmp_path / 'cloud.csv'
    path.write_text("x,y,z" + ",f" * (rows.split('\n')[0].count(',') - 2) + "\n" + rows)
    with pytest.raises(DataError, match=line):
        load_cloud(path)


def test_malformed_first_row_is_not_a_header(tmp_path):
    path = tmp_path / 'cloud.csv'
    path.write_text("1,abc,3\n0,0,1\n")
    with pytest.raises(DataError, match="line 1"):
        load_cloud(path)


def test_binary_infinite_feature_names_point(tmp_path):
    path = tmp_path / 'cloud.bin'
    write_cloud(PointCloud(np.zeros((3, 3)), features=np.zeros((3, 1))), path)
    blob = bytearray(path.read_bytes())
    blob[-8:] = np.array([np.inf], dtype='<f8').tobytes()
    path.write_bytes(bytes(blob))
    with pytest.raises(DataError, match="point 2"):
        load_cloud(path)


def test_absent_feature_rows_survive_a_round_trip(tmp_path):
    cloud = PointCloud(np.zeros((2, 3)), features=[[0.5, 0.25], [np.nan, np.nan]])
    for name in ('cloud.csv', 'cloud.bin'):
        write_cloud(cloud, tmp_path / name)
        assert load_cloud(tmp_path / name).feature_present.tolist() == [True, False]


def test_infinite_or_partial_features_are_rejected():
    with pytest.raises(DataError, match="finite"):
        PointCloud(np.zeros((2, 3)), features=[[np.inf], [0.0]])
    with pytest.raises(DataError, match="finite"):
        PointCloud(np.zeros((2, 3)), features=[[np.nan, 1.0], [0.0, 0.0]])


def test_empty_file_has_no_points(tmp_path):
    path = tmp_path / 'cloud.csv'
    path.write_text("x,y,z\n")
    with pytest.raises(DataError, match="no points"):
        load_cloud(path)


def test_binary_is_exact(tmp_path):
    rng = np.random.default_rng(3)
    cloud = PointCloud(rng.normal(size=(50, 3)) * 1e3, features=rng.normal(size=(50, 2)))
    path = tmp_path / 'cloud.bin'
    write_cloud(cloud, path)
    loaded = load_cloud(path)
    np.testing.assert_array_equal(loaded.xyz, cloud.xyz)
    np.testing.assert_array_equal(loaded.features, cloud.features)


def test_binary_bad_magic(tmp_path):
    path = tmp_path / 'cloud.bin'
    path.write_bytes(b'XXXX' + b'\x00' * 8)
    with pytest.raises(DataError, match="magic"):
        load_cloud(path)


def test_csv_keeps_full_precision(tmp_path):
    cloud = PointCloud([[0.1, 1 / 3, 2 ** 0.5]])
    path = tmp_path / 'cloud.csv'
    write_cloud(cloud, path)
    np.testing.assert_array_equal(load_cloud(path).xyz, cloud.xyz)


def test_cloud_copies_input():
    xyz = np.zeros((3, 3))
    cloud = PointCloud(xyz)
    xyz[0, 0] = 5.0
    assert cloud.xyz[0, 0] == 0.0
    assert not cloud.xyz.flags.writeable


def test_masks_and_subset():
    cloud = PointCloud(np.arange(12.0).reshape(4, 3), class_label=[GROUND, OBJECT, OBJECT, GROUND])
    assert cloud.ground_mask.tolist() == [True, False, False, True]
    sub = cloud.subset([2, 1])
    assert sub.class_label.tolist() == [OBJECT, OBJECT]
    np.testing.assert_array_equal(sub.xyz[0], [6, 7, 8])


def test_cell_index_is_half_open():
    grid = RasterGrid((0.0, 0.0), 1.0, np.zeros((2, 3)))
    rows, cols, inside = grid.cell_index([0.0, 0.999, 1.0, 3.0], [0.0, 1.5, 1.0, 0.0])
    assert rows.tolist() == [0, 1, 1, 0]
    assert cols.tolist() == [0, 0, 1, 3]
    assert inside.tolist() == [True, True, True, False]


def test_attach_features_marks_outside_points_absent():
    grid = RasterGrid((0.0, 0.0), 1.0, np.array([[1.0, 2.0]]))
    cloud = PointCloud([[0.5, 0.5, 0.0], [1.5, 0.5, 0.0], [5.0, 5.0, 0.0]])
    attached = attach_features(cloud, [grid])
    assert attached.features[:2, 0].tolist() == [1.0, 2.0]
    assert attached.feature_present.tolist() == [True, True, False]


def test_attach_features_is_idempotent_and_order_independent():
    rng = np.random.default_rng(6)
    stack = [RasterGrid((0.0, 0.0), 1.0, rng.random((4, 5))) for _ in range(3)]
    cloud = PointCloud(np.column_stack([rng.uniform(-1, 6, 40), rng.uniform(-1, 5, 40), np.zeros(40)]))
    once = attach_features(cloud, stack)
    twice = attach_features(once, stack, overwrite=True)
    np.testing.assert_array_equal(once.features, twice.features)

    order = rng.permutation(cloud.n_points)
    shuffled = attach_features(cloud.subset(order), stack)
    np.testing.assert_array_equal(shuffled.features, once.features[order])


def test_attach_features_rejects_mismatched_stack():
    a = RasterGrid((0.0, 0.0), 1.0, np.zeros((2, 2)))
    b = RasterGrid((0.0, 0.0), 0.5, np.zeros((2, 2)))
    with pytest.raises(DataError):
        attach_features(PointCloud([[0.0, 0.0, 0.0]]), [a, b])


def test_raster_roundtrip_keeps_orientation_and_nodata(tmp_path):
    values = np.array([[1.0, 2.0], [np.nan, 4.0], [5.0, 6.5]])
    grid = RasterGrid((10.0, 20.0), 0.5, values)
    path = tmp_path / 'grid.asc'
    write_raster(grid, path)
    # first data row in the file is the northern (last) row
    assert path.read_text().splitlines()[6].split() == ['5', '6.5']
    loaded = read_raster(path)
    assert loaded.same_geometry(grid)
    np.testing.assert_array_equal(loaded.values, values)


def test_segmentation_files(tmp_path):
    seg = Segmentation(np.array([-1, 0, 0, 1]), [TreeRecord(0, (1.0, 2.0), 10.0, 3.5, 2),
                                                 TreeRecord(1, (4.0, 5.0), 8.0, 0.0, 1)])
    path = tmp_path / 'segmentation.csv'
    write_segmentation(seg, path)
    assert tree_table_path(path).endswith('segmentation_trees.csv')
    labels, trees = read_segmentation(path)
    assert labels.tolist() == [-1, 0, 0, 1]
    assert trees['height_m'].tolist() == [10.0, 8.0]
