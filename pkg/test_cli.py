#!/usr/bin/env python3
"""
Tests for the mcrc command line: exit statuses, outputs and the run manifest
"""

import numpy as np
import pandas as pd
import pytest

from cli import ExitStatus, run
from pointcloud_io import PointCloud, write_cloud

SYNTH = ['--extent', '14', '14', '--n-canopy', '2', '--density', '20', '--seed', '3']


def manifest(out_dir):
    entries = {}
    for line in (out_dir / 'manifest.txt').read_text().splitlines():
        key, _, value = line.partition(' = ')
        entries.setdefault(key, []).append(value)
    return entries


@pytest.fixture(scope='module')
def plot(tmp_path_factory):
    out = tmp_path_factory.mktemp('plot')
    assert run(['synth', '--out', str(out), *SYNTH, '--n-bands', '7']) == ExitStatus.OK
    return out


def test_synth_writes_plot_and_manifest(plot):
    for name in ('cloud.csv', 'truth.csv', 'point_truth.csv', 'band01.asc', 'band07.asc', 'mcrc.log'):
        assert (plot / name).exists()
    entries = manifest(plot)
    assert entries['command'] == ['synth']
    assert entries['status'] == ['0']
    assert entries['seed'] == ['3']
    assert 'cloud.csv' in entries['output']
    assert 'config.graph_mc.sigma_xy' in entries
    assert 'version.numpy' in entries
    assert len(pd.read_csv(plot / 'truth.csv')) == 2


def test_segment_then_validate(plot, tmp_path):
    seg_dir = tmp_path / 'seg'
    status = run(['segment', '--cloud', str(plot / 'cloud.csv'), '--out', str(seg_dir), '--diagnostics'])
    assert status == ExitStatus.OK
    assert (seg_dir / 'segmentation.csv').exists()
    assert (seg_dir / 'diagnostics.csv').exists()
    entries = manifest(seg_dir)
    assert entries['status'] == ['0']
    assert 'timing.mc' in entries and 'timing.total' in entries

    trees = pd.read_csv(seg_dir / 'segmentation_trees.csv')
    assert len(trees) >= 1

    val_dir = tmp_path / 'val'
    status = run(['validate', '--truth', str(plot / 'truth.csv'), '--trees', str(seg_dir / 'segmentation_trees.csv'),
                  '--out', str(val_dir)])
    assert status == ExitStatus.OK
    summary = (val_dir / 'match_report.csv').read_text().split('\n\n')[1].splitlines()
    assert summary[-1].startswith('Overall,2,')


def test_out_defaults_to_the_working_directory(plot, tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    assert run(['watershed', '--cloud', str(plot / 'cloud.csv')]) == ExitStatus.OK
    assert (tmp_path / 'segmentation_watershed.csv').exists()
    assert manifest(tmp_path)['status'] == ['0']


def test_thread_count_does_not_change_output(plot, tmp_path):
    for threads in ('1', '3'):
        assert run(['segment', '--cloud', str(plot / 'cloud.csv'), '--out', str(tmp_path / threads),
                    '--threads', threads]) == ExitStatus.OK
    assert (tmp_path / '1' / 'segmentation.csv').read_bytes() == (tmp_path / '3' / 'segmentation.csv').read_bytes()


def test_baselines_use_their_own_file_names(plot, tmp_path):
    assert run(['watershed', '--cloud', str(plot / 'cloud.csv'), '--out', str(tmp_path)]) == ExitStatus.OK
    assert (tmp_path / 'segmentation_watershed.csv').exists()
    assert (tmp_path / 'segmentation_watershed_trees.csv').exists()


def test_raster_stages(plot, tmp_path):
    assert run(['filter', '--cloud', str(plot / 'cloud.csv'), '--out', str(tmp_path / 'f')]) == ExitStatus.OK
    assert {'ground.csv', 'objects.csv', 'dtm.asc'} <= {p.name for p in (tmp_path / 'f').iterdir()}
    assert run(['chm', '--cloud', str(plot / 'cloud.csv'), '--out', str(tmp_path / 'c')]) == ExitStatus.OK
    assert (tmp_path / 'c' / 'chm_smoothed.asc').exists()
    assert run(['detect', '--cloud', str(plot / 'cloud.csv'), '--out', str(tmp_path / 'd')]) == ExitStatus.OK
    apexes = pd.read_csv(tmp_path / 'd' / 'apexes.csv')
    assert len(apexes) >= 1


def test_rpca_writes_component_rasters(plot, tmp_path):
    bands = [str(plot / f"band{b:02d}.asc") for b in range(1, 8)]
    status = run(['rpca', '--bands', *bands, '--components', '2', '2', '--out', str(tmp_path)])
    assert status == ExitStatus.OK
    assert (tmp_path / 'pc02.asc').exists()
    assert not (tmp_path / 'pc03.asc').exists()


def test_cloud_without_objects_is_a_data_error(tmp_path, capsys):
    flat = PointCloud(np.column_stack([np.random.default_rng(0).uniform(0, 10, (300, 2)), np.zeros(300)]))
    write_cloud(flat, tmp_path / 'flat.csv')
    status = run(['segment', '--cloud', str(tmp_path / 'flat.csv'), '--out', str(tmp_path / 'out')])
    assert status == ExitStatus.DATA_ERROR
    assert 'no object returns' in capsys.readouterr().err
    assert manifest(tmp_path / 'out')['status'] == ['2']


def test_missing_input_is_a_data_error(tmp_path):
    status = run(['segment', '--cloud', str(tmp_path / 'absent.csv'), '--out', str(tmp_path / 'out')])
    assert status == ExitStatus.DATA_ERROR


def test_usage_errors(tmp_path):
    assert run(['segment', '--cloud', 'x.csv', '--out', str(tmp_path), '--bogus']) == ExitStatus.USAGE
    assert run(['segment', '--out', str(tmp_path)]) == ExitStatus.USAGE
    assert run(['explode', '--out', str(tmp_path)]) == ExitStatus.USAGE
    assert run(['--help']) == ExitStatus.OK


def test_bad_config_is_a_usage_error(plot, tmp_path):
    config = tmp_path / 'run.cfg'
    config.write_text("tau_ncut = 0.1\nnot_a_key = 3\n")
    status = run(['segment', '--cloud', str(plot / 'cloud.csv'), '--config', str(config), '--out', str(tmp_path / 'o')])
    assert status == ExitStatus.USAGE
    assert manifest(tmp_path / 'o')['status'] == ['1']
    assert run(['segment', '--cloud', str(plot / 'cloud.csv'), '--threads', '0',
                '--out', str(tmp_path / 'o')]) == ExitStatus.USAGE
