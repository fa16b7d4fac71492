#!/usr/bin/env python3
"""
Tree Crown Delineation - command line

Runs the delineation workflow stage by stage or end to end:

    filter     ground/object classification + DTM
    chm        DTM, CHM and smoothed CHM rasters
    detect     treetops (and watershed crowns) from the CHM
    rpca       band stack -> robust PCA -> component score rasters
    segment    multiclass cut with priors + recursive cut (MCRC)
    rc-only    recursive cut on the whole object graph
    watershed  marker-watershed CHM baseline
    validate   match a tree table against field truth
    synth      synthetic plot with ground truth

Every run writes `manifest.txt` and `mcrc.log` into --out.
"""

import argparse
import logging
import os
import platform
import sys
import time
from dataclasses import replace
from datetime import datetime
from enum import IntEnum
from importlib import metadata

import settings
from errors import ConfigError, DataError, McrcError, NonConvergenceError
from pipeline import McrcConfig, config_items, load_config, preset_config, mcrc, rc_only, watershed_only, PRESETS
from pointcloud_io import load_cloud, write_cloud, attach_features, read_raster, write_raster, write_segmentation
from rpca import reduce_features
from spectral import write_diagnostics
from synthforest import ForestSpec, CROWN_MODELS, generate_forest, write_forest, synthesize_bands
from terrain import classify_ground, rasterize_dtm, rasterize_chm, smooth_raster
from treetops import local_maxima_mwf, watershed_markers, refine_apexes, write_apexes
from validation import match_trees, band_summary, detection_rate, read_truth, read_tree_table, write_match_report

logger = logging.getLogger(__name__)

PACKAGES = ('numpy', 'scipy', 'scikit-image', 'pandas')


class ExitStatus(IntEnum):
    OK = 0
    USAGE = 1
    DATA_ERROR = 2
    NON_CONVERGENCE = 3


class UsageParser(argparse.ArgumentParser):
    """ArgumentParser that exits with the usage status instead of argparse's 2"""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(ExitStatus.USAGE, f"{self.prog}: error: {message}\n")


def build_parser():
    parser = UsageParser(prog='mcrc', description='Individual tree crown delineation from LiDAR point clouds')
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument('--config', help='flat key = value config file')
    common.add_argument('--preset', choices=sorted(PRESETS), help='bandwidth preset applied before --config')
    common.add_argument('--out', default=os.curdir, help='output directory (default: current directory)')
    common.add_argument('--seed', type=int, default=0, help='random seed (synthetic data)')
    common.add_argument('--threads', type=int, help='worker threads (default MCRC_THREADS)')
    common.add_argument('--verbose', action='store_true', help='debug logging')

    commands = parser.add_subparsers(dest='command', required=True, parser_class=UsageParser)

    for name in ('filter', 'chm', 'detect'):
        sub = commands.add_parser(name, parents=[common])
        sub.add_argument('--cloud', required=True)

    sub = commands.add_parser('rpca', parents=[common])
    sub.add_argument('--bands', nargs='+', required=True, help='band rasters (ASCII grid)')
    sub.add_argument('--components', nargs=2, type=int, default=(2, 5), metavar=('FIRST', 'LAST'))
    sub.add_argument('--max-iter', type=int, default=1000)

    for name in ('segment', 'rc-only', 'watershed'):
        sub = commands.add_parser(name, parents=[common])
        sub.add_argument('--cloud', required=True)
        sub.add_argument('--features', nargs='+', help='score rasters to attach as point features')
        sub.add_argument('--diagnostics', action='store_true', help='write eigen-solve diagnostics CSV')

    sub = commands.add_parser('validate', parents=[common])
    sub.add_argument('--truth', required=True)
    sub.add_argument('--trees', required=True)

    sub = commands.add_parser('synth', parents=[common])
    sub.add_argument('--extent', nargs=2, type=float, default=(34.0, 34.0), metavar=('WIDTH', 'HEIGHT'))
    sub.add_argument('--n-canopy', type=int, default=30)
    sub.add_argument('--n-understory', type=int, default=0)
    sub.add_argument('--crown-model', choices=CROWN_MODELS, default='cone')
    sub.add_argument('--density', type=float, default=80.0)
    sub.add_argument('--slope', type=float, default=0.0)
    sub.add_argument('--n-bands', type=int, default=0, help='also write a synthetic band stack')
    return parser


def resolve_config(args):
    """Defaults (incl. environment) < preset < config file < command-line flags"""
    config = preset_config(args.preset) if args.preset else McrcConfig()
    if args.config:
        config = load_config(args.config, base=config)
    if args.threads is not None:
        if args.threads < 1:
            raise ConfigError("--threads must be >= 1")
        config = replace(config, threads=args.threads)
    if getattr(args, 'features', None):
        config = replace(config, use_features=True)
    return config


def _versions():
    found = {}
    for package in PACKAGES:
        try:
            found[package] = metadata.version(package)
        except metadata.PackageNotFoundError:
            found[package] = 'unknown'
    return found


def write_manifest(path, args, config, timings, outputs, status=ExitStatus.OK):
    lines = [
        f"command = {args.command}",
        f"status = {int(status)}",
        f"argv = {' '.join(args.argv)}",
        f"seed = {args.seed}",
        f"python = {platform.python_version()}",
    ]
    lines += [f"version.{name} = {version}" for name, version in _versions().items()]
    lines += [f"config.{key} = {value}" for key, value in config_items(config)]
    lines += [f"output = {name}" for name in outputs]
    lines += [f"timing.{stage} = {seconds:.3f}" for stage, seconds in timings.items()]
    lines.append(f"finished = {datetime.now().isoformat(timespec='seconds')}")
    with open(path, 'w', encoding='utf-8') as f:
        f.write('\n'.join(lines) + '\n')


def _out(args, name):
    return os.path.join(args.out, name)


def _load_input_cloud(args):
    cloud = load_cloud(args.cloud)
    if getattr(args, 'features', None):
        rasters = [read_raster(path) for path in args.features]
        cloud = attach_features(cloud, rasters, overwrite=True)
    return cloud


# ---------------------------------------------------------------------------
# Subcommands; each returns the list of files it wrote
# ---------------------------------------------------------------------------

def cmd_filter(args, config, timings):
    cloud = load_cloud(args.cloud)
    classified = classify_ground(cloud, config.terrain)
    dtm = rasterize_dtm(classified, config.terrain.cell_size)
    outputs = ['ground.csv', 'objects.csv', 'dtm.asc']
    write_cloud(classified.subset(classified.ground_mask.nonzero()[0]), _out(args, outputs[0]))
    if classified.object_mask.any():
        write_cloud(classified.subset(classified.object_mask.nonzero()[0]), _out(args, outputs[1]))
    else:
        logger.warning("No object returns; objects.csv not written")
        outputs.remove('objects.csv')
    write_raster(dtm, _out(args, 'dtm.asc'))
    print(f"✅ {int(classified.ground_mask.sum())} ground / {int(classified.object_mask.sum())} object points")
    return outputs


def cmd_chm(args, config, timings):
    classified = classify_ground(load_cloud(args.cloud), config.terrain)
    dtm = rasterize_dtm(classified, config.terrain.cell_size)
    chm = rasterize_chm(classified, dtm)
    smoothed = smooth_raster(chm, config.chm_smoothing_sigma)
    outputs = {'dtm.asc': dtm, 'chm.asc': chm, 'chm_smoothed.asc': smoothed}
    for name, grid in outputs.items():
        write_raster(grid, _out(args, name))
    print(f"✅ CHM {chm.width}x{chm.height} cells, max height {float(chm.values.max()):.2f} m")
    return list(outputs)


def cmd_detect(args, config, timings):
    classified = classify_ground(load_cloud(args.cloud), config.terrain)
    dtm = rasterize_dtm(classified, config.terrain.cell_size)
    chm = rasterize_chm(classified, dtm)
    smoothed = smooth_raster(chm, config.chm_smoothing_sigma)
    apexes = local_maxima_mwf(smoothed, config.mwf_window, config.min_tree_height)
    outputs = ['apexes.csv']
    if len(apexes) and config.prior_method == 'watershed':
        crowns = watershed_markers(smoothed, apexes)
        apexes = refine_apexes(chm, crowns, apexes)
        write_raster(crowns, _out(args, 'crowns.asc'))
        outputs.append('crowns.asc')
    write_apexes(apexes, _out(args, 'apexes.csv'))
    print(f"🌲 {len(apexes)} treetops detected")
    return outputs


def cmd_rpca(args, config, timings):
    bands = [read_raster(path) for path in args.bands]
    rasters, result = reduce_features(bands, tuple(args.components), max_iter=args.max_iter)
    outputs = []
    for component, grid in zip(range(args.components[0], args.components[1] + 1), rasters):
        name = f"pc{component:02d}.asc"
        write_raster(grid, _out(args, name))
        outputs.append(name)
    status = 'converged' if result.converged else 'stopped at the iteration cap'
    print(f"✅ rPCA {status} after {result.iterations} iterations; wrote {len(outputs)} score rasters")
    return outputs


SEGMENTERS = {
    'segment': (mcrc, 'segmentation.csv'),
    'rc-only': (rc_only, 'segmentation_rc.csv'),
    'watershed': (watershed_only, 'segmentation_watershed.csv'),
}


def cmd_segment(args, config, timings):
    method, name = SEGMENTERS[args.command]
    segmentation = method(_load_input_cloud(args), config)
    timings.update(segmentation.timings)

    write_segmentation(segmentation, _out(args, name))
    outputs = [name, name.replace('.csv', '_trees.csv')]
    if args.diagnostics and segmentation.diagnostics:
        write_diagnostics(segmentation.diagnostics, _out(args, 'diagnostics.csv'))
        outputs.append('diagnostics.csv')
    print(f"🌲 {segmentation.n_trees} trees delineated ({segmentation.n_priors} priors)")
    return outputs


def cmd_validate(args, config, timings):
    truth = read_truth(args.truth)
    candidates = read_tree_table(args.trees)
    report = match_trees(candidates, truth)
    summary = band_summary(report, truth)
    write_match_report(report, summary, _out(args, 'match_report.csv'))
    print(f"📊 Matched {report.n_matched}/{report.n_truth} truth trees "
          f"({detection_rate(report) * 100:.1f}%), {report.n_extracted} extracted")
    return ['match_report.csv']


def cmd_synth(args, config, timings):
    spec = ForestSpec(
        extent=tuple(args.extent), n_canopy=args.n_canopy, n_understory=args.n_understory,
        crown_model=args.crown_model, point_density=args.density, ground_slope=args.slope, seed=args.seed,
    )
    forest = generate_forest(spec)
    paths = write_forest(forest, args.out)
    outputs = [os.path.basename(p) for p in paths.values()]
    if args.n_bands:
        for b, grid in enumerate(synthesize_bands(forest, args.n_bands, seed=args.seed), start=1):
            name = f"band{b:02d}.asc"
            write_raster(grid, _out(args, name))
            outputs.append(name)
    print(f"🌳 Synthetic plot: {forest.cloud.n_points} points, {len(forest.trees)} trees")
    return outputs


COMMANDS = {
    'filter': cmd_filter,
    'chm': cmd_chm,
    'detect': cmd_detect,
    'rpca': cmd_rpca,
    'segment': cmd_segment,
    'rc-only': cmd_segment,
    'watershed': cmd_segment,
    'validate': cmd_validate,
    'synth': cmd_synth,
}


def run(argv):
    """Parse argv, run one subcommand and return its ExitStatus"""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return ExitStatus.OK if e.code in (0, None) else ExitStatus.USAGE
    args.argv = list(argv)

    try:
        os.makedirs(args.out, exist_ok=True)
    except OSError as e:
        print(f"❌ Cannot create output directory {args.out}: {e}", file=sys.stderr)
        return ExitStatus.USAGE
    settings.configure_logging('DEBUG' if args.verbose else None, _out(args, 'mcrc.log'))

    timings, outputs = {}, []
    config = McrcConfig()
    status = ExitStatus.OK
    start = time.perf_counter()
    try:
        config = resolve_config(args)
        outputs = COMMANDS[args.command](args, config, timings)
    except ConfigError as e:
        logger.error(f"Configuration error: {e}")
        print(f"❌ {e}", file=sys.stderr)
        status = ExitStatus.USAGE
    except NonConvergenceError as e:
        logger.error(f"Solver did not converge: {e}")
        print(f"❌ {e}", file=sys.stderr)
        status = ExitStatus.NON_CONVERGENCE
    except (DataError, McrcError, OSError) as e:
        logger.error(f"Data error: {e}")
        print(f"❌ {e}", file=sys.stderr)
        status = ExitStatus.DATA_ERROR
    timings['total'] = time.perf_counter() - start

    write_manifest(_out(args, 'manifest.txt'), args, config, timings, outputs, status)
    logger.info(f"{args.command} finished with status {status.name} in {timings['total']:.2f} s")
    return status


def main():
    sys.exit(int(run(sys.argv[1:])))


if __name__ == "__main__":
    main()
