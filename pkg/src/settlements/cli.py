import argparse
import logging
import sys
from pathlib import Path
from typing import List, Optional

from config.settings import PipelineConfig
from ._kernels import configure_threads
from .errors import ConfigError, SettlementMapError
from .pipeline import (cmd_build_dataset, cmd_evaluate, cmd_postprocess, cmd_predict, cmd_run_all,
                       cmd_sweep_undersample, cmd_synth, cmd_train)
from .synth import SynthSpec

LOG_FORMAT = '%(asctime)s - %(name)s - %(levelname)s - %(message)s'

# argparse dest -> PipelineConfig.with_overrides key
OVERRIDE_FLAGS = (
    'raster', 'truth', 'blocks', 'out', 'predict_raster', 'eval_truth', 'model', 'scores', 'predicted',
    'tile_size', 'stride', 'undersample_ratio', 'val_fraction', 'learning_rate', 'epochs', 'batch_size',
    'l2', 'p_min', 'coverage_min', 'block_filter', 'eval_resolution', 'export_min_probability',
    'seed', 'threads',
)


def setup_logging(quiet: bool = False, log_file: Optional[str] = None) -> None:
    formatter = logging.Formatter(LOG_FORMAT)
    console_handler = logging.StreamHandler(sys.stderr)
    console_handler.setFormatter(formatter)
    handlers: List[logging.Handler] = [console_handler]
    if log_file:
        file_handler = logging.FileHandler(log_file, encoding='utf-8')
        file_handler.setFormatter(formatter)
        handlers.append(file_handler)
    logging.basicConfig(level=logging.WARNING if quiet else logging.INFO, handlers=handlers, force=True)


class SettlementArgumentParser(argparse.ArgumentParser):
    """Usage errors use the same single-line format as pipeline errors"""

    def error(self, message: str):
        self.exit(2, f"error {ConfigError.code}: {_single_line(message)}\n")


def _ratios(text: str) -> List[float]:
    try:
        values = [float(v) for v in text.split(',') if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"ratios must be comma-separated numbers, got '{text}'")
    if not values:
        raise argparse.ArgumentTypeError("at least one ratio is required")
    return values


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument('--config', help='YAML configuration file (default: $SETTLEMENT_MAP_CONFIG)')
    common.add_argument('--seed', type=int, help='top-level random seed')
    common.add_argument('--out', help='output directory')
    common.add_argument('--threads', type=int, help='worker threads, 0 = one per CPU')
    common.add_argument('--quiet', action='store_true', help='only log warnings and errors')
    common.add_argument('--log-file', help='also write the log to this file')

    stage = argparse.ArgumentParser(add_help=False)
    paths = stage.add_argument_group('inputs')
    paths.add_argument('--raster', help='training raster')
    paths.add_argument('--truth', help='settlement polygons (GeoJSON)')
    paths.add_argument('--blocks', help='block polygons (GeoJSON)')
    paths.add_argument('--predict-raster', help='raster to map (default: --raster)')
    paths.add_argument('--eval-truth', help='evaluation polygons (default: --truth)')
    paths.add_argument('--model', help='model parameters file')
    paths.add_argument('--scores', help='external score file (tile_id,probability)')
    paths.add_argument('--predicted', help='predicted map to evaluate')
    params = stage.add_argument_group('parameters')
    params.add_argument('--tile-size', type=int)
    params.add_argument('--stride', type=int)
    params.add_argument('--undersample-ratio', type=float)
    params.add_argument('--val-fraction', type=float)
    params.add_argument('--learning-rate', type=float)
    params.add_argument('--epochs', type=int)
    params.add_argument('--batch-size', type=int)
    params.add_argument('--l2', type=float)
    params.add_argument('--p-min', type=float)
    params.add_argument('--coverage-min', type=float)
    params.add_argument('--block-filter', dest='block_filter', action='store_const', const=True)
    params.add_argument('--no-block-filter', dest='block_filter', action='store_const', const=False)
    params.add_argument('--eval-resolution', type=int)
    params.add_argument('--export-min-probability', type=float)

    parser = SettlementArgumentParser(prog='settlement-map',
                                      description='Informal settlement mapping from tiled imagery')
    sub = parser.add_subparsers(dest='command', required=True)
    sub.add_parser('build-dataset', parents=[common, stage], help='build the labeled tile dataset')
    sub.add_parser('train', parents=[common, stage], help='train the baseline classifier')
    predict = sub.add_parser('predict', parents=[common, stage], help='score every tile of a raster')
    predict.add_argument('--manifest-only', action='store_true',
                         help='only write the tile manifest (tile ids for external scorers)')
    sub.add_parser('postprocess', parents=[common, stage], help='filter and dissolve scored squares')
    sub.add_parser('evaluate', parents=[common, stage], help='pixel-level agreement with truth polygons')
    sub.add_parser('run-all', parents=[common, stage], help='build, train, predict, postprocess, evaluate')
    sweep = sub.add_parser('sweep-undersample', parents=[common, stage],
                           help='compare undersampling ratios on the validation split')
    sweep.add_argument('--ratios', type=_ratios, default=[4.0, 8.0], help='comma-separated, e.g. 4,8')

    synth = sub.add_parser('synth', parents=[common], help='generate a synthetic scene')
    synth.add_argument('--width', type=int, default=1024)
    synth.add_argument('--height', type=int, default=1024)
    synth.add_argument('--patches', type=int, default=6)
    synth.add_argument('--contrast', type=float, default=1.0)
    synth.add_argument('--pixel-size', type=float, default=0.5)
    return parser


def load_config(args: argparse.Namespace) -> PipelineConfig:
    """Flag > config file > default"""
    config = PipelineConfig.from_file(args.config) if args.config else PipelineConfig.from_environment()
    overrides = {name: getattr(args, name, None) for name in OVERRIDE_FLAGS}
    return config.with_overrides(**overrides).validate()


def _single_line(text: str) -> str:
    return " ".join(str(text).split())


def run(args: argparse.Namespace) -> None:
    if args.command == 'synth':
        spec = SynthSpec(width=args.width, height=args.height, patches=args.patches, contrast=args.contrast,
                         seed=args.seed if args.seed is not None else 42, pixel_size=args.pixel_size)
        paths = cmd_synth(spec, args.out or 'synthetic')
        for name, path in paths.items():
            print(f"{name}: {path}")
        return

    config = load_config(args)
    configure_threads(config.threads)

    if args.command == 'build-dataset':
        outcome = cmd_build_dataset(config)
        print(outcome.class_counts.to_string(index=False))
        print(f"manifest: {outcome.manifest_path}")
    elif args.command == 'train':
        outcome = cmd_train(config)
        print(f"train loss {outcome.train['loss']:.6f} accuracy {outcome.train['accuracy']:.4f}")
        if outcome.val['tiles']:
            print(f"val   loss {outcome.val['loss']:.6f} accuracy {outcome.val['accuracy']:.4f}")
        print(f"model: {outcome.model_path}")
    elif args.command == 'predict':
        outcome = cmd_predict(config, manifest_only=args.manifest_only)
        if args.manifest_only:
            print(f"manifest: {outcome.manifest_path} ({outcome.tiles} tiles)")
            return
        print(f"scored {outcome.tiles} tiles, exported {outcome.exported_squares} squares")
        print(f"scores: {outcome.scores_path}")
        print(f"squares: {outcome.squares_path}")
    elif args.command == 'postprocess':
        outcome = cmd_postprocess(config)
        print(f"{outcome.features} features: {outcome.path}")
    elif args.command == 'evaluate':
        outcome = cmd_evaluate(config)
        print(outcome.report.render())
        print(f"report: {outcome.report_path}")
    elif args.command == 'run-all':
        summary = cmd_run_all(config)
        print(summary.evaluate.report.render())
        print(f"summary: {Path(config.output_dir) / 'run_summary.md'}")
    elif args.command == 'sweep-undersample':
        table = cmd_sweep_undersample(config, args.ratios)
        print(table.to_string(index=False))
    else:
        raise ConfigError(f"Unknown command: {args.command}")


def main(argv: Optional[List[str]] = None) -> int:
    """Exit status: 0 success, 2 pipeline error, 1 unexpected failure"""
    args = build_parser().parse_args(argv)
    setup_logging(args.quiet, args.log_file)
    logger = logging.getLogger(__name__)
    try:
        run(args)
    except SettlementMapError as e:
        print(f"error {e.code}: {_single_line(e)}", file=sys.stderr)
        return 2
    except Exception as e:
        logger.exception("Unexpected failure")
        print(f"error INTERNAL: {_single_line(e)}", file=sys.stderr)
        return 1
    return 0
