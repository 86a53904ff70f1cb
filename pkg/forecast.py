"""
Command line driver: correlation analysis, training, prediction, rescoring and
model comparison on Yahoo Finance daily price files.

    python forecast.py train --config config/group_b.yml --target XOM
    python forecast.py predict --config config/group_b.yml --autoregressive

Exit codes: 0 ok, 2 configuration error, 3 data or I/O error, 4 training failure.
"""
import argparse
import logging
import os
import sys
import time

from core.errors import (CheckpointError, ConfigError, IngestionError, NumericError, TrainingError,
                         UsageError)
from core.model import VARIANTS
from core.runconfig import RunConfig
from modules.setup_logger import setup_logging
from tt2vfin import tt2vfinRun
from utils.utils import LOGLEVELS, loglevel_from_flag

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_TRAINING = 4


def _ticker_path(text: str) -> tuple:
    ticker, sep, path = text.partition('=')
    if not sep or not ticker or not path:
        raise argparse.ArgumentTypeError(f"expected TICKER=PATH, got {text!r}")
    return ticker, path


def resolve_config(args) -> RunConfig:
    """Config file (or defaults) with the command line flags applied on top"""
    if args.config is not None:
        try:
            config = RunConfig.load(args.config)
        except FileNotFoundError:
            raise ConfigError(f"Configuration file {args.config} not found")
    else:
        config = RunConfig()
    data = dict(config.data)
    data.update(dict(args.data or []))
    return config.with_overrides(
        data=data,
        seed=args.seed,
        out=args.out,
        targets=args.target,
        variant=args.variant,
        single_feature=True if args.single_feature else None,
        name=args.name,
        plotsave=True if args.plotsave else None,
    )


def main(args) -> int:
    try:
        config = resolve_config(args)
        time_at_start = time.strftime("%Y%m%d-%H%M%S")
        logname = os.path.join(config.out, 'runlogs', f"tt2vfin_{args.command}_{time_at_start}.log")
        setup_logging(loglevel_from_flag(args.loglevel), logname)

        run = tt2vfinRun(config, show_progress=not args.quiet)
        if args.command == 'correlate':
            run.correlate()
        elif args.command == 'train':
            result = run.train()
            print(result.metrics_frame().to_string(index=False))
        elif args.command == 'predict':
            run.predict(args.checkpoint, args.autoregressive)
        elif args.command == 'metrics':
            print(run.metrics(args.predictions).to_string(index=False))
        elif args.command == 'compare':
            print(run.compare(args.seeds, args.variants).to_string(index=False))
    except (ConfigError, UsageError) as exc:
        logger.error("Configuration error: %s", exc)
        return EXIT_CONFIG
    except TrainingError as exc:
        logger.error("Training failed: %s", exc)
        return EXIT_TRAINING
    except (IngestionError, CheckpointError, NumericError, OSError) as exc:
        logger.error("Data error: %s", exc)
        return EXIT_DATA
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    epilog = RunConfig.describe()
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument('--config', action='store', default=None, type=str,
                    help='YAML run configuration. Default: built-in defaults')
    common.add_argument('--data', action='append', default=None, type=_ticker_path, metavar='TICKER=PATH',
                    help='Add or replace a ticker data file, can be repeated')
    common.add_argument('--seed', action='store', default=None, type=int,
                    help='Seed of initialization, shuffling and dropout. Default: value in config (0)')
    common.add_argument('--out', action='store', default=None, type=str,
                    help='Output directory for all artifacts. Default: value in config (runs)')
    common.add_argument('--target', action='append', default=None, type=str, metavar='TICKER',
                    help='Target ticker, can be repeated. Default: first group member')
    common.add_argument('--variant', action='store', default=None, choices=list(VARIANTS),
                    help='Model variant. Default: value in config (base)')
    common.add_argument('--single-feature', action='store_true', default=False,
                    help='Train on the target ticker alone instead of the GMNN aggregate')
    common.add_argument('-n', '--name', action='store', default=None, type=str,
                    help='Prefix of the output files. Default: value in config (run)')
    common.add_argument('-p', '--plotsave', action='store_true', default=False,
                    help='Also save PDF plots of predictions and correlation curves')
    common.add_argument('-q', '--quiet', action='store_true', default=False,
                    help='No progress bars')
    common.add_argument('-L', '--loglevel', type=str, choices=list(LOGLEVELS), action='store', default='I',
                    help='Set loglevel used. Options: D - debug, I - info, E - error, W - warning, C - critical. DEFAULT: I')

    parser = argparse.ArgumentParser(description='TT2VFin stock forecasting', epilog=epilog,
                                     formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest='command', required=True)
    kw = dict(parents=[common], epilog=epilog, formatter_class=argparse.RawDescriptionHelpFormatter)

    sub.add_parser('correlate', help='Lag correlation curves against the first target', **kw)
    sub.add_parser('train', help='Train, score the test range and save a checkpoint', **kw)

    predict = sub.add_parser('predict', help='Predict the test range from a checkpoint', **kw)
    predict.add_argument('--checkpoint', action='store', default=None, type=str,
                    help='Checkpoint file. Default: <out>/<name>_checkpoint.bin')
    predict.add_argument('--autoregressive', action='store_true', default=False,
                    help='Invert with earlier predicted values instead of the true history')

    metrics = sub.add_parser('metrics', help='Re-score an existing prediction CSV', **kw)
    metrics.add_argument('predictions', type=str, help='Prediction CSV written by train or predict')

    compare = sub.add_parser('compare', help='Single vs multi feature and variant comparison', **kw)
    compare.add_argument('--seeds', action='store', nargs='+', type=int, default=None,
                    help='Seeds to take the median over. Default: --seed')
    compare.add_argument('--variants', action='store', nargs='+', choices=list(VARIANTS), default=None,
                    help='Variants to compare. Default: all')
    return parser


def run(argv=None) -> int:
    args = build_parser().parse_args(argv)
    setup_logging(loglevel_from_flag(args.loglevel))
    return main(args)


if __name__ == "__main__":
    sys.exit(run())
