#!/usr/bin/env python3
"""
jotrecon command line
Image reconstruction from binary (one-bit, multi-threshold) sensor exposures
"""

import argparse
import logging
import sys
from dataclasses import fields
from typing import List, Optional

from config_manager import ConfigManager, ExperimentConfig, default_threads, parse_overrides
from errors import EXIT_CONFIG_ERROR, EXIT_OK, JotReconError, exit_code_for
import pipeline

logger = logging.getLogger(__name__)

LOG_FORMAT = '%(asctime)s - %(name)s - %(levelname)s - %(message)s'

EPILOG = """
Configuration precedence (lowest first):
  defaults < JOTRECON_THREADS < --config FILE < --preset NAME < --set key=value < explicit flags

CSV outputs:
  reconstruct      iteration, objective, best_objective, step_size, backtracks, step_reset, wall_time
  train            epoch, tensor, train_loss, val_loss, learning_rate
  sweep-exposures  K, method, psnr, seeds
  sweep-depth      budget, method, psnr, wall_time

Exit codes: 0 ok, 2 configuration / input error, 3 numerical failure, 130 interrupted

Examples:
  jotrecon simulate --scene synthetic:1 --frames 4 --output-dir run1 --write-config run1.cfg
  jotrecon simulate --config run1.cfg --exposure-scales 0.01,0.05,0.2 --output-dir hdr1
  jotrecon reconstruct run1 --method fista --max-iters 200 --output-dir run1
  jotrecon reconstruct run1 --method ml --xlsx
  jotrecon make-dataset data --patches 2000
  jotrecon info data
  jotrecon train data --depth 4 --epochs 20 --train-order W,A,Q,theta,D --decay 0.5 --output-dir net
  jotrecon reconstruct run1 --method mlnet --params net/params
  jotrecon sweep-exposures --counts 1 4 16 64 --methods ml fista --seeds 5
  jotrecon sweep-depth --budgets 1 2 4 8 --params net/params
  jotrecon psnr run1/recon_fista.btsr run1/truth.btsr
  jotrecon configs save hdr --pattern hdr --range-max 1e5 --c 1e5 --mu 50 --tile 13 --log-psnr true
"""


def _experiment_parent() -> argparse.ArgumentParser:
    """Shared options: config sources, one flag per ExperimentConfig field, logging"""
    parent = argparse.ArgumentParser(add_help=False)
    sources = parent.add_argument_group('configuration')
    sources.add_argument('--config', type=str, help='key = value configuration file')
    sources.add_argument('--preset', '-p', type=str, help='Saved configuration name')
    sources.add_argument('--set', dest='overrides', action='append', metavar='KEY=VALUE',
                         help='Override one configuration key (repeatable)')

    experiment = parent.add_argument_group('experiment settings')
    defaults = ExperimentConfig()
    for f in fields(ExperimentConfig):
        experiment.add_argument(f"--{f.name.replace('_', '-')}", dest=f"field_{f.name}", type=str,
                                metavar=f.name.upper(), help=f"(default: {getattr(defaults, f.name)!r})")

    output = parent.add_argument_group('output')
    output.add_argument('--verbose', '-v', action='store_true', help='Debug logging')
    output.add_argument('--quiet', '-q', action='store_true', help='Warnings and errors only')
    output.add_argument('--write-config', metavar='FILE', help='Save the resolved configuration as key = value lines')
    return parent


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog='jotrecon',
        description='Reconstruct images from stacks of binary multi-threshold sensor frames',
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog=EPILOG
    )
    parent = _experiment_parent()
    commands = parser.add_subparsers(dest='command', metavar='COMMAND')
    commands.required = True

    def add(name: str, help_text: str) -> argparse.ArgumentParser:
        return commands.add_parser(name, parents=[parent], help=help_text, description=help_text,
                                   formatter_class=argparse.RawDescriptionHelpFormatter)

    add('simulate', 'Simulate a binary frame stack from a scene')

    sub = add('make-pattern', 'Write a threshold pattern file')
    sub.add_argument('output', help='Pattern file to write')
    sub.add_argument('--kind', choices=['uniform', 'hdr'], default='uniform', help='Pattern design')

    sub = add('make-dataset', 'Generate a training dataset from synthetic scenes')
    sub.add_argument('output', help='Dataset directory to write')
    sub.add_argument('--count', type=int, help='Number of patches (default: the "patches" setting)')
    sub.add_argument('--first-scene-seed', type=int, default=1000, help='Seed of the first scene (default: 1000)')

    sub = add('info', 'Show the manifest of a training dataset')
    sub.add_argument('dataset', help='Dataset directory')

    sub = add('train', 'Train an MLNet on a dataset')
    sub.add_argument('dataset', help='Dataset directory')
    sub.add_argument('--xlsx', action='store_true', help='Also write the history as a workbook')

    sub = add('reconstruct', 'Reconstruct an image from a simulated stack')
    sub.add_argument('stack', help='Stack directory written by simulate')
    sub.add_argument('--budget', type=int, help='Iterations (layers for mlnet) instead of max-iters / depth')
    sub.add_argument('--xlsx', action='store_true', help='Also write the solver report as a workbook')

    sub = add('psnr', 'PSNR of an estimate against a reference image')
    sub.add_argument('estimate', help='Estimate (.btsr or .pgm)')
    sub.add_argument('reference', help='Reference (.btsr or .pgm)')

    sub = add('sweep-exposures', 'PSNR against the number of exposures K')
    sub.add_argument('--counts', type=int, nargs='+', default=[1, 4, 16, 64], help='Exposure counts')
    sub.add_argument('--methods', nargs='+', help='Methods (default: ml and the configured method)')
    sub.add_argument('--seeds', type=int, default=1, help='Acquisitions averaged per point (default: 1)')
    sub.add_argument('--xlsx', action='store_true', help='Also write a workbook')

    sub = add('sweep-depth', 'PSNR against iterations / layers')
    sub.add_argument('--budgets', type=int, nargs='+', default=[1, 2, 4, 8, 16, 25], help='Budgets')
    sub.add_argument('--xlsx', action='store_true', help='Also write a workbook')

    sub = add('configs', 'Manage saved configurations')
    sub.add_argument('action', choices=['list', 'save', 'show', 'delete'])
    sub.add_argument('name', nargs='?', help='Configuration name')
    sub.add_argument('--yes', '-y', action='store_true', help='Do not ask for confirmation')
    return parser


def setup_logging(verbose: bool = False, quiet: bool = False):
    level = logging.DEBUG if verbose else logging.WARNING if quiet else logging.INFO
    logging.basicConfig(format=LOG_FORMAT, level=level, force=True)


def resolve_config(args: argparse.Namespace, manager: Optional[ConfigManager] = None) -> ExperimentConfig:
    """Apply every configuration source in precedence order"""
    if args.config:
        cfg = ExperimentConfig.from_file(args.config, threads=default_threads())
    else:
        cfg = ExperimentConfig(threads=default_threads())
    if args.preset:
        cfg.apply_overrides((manager or ConfigManager()).preset_values(args.preset))
    cfg.apply_overrides(parse_overrides(args.overrides))
    cfg.apply_overrides(_explicit_values(args))
    return cfg


def _explicit_values(args: argparse.Namespace) -> dict:
    return {f.name: getattr(args, f"field_{f.name}") for f in fields(ExperimentConfig)
            if getattr(args, f"field_{f.name}", None) is not None}


def run_configs(args: argparse.Namespace, manager: ConfigManager) -> int:
    if args.action == 'list':
        manager.list_saved_configs()
        return EXIT_OK
    if not args.name:
        print(f"❌ 'configs {args.action}' needs a configuration name")
        return EXIT_CONFIG_ERROR
    if args.action == 'show':
        manager.show_config(args.name)
        return EXIT_OK
    if args.action == 'delete':
        return EXIT_OK if manager.delete_config_interactive(args.name, args.yes) else EXIT_CONFIG_ERROR

    cfg = resolve_config(args, manager)
    if manager.load_config(args.name) is not None and not args.yes:
        if not manager.confirm(f"Configuration '{args.name}' exists. Overwrite?"):
            print("❌ Configuration not saved")
            return EXIT_CONFIG_ERROR
    manager.save_config(args.name, cfg.to_dict())
    return EXIT_OK


def dispatch(args: argparse.Namespace) -> int:
    manager = ConfigManager()
    if args.command == 'configs':
        return run_configs(args, manager)

    cfg = resolve_config(args, manager)
    logger.debug(f"Resolved configuration: {cfg.to_dict()}")
    if args.write_config:
        cfg.save(args.write_config)

    if args.command == 'simulate':
        pipeline.cmd_simulate(cfg)
    elif args.command == 'make-pattern':
        pipeline.cmd_make_pattern(cfg, args.kind, args.output)
    elif args.command == 'make-dataset':
        pipeline.cmd_make_dataset(cfg, args.output, args.count, args.first_scene_seed)
    elif args.command == 'info':
        pipeline.cmd_info(args.dataset)
    elif args.command == 'train':
        pipeline.cmd_train(cfg, args.dataset, xlsx=args.xlsx)
    elif args.command == 'reconstruct':
        pipeline.cmd_reconstruct(cfg, args.stack, budget=args.budget, xlsx=args.xlsx)
    elif args.command == 'psnr':
        pipeline.cmd_psnr(cfg, args.estimate, args.reference)
    elif args.command == 'sweep-exposures':
        pipeline.cmd_sweep_exposures(cfg, args.counts, args.methods, args.seeds, xlsx=args.xlsx)
    elif args.command == 'sweep-depth':
        pipeline.cmd_sweep_depth(cfg, args.budgets, xlsx=args.xlsx)
    return EXIT_OK


def run(argv: Optional[List[str]] = None) -> int:
    """Parse, execute and map the outcome to an exit code"""
    args = build_parser().parse_args(argv)
    setup_logging(args.verbose, args.quiet)
    try:
        return dispatch(args)
    except KeyboardInterrupt as e:
        print("\n❌ Interrupted by user")
        return exit_code_for(e)
    except JotReconError as e:
        print(f"❌ {type(e).__name__}: {e}")
        return exit_code_for(e)
    except Exception as e:
        logger.exception("Unexpected error")
        print(f"❌ Unexpected error: {e}")
        return exit_code_for(e)


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
