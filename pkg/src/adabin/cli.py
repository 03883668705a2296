# -*- coding: utf-8 -*-
# vim: set ft=python ts=4 sw=4 expandtab:

import argparse
import sys
from typing import Any, Dict, List, Optional

from .config import DATA_DIR_ENV, DEFAULT_CONFIG_PATH, RunConfig, config, load_config
from .experiment import bench, evaluate, export, inspect, train
from .interface import AlphaGradMode, Profile
from .util import setup_logging


def _write(path: Optional[str], text: str) -> None:
    if path:
        with open(path, "w", encoding="utf-8") as handle:
            handle.write(text)


def _train(args: argparse.Namespace, settings: RunConfig) -> None:
    result = train(settings, resume=args.resume)
    print("run directory: %s" % result.run_dir)
    print("final accuracy: %.4f (best %.4f) after %d epochs" % (result.final_accuracy, result.best_accuracy, result.epochs))


def _eval(args: argparse.Namespace, settings: RunConfig) -> None:
    report = evaluate(args.model, settings, dump_logits=args.dump_logits)
    print("top-1 accuracy: %.4f over %d examples" % (report.top1, report.examples))
    for index, accuracy in enumerate(report.per_class):
        print("  class %d: %.4f (%d examples)" % (index, accuracy, report.class_counts[index]))
    _write(args.json, report.to_json())


def _bench(args: argparse.Namespace, settings: RunConfig) -> None:
    report, text = bench(settings, args.checkpoint)
    print(text)
    _write(args.json, report.to_json())


def _export(args: argparse.Namespace, settings: RunConfig) -> None:
    report = export(args.checkpoint, args.bundle, settings, images=args.parity_images)
    print("bundle: %s (%d bytes, %.3fx the cost model prediction)" % (report.bundle_path, report.size_bytes, report.size_ratio))
    if report.images:
        print("parity: %.4f agreement over %d images" % (report.agreement, report.images))
    _write(args.json, report.to_json())
    if not report.parity:
        sys.exit(1)


def _inspect(args: argparse.Namespace, settings: RunConfig) -> None:
    report = inspect(settings, args.checkpoint)
    print(report.to_text())
    _write(args.json, report.to_json())


_COMMANDS = {"train": _train, "eval": _eval, "bench": _bench, "export": _export, "inspect": _inspect}


def _overrides(args: argparse.Namespace) -> Dict[str, Any]:
    tokens = [override.split(":", 1) for override in args.override or []]
    overrides = {token[0]: token[1] for token in tokens}
    if args.logfile:
        overrides["logfile_path"] = args.logfile  # we want to expose this a little more explicitly in the argument list
    for key, value in (
        ("data_dir", args.data_dir),
        ("seed", args.seed),
        ("out_dir", args.out),
        ("alpha_grad", args.alpha_grad),
        ("profile", args.profile),
    ):
        if value is not None:
            overrides[key] = value
    return overrides


def run_adabin(argv: List[str]) -> None:
    """Train, evaluate, cost, export or inspect an AdaBin binary network."""

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--quiet", action="store_true", help="decrease log verbosity from INFO to ERROR")
    common.add_argument("--verbose", action="store_true", help="increase log verbosity from INFO to DEBUG")
    common.add_argument("--debug", action="store_true", help="like --verbose but also log Python warnings")
    common.add_argument("--config", type=str, help="path to configuration on disk")
    common.add_argument("--logfile", type=str, help="path to logfile on disk (default is stdout)")
    common.add_argument("--override", type=str, action="append", help='override a config parameter as "param:value"')
    common.add_argument("--data-dir", type=str, help="dataset directory (default is $%s, then ./data)" % DATA_DIR_ENV)
    common.add_argument("--seed", type=int, help="seed for initialization, shuffling and augmentation")
    common.add_argument("--out", type=str, help="directory under which run directories are created")
    common.add_argument(
        "--alpha-grad", type=str, choices=[mode.value for mode in AlphaGradMode], help="activation distance gradient rule"
    )
    common.add_argument("--profile", type=str, choices=[profile.value for profile in Profile], help="default profile for the run")

    parser = argparse.ArgumentParser(
        description="Train, evaluate, cost, export and inspect binary neural networks with adaptive binary sets.",
        epilog="By default, logs are written to stdout. If you prefer, you can "
        "specify the path to a logfile, and logs will be written there instead.  "
        'The default configuration file is "%s".  '
        "If the default configuration file is not found, default values will be set.  "
        "If you override the default config file, it must exist.  "
        'You may override any individual config parameter with "--override param:value".' % DEFAULT_CONFIG_PATH,
    )
    commands = parser.add_subparsers(dest="command", metavar="command")
    commands.required = True

    command = commands.add_parser("train", parents=[common], help="train a model and write checkpoints and metrics")
    command.add_argument("--resume", type=str, help="continue training from a checkpoint")

    command = commands.add_parser("eval", parents=[common], help="report test accuracy of a checkpoint or bundle")
    command.add_argument("model", type=str, help="checkpoint or inference bundle to evaluate")
    command.add_argument("--dump-logits", type=str, help="write the test logits to this .npy file")
    command.add_argument("--json", type=str, help="also write the report as JSON to this path")

    command = commands.add_parser("bench", parents=[common], help="report the inference cost of a model")
    command.add_argument("checkpoint", type=str, nargs="?", help="checkpoint to cost (default is the configured model)")
    command.add_argument("--json", type=str, help="also write the report as JSON to this path")

    command = commands.add_parser("export", parents=[common], help="pack a checkpoint into an inference bundle")
    command.add_argument("checkpoint", type=str, help="checkpoint to export")
    command.add_argument("bundle", type=str, help="path of the bundle to write")
    command.add_argument("--parity-images", type=int, default=1000, help="test images for the parity check, 0 to skip")
    command.add_argument("--json", type=str, help="also write the report as JSON to this path")

    command = commands.add_parser("inspect", parents=[common], help="report learned quantizer parameters")
    command.add_argument("checkpoint", type=str, nargs="?", help="checkpoint to inspect (default is a fresh model)")
    command.add_argument("--json", type=str, help="also write the report as JSON to this path")

    args = parser.parse_args(args=argv)

    load_config(args.config, _overrides(args))
    setup_logging(args.quiet, args.verbose, args.debug, config().logfile_path)

    _COMMANDS[args.command](args, config())


def _example(argv: List[str]) -> List[str]:
    """Example method."""
    return argv[:]


def _lookup_method(method: str) -> Any:
    """Look up the method in this module with the passed-in name."""
    module = sys.modules[__name__]
    return getattr(module, "%s" % method)


def cli(script: str) -> Any:
    """
    Run the main routine for the named script.

    Args:
        script(str): Name of the script to execute
    """
    return _lookup_method(script)(argv=sys.argv[1:])
