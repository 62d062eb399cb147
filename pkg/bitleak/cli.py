"""Command line interface

Usage::

    bitleak run --config experiment.cfg --out results/
    bitleak attack --config experiment.cfg --strategy msb --rounds 50,200
"""
import argparse
import logging
import sys

from .config import ConfigValidationError, normalize, validate_config
from .experiment import Experiment, StageError
from ._version import version as __version__


#: subcommands and their help texts
COMMANDS = {"template": "generate the vulnerable-cell template",
            "victim": "train and quantize the victim model",
            "attack": "run the leakage attack (per strategy)",
            "profile": "compute bit profiles for every round budget",
            "train": "train the substitute arms",
            "eval": "evaluate all arms and write the report",
            "run": "run all stages",
            }


def _int_list(text):
    try:
        return [int(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(
            "expected a comma-separated list of integers, got '{}'".format(
                text))


def get_parser():
    parser = argparse.ArgumentParser(
        prog="bitleak",
        description="Simulated rowhammer leakage of quantized weights and "
                    "substitute training with leaked bits")
    parser.add_argument("--version", action="version",
                        version="%(prog)s {}".format(__version__))
    sub = parser.add_subparsers(dest="command", metavar="command")
    sub.required = True
    for name in COMMANDS:
        cmd = sub.add_parser(name, help=COMMANDS[name])
        cmd.add_argument("--config", required=True,
                         help="path to the experiment configuration")
        cmd.add_argument("--seed", type=int, default=None,
                         help="master seed (overrides the config)")
        cmd.add_argument("--out", default=None,
                         help="output directory (overrides the config)")
        cmd.add_argument("--rounds", type=_int_list, default=None,
                         help="comma-separated round budgets")
        cmd.add_argument("--strategy", choices=["allbits", "msb"],
                         default=None, help="attack strategy")
        cmd.add_argument("--verbose", "-v", action="count", default=0,
                         help="more log output (repeat for debug)")
    return parser


def load_config(args):
    """Read the configuration and apply command line overrides"""
    cfg = validate_config(args.config)
    updates = {}
    if args.seed is not None:
        updates["seed"] = args.seed
    if args.out is not None:
        updates["output directory"] = args.out
    if args.rounds is not None:
        updates["rounds"] = args.rounds
    if args.strategy is not None:
        updates["strategy"] = [args.strategy]
    if updates:
        values = dict(cfg.data)
        values.update(updates)
        cfg = normalize(values)
    return cfg


def main(argv=None):
    parser = get_parser()
    args = parser.parse_args(argv)
    level = [logging.WARNING, logging.INFO, logging.DEBUG][
        min(args.verbose, 2)]
    logging.basicConfig(level=level,
                        format="%(asctime)s %(name)s %(levelname)s "
                               "%(message)s")
    try:
        cfg = load_config(args)
    except ConfigValidationError as e:
        print("bitleak: stage 'config' failed:", file=sys.stderr)
        for msg in e.errors:
            print("  " + msg, file=sys.stderr)
        return 1
    except OSError as e:
        print("bitleak: stage 'config' failed: {}".format(e),
              file=sys.stderr)
        return 1
    try:
        exp = Experiment(cfg)
    except OSError as e:
        print("bitleak: cannot use output directory {}: {}".format(
            cfg["output directory"], e), file=sys.stderr)
        return 1
    try:
        if args.command == "run":
            report = exp.run()
            print(report.summary_text(), end="")
        elif args.command == "attack":
            if not exp.path("victim").exists():
                exp.run_victim()
            exp.run_attack()
        elif args.command == "eval":
            report = exp.run_eval()
            print(report.summary_text(), end="")
        else:
            getattr(exp, "run_" + args.command)()
    except StageError as e:
        print("bitleak: {}".format(e), file=sys.stderr)
        return 1
    return 0
