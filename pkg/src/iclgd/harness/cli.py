"""``iclgd`` command line: gen | train | align | gridsearch | extract | compare |
transience | plot.

Exit status is 0 on success, 2 for invalid input (config, files, task
parameters) and 3 for numerical failures (divergence, non-finite values).
"""

import argparse
import json
import sys

from ..analysis import AnalysisError
from ..numerics import NumericalError
from ..training import TrainingDiverged
from . import commands
from .config import FULL_SCALE, FULL_SCALE_SOFTMAX_LR, load_config, parse_config
from .io import RunDirError

EXIT_OK, EXIT_INVALID, EXIT_NUMERICAL = 0, 2, 3


def _seed(text):
    v = int(text)
    if not 0 <= v < 2 ** 64:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return v


def _global_flags(default):
    # subcommands repeat the global flags with suppressed defaults so a flag
    # given before the subcommand name is not reset
    common = argparse.ArgumentParser(add_help=False, argument_default=default)
    common.add_argument("--config", metavar="PATH", help="JSON experiment config")
    common.add_argument("--seed", type=_seed, metavar="U64", help="overrides the config seed")
    common.add_argument("--out", metavar="DIR", help="output directory")
    return common


def build_parser():
    p = argparse.ArgumentParser(prog="iclgd", parents=[_global_flags(None)],
                                description=__doc__.split("\n")[0])
    common = _global_flags(argparse.SUPPRESS)
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", parents=[common], help="write a dataset JSON")
    g.add_argument("--count", type=int, help="number of contexts")

    t = sub.add_parser("train", parents=[common], help="train an attention model")
    t.add_argument("--init", metavar="CHECKPOINT", help="warm start from a checkpoint")
    t.add_argument("--full-scale", action="store_true",
                   help="use the full batch size / iteration budget instead of desk scale")

    for name, text in (("align", "alignment of checkpoints with a fitted baseline"),
                       ("extract", "effective constants of softmax checkpoints")):
        a = sub.add_parser(name, parents=[common], help=text)
        a.add_argument("checkpoint", help="checkpoint JSON or run directory")

    sub.add_parser("gridsearch", parents=[common], help="baseline grid search / adaptive-rate studies")
    sub.add_parser("compare", parents=[common], help="model comparison over context lengths")
    sub.add_parser("transience", parents=[common], help="attention+MLP ICL vs ICL+IWL run")

    pl = sub.add_parser("plot", parents=[common], help="render CSVs as SVG")
    pl.add_argument("csv", nargs="+")
    pl.add_argument("--kind", choices=("auto", "line", "scatter"), default="auto")
    return p


def _full_scale(cfg):
    raw = dict(cfg.raw)
    train = dict(FULL_SCALE[cfg.model.tag if cfg.model.tag in FULL_SCALE else "linear"])
    if cfg.model.tag == "softmax":
        train["learning_rate"] = FULL_SCALE_SOFTMAX_LR.get(cfg.task.d, cfg.train.learning_rate)
    raw["train"] = {**raw.get("train", {}), **train}
    return parse_config(raw)


def run(argv=None):
    args = build_parser().parse_args(argv)
    if args.command == "plot":
        return commands.cmd_plot(args.csv, args.out or ".", args.kind)
    cfg = load_config(args.config, args.seed)
    if args.out is None:
        raise RunDirError("--out DIR is required")
    if args.command == "gen":
        return commands.cmd_gen(cfg, args.out, args.count)
    if args.command == "train":
        if args.full_scale:
            cfg = _full_scale(cfg)
        return commands.cmd_train(cfg, args.out, args.init)
    if args.command == "align":
        return commands.cmd_align(cfg, args.out, args.checkpoint)
    if args.command == "extract":
        return commands.cmd_extract(cfg, args.out, args.checkpoint)
    if args.command == "gridsearch":
        return commands.cmd_gridsearch(cfg, args.out)
    if args.command == "compare":
        return commands.cmd_compare(cfg, args.out)
    return commands.cmd_transience(cfg, args.out)


def main(argv=None):
    try:
        summary = run(argv)
    except (TrainingDiverged, NumericalError, AnalysisError, FloatingPointError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (ValueError, OSError, KeyError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_INVALID
    print(json.dumps(summary, sort_keys=True, default=float))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
