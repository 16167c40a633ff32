"""Command-line entry point: ``python -m advcausal <verb> --config PATH ...``.

Exit codes: 0 success, 2 usage or config error, 3 contract error, 4 I/O or
file-format error.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

from . import pipeline
from .config import ExperimentConfig, load_config
from .errors import ConfigError, ContractError, FormatError

EXIT_OK, EXIT_CONFIG, EXIT_CONTRACT, EXIT_IO = 0, 2, 3, 4

log = logging.getLogger("advcausal")


def resolve_out(config: ExperimentConfig, flag: str | None) -> Path:
    """ADVCAUSAL_OUT beats --out, which beats the config's [report] out_dir."""
    env = os.environ.get("ADVCAUSAL_OUT")
    return Path(env or flag or config.report.out_dir)


def cmd_gen_data(config, out, args):
    return [pipeline.gen_data(config, out)]


def cmd_train(config, out, args):
    return [pipeline.train(config, out, args.defense, args.checkpoint)]


def cmd_attack(config, out, args):
    return [pipeline.attack(config, out, args.checkpoint, args.attack)]


def cmd_estimate_theta(config, out, args):
    return [pipeline.estimate(config, out, args.checkpoint)]


def cmd_report(config, out, args):
    ckpts = [c for c in args.checkpoints.split(",") if c]
    return pipeline.report(config, out, ckpts, args.threads)


def cmd_ablate(config, out, args):
    return pipeline.ablate(config, out, args.checkpoint, args.threads)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", required=True, help="experiment config file")
    common.add_argument("--seed", type=int, default=None, help="override the global seed")
    common.add_argument("--threads", type=int, default=1, help="evaluation worker threads")
    common.add_argument("--out", default=None, help="output directory (ADVCAUSAL_OUT overrides)")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="advcausal", description="Adversarial double machine learning lab.")
    sub = parser.add_subparsers(dest="verb", required=True)

    p = sub.add_parser("gen-data", parents=[common], help="generate or import the dataset")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", parents=[common], help="train AT/TRADES, or fine-tune with ADML")
    p.add_argument("--defense", choices=["at", "trades", "adml"], default="at")
    p.add_argument("--checkpoint", default=None, help="base checkpoint for adml (default checkpoints/at.json)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("attack", parents=[common], help="attack a checkpoint on the test split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--attack", required=True, help="name of an [attack.<name>] section")
    p.set_defaults(func=cmd_attack)

    p = sub.add_parser("estimate-theta", parents=[common], help="per-class causal parameter magnitudes")
    p.add_argument("--checkpoint", required=True)
    p.set_defaults(func=cmd_estimate_theta)

    p = sub.add_parser("report", parents=[common], help="robustness report (+ rho with two checkpoints)")
    p.add_argument("--checkpoints", required=True, help="A or A,B (B is compared against A)")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("ablate", parents=[common], help="split/crossfit x treatment-set grid")
    p.add_argument("--checkpoint", default=None, help="base checkpoint (default checkpoints/at.json)")
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.threads < 1:
            raise ConfigError("--threads must be >= 1")
        config = load_config(args.config, args.seed)
        out = resolve_out(config, args.out)
        written = args.func(config, out, args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except FormatError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ContractError as exc:
        print(f"contract error: {exc}", file=sys.stderr)
        return EXIT_CONTRACT
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    for path in written:
        print(path)
    return EXIT_OK
