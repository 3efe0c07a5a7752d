"""Command-line entry point: ``ddp-workbench <subcommand> [--config FILE] [--key value ...]``."""

from __future__ import annotations

import argparse
import logging
import sys

from .harness import (
    CONFIG_FIELDS, ConfigError, StageError, load_config, parse_value, run_alignment,
    run_experiment, run_interpret, run_synth, run_train,
)

COMMANDS = {
    "train": (run_train, "train a model and save a checkpoint"),
    "interpret": (run_interpret, "write attributions for the evaluation sample"),
    "evaluate": (lambda cfg: run_experiment(cfg, cross=False), "score each method under its own metric"),
    "cross-eval": (run_experiment, "score every method under every metric"),
    "align": (run_alignment, "retrain towards a rationale and report similarity"),
    "synth": (run_synth, "write a synthetic corpus, embeddings and rationale"),
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ddp-workbench")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (_, help_text) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="flat key = value config file")
        for key, f in CONFIG_FIELDS.items():
            p.add_argument("--" + key.replace("_", "-"), dest=key, default=None,
                           metavar="VALUE", help=f.metadata.get("help"))
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    func = COMMANDS[args.command][0]
    try:
        overrides = {k: parse_value(k, v) for k, v in vars(args).items()
                     if k in CONFIG_FIELDS and v is not None}
        config = load_config(args.config, overrides)
    except (ConfigError, OSError) as exc:
        print(f"error: [config] {exc}", file=sys.stderr)
        return 2
    try:
        out = func(config)
    except StageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    print(out)
    return 0


if __name__ == "__main__":
    sys.exit(main())
