"""Command line entry point.

Exit codes: 0 success, 2 usage error (argparse), 3 configuration error,
4 data or checkpoint format error.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from ..checkpoint import CheckpointFormatError
from ..data import DataFormatError
from ..tokensr import ConfigurationError
from . import commands
from .config import ConfigError, load_config

EXIT_OK = 0
EXIT_CONFIG = 3
EXIT_FORMAT = 4


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", type=Path, default=None, help="INI config file")
    parser.add_argument(
        "--set",
        action="append",
        default=[],
        metavar="SECTION.KEY=VALUE",
        help="override a config value (repeatable)",
    )
    parser.add_argument("--seed", type=int, default=None, help="override [run] seed")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="blink",
        description="dynamic visual token resolution: data, training, evaluation",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic scene dataset")
    _add_common(p)
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--out", type=Path, required=True)

    p = sub.add_parser("train", help="train the backbone or the token amplifier")
    _add_common(p)
    p.add_argument("target", choices=["backbone", "tokensr"])
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--backbone", type=Path, default=None, help="backbone checkpoint (tokensr only)")

    p = sub.add_parser("eval", help="compare vanilla and dynamic-resolution accuracy")
    _add_common(p)
    p.add_argument("--backbone", type=Path, required=True)
    p.add_argument("--tokensr", type=Path, default=None)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)

    p = sub.add_parser("ablate", help="run an ablation suite")
    _add_common(p)
    p.add_argument("suite", choices=list(commands.ABLATION_SUITES))
    p.add_argument("--backbone", type=Path, required=True)
    p.add_argument("--tokensr", type=Path, default=None)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)

    p = sub.add_parser("trace", help="record per-layer attention and saliency traces")
    _add_common(p)
    p.add_argument("--backbone", type=Path, required=True)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--samples", type=str, default="0", help="comma separated sample ids")
    p.add_argument("--expand-layer", type=int, default=3)

    return parser


def _parse_overrides(pairs: list[str]) -> dict[str, str]:
    overrides = {}
    for pair in pairs:
        if "=" not in pair or "." not in pair.split("=", 1)[0]:
            raise ConfigError(f"override must look like section.key=value, got {pair!r}")
        key, value = pair.split("=", 1)
        overrides[key.strip()] = value.strip()
    return overrides


def _run(args: argparse.Namespace) -> int:
    overrides = _parse_overrides(args.set)
    if args.seed is not None:
        overrides["run.seed"] = str(args.seed)
    cfg = load_config(args.config, overrides)

    if args.command == "gen-data":
        commands.cmd_gen_data(cfg, args.count, args.out)
    elif args.command == "train":
        if args.target == "backbone":
            summary = commands.cmd_train_backbone(cfg, args.data, args.out)
        else:
            if args.backbone is None:
                raise ConfigError("train tokensr needs --backbone")
            summary = commands.cmd_train_tokensr(cfg, args.backbone, args.data, args.out)
        json.dump(summary, sys.stdout, indent=2, sort_keys=True)
        print()
    elif args.command == "eval":
        payload = commands.cmd_eval(cfg, args.backbone, args.data, args.out, args.tokensr)
        json.dump(payload["variants"], sys.stdout, indent=2, sort_keys=True)
        print()
    elif args.command == "ablate":
        rows = commands.cmd_ablate(cfg, args.suite, args.backbone, args.data, args.out, args.tokensr)
        print(f"wrote {len(rows)} cells to {args.out}")
    elif args.command == "trace":
        sample_ids = [int(s) for s in args.samples.split(",") if s.strip()]
        summary = commands.cmd_trace(
            cfg, args.backbone, args.data, args.out, sample_ids, args.expand_layer
        )
        json.dump(summary, sys.stdout, indent=2, sort_keys=True)
        print()
    return EXIT_OK


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return _run(args)
    except (ConfigError, ConfigurationError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataFormatError, CheckpointFormatError) as exc:
        print(f"format error: {exc}", file=sys.stderr)
        return EXIT_FORMAT


if __name__ == "__main__":
    sys.exit(main())
