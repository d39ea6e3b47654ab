"""Command-line entry point: ``hyperadapt run|sweep|ablate|export-embeddings``."""
from __future__ import annotations

import argparse
import sys

from . import experiment as ex

EXIT_OK, EXIT_CONFIG, EXIT_DIVERGED = 0, 2, 3


def _seeds(text: str) -> tuple[int, ...]:
    try:
        seeds = tuple(int(s) for s in text.split(",") if s.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"seeds must be comma-separated integers, got {text!r}") from None
    if not seeds or min(seeds) < 0:
        raise argparse.ArgumentTypeError("need at least one non-negative seed")
    return seeds


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hyperadapt", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", required=True, help="YAML experiment config")
        p.add_argument("--out", help="output directory (overrides output_dir in the config)")
        p.add_argument("--seeds", type=_seeds, help="comma-separated seeds (overrides the config)")

    common(sub.add_parser("run", help="train every configured method over every seed"))
    p = sub.add_parser("sweep", help="HyperAdapt over the rank or depth grid")
    common(p)
    p.add_argument("--axis", required=True, choices=("rank", "depth"))
    p = sub.add_parser("ablate", help="the four generator designs, dense to shared low-rank")
    common(p)
    p.add_argument("--allow-large", action="store_true", help="run rows above the generator parameter cap")
    p = sub.add_parser("export-embeddings", help="write per-sample embeddings to CSV")
    common(p)
    p.add_argument("--layer", required=True, help=f"one of {', '.join(ex.LAYER_TAGS)}")
    p.add_argument("--method", default="hyperadapt")
    p.add_argument("--split", default="test", choices=("train", "val", "test"))
    return parser


def _load(args) -> ex.ExperimentConfig:
    config = ex.load_config(args.config)
    if args.seeds:
        config = config.replace(seeds=args.seeds)
    if args.out:
        config = config.replace(output_dir=args.out)
    ex.worker_count()  # validate the environment before any work starts
    return config


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        config = _load(args)
        if args.command == "run":
            outcome = ex.run(config)
            print(ex.format_table(outcome.aggregate["methods"]))
            print(f"wrote {len(outcome.files)} reports to {config.output_dir} in {outcome.seconds:.1f} s")
        elif args.command == "sweep":
            rows = ex.sweep(config, args.axis)
            _print_rows(rows)
        elif args.command == "ablate":
            rows = ex.ablate(config, allow_large=args.allow_large)
            _print_rows(rows)
        else:
            path = ex.export_run(config, args.layer, args.method, split_name=args.split)
            print(f"wrote {path}")
    except ex.ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ex.RunFailure as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    return EXIT_OK


def _print_rows(rows):
    print(f"{'setting':32}{'gen params':>14}{'generated':>12}{'accuracy':>10}{'f1':>10}")
    for r in rows:
        print(f"{r['setting']:32}{r['generator_params']:>14}{r['generated']:>12}{r['accuracy']:>10.4f}{r['f1']:>10.4f}")


if __name__ == "__main__":
    sys.exit(main())
