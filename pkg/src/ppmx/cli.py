"""Command-line entry point.

    ppmx train --config cfg.yaml --out model.json
    ppmx evaluate --bundle model.json --report out/
    ppmx explain --bundle model.json --case 1-364285768 --prefix 3 [--out rec.json]
    ppmx export-tree --bundle model.json --cluster 0 --out cluster0.dot
    ppmx encode --config cfg.yaml --out features.csv

Exit status is 0 on success, 1 on a usage error and 2 on a runtime error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys

from . import pipeline as pl
from .encoding import export_dataset_csv

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="ppmx", description="Local post-hoc explanations for process outcome predictions.")
    p.add_argument("-v", "--verbose", action="store_true", help="log stage summaries to stderr")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    s = sub.add_parser("train", help="fit the full pipeline and write a model bundle")
    s.add_argument("--config", required=True)
    s.add_argument("--out", required=True)

    s = sub.add_parser("evaluate", help="write the metrics report for a bundle")
    s.add_argument("--bundle", required=True)
    s.add_argument("--report", required=True)

    s = sub.add_parser("explain", help="explain one validation instance")
    s.add_argument("--bundle", required=True)
    s.add_argument("--case", required=True)
    s.add_argument("--prefix", required=True, type=int)
    s.add_argument("--out")

    s = sub.add_parser("export-tree", help="write one cluster's surrogate tree as DOT")
    s.add_argument("--bundle", required=True)
    s.add_argument("--cluster", required=True, type=int)
    s.add_argument("--out", required=True)

    s = sub.add_parser("encode", help="encode the configured log and write the feature matrix")
    s.add_argument("--config", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--raw", action="store_true", help="write unscaled features")
    return p


def _run(args) -> None:
    if args.command == "train":
        bundle = pl.run_train(pl.load_config(args.config))
        digest = pl.save_bundle(bundle, args.out)
        print(f"bundle written to {args.out} (sha256 {digest})")
    elif args.command == "evaluate":
        bundle = pl.load_bundle(args.bundle)
        report = pl.run_evaluate(bundle)
        for path in pl.write_report(report, bundle, args.report):
            print(path)
    elif args.command == "explain":
        bundle = pl.load_bundle(args.bundle)
        record = pl.run_explain(bundle, args.case, args.prefix)
        text = json.dumps(record.to_dict(), indent=2, sort_keys=True) + "\n"
        if args.out:
            with open(args.out, "w", encoding="utf-8") as fh:
                fh.write(text)
        else:
            sys.stdout.write(text)
        for w in record.warnings:
            print(w, file=sys.stderr)
    elif args.command == "export-tree":
        bundle = pl.load_bundle(args.bundle)
        pl.export_tree_dot(bundle, args.cluster, args.out)
        print(args.out)
    elif args.command == "encode":
        config = pl.load_config(args.config)
        train_ds, valid_ds = pl.encode_log(pl._load_log(config), config)
        with open(args.out, "w", encoding="utf-8", newline="") as fh:
            export_dataset_csv(train_ds, fh, scaled=not args.raw)
            export_dataset_csv(valid_ds, fh, scaled=not args.raw, header=False)
        print(f"{len(train_ds)} train + {len(valid_ds)} validation rows written to {args.out}")


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            parser.print_usage(sys.stderr)
            raise UsageError("ppmx: error: a subcommand is required")
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:
        # --help exits through argparse
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        _run(args)
    except Exception as exc:
        print(f"ppmx {args.command}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
