"""Command-line interface.

One subcommand:

    export    run a pretrained classifier over a labeled image folder and
              write penultimate features, logits, and labels as CALD

Exit codes: 0 success, 1 usage or argument errors, 2 when the model,
dataset, or an output path cannot be resolved or read.
"""

from __future__ import annotations

import argparse
import sys

from .datasets import SPLITS
from .errors import (DatasetResolutionError, ExporterError, FeatureHookError,
                     ModelResolutionError)
from .jobs import ExportJob, export


def cmd_export(args) -> int:
    job = ExportJob(model=args.model, dataset=args.dataset, split=args.split,
                    out=args.out, batch_size=args.batch_size,
                    device=args.device)
    summary = export(job)
    print(f"wrote {args.out}: n={summary.n} d={summary.d} k={summary.k}")
    # repr round-trips, so the printed accuracy is the exact float any
    # reader of the file will recompute
    print(f"accuracy {summary.accuracy!r}")
    return 0


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cald-export", exit_on_error=False,
        description="Export classifier features and logits to CALD files.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("export", exit_on_error=False,
                       help="run one model over one dataset split")
    p.add_argument("--model", required=True,
                   help="registered torchvision name or checkpoint path")
    p.add_argument("--dataset", required=True,
                   help="image-folder root containing <split>/<class>/ trees")
    p.add_argument("--split", required=True, choices=SPLITS)
    p.add_argument("--out", required=True, help="output CALD path")
    p.add_argument("--batch-size", type=int, default=64)
    p.add_argument("--device", default="cpu", help="inference device hint")
    p.set_defaults(func=cmd_export)
    return parser


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except argparse.ArgumentError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except SystemExit as exc:
        # argparse still exits directly for --help and a few parse paths
        return 0 if not exc.code else 1
    try:
        return args.func(args)
    except (ModelResolutionError, DatasetResolutionError, FeatureHookError,
            OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (ValueError, ExporterError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def console_main() -> None:
    raise SystemExit(main(sys.argv[1:]))
