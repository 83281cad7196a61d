"""Command line mirror of ExportJob.

Exit codes: 0 success, 1 export/domain failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .export import LAST, ExportError, ExportJob, export, render_benchmark_queries


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="smrt-export",
        description="Extract per-layer transformer hidden states into a dump file.",
    )
    parser.add_argument("--model", required=True,
                        help="model identifier or local checkpoint directory")
    source = parser.add_mutually_exclusive_group(required=True)
    source.add_argument("--input", help="text file, one input per line")
    source.add_argument("--benchmark",
                        help="serialized binding benchmark; exports its queries")
    parser.add_argument("--layers", default=LAST,
                        help="comma-separated layer ids, or 'last'")
    parser.add_argument("--out", required=True)
    parser.add_argument("--manifest", default=None,
                        help="manifest path (default: dump path with .json)")
    parser.add_argument("--batch-size", type=int, default=8)
    parser.add_argument("--device", default="cpu")
    parser.add_argument("--id-base", type=int, default=0,
                        help="seq_id assigned to the first input")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.benchmark:
            texts = render_benchmark_queries(args.benchmark)
        else:
            texts = [line for line in Path(args.input).read_text().splitlines()
                     if line.strip()]
        layers = args.layers if args.layers == LAST else tuple(
            int(part) for part in args.layers.split(","))
        job = ExportJob(
            model_id=args.model, texts=tuple(texts), layers=layers,
            out_path=args.out, manifest_path=args.manifest,
            batch_size=args.batch_size, device=args.device, id_base=args.id_base,
        )
        summary = export(job)
    except (ExportError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    print(f"wrote {summary.record_count} records "
          f"({summary.sequence_count} sequences x layers {list(summary.layer_ids)}, "
          f"dim {summary.dim}) to {summary.out_path}")
    print(f"manifest: {summary.manifest_path}")
    return 0


def main_entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    main_entry()
