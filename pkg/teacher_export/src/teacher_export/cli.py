"""Command line for exporting and validating teacher activations.

  teacher-export run --transcripts utt.tsv --out taps/ [--model ID]
                     [--layers 3,6,9,12] [--acoustic DATASET] [--stub-seed N]
  teacher-export verify --dir taps/

``--stub-seed`` swaps the pretrained model for a randomly initialized one of
the same geometry (offline testing aid); everything else is unchanged.
"""

from __future__ import annotations

import argparse
import sys

from .export import ExportError, ExportJob, build_stub, export, load_transcripts
from .verify import verify_export


def cmd_run(args) -> int:
    transcripts = load_transcripts(args.transcripts)
    job = ExportJob(
        transcripts=transcripts,
        model_id=args.model,
        layers=[int(x) for x in args.layers.split(",")],
        out_dir=args.out,
        acoustic_dataset=args.acoustic,
        dataset_name=args.name,
    )
    tokenizer = model = None
    if args.stub_seed is not None:
        tokenizer, model = build_stub(seed=args.stub_seed)
    out = export(job, tokenizer=tokenizer, model=model)
    print(f"exported {len(transcripts)} utterance(s) to {out}")
    return 0


def cmd_verify(args) -> int:
    report = verify_export(args.dir)
    print(report)
    return 0 if report.ok else 1


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="teacher-export")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="export taps for a transcript list")
    p.add_argument("--transcripts", required=True,
                   help="UTF-8 TSV file: id<TAB>label<TAB>text")
    p.add_argument("--out", required=True)
    p.add_argument("--model", default="bert-base-uncased")
    p.add_argument("--layers", default="3,6,9,12")
    p.add_argument("--acoustic", default=None,
                   help="existing dataset whose acoustic features are "
                        "carried over by utterance id")
    p.add_argument("--name", default="teacher-export")
    p.add_argument("--stub-seed", type=int, default=None,
                   help="use a seeded random model of the standard geometry "
                        "instead of downloading --model")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("verify", help="validate an export directory")
    p.add_argument("--dir", required=True)
    p.set_defaults(func=cmd_verify)

    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except ExportError as err:
        print(f"error: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
