"""Command-line front end.

Exit codes: 0 success, 1 usage, 2 data/validation, 3 IO.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from . import workflow
from .errors import ArgumentError, DimensionMismatchError, IscError
from .formats import parse_key_values
from .learning.matcher import DEFAULT_INIT_SCALE, DEFAULT_LR

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_IO = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _positive(value: str) -> int:
    n = int(value)
    if n < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {n}")
    return n


def _count(value: str) -> int:
    n = int(value)
    if n < 0:
        raise argparse.ArgumentTypeError(f"must be >= 0, got {n}")
    return n


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="iscmatch", description="Desk-scale image copy detection (matching track).")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-data", help="write a synthetic reference/query dataset")
    g.add_argument("--refs", type=_count, required=True)
    g.add_argument("--pos", type=_count, required=True)
    g.add_argument("--distractors", type=_count, required=True)
    g.add_argument("--train", type=_count, default=200, help="extra training images (default 200)")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", type=Path, required=True)

    e = sub.add_parser("extract", help="descriptors for every view of every image")
    e.add_argument("--images", type=Path, required=True)
    e.add_argument("--grid", type=int, default=2)
    e.add_argument("--dim", type=_positive, default=256)
    e.add_argument("--projector", type=Path)
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--out", type=Path, required=True)

    r = sub.add_parser("retrieve", help="candidate pairs from methods I/II/III")
    r.add_argument("--query-desc", type=Path, required=True)
    r.add_argument("--ref-desc", type=Path, required=True)
    r.add_argument("--k", type=_positive, default=10)
    r.add_argument("--methods", default="I,II,III", help="comma-separated subset of I,II,III")
    r.add_argument("--out", type=Path, required=True)

    for name, helptext in (("train-matcher", "train the pair matcher"), ("train-projector", "train the projector")):
        t = sub.add_parser(name, help=helptext)
        t.add_argument("--data", type=Path, required=True)
        t.add_argument("--epochs", type=_count, default=30 if name == "train-matcher" else 40)
        t.add_argument("--lr", type=float, default=DEFAULT_LR if name == "train-matcher" else 2.0)
        t.add_argument("--batch", type=_positive, default=16 if name == "train-matcher" else 50)
        t.add_argument("--seed", type=int, default=0)
        t.add_argument("--out", type=Path, required=True)
        t.add_argument("--log", type=Path, help="training-log CSV (default <out>.log.csv)")
        if name == "train-matcher":
            t.add_argument("--init-scale", type=float, default=DEFAULT_INIT_SCALE)
        else:
            t.add_argument("--tau", type=float, default=0.1)
            t.add_argument("--dim", type=_positive, default=256)

    rr = sub.add_parser("rerank", help="score candidates and write a submission")
    rr.add_argument("--candidates", type=Path, required=True)
    rr.add_argument("--matcher", type=Path, help="ISCM weights; omitted = retrieval-similarity baseline")
    rr.add_argument("--data", type=Path, required=True)
    best = rr.add_mutually_exclusive_group()
    best.add_argument("--best-only", dest="best_only", action="store_true", default=True)
    best.add_argument("--all-pairs", dest="best_only", action="store_false")
    rr.add_argument("--out", type=Path, required=True)

    ev = sub.add_parser("evaluate", help="micro-average precision of a submission")
    ev.add_argument("--submission", type=Path, required=True)
    ev.add_argument("--gt", type=Path, required=True)
    ev.add_argument("--curve", type=Path)

    pl = sub.add_parser("pipeline", help="end-to-end run from a key=value config")
    pl.add_argument("--config", type=Path, required=True)
    pl.add_argument("--out", type=Path, required=True)
    return p


def _run(args: argparse.Namespace) -> None:
    cmd = args.command
    if cmd == "gen-data":
        if args.pos > args.refs:
            raise UsageError(f"--pos ({args.pos}) must not exceed --refs ({args.refs})")
        workflow.gen_data(args.out, args.refs, args.pos, args.distractors, args.seed, args.train)
        print(f"wrote {args.refs} refs, {args.pos + args.distractors} queries, {args.pos} gt pairs to {args.out}")
    elif cmd == "extract":
        if args.grid < 2:
            raise UsageError("--grid must be >= 2")
        workflow.extract(args.images, args.out, args.grid, args.dim, args.projector, args.seed)
        print(f"wrote {args.out}")
    elif cmd == "retrieve":
        methods = tuple(m.strip() for m in args.methods.split(",") if m.strip())
        if not methods or any(m not in ("I", "II", "III") for m in methods):
            raise UsageError(f"--methods must be a subset of I,II,III, got {args.methods!r}")
        workflow.retrieve_files(args.query_desc, args.ref_desc, args.out, args.k, methods)
        print(f"wrote {args.out}")
    elif cmd == "train-matcher":
        _, log = workflow.train_matcher(
            args.data, args.out, args.epochs, args.lr, args.seed, args.batch, args.init_scale, args.log
        )
        print(f"loss {log.initial!r} -> {log.final!r}; wrote {args.out}")
    elif cmd == "train-projector":
        _, log = workflow.train_projector_files(
            args.data, args.out, args.epochs, args.lr, args.tau, args.batch, args.dim, args.seed, args.log
        )
        print(f"loss {log.initial!r} -> {log.final!r}; wrote {args.out}")
    elif cmd == "rerank":
        workflow.rerank(args.candidates, args.data, args.out, args.matcher, args.best_only)
        print(f"wrote {args.out}")
    elif cmd == "evaluate":
        print(workflow.evaluate(args.submission, args.gt, args.curve).to_text(), end="")
    elif cmd == "pipeline":
        try:
            config = workflow.RunConfig.from_mapping(parse_key_values(args.config.read_text()))
        except ArgumentError as exc:
            raise UsageError(str(exc)) from None
        result, _ = workflow.run_pipeline(config, args.out)
        if result is not None:
            print(result.to_text(), end="")
        print(f"wrote {args.out / 'manifest.txt'}")


def main(argv: list[str] | None = None) -> int:
    try:
        _run(build_parser().parse_args(argv))
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DimensionMismatchError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except ArgumentError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (IscError, KeyError, ValueError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except OSError as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return EXIT_IO
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
