"""Command-line surface.

Subcommands: ingest, index, query, probe-loop, extract, judge, analyze,
run. Exit codes: 0 success, 2 usage or configuration error, 3 data
error, 4 oracle error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .config import RunConfig, load_config
from .errors import ConfigError, DataError, LitmineError, OracleError, ParseError
from .filters import parse_filter_spec, Probe, probe_search
from .pipeline import RunContext, run_pipeline, run_stage, write_manifest

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_ORACLE = 4


def _load(args: argparse.Namespace) -> tuple[RunConfig, Path]:
    cfg = load_config(args.config)
    workers = getattr(args, "workers", None)
    if workers is not None:
        if workers < 1:
            raise ConfigError(f"--workers must be >= 1, got {workers}")
        cfg.workers = workers
    run_dir = Path(args.run_dir) if args.run_dir else cfg.output_dir
    return cfg, run_dir


def _stage_command(stage: str):
    def handler(args: argparse.Namespace) -> int:
        cfg, run_dir = _load(args)
        run_dir.mkdir(parents=True, exist_ok=True)
        ctx = RunContext(cfg=cfg, run_dir=run_dir, task=getattr(args, "task", None))
        run_stage(ctx, stage)
        write_manifest(run_dir)
        return EXIT_OK
    return handler


def cmd_ingest(args: argparse.Namespace) -> int:
    return _stage_command("ingest")(args)


def cmd_index(args: argparse.Namespace) -> int:
    cfg, run_dir = _load(args)
    run_dir.mkdir(parents=True, exist_ok=True)
    ctx = RunContext(cfg=cfg, run_dir=run_dir)
    run_stage(ctx, "ingest")
    run_stage(ctx, "index")
    write_manifest(run_dir)
    return EXIT_OK


def cmd_query(args: argparse.Namespace) -> int:
    cfg, run_dir = _load(args)
    spec_path = Path(args.spec)
    if not spec_path.exists():
        raise ConfigError(f"filter spec file not found: {spec_path}")
    try:
        spec = parse_filter_spec(spec_path.read_text(encoding="utf-8"))
    except ParseError as exc:
        # a bad spec handed on the command line is a usage problem
        raise ConfigError(f"invalid filter spec: {exc}") from exc
    ctx = RunContext(cfg=cfg, run_dir=run_dir)
    hits = probe_search(Probe(probe_id="query", spec=spec), ctx.index(),
                        ctx.corpus(), ctx.require_embedder(), top_k=args.top_k)
    for hit in hits:
        sys.stdout.write(json.dumps(
            {"window_id": hit.window_id, "doc_id": hit.doc_id, "score": hit.score},
            sort_keys=True) + "\n")
    return EXIT_OK


def cmd_probe_loop(args: argparse.Namespace) -> int:
    return _stage_command("probe_loop")(args)


def cmd_extract(args: argparse.Namespace) -> int:
    return _stage_command("extract")(args)


def cmd_judge(args: argparse.Namespace) -> int:
    return _stage_command("judge")(args)


def cmd_analyze(args: argparse.Namespace) -> int:
    return _stage_command("analyze")(args)


def cmd_run(args: argparse.Namespace) -> int:
    cfg, run_dir = _load(args)
    run_pipeline(cfg, run_dir, task=args.task, stop_after=args.stop_after)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="litmine",
        description="Turn a tagged document corpus into judged, structured datasets.")
    parser.add_argument("-v", "--verbose", action="store_true",
                        help="log at DEBUG level")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p: argparse.ArgumentParser, task: bool = False):
        p.add_argument("--config", required=True, help="run config TOML")
        p.add_argument("--run-dir", default=None,
                       help="run directory (default: output_dir from config)")
        p.add_argument("--workers", type=int, default=None,
                       help="parallel workers (default: config, then cpu count)")
        if task:
            p.add_argument("--task", default=None,
                           help="task description (default: task from config)")

    p = sub.add_parser("ingest", help="build corpus windows and embeddings")
    common(p)
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("index", help="load tags and build the entity index")
    common(p)
    p.set_defaults(func=cmd_index)

    p = sub.add_parser("query", help="run one filter spec and print ranked hits")
    common(p)
    p.add_argument("--spec", required=True, help="filter spec JSON file")
    p.add_argument("--top-k", type=int, default=10)
    p.set_defaults(func=cmd_query)

    p = sub.add_parser("probe-loop", help="run probe construction and schema induction")
    common(p, task=True)
    p.set_defaults(func=cmd_probe_loop)

    p = sub.add_parser("extract", help="run the budgeted extraction sweep")
    common(p)
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("judge", help="grade records on the five-axis rubric")
    common(p)
    p.set_defaults(func=cmd_judge)

    p = sub.add_parser("analyze", help="compute dataset analyses over kept records")
    common(p)
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("run", help="run the full pipeline")
    common(p, task=True)
    p.add_argument("--stop-after", default=None,
                   help="stop cleanly after this stage (for staged runs)")
    p.set_defaults(func=cmd_run)

    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OracleError as exc:
        print(f"oracle error: {exc}", file=sys.stderr)
        return EXIT_ORACLE
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except LitmineError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
