"""Command-line surface: ingest, index, ask, grid, ablation, audit, version.

Exit codes: 0 on full success, 1 on domain errors (typed message on
stderr), 2 on usage errors. Every subcommand honors --config and the
environment overrides; --json switches output to one machine-readable
document; --scripted replays recorded completions so runs need no model
server. Any run that invokes backends leaves a trace file behind, even
when it fails partway.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import __version__
from .config import CONFIG_ENV_VAR, Settings, load_settings
from .corpus import MetadataFilter, ingest, load_source_directory, read_corpus
from .errors import IndexMissing, LexgridError
from .grid import (
    GoldLabels,
    compute_grid,
    render_grid,
    render_report,
    run_ablation,
    write_report_csv,
)
from .pipeline import MODES, PipelineHandles, resume_check, run_pipeline
from .trace import load_trace
from .vector_index import VectorIndex, index_corpus


class UsageError(Exception):
    """Bad invocation that argparse cannot catch on its own (exit code 2)."""


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument(
        "--config", metavar="PATH",
        help=f"config file (default: ${CONFIG_ENV_VAR} or built-in defaults)")
    common.add_argument(
        "--json", action="store_true", help="machine-readable output")

    parser = argparse.ArgumentParser(
        prog="lexgrid",
        description="Indicator grids over segmented legal texts: retrieval, "
                    "graded generation, and binary verdicts with full traces.")
    sub = parser.add_subparsers(dest="subcommand", required=True)

    p = sub.add_parser("ingest", parents=[common],
                       help="segment source texts into a corpus file")
    p.add_argument("--input", required=True, metavar="DIR",
                   help="directory of source text files")
    p.add_argument("--corpus", required=True, metavar="NAME", help="corpus name")
    p.add_argument("--metadata", metavar="PATH",
                   help="sidecar JSON mapping filename to source fields "
                        "(default: <input>/metadata.json)")
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("index", parents=[common],
                       help="embed the corpus and build the vector index")
    p.set_defaults(func=cmd_index)

    p = sub.add_parser("ask", parents=[common],
                       help="answer one indicator question")
    p.add_argument("--question", required=True)
    p.add_argument("--country", required=True, metavar="CC")
    p.add_argument("--ban", required=True, metavar="TOPIC")
    p.add_argument("--mode", choices=MODES, default=None,
                   help="pipeline configuration (default: from config)")
    p.add_argument("--scripted", metavar="PATH",
                   help="scripted replies file for offline runs")
    p.set_defaults(func=cmd_ask)

    p = sub.add_parser("grid", parents=[common],
                       help="run the 11-question grid for one (ban, country)")
    p.add_argument("--ban", required=True, metavar="TOPIC")
    p.add_argument("--country", required=True, metavar="CC")
    p.add_argument("--mode", choices=MODES, default=None)
    p.add_argument("--jobs", type=int, default=1, metavar="N",
                   help="worker pool size for the 11 slots (default 1)")
    p.add_argument("--scripted", metavar="PATH")
    p.set_defaults(func=cmd_grid)

    p = sub.add_parser("ablation", parents=[common],
                       help="three-configuration comparison against gold labels")
    p.add_argument("--ban", action="append", required=True, dest="bans",
                   metavar="TOPIC", help="ban topic (repeatable)")
    p.add_argument("--country", action="append", required=True, dest="countries",
                   metavar="CC", help="country code (repeatable)")
    p.add_argument("--gold", required=True, metavar="PATH",
                   help="gold labels file (JSON lines)")
    p.add_argument("--out", default="ablation_report.json", metavar="PATH",
                   help="structured report output (default ablation_report.json)")
    p.add_argument("--csv", metavar="PATH", help="also write the table as CSV")
    p.add_argument("--jobs", type=int, default=1, metavar="N")
    p.add_argument("--per-country", action="store_true",
                   help="add per-country rows next to the pooled ones")
    p.add_argument("--scripted", metavar="PATH")
    p.set_defaults(func=cmd_ablation)

    p = sub.add_parser("audit", parents=[common],
                       help="verify the invariants of a recorded trace")
    p.add_argument("trace", metavar="TRACE", help="trace file to audit")
    p.set_defaults(func=cmd_audit)

    p = sub.add_parser("version", parents=[common],
                       help="print the package version")
    p.set_defaults(func=cmd_version)
    return parser


def _require(path: Path, what: str) -> Path:
    if not path.exists():
        raise UsageError(f"{what} does not exist: {path}")
    return path


def _load_handles(settings: Settings, scripted: str | None) -> PipelineHandles:
    corpus_path = settings.corpus_path
    if not corpus_path.exists():
        raise LexgridError(f"corpus file not found: {corpus_path}; run ingest first")
    if not settings.index_path.exists():
        raise IndexMissing(f"index file not found: {settings.index_path}; run index first")
    deterministic, generative = settings.chat_backends(scripted=scripted)
    return PipelineHandles(
        corpus=read_corpus(corpus_path),
        index=VectorIndex.load(settings.index_path),
        embedder=settings.embedding_backend(),
        deterministic=deterministic,
        generative=generative,
    )


def cmd_ingest(args, settings: Settings) -> int:
    input_dir = _require(Path(args.input), "input path")
    metadata = Path(args.metadata) if args.metadata else input_dir / "metadata.json"
    _require(metadata, "metadata file")
    sources = load_source_directory(input_dir, metadata)
    corpus = ingest(sources, args.corpus, path=settings.corpus_path)
    if args.json:
        print(json.dumps({"articles": len(corpus), "sources": len(sources),
                          "corpus": args.corpus, "path": str(settings.corpus_path)}))
    else:
        print(f"{len(corpus)} articles in {len(sources)} sources")
        print(f"wrote {settings.corpus_path}")
    return 0


def cmd_index(args, settings: Settings) -> int:
    corpus_path = settings.corpus_path
    if not corpus_path.exists():
        raise LexgridError(f"corpus file not found: {corpus_path}; run ingest first")
    corpus = read_corpus(corpus_path)
    embedder = settings.embedding_backend()
    sec = settings.section("index")
    index = VectorIndex(
        dimension=embedder.dimension, m=int(sec["m"]),
        ef_construction=int(sec["ef_construction"]),
        ef_search=int(sec["ef_search"]), seed=int(sec["seed"]))
    index_corpus(corpus, embedder, index=index)
    index.save(settings.index_path)
    if args.json:
        print(json.dumps({"articles": len(index), "path": str(settings.index_path)}))
    else:
        print(f"indexed {len(index)} articles into {settings.index_path}")
    return 0


def cmd_ask(args, settings: Settings) -> int:
    handles = _load_handles(settings, args.scripted)
    config = settings.pipeline_config(mode=args.mode)
    scope = MetadataFilter.build(country=args.country, ban_topic=args.ban)
    trace_dir = settings.trace_dir
    try:
        result = run_pipeline(args.question, scope, handles, config,
                              trace_dir=trace_dir)
    except LexgridError as exc:
        trace = getattr(exc, "trace", None)
        if trace is not None:
            print(f"trace: {trace_dir / (trace.run_id + '.json')}", file=sys.stderr)
        raise
    trace_path = trace_dir / f"{result.trace.run_id}.json"
    if args.json:
        print(json.dumps({
            "decision": result.decision.to_dict(),
            "cited_article_ids": list(result.cited_article_ids),
            "degraded": result.degraded,
            "mode": config.mode,
            "trace": str(trace_path),
        }, ensure_ascii=False))
    else:
        print(json.dumps(result.decision.to_dict(), ensure_ascii=False))
        print(f"trace: {trace_path}")
    return 0


def cmd_grid(args, settings: Settings) -> int:
    if args.jobs < 1:
        raise UsageError("--jobs must be >= 1")
    handles = _load_handles(settings, args.scripted)
    config = settings.pipeline_config(mode=args.mode)
    grid = compute_grid(args.ban, args.country, handles, config,
                        trace_dir=settings.trace_dir, jobs=args.jobs)
    if args.json:
        print(json.dumps(grid.to_dict(), ensure_ascii=False))
    else:
        print(render_grid(grid))
    return 0


def cmd_ablation(args, settings: Settings) -> int:
    if args.jobs < 1:
        raise UsageError("--jobs must be >= 1")
    gold = GoldLabels.load(_require(Path(args.gold), "gold labels file"))
    handles = _load_handles(settings, args.scripted)
    config = settings.pipeline_config()
    report = run_ablation(args.bans, args.countries, handles, config, gold,
                          trace_dir=settings.trace_dir, jobs=args.jobs,
                          per_country=args.per_country)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps(report.to_dict(), ensure_ascii=False,
                              sort_keys=True, indent=2) + "\n", encoding="utf-8")
    if args.csv:
        write_report_csv(report, args.csv)
    if args.json:
        print(json.dumps(report.to_dict(), ensure_ascii=False))
    else:
        print(render_report(report))
        print(f"wrote {out}")
        if args.csv:
            print(f"wrote {args.csv}")
    return 0


def cmd_audit(args, settings: Settings) -> int:
    trace = load_trace(_require(Path(args.trace), "trace file"))
    corpus = read_corpus(settings.corpus_path) if settings.corpus_path.exists() else None
    violations = resume_check(trace, corpus)
    if args.json:
        print(json.dumps({"run_id": trace.run_id, "violations": violations}))
    elif violations:
        for v in violations:
            print(f"violation: {v}")
    else:
        print("no violations")
    return 1 if violations else 0


def cmd_version(args, settings: Settings) -> int:
    if args.json:
        print(json.dumps({"version": __version__}))
    else:
        print(__version__)
    return 0


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        settings = load_settings(getattr(args, "config", None))
        return args.func(args, settings)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 2
    except (LexgridError, OSError, ValueError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
