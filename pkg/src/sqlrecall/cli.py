"""Command line entry point: ``sqlrecall <verb> ...``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Sequence

from .bench import Pipeline, RunReport, ex_percentage, load_dataset, run, validate_gold
from .config import BackendConfig, EmbedderConfig, PipelineConfig, load_config
from .embedding import Embedder, HashingEmbedder, RemoteEmbedder
from .errors import ConfigError, FormatError, SqlRecallError
from .executor import DatabaseManifest, SqlExecutor
from .llm import LlmGateway, RemoteBackend, ScriptedBackend
from .memory import ExemplarStore, MemoryIndex, build_offline
from .report import SUMMARY_FIELDS, summary_rows, write_report
from .schema_linker import build_index, read_schema

log = logging.getLogger("sqlrecall")

EXIT_FORMAT = 2
EXIT_NO_CANDIDATES = 3


def make_backend(cfg: BackendConfig, script_override: str | None = None):
    script = script_override or cfg.script
    if script_override or cfg.kind == "scripted":
        if not script:
            raise ConfigError("scripted backend needs a script file (llm.script or --script)")
        return ScriptedBackend.from_json(script)
    if cfg.kind == "remote":
        if not (cfg.endpoint and cfg.model):
            raise ConfigError("remote backend needs llm.endpoint and llm.model")
        return RemoteBackend(cfg.endpoint, cfg.model, cfg.api_key_env, cfg.timeout_s)
    raise ConfigError(f"unknown backend kind {cfg.kind!r}")


def make_embedder(cfg: EmbedderConfig) -> Embedder:
    if cfg.kind == "hashing":
        return HashingEmbedder(cfg.dim)
    if cfg.kind == "remote":
        if not (cfg.endpoint and cfg.model):
            raise ConfigError("remote embedder needs embedder.endpoint and embedder.model")
        return RemoteEmbedder(cfg.endpoint, cfg.model, cfg.dim, cfg.api_key_env)
    raise ConfigError(f"unknown embedder kind {cfg.kind!r}")


def load_manifest(source: str) -> DatabaseManifest:
    path = Path(source)
    return DatabaseManifest.from_directory(path) if path.is_dir() else DatabaseManifest.from_json(path)


def _common(p: argparse.ArgumentParser, dataset: bool = True) -> None:
    p.add_argument("--config", help="JSON or TOML run configuration")
    p.add_argument("--db", required=True, help="database manifest JSON or a directory of SQLite files")
    if dataset:
        p.add_argument("--dataset", required=True)
        p.add_argument("--format", choices=["bird", "spider"], default="bird")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sqlrecall", description="NL2SQL runs, memory building and evaluation")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="verb", required=True)

    p = sub.add_parser("build-schema-index", help="MinHash/LSH index per database")
    _common(p, dataset=False)
    p.add_argument("--out-dir", required=True)

    p = sub.add_parser("build-memory", help="error memory and correct-example store from a training set")
    _common(p)
    p.add_argument("--script", help="scripted backend rules (overrides llm.script)")
    p.add_argument("--out-dir", required=True)

    p = sub.add_parser("run", help="end-to-end run writing a JSON report")
    _common(p)
    p.add_argument("--script", help="scripted backend rules (overrides llm.script)")
    p.add_argument("--memory", help="memory JSONL written by build-memory")
    p.add_argument("--exemplars", help="exemplar JSONL written by build-memory")
    p.add_argument("--schema-index-dir")
    p.add_argument("--traces", help="directory for per-question trace JSON")
    p.add_argument("--limit", type=int)
    p.add_argument("--out", required=True, help="report JSON path")

    p = sub.add_parser("eval", help="EX of a predictions file or report against gold")
    _common(p)
    p.add_argument("--predictions", required=True, help="JSON object question_id -> SQL, or a run report")

    p = sub.add_parser("report", help="TSV tables and PNG figures from run reports")
    p.add_argument("reports", nargs="+", help="report JSON files, optionally LABEL=PATH")
    p.add_argument("--out-dir", required=True)
    return parser


def _config(args) -> PipelineConfig:
    return load_config(args.config) if getattr(args, "config", None) else PipelineConfig()


def cmd_build_schema_index(args) -> int:
    cfg = _config(args)
    manifest = load_manifest(args.db)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    sc = cfg.schema
    for db_id in manifest:
        index = build_index(read_schema(manifest.resolve(db_id), db_id), sc.num_perm, sc.bands, sc.rows, cfg.seed)
        index.save(out / f"{db_id}.lsh.json")
        print(f"{db_id}\t{len(index.elements)} elements")
    return 0


def cmd_build_memory(args) -> int:
    cfg = _config(args)
    executor = SqlExecutor(load_manifest(args.db), cfg.timeout_s, cfg.row_semantics)
    items = load_dataset(args.dataset, args.format)
    llm = LlmGateway(make_backend(cfg.llm, args.script), max_attempts=cfg.llm.max_attempts)
    embedder = make_embedder(cfg.embedder)
    catalogs: dict[str, str] = {}

    def schema_text(db_id: str) -> str:
        if db_id not in catalogs:
            catalogs[db_id] = read_schema(executor.manifest.resolve(db_id), db_id).render()
        return catalogs[db_id]

    built = build_offline(items, llm, executor, embedder, schema_text, cfg.memory.k_candidates)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    memory = MemoryIndex.empty_for(embedder)
    for e in built.entries:
        memory.append(e)
    memory.save(out / "memory.jsonl")
    store = ExemplarStore.build(((it.question_id, it.question, it.gold_sql) for it in items), embedder)
    store.save(out / "exemplars.jsonl")
    print(f"memory entries\t{len(built.entries)}\nskipped\t{len(built.skipped)}\nexemplars\t{len(store)}")
    return 0


def cmd_run(args) -> int:
    cfg = _config(args)
    executor = SqlExecutor(load_manifest(args.db), cfg.timeout_s, cfg.row_semantics)
    items = load_dataset(args.dataset, args.format)
    if args.limit is not None:
        items = items[: args.limit]
    pipeline = Pipeline(
        make_backend(cfg.llm, args.script),
        executor,
        cfg,
        make_embedder(cfg.embedder),
        MemoryIndex.load(args.memory) if args.memory else None,
        ExemplarStore.load(args.exemplars) if args.exemplars else None,
        args.schema_index_dir,
        trace_dir=args.traces,
    )
    report = run(items, pipeline)
    report.write(args.out)
    agg = report.aggregate
    print("\t".join(SUMMARY_FIELDS[1:]))
    print("\t".join(str(agg[k]) for k in SUMMARY_FIELDS[1:]))
    for issue in report.gold_issues:
        print(f"gold issue\t{issue.question_id}\t{issue.status}\t{issue.message}", file=sys.stderr)
    empty = [r.question_id for r in report.rows if r.n_candidates == 0]
    if empty:
        print(f"questions without candidates: {', '.join(sorted(set(empty)))}", file=sys.stderr)
        return EXIT_NO_CANDIDATES
    return 0


def cmd_eval(args) -> int:
    cfg = _config(args)
    executor = SqlExecutor(load_manifest(args.db), cfg.timeout_s, cfg.row_semantics)
    items = load_dataset(args.dataset, args.format)
    data = json.loads(Path(args.predictions).read_text(encoding="utf-8"))
    if isinstance(data, dict) and "rows" in data:
        report = RunReport.from_json(data)
        preds = {r.question_id: r.final_sql for r in report.rows if r.repeat == 0}
    elif isinstance(data, dict):
        preds = {str(k): v for k, v in data.items()}
    else:
        raise FormatError("predictions must be a JSON object or a run report")
    correct = 0
    print("question_id\tex")
    for it in items:
        sql = preds.get(it.question_id, "")
        ok = bool(sql.strip()) and executor.ex_match(sql, it.gold_sql, it.db_id)
        correct += ok
        print(f"{it.question_id}\t{int(ok)}")
    for issue in validate_gold(items, executor):
        print(f"gold issue\t{issue.question_id}\t{issue.status}\t{issue.message}", file=sys.stderr)
    print(f"EX\t{ex_percentage(correct, len(items))}")
    return 0


def cmd_report(args) -> int:
    reports = []
    for arg in args.reports:
        label, sep, path = arg.partition("=")
        if not sep:
            label, path = Path(arg).stem, arg
        reports.append((label, RunReport.load(path)))
    paths = write_report(reports, args.out_dir)
    print("\t".join(SUMMARY_FIELDS))
    for row in summary_rows(reports):
        print("\t".join(str(row[k]) for k in SUMMARY_FIELDS))
    for p in paths:
        print(f"wrote\t{p}", file=sys.stderr)
    return 0


COMMANDS = {
    "build-schema-index": cmd_build_schema_index,
    "build-memory": cmd_build_memory,
    "run": cmd_run,
    "eval": cmd_eval,
    "report": cmd_report,
}


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.verb](args)
    except FormatError as exc:
        print(f"format error: {exc}", file=sys.stderr)
        return EXIT_FORMAT
    except (SqlRecallError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
