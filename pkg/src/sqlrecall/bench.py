"""Datasets, the end-to-end pipeline, EX scoring and run reports."""

from __future__ import annotations

import json
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from decimal import ROUND_HALF_UP, Decimal
from pathlib import Path
from typing import Any, Callable, Sequence

from .config import PipelineConfig
from .core import Question, Style, TokenUsage, candidate_from_record, outcome_from_record, to_record
from .embedding import Embedder, HashingEmbedder
from .errors import EmptyReport, FormatError
from .executor import SqlExecutor
from .generator import GenerationOptions, generate_all
from .llm import Backend, LlmGateway
from .memory import ExemplarStore, MemoryIndex, _atomic_write
from .refine import ExemplarPolicy, refine_loop, select, vote
from .schema_linker import SchemaCatalog, SchemaIndex, build_index, extract_keywords, link, read_schema

log = logging.getLogger(__name__)

FORMATS = ("bird", "spider")


@dataclass(frozen=True)
class DatasetItem:
    question_id: str
    db_id: str
    question: str
    evidence: str
    gold_sql: str

    def as_question(self) -> Question:
        return Question(self.question_id, self.db_id, self.question, self.evidence)


def _id_sort_key(qid: str) -> tuple:
    return (0, int(qid), "") if qid.isdigit() else (1, 0, qid)


def _read_records(path: Path) -> list[Any]:
    text = path.read_text(encoding="utf-8")
    if path.suffix.lower() == ".jsonl":
        records = []
        for n, line in enumerate(text.splitlines(), 1):
            if not line.strip():
                continue
            try:
                records.append(json.loads(line))
            except json.JSONDecodeError as exc:
                raise FormatError(f"invalid JSON on line {n}: {exc.msg}", n) from None
        return records
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise FormatError(f"invalid JSON at line {exc.lineno}: {exc.msg}") from None
    if not isinstance(data, list):
        raise FormatError("dataset must be a JSON array of records")
    return data


def load_dataset(path: str | Path, fmt: str = "bird") -> list[DatasetItem]:
    """BIRD records carry ``question_id/db_id/question/evidence/SQL``; Spider ones ``db_id/question/query``."""
    if fmt not in FORMATS:
        raise FormatError(f"unknown dataset format {fmt!r}")
    gold_key = "SQL" if fmt == "bird" else "query"
    items = []
    seen: set[str] = set()
    for n, rec in enumerate(_read_records(Path(path))):
        if not isinstance(rec, dict):
            raise FormatError("record is not an object", n)
        qid = rec.get("question_id", n if fmt == "spider" else None)
        name = qid if qid is not None else n
        if qid is None:
            raise FormatError("missing question_id", name)
        gold = rec.get(gold_key, rec.get("gold_sql"))
        for key, value in (("db_id", rec.get("db_id")), ("question", rec.get("question")), (gold_key, gold)):
            if not isinstance(value, str) or not value.strip():
                raise FormatError(f"missing or empty {key}", name)
        qid = str(qid)
        if qid in seen:
            raise FormatError("duplicate question_id", name)
        seen.add(qid)
        items.append(DatasetItem(qid, rec["db_id"], rec["question"], rec.get("evidence") or "", gold))
    return sorted(items, key=lambda it: _id_sort_key(it.question_id))


@dataclass(frozen=True)
class GoldIssue:
    question_id: str
    status: str
    message: str


def validate_gold(items: Sequence[DatasetItem], executor: SqlExecutor) -> list[GoldIssue]:
    """Gold queries that fail on their database; they stay in the dataset and are reported."""
    issues = []
    for it in items:
        try:
            outcome = executor.execute(it.db_id, it.gold_sql)
        except KeyError as exc:
            issues.append(GoldIssue(it.question_id, "UnknownDatabase", str(exc)))
            continue
        if outcome.status.is_error:
            issues.append(GoldIssue(it.question_id, outcome.status.value, outcome.message))
    return issues


def _round_half_up(value: Decimal, places: str) -> float:
    return float(value.quantize(Decimal(places), rounding=ROUND_HALF_UP))


def _mean(values: Sequence[float]) -> float:
    return _round_half_up(Decimal(sum(values)) / Decimal(len(values)), "0.001") if values else 0.0


@dataclass
class QuestionRow:
    question_id: str
    db_id: str
    repeat: int
    final_sql: str
    ex: bool
    prompt_tokens: int
    completion_tokens: int
    tokens: int
    approximate_tokens: bool
    seconds: float
    model_seconds: float
    llm_calls: int
    calls_by_purpose: dict[str, int]
    n_candidates: int
    decision: str
    vote_record: list[dict]
    selection_failed: bool = False
    cause: str = ""


def aggregate(rows: Sequence[QuestionRow]) -> dict:
    """Report-level numbers; always recomputable from the rows alone."""
    if not rows:
        raise EmptyReport("report has no rows")
    by_repeat: dict[int, list[QuestionRow]] = {}
    for r in rows:
        by_repeat.setdefault(r.repeat, []).append(r)
    return {
        "questions": len(rows),
        "ex_pct": ex_percentage(sum(r.ex for r in rows), len(rows)),
        "ex_by_repeat": [ex_percentage(sum(r.ex for r in rs), len(rs)) for _, rs in sorted(by_repeat.items())],
        "tokens_per_query": _mean([r.tokens for r in rows]),
        "seconds_per_query": _mean([r.seconds for r in rows]),
        "calls_per_query": _mean([r.llm_calls for r in rows]),
        "approximate_tokens": any(r.approximate_tokens for r in rows),
    }


def ex_percentage(correct: int, total: int) -> float:
    if total <= 0:
        raise EmptyReport("no questions to score")
    return _round_half_up(Decimal(100 * correct) / Decimal(total), "0.1")


@dataclass
class RunReport:
    rows: list[QuestionRow]
    config: dict
    seed: int
    gold_issues: list[GoldIssue] = field(default_factory=list)
    # live gateways, one per repeat; never serialized
    gateways: list[LlmGateway] = field(default_factory=list, repr=False, compare=False)

    @property
    def aggregate(self) -> dict:
        return aggregate(self.rows)

    def to_json(self) -> dict:
        return {
            "seed": self.seed,
            "config": self.config,
            "aggregate": self.aggregate,
            "gold_issues": to_record(self.gold_issues),
            "rows": to_record(self.rows),
        }

    def dumps(self) -> str:
        return json.dumps(self.to_json(), indent=2, sort_keys=True, ensure_ascii=False) + "\n"

    def write(self, path: str | Path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        _atomic_write(path, self.dumps())

    @classmethod
    def from_json(cls, data: dict) -> "RunReport":
        rows = [QuestionRow(**r) for r in data["rows"]]
        issues = [GoldIssue(**g) for g in data.get("gold_issues", [])]
        return cls(rows, data.get("config", {}), data.get("seed", 0), issues)

    @classmethod
    def load(cls, path: str | Path) -> "RunReport":
        return cls.from_json(json.loads(Path(path).read_text(encoding="utf-8")))


def compute_ex(report: RunReport) -> float:
    return ex_percentage(sum(r.ex for r in report.rows), len(report.rows))


class SchemaStore:
    """Catalogs and LSH indices per database, read on first use."""

    def __init__(self, executor: SqlExecutor, config: PipelineConfig, index_dir: str | Path | None = None) -> None:
        self.executor = executor
        self.config = config
        self.index_dir = Path(index_dir) if index_dir else None
        self._catalogs: dict[str, SchemaCatalog] = {}
        self._indices: dict[str, SchemaIndex] = {}

    def catalog(self, db_id: str) -> SchemaCatalog:
        if db_id not in self._catalogs:
            self._catalogs[db_id] = read_schema(self.executor.manifest.resolve(db_id), db_id)
        return self._catalogs[db_id]

    def index(self, db_id: str) -> SchemaIndex:
        if db_id not in self._indices:
            saved = self.index_dir / f"{db_id}.lsh.json" if self.index_dir else None
            if saved is not None and saved.exists():
                self._indices[db_id] = SchemaIndex.load(saved)
            else:
                sc = self.config.schema
                self._indices[db_id] = build_index(self.catalog(db_id), sc.num_perm, sc.bands, sc.rows, self.config.seed)
        return self._indices[db_id]

    def full_text(self, db_id: str) -> str:
        return self.catalog(db_id).render()


@dataclass
class Pipeline:
    """Everything one run needs besides the dataset."""

    backend: Backend
    executor: SqlExecutor
    config: PipelineConfig = field(default_factory=PipelineConfig)
    embedder: Embedder = field(default_factory=HashingEmbedder)
    memory: MemoryIndex | None = None
    exemplars: ExemplarStore | None = None
    schema_index_dir: str | Path | None = None
    clock: Callable[[], float] = time.perf_counter
    trace_dir: str | Path | None = None

    def __post_init__(self) -> None:
        self.schemas = SchemaStore(self.executor, self.config, self.schema_index_dir)

    def gateway(self) -> LlmGateway:
        return LlmGateway(self.backend, max_attempts=self.config.llm.max_attempts, clock=self.clock)

    def schema_context(self, question: Question, llm: LlmGateway) -> tuple[str, list[str]]:
        catalog = self.schemas.catalog(question.db_id)
        if not self.config.ablation.schema_linking:
            return catalog.render(), []
        keywords = extract_keywords(question, llm)
        sc = self.config.schema
        linked = link(keywords, self.schemas.index(question.db_id), self.embedder, sc.edit_max, sc.sem_min)
        return catalog.render(linked), [e.qualified_name for e in linked]

    def solve(self, item: DatasetItem, llm: LlmGateway, repeat: int = 0) -> tuple[QuestionRow, dict]:
        cfg = self.config
        question = item.as_question()
        llm.open_question(question.id)
        start = self.clock()
        trace: dict[str, Any] = {"question_id": question.id, "db_id": question.db_id, "repeat": repeat}
        final_sql, ex, cause, failed = "", False, "", False
        vote_record: list[dict] = []
        n_candidates = 0
        decision = ""
        try:
            schema_ctx, linked = self.schema_context(question, llm)
            trace["linked"] = linked
            options = GenerationOptions(
                react_reflect=cfg.ablation.react_reflect,
                multi_style=cfg.ablation.multi_style,
                final_icl=cfg.ablation.final_icl,
                structured_decomposition=cfg.ablation.structured_decomposition,
                single_style=Style(cfg.single_style),
                icl_n=cfg.icl_exemplars,
                seed=cfg.seed + repeat,
                path_workers=cfg.path_workers,
            )
            gen = generate_all(question, schema_ctx, llm, self.executor, self.embedder, self.exemplars, options)
            decision = gen.decision.value
            n_candidates = len(gen.candidates)
            trace["decision"] = decision
            trace["traces"] = to_record(gen.traces)
            trace["generation_failures"] = gen.failures
            trace["candidates"] = to_record(gen.candidates)
            if not gen.candidates:
                raise RuntimeError("no candidates generated")
            finals = gen.candidates
            if cfg.ablation.refinement and cfg.max_rounds > 0:
                policy = ExemplarPolicy(cfg.policy.mode, cfg.policy.k, cfg.memory.top_k, cfg.memory.max_exemplars)

                def loop(c):
                    return refine_loop(
                        c, question, self.memory, llm, policy, self.embedder, self.executor,
                        schema_ctx, cfg.max_rounds, cfg.seed + repeat,
                    )

                if cfg.path_workers > 1:
                    with ThreadPoolExecutor(max_workers=cfg.path_workers) as pool:
                        results = list(pool.map(loop, gen.candidates))
                else:
                    results = [loop(c) for c in gen.candidates]
                trace["refinement"] = [
                    {"slot": r.candidate.slot, "stopped": r.stopped, "rounds": to_record(r.rounds)} for r in results
                ]
                finals = [r.candidate for r in results]
            selection, outcomes = select(finals, self.executor, question.db_id, cfg.empty_policy)
            trace["final_candidates"] = to_record(finals)
            trace["outcomes"] = to_record(outcomes)
            trace["empty_policy"] = cfg.empty_policy
            trace["row_semantics"] = self.executor.row_semantics
            final_sql, vote_record, failed = selection.final_sql, selection.vote_record, selection.failed
            ex = self.executor.ex_match(final_sql, item.gold_sql, question.db_id)
        except Exception as exc:  # one bad question never aborts the run
            log.warning("question %s failed: %s", question.id, exc)
            cause = f"{type(exc).__name__}: {exc}"
        seconds = self.clock() - start
        llm.close_question(question.id, seconds)
        ledger = llm.usage_ledger(question.id)
        trace.update(final_sql=final_sql, vote_record=vote_record, ex=ex, cause=cause)
        row = QuestionRow(
            question.id,
            question.db_id,
            repeat,
            final_sql,
            ex,
            ledger.usage.prompt_tokens,
            ledger.usage.completion_tokens,
            ledger.usage.total,
            ledger.approximate,
            round(seconds, 6),
            round(ledger.model_seconds, 6),
            ledger.calls,
            dict(sorted(llm.call_counts(question.id).items())),
            n_candidates,
            decision,
            vote_record,
            failed,
            cause,
        )
        return row, trace


def trace_path(trace_dir: str | Path, question_id: str, repeat: int) -> Path:
    return Path(trace_dir) / f"{question_id}.r{repeat}.json"


def run(dataset: Sequence[DatasetItem], pipeline: Pipeline) -> RunReport:
    """Every question through the full pipeline, ``config.repeat`` times."""
    cfg = pipeline.config
    gold_issues = validate_gold(dataset, pipeline.executor)
    rows: list[QuestionRow] = []
    gateways = []
    for repeat in range(cfg.repeat):
        llm = pipeline.gateway()
        gateways.append(llm)
        if cfg.workers > 1:
            with ThreadPoolExecutor(max_workers=cfg.workers) as pool:
                results = list(pool.map(lambda it: pipeline.solve(it, llm, repeat), dataset))
        else:
            results = [pipeline.solve(it, llm, repeat) for it in dataset]
        for row, trace in results:
            rows.append(row)
            if pipeline.trace_dir is not None:
                path = trace_path(pipeline.trace_dir, row.question_id, repeat)
                path.parent.mkdir(parents=True, exist_ok=True)
                _atomic_write(path, json.dumps(trace, indent=2, sort_keys=True, ensure_ascii=False) + "\n")
    return RunReport(rows, cfg.to_dict(), cfg.seed, gold_issues, gateways)


def replay_trace(trace: dict | str | Path) -> str:
    """Re-run the vote over a persisted trace's recorded outcomes; returns the elected SQL."""
    if not isinstance(trace, dict):
        trace = json.loads(Path(trace).read_text(encoding="utf-8"))
    if "final_candidates" not in trace:
        return trace.get("final_sql", "")
    candidates = [candidate_from_record(c) for c in trace["final_candidates"]]
    outcomes = [outcome_from_record(o) for o in trace["outcomes"]]
    return vote(candidates, outcomes, trace["empty_policy"], trace["row_semantics"]).final_sql


def ledger_tokens(llm: LlmGateway, question_ids: Sequence[str]) -> TokenUsage:
    return TokenUsage.sum(llm.usage_ledger(q).usage for q in question_ids)
