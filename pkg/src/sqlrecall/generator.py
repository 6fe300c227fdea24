"""Candidate generation: ReAct+Reflect over each plan, then multi-style synthesis."""

from __future__ import annotations

import hashlib
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

from .core import CandidateSql, ExecutionOutcome, Question, Strategy, STRUCTURED_STRATEGIES, Style
from .decomposer import (
    FallbackDecision,
    SubQuestionPlan,
    decompose,
    direct_plan,
    fallback_check,
    random_decomposition,
    render_numbered_list,
)
from .embedding import Embedder
from .errors import BackendError
from .executor import SqlExecutor
from .llm import ChatRequest, LlmGateway, Purpose
from .memory import ExemplarStore
from .prompts import render
from .skeleton import key_or_question
from .sqltext import extract_sql, fence, render_outcome

log = logging.getLogger(__name__)

STYLE_INSTRUCTIONS = {
    Style.CTE: "Materialize every intermediate result as a named common table expression (WITH ... AS) and select from them.",
    Style.FLAT_JOIN: "Join all tables in one flat query with explicit JOIN clauses; put filters in WHERE or ON. Do not nest queries.",
    Style.NESTED: "Embed auxiliary logic inside the outer query through IN, EXISTS or scalar subqueries.",
}


@dataclass(frozen=True)
class StrategyNote:
    sub_question: str
    reasoning: str
    sub_sql: str
    outcome: ExecutionOutcome
    reflected: bool = False
    revised_sql: str | None = None
    revised_outcome: ExecutionOutcome | None = None

    def __post_init__(self) -> None:
        if (self.revised_sql is None) != (self.revised_outcome is None):
            raise ValueError("revised_sql and revised_outcome go together")

    @property
    def final_sql(self) -> str:
        return self.revised_sql if self.revised_sql is not None else self.sub_sql

    @property
    def final_outcome(self) -> ExecutionOutcome:
        return self.revised_outcome if self.revised_outcome is not None else self.outcome


@dataclass(frozen=True)
class ReasoningTrace:
    strategy: Strategy
    plan: SubQuestionPlan
    notes: tuple[StrategyNote, ...] = ()
    path: int = 0

    @property
    def latest_sub_sql(self) -> str | None:
        for note in reversed(self.notes):
            if note.final_sql.strip():
                return note.final_sql
        return None


def _render_prior(notes: list[StrategyNote] | tuple[StrategyNote, ...]) -> str:
    if not notes:
        return "none"
    blocks = []
    for i, n in enumerate(notes, 1):
        blocks.append(
            f"Step {i}: {n.sub_question}\nReasoning: {n.reasoning or '-'}\nSQL: {n.final_sql}\nResult: {render_outcome(n.final_outcome)}"
        )
    return "\n\n".join(blocks)


def _reasoning_text(reply: str) -> str:
    head = reply.split("```", 1)[0]
    return head.strip()


def react_reflect_step(
    step: str,
    prior_notes: list[StrategyNote] | tuple[StrategyNote, ...],
    question: Question,
    schema_ctx: str,
    llm: LlmGateway,
    executor: SqlExecutor,
    strategy: Strategy,
) -> StrategyNote:
    """Reason and act, observe the execution, reflect, and revise at most once."""
    common = dict(
        strategy=strategy.value,
        schema=schema_ctx,
        question=question.text,
        evidence=question.evidence or "none",
        prior=_render_prior(prior_notes),
        sub_question=step,
    )
    prompt, tid = render("react_reason", **common)
    reply = llm.complete(ChatRequest.simple(prompt, Purpose.REACT_REASON, question_id=question.id, template_id=tid)).text
    sub_sql = extract_sql(reply) or reply.strip()
    outcome = executor.execute(question.db_id, sub_sql)

    prompt, tid = render("react_reflect", sub_sql=sub_sql, observation=render_outcome(outcome), **common)
    reflection = llm.complete(
        ChatRequest.simple(prompt, Purpose.REACT_REFLECT, question_id=question.id, template_id=tid)
    ).text
    revised = extract_sql(reflection)
    if revised is None or revised.strip() == sub_sql.strip():
        return StrategyNote(step, _reasoning_text(reply), sub_sql, outcome, reflected=True)
    revised_outcome = executor.execute(question.db_id, revised)
    return StrategyNote(step, _reasoning_text(reply), sub_sql, outcome, True, revised, revised_outcome)


def run_trace(
    plan: SubQuestionPlan,
    question: Question,
    schema_ctx: str,
    llm: LlmGateway,
    executor: SqlExecutor,
    path: int = 0,
) -> ReasoningTrace:
    notes: list[StrategyNote] = []
    for step in plan.sub_questions:
        notes.append(react_reflect_step(step, notes, question, schema_ctx, llm, executor, plan.strategy))
    return ReasoningTrace(plan.strategy, plan, tuple(notes), path)


def retrieve_icl_exemplars(
    question: Question,
    latest_sub_sql: str | None,
    store: ExemplarStore | None,
    embedder: Embedder,
    n: int = 5,
) -> list[tuple[str, str]]:
    """Top-``n`` correct examples keyed on question + skeleton of the latest sub-SQL; never the question itself."""
    if store is None or len(store) == 0 or n <= 0:
        return []
    key = key_or_question(question, latest_sub_sql)
    hits = store.retrieve(key, embedder, n, exclude_question_id=question.id)
    return [(e.question, e.sql) for e, _ in hits]


def _render_exemplars(exemplars: list[tuple[str, str]]) -> str:
    if not exemplars:
        return ""
    parts = ["Examples:"]
    for q, sql in exemplars:
        parts.append(f"Q: {q}\n{fence(sql)}")
    return "\n".join(parts) + "\n"


def _render_steps(trace: ReasoningTrace) -> str:
    if not trace.notes:
        return render_numbered_list(trace.plan.sub_questions) if trace.plan.sub_questions else "none"
    return _render_prior(trace.notes)


def synthesize(
    question: Question,
    trace: ReasoningTrace,
    exemplars: list[tuple[str, str]],
    style: Style,
    llm: LlmGateway,
    schema_ctx: str = "",
) -> CandidateSql:
    prompt, tid = render(
        "synthesize",
        strategy=trace.strategy.value,
        style=style.value,
        style_instruction=STYLE_INSTRUCTIONS[style],
        schema=schema_ctx,
        exemplars=_render_exemplars(exemplars),
        question=question.text,
        evidence=question.evidence or "none",
        steps=_render_steps(trace),
    )
    request = ChatRequest.simple(prompt, Purpose.SYNTHESIZE, question_id=question.id, template_id=tid)
    tokens = None
    reply = ""
    for _ in range(2):
        response = llm.complete(request)
        tokens = response.usage if tokens is None else tokens + response.usage
        reply = response.text
        sql = extract_sql(reply)
        if sql:
            return CandidateSql(question.id, trace.strategy, style, sql, 0, tokens, path=trace.path)
    if not reply.strip():
        raise BackendError("synthesis returned an empty reply twice")
    log.info("no SQL block in synthesis for %s %s; carrying raw reply", question.id, style.value)
    return CandidateSql(question.id, trace.strategy, style, reply.strip(), 0, tokens, flagged=True, path=trace.path)


def path_seed(seed: int, question_id: str, path: int) -> int:
    raw = f"{seed}:{question_id}:{path}".encode("utf-8")
    return int.from_bytes(hashlib.blake2b(raw, digest_size=8).digest(), "little")


@dataclass
class GenerationOptions:
    react_reflect: bool = True
    multi_style: bool = True
    final_icl: bool = True
    structured_decomposition: bool = True
    single_style: Style = Style.FLAT_JOIN
    icl_n: int = 5
    seed: int = 0
    path_workers: int = 1


@dataclass
class GenerationResult:
    candidates: list[CandidateSql]
    traces: list[ReasoningTrace]
    decision: FallbackDecision
    failures: list[str] = field(default_factory=list)


def random_plans(question: Question, seed: int, n: int = 3) -> list[SubQuestionPlan]:
    """Up to ``n`` distinct seeded random splits; identical splits collapse into one path."""
    plans: list[SubQuestionPlan] = []
    for path in range(n):
        plan = random_decomposition(question, path_seed(seed, question.id, path))
        if all(plan.sub_questions != p.sub_questions for p in plans):
            plans.append(plan)
    return plans


def plan_paths(
    question: Question, schema_ctx: str, llm: LlmGateway, options: GenerationOptions
) -> tuple[FallbackDecision, list[SubQuestionPlan]]:
    decision = fallback_check(question, llm, schema_ctx)
    if decision is FallbackDecision.NO_DECOMPOSITION:
        return decision, [direct_plan(question)]
    if decision is FallbackDecision.RANDOM_DECOMPOSITION or not options.structured_decomposition:
        return decision, random_plans(question, options.seed)
    plans = [
        decompose(question, schema_ctx, strategy, llm, path_seed(options.seed, question.id, i))
        for i, strategy in enumerate(STRUCTURED_STRATEGIES)
    ]
    return decision, plans


def generate_all(
    question: Question,
    schema_ctx: str,
    llm: LlmGateway,
    executor: SqlExecutor,
    embedder: Embedder,
    exemplar_store: ExemplarStore | None = None,
    options: GenerationOptions | None = None,
) -> GenerationResult:
    """Every effective path times every style; per-candidate failures are recorded, not raised."""
    options = options or GenerationOptions()
    decision, plans = plan_paths(question, schema_ctx, llm, options)
    styles = list(Style) if options.multi_style else [options.single_style]

    # paths sharing a strategy tag (random splits) get distinct path indices
    seen: dict[Strategy, int] = {}
    indexed = []
    for plan in plans:
        idx = seen.get(plan.strategy, 0)
        seen[plan.strategy] = idx + 1
        indexed.append((plan, idx))

    def solve(plan: SubQuestionPlan, path: int) -> tuple[ReasoningTrace, list[CandidateSql], list[str]]:
        failures: list[str] = []
        if options.react_reflect and plan.strategy is not Strategy.NO_DECOMPOSITION:
            trace = run_trace(plan, question, schema_ctx, llm, executor, path)
        else:
            trace = ReasoningTrace(plan.strategy, plan, (), path)
        exemplars = []
        if options.final_icl:
            exemplars = retrieve_icl_exemplars(question, trace.latest_sub_sql, exemplar_store, embedder, options.icl_n)
        out = []
        for style in styles:
            try:
                out.append(synthesize(question, trace, exemplars, style, llm, schema_ctx))
            except (BackendError, ValueError) as exc:
                failures.append(f"{plan.strategy.value}#{path}/{style.value}: {exc}")
        return trace, out, failures

    if options.path_workers > 1 and len(indexed) > 1:
        with ThreadPoolExecutor(max_workers=options.path_workers) as pool:
            results = list(pool.map(lambda pi: solve(*pi), indexed))
    else:
        results = [solve(plan, path) for plan, path in indexed]

    candidates: list[CandidateSql] = []
    traces: list[ReasoningTrace] = []
    failures: list[str] = []
    for trace, cands, fails in results:
        traces.append(trace)
        candidates.extend(cands)
        failures.extend(fails)
    return GenerationResult(candidates, traces, decision, failures)
