"""Memory-guided critic/refine loop and result-class majority voting."""

from __future__ import annotations

import hashlib
import logging
import random
from dataclasses import dataclass, field
from typing import Sequence

from .core import (
    CandidateSql,
    ErrorType,
    ExecutionOutcome,
    Question,
    ResultKind,
    error_codes,
    result_class,
    scan_error_types,
)
from .embedding import Embedder
from .errors import BackendError
from .executor import SqlExecutor
from .llm import ChatRequest, LlmGateway, Purpose
from .memory import DEFAULT_MAX_EXEMPLARS, DEFAULT_TOP_K, TAXONOMY_TEXT, MemoryEntry, MemoryIndex, dedup_filter
from .prompts import render
from .skeleton import key_or_question
from .sqltext import extract_sql, fence, render_outcome

log = logging.getLogger(__name__)

POLICY_MODES = ("filtered", "top_k_unfiltered", "random_k", "none_direct")


@dataclass(frozen=True)
class CriticVerdict:
    has_error: bool
    error_types: frozenset[ErrorType] = frozenset()
    suggestions: str = ""
    # set when the reply could not be read and was passed through as clean
    unparsed: bool = False

    def __post_init__(self) -> None:
        if self.has_error != bool(self.error_types):
            raise ValueError("has_error must hold exactly when error_types is non-empty")


@dataclass(frozen=True)
class ExemplarPolicy:
    mode: str = "filtered"
    k: int = 4
    top_k: int = DEFAULT_TOP_K
    max_exemplars: int = DEFAULT_MAX_EXEMPLARS

    def __post_init__(self) -> None:
        if self.mode not in POLICY_MODES:
            raise ValueError(f"unknown exemplar policy {self.mode!r}")
        if self.mode != "none_direct" and self.k < 1:
            raise ValueError("k must be >= 1")


def parse_verdict(reply: str) -> CriticVerdict:
    text = reply.strip()
    if text.upper().startswith("NO_ERROR") or text.upper().startswith("NO ERROR"):
        return CriticVerdict(False)
    head = text.partition("|")[0]
    types = scan_error_types(head) or scan_error_types(text)
    if types:
        return CriticVerdict(True, types, text)
    return CriticVerdict(False, unparsed=True)


def _seed_for(*parts: object) -> int:
    raw = ":".join(str(p) for p in parts).encode("utf-8")
    return int.from_bytes(hashlib.blake2b(raw, digest_size=8).digest(), "little")


def select_exemplars(
    question: Question,
    sql: str,
    memory: MemoryIndex | None,
    embedder: Embedder | None,
    policy: ExemplarPolicy,
    rng_seed: int = 0,
) -> list[MemoryEntry]:
    """Exemplars for one critic round; the key is rebuilt from the SQL under review."""
    if policy.mode == "none_direct" or memory is None or len(memory) == 0:
        return []
    if policy.mode == "random_k":
        items = list(memory.items)
        return random.Random(rng_seed).sample(items, min(policy.k, len(items)))
    key = key_or_question(question, sql)
    if policy.mode == "top_k_unfiltered":
        return [e for e, _ in memory.retrieve(key, embedder, policy.k)]
    ranked = [e for e, _ in memory.retrieve(key, embedder, policy.top_k)]
    return dedup_filter(ranked, policy.max_exemplars)


def _render_memory(entries: Sequence[MemoryEntry]) -> str:
    if not entries:
        return ""
    blocks = ["Reference cases:"]
    for i, e in enumerate(entries, 1):
        blocks.append(
            f"[{i}] Question: {e.q}\nWrong SQL:\n{fence(e.s_minus)}\nError types: {', '.join(error_codes(e.error_types))}\n"
            f"Correct SQL:\n{fence(e.s_plus)}\nFix: {e.suggestions}"
        )
    return "\n".join(blocks) + "\n"


def critic(
    candidate: CandidateSql,
    exemplars: Sequence[MemoryEntry],
    llm: LlmGateway,
    question: Question,
    schema_ctx: str = "",
    outcome: ExecutionOutcome | None = None,
) -> CriticVerdict:
    prompt, tid = render(
        "critic",
        taxonomy=TAXONOMY_TEXT,
        schema=schema_ctx,
        exemplars=_render_memory(exemplars),
        question=question.text,
        evidence=question.evidence or "none",
        sql=fence(candidate.sql),
        observation=render_outcome(outcome) if outcome is not None else "not executed",
    )
    reply = llm.complete(ChatRequest.simple(prompt, Purpose.CRITIC, question_id=question.id, template_id=tid)).text
    verdict = parse_verdict(reply)
    if verdict.unparsed:
        log.warning("unreadable critic reply for %s %s, treating as clean: %r", question.id, candidate.slot, reply[:80])
    return verdict


def refine(
    candidate: CandidateSql,
    verdict: CriticVerdict,
    llm: LlmGateway,
    question: Question,
    schema_ctx: str = "",
    attempts: int = 2,
) -> CandidateSql | None:
    """Corrected candidate one generation later, or ``None`` if no SQL came back."""
    return _refine_counted(candidate, verdict, llm, question, schema_ctx, attempts)[0]


def _refine_counted(
    candidate: CandidateSql,
    verdict: CriticVerdict,
    llm: LlmGateway,
    question: Question,
    schema_ctx: str,
    attempts: int,
) -> tuple[CandidateSql | None, int]:
    if not verdict.has_error:
        raise ValueError("refine needs a verdict that found an error")
    prompt, tid = render(
        "refine",
        schema=schema_ctx,
        question=question.text,
        evidence=question.evidence or "none",
        sql=fence(candidate.sql),
        error_types=", ".join(f"{t.code} ({t.display_name})" for t in sorted(verdict.error_types, key=lambda t: t.code)),
        suggestions=verdict.suggestions or "none",
    )
    request = ChatRequest.simple(prompt, Purpose.REFINE, question_id=question.id, template_id=tid)
    for n in range(1, attempts + 1):
        response = llm.complete(request)
        sql = extract_sql(response.text)
        if sql:
            return CandidateSql(
                candidate.question_id,
                candidate.strategy,
                candidate.style,
                sql,
                candidate.generation + 1,
                candidate.tokens + response.usage,
                False,
                candidate.path,
            ), n
    return None, attempts


@dataclass
class RefineRound:
    round: int
    sql: str
    exemplar_ids: list[str]
    verdict: CriticVerdict
    refined_sql: str | None = None


@dataclass
class RefineResult:
    candidate: CandidateSql
    rounds: list[RefineRound] = field(default_factory=list)
    stopped: str = "clean"  # clean | cap | no_sql | backend_error


def refine_loop(
    candidate: CandidateSql,
    question: Question,
    memory: MemoryIndex | None,
    llm: LlmGateway,
    policy: ExemplarPolicy,
    embedder: Embedder | None = None,
    executor: SqlExecutor | None = None,
    schema_ctx: str = "",
    max_rounds: int = 3,
    seed: int = 0,
) -> RefineResult:
    """Critic then refine until the critic is satisfied or ``max_rounds`` rounds pass.

    At most ``max_rounds`` critic calls and ``max_rounds`` refine calls are
    spent; a refine retry for a missing SQL block draws from the same budget.
    """
    current = candidate
    rounds: list[RefineRound] = []
    refine_calls = 0
    for r in range(1, max_rounds + 1):
        try:
            exemplars = select_exemplars(
                question, current.sql, memory, embedder, policy, _seed_for(seed, question.id, current.slot, r)
            )
            outcome = executor.execute(question.db_id, current.sql) if executor is not None else None
            verdict = critic(current, exemplars, llm, question, schema_ctx, outcome)
        except BackendError as exc:
            log.warning("critic failed for %s %s: %s", question.id, current.slot, exc)
            return RefineResult(current, rounds, "backend_error")
        record = RefineRound(r, current.sql, [e.question_id for e in exemplars], verdict)
        rounds.append(record)
        if not verdict.has_error:
            return RefineResult(current, rounds, "clean")
        budget = max_rounds - refine_calls
        if budget <= 0:
            return RefineResult(current, rounds, "cap")
        try:
            refined, used = _refine_counted(current, verdict, llm, question, schema_ctx, min(2, budget))
        except BackendError as exc:
            log.warning("refine failed for %s %s: %s", question.id, current.slot, exc)
            return RefineResult(current, rounds, "backend_error")
        refine_calls += used
        if refined is None:
            return RefineResult(current, rounds, "no_sql")
        record.refined_sql = refined.sql
        current = refined
    return RefineResult(current, rounds, "cap")


@dataclass
class Selection:
    final_sql: str
    winner: CandidateSql
    vote_record: list[dict]
    failed: bool = False


def _vote(
    candidates: Sequence[CandidateSql],
    outcomes: Sequence[ExecutionOutcome],
    empty_policy: str,
    semantics: str,
) -> Selection:
    if not candidates:
        raise ValueError("select needs at least one candidate")
    if len(candidates) != len(outcomes):
        raise ValueError("one outcome per candidate required")
    if empty_policy not in ("keep", "discard_empty"):
        raise ValueError(f"unknown empty policy {empty_policy!r}")
    classes = [result_class(o, semantics) for o in outcomes]

    groups: dict[str, list[int]] = {}
    for i, cls in enumerate(classes):
        groups.setdefault(cls.fingerprint, []).append(i)

    def members_key(fp: str) -> tuple:
        return min(candidates[i].order_key() for i in groups[fp])

    record = []
    for fp in sorted(groups, key=lambda f: (-len(groups[f]), members_key(f))):
        idx = sorted(groups[fp], key=lambda i: candidates[i].order_key())
        record.append(
            {
                "class": fp,
                "kind": classes[idx[0]].kind.value,
                "count": len(idx),
                "members": [candidates[i].slot for i in idx],
            }
        )

    survivors = [fp for fp in groups if classes[groups[fp][0]].kind is not ResultKind.ERROR]
    if empty_policy == "discard_empty":
        non_empty = [fp for fp in survivors if classes[groups[fp][0]].kind is not ResultKind.EMPTY]
        survivors = non_empty or survivors
    if not survivors:
        # every candidate failed: keep the longest SQL, earliest slot on ties
        best = min(range(len(candidates)), key=lambda i: (-len(candidates[i].sql), candidates[i].order_key()))
        return Selection(candidates[best].sql, candidates[best], record, failed=True)

    winner_fp = min(survivors, key=lambda f: (-len(groups[f]), members_key(f)))
    best = min(groups[winner_fp], key=lambda i: candidates[i].order_key())
    for row in record:
        row["winner"] = row["class"] == winner_fp
    return Selection(candidates[best].sql, candidates[best], record)


def select(
    candidates: Sequence[CandidateSql],
    executor: SqlExecutor,
    db_id: str,
    empty_policy: str = "keep",
) -> tuple[Selection, list[ExecutionOutcome]]:
    """Execute every candidate and elect the largest surviving result class."""
    outcomes = [executor.execute(db_id, c.sql) for c in candidates]
    return _vote(candidates, outcomes, empty_policy, executor.row_semantics), outcomes


def vote(
    candidates: Sequence[CandidateSql],
    outcomes: Sequence[ExecutionOutcome],
    empty_policy: str = "keep",
    semantics: str = "multiset",
) -> Selection:
    """Voting over already-recorded outcomes; used for trace replay."""
    return _vote(candidates, outcomes, empty_policy, semantics)
