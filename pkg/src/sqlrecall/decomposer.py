"""Question decomposition under the three structured strategies, with fallback."""

from __future__ import annotations

import enum
import logging
import random
import re
from dataclasses import dataclass

from .core import Question, Strategy
from .llm import ChatRequest, LlmGateway, Purpose
from .prompts import render

log = logging.getLogger(__name__)

_TEMPLATES = {
    Strategy.TABLE_WISE: "decompose_tablewise",
    Strategy.HIERARCHICAL: "decompose_hierarchical",
    Strategy.ATOMIC_SEQUENTIAL: "decompose_atomic",
}
_MARKER_RE = re.compile(r"^\s*(?:(\d+)\s*[.)]|[-*•])\s+(.*\S)\s*$")
_BOUNDARY_RE = re.compile(r",\s*|\s+(?=(?:and|but|or|then|who|which|that|whose|where|whom)\b)", re.I)


@dataclass(frozen=True)
class SubQuestionPlan:
    strategy: Strategy
    sub_questions: tuple[str, ...]
    fallback_used: bool = False
    template_id: str | None = None

    def __post_init__(self) -> None:
        if not self.sub_questions and self.strategy is not Strategy.NO_DECOMPOSITION:
            raise ValueError("plan must contain at least one sub-question")


class FallbackDecision(enum.Enum):
    PROCEED = "proceed"
    RANDOM_DECOMPOSITION = "random_decomposition"
    NO_DECOMPOSITION = "no_decomposition"


def parse_numbered_list(reply: str) -> list[str] | None:
    """Items of a ``1.`` / ``1)`` / ``-`` list; ``None`` when the reply holds no list."""
    items = []
    for line in reply.splitlines():
        m = _MARKER_RE.match(line)
        if m:
            items.append(m.group(2))
    return items or None


def render_numbered_list(items: list[str] | tuple[str, ...]) -> str:
    return "\n".join(f"{i}. {item}" for i, item in enumerate(items, 1))


def fallback_check(question: Question, llm: LlmGateway, schema_ctx: str = "") -> FallbackDecision:
    prompt, tid = render(
        "fallback_check", schema=schema_ctx, question=question.text, evidence=question.evidence or "none"
    )
    reply = llm.complete(ChatRequest.simple(prompt, Purpose.DECOMPOSE, question_id=question.id, template_id=tid)).text
    upper = reply.upper()
    if "TOO_SIMPLE" in upper or "TOO SIMPLE" in upper:
        return FallbackDecision.NO_DECOMPOSITION
    if "ILL_SPECIFIED" in upper or "ILL-SPECIFIED" in upper:
        return FallbackDecision.RANDOM_DECOMPOSITION
    if "PROCEED" not in upper:
        log.info("unrecognized fallback verdict for %s: %r; proceeding", question.id, reply[:60])
    return FallbackDecision.PROCEED


def random_decomposition(question: Question | str, rng_seed: int) -> SubQuestionPlan:
    """Split at 1-2 randomly chosen clause boundaries (commas, conjunctions, relative pronouns)."""
    text = question.text if isinstance(question, Question) else question
    cuts = sorted({m.start() for m in _BOUNDARY_RE.finditer(text) if 0 < m.start() < len(text.rstrip(" ?.!"))})
    if not cuts:
        return SubQuestionPlan(Strategy.FALLBACK_RANDOM, (text.strip(),), fallback_used=True)
    rng = random.Random(rng_seed)
    n = rng.choice([1, 2]) if len(cuts) >= 2 else 1
    chosen = sorted(rng.sample(cuts, n))
    pieces = []
    start = 0
    for cut in chosen + [len(text)]:
        piece = text[start:cut].strip(" ,")
        if piece:
            pieces.append(piece)
        start = cut
    return SubQuestionPlan(Strategy.FALLBACK_RANDOM, tuple(pieces), fallback_used=True)


def direct_plan(question: Question) -> SubQuestionPlan:
    return SubQuestionPlan(Strategy.NO_DECOMPOSITION, (question.text,), fallback_used=True)


def decompose(
    question: Question,
    schema_ctx: str,
    strategy: Strategy,
    llm: LlmGateway,
    rng_seed: int = 0,
) -> SubQuestionPlan:
    """One structured plan; an unparseable reply is retried once, then replaced by a random split."""
    if strategy not in _TEMPLATES:
        raise ValueError(f"{strategy} is not a structured decomposition strategy")
    prompt, tid = render(
        _TEMPLATES[strategy], schema=schema_ctx, question=question.text, evidence=question.evidence or "none"
    )
    for _ in range(2):
        reply = llm.complete(
            ChatRequest.simple(prompt, Purpose.DECOMPOSE, question_id=question.id, template_id=tid)
        ).text
        items = parse_numbered_list(reply)
        if items:
            return SubQuestionPlan(strategy, tuple(items), template_id=tid)
    log.info("decomposition %s for %s unparseable twice; random fallback", strategy.value, question.id)
    plan = random_decomposition(question, rng_seed)
    return SubQuestionPlan(plan.strategy, plan.sub_questions, True, tid)
