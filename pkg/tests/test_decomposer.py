from __future__ import annotations

import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import scripted
from sqlrecall.core import Question, Strategy, TokenUsage
from sqlrecall.decomposer import (
    FallbackDecision,
    SubQuestionPlan,
    decompose,
    direct_plan,
    fallback_check,
    parse_numbered_list,
    random_decomposition,
    render_numbered_list,
)
from sqlrecall.llm import LlmGateway, Purpose

SPEND = Question("fig", "shop", "Find customers who spent more than 1000 on Electronics products in 2024")
SHOP_CTX = "customers(id, name, city)\norders(id, customer_id, product_id, amount, order_date)\nproducts(id, name, category)"


def test_tablewise_plan_has_one_sub_question_per_table():
    reply = (
        "1. Which products belong to the Electronics category? (products)\n"
        "2. Which orders placed in 2024 are for those products, and what did they cost? (orders)\n"
        "3. Which customers have a 2024 Electronics total above 1000? (customers)"
    )
    llm = scripted([{"purpose_tag": "decompose", "matcher": "TASK: DECOMPOSE (TABLE-WISE)", "response": reply}])
    plan = decompose(SPEND, SHOP_CTX, Strategy.TABLE_WISE, llm)
    assert plan.strategy is Strategy.TABLE_WISE and not plan.fallback_used
    assert len(plan.sub_questions) == 3
    tables = ["products", "orders", "customers"]
    for sq, table in zip(plan.sub_questions, tables):
        assert f"({table})" in sq
    assert plan.template_id == "decompose_tablewise@v1"


@pytest.mark.parametrize(
    "strategy, marker",
    [
        (Strategy.TABLE_WISE, "TABLE-WISE"),
        (Strategy.HIERARCHICAL, "HIERARCHICAL"),
        (Strategy.ATOMIC_SEQUENTIAL, "ATOMIC SEQUENTIAL"),
    ],
)
def test_numbered_reply_parses_exactly(strategy, marker):
    llm = scripted([{"purpose_tag": "decompose", "matcher": marker, "response": "1. a\n2) b\n3. c"}])
    assert decompose(SPEND, "", strategy, llm).sub_questions == ("a", "b", "c")


def test_prose_twice_falls_back_to_random_split():
    llm = scripted([{"purpose_tag": "decompose", "response": "Let me think about this question in prose."}])
    plan = decompose(SPEND, "", Strategy.HIERARCHICAL, llm, rng_seed=4)
    assert plan.fallback_used and plan.strategy is Strategy.FALLBACK_RANDOM
    assert plan.sub_questions == random_decomposition(SPEND, 4).sub_questions
    assert len(llm.calls(SPEND.id, Purpose.DECOMPOSE)) == 2


def test_prose_then_list_uses_second_reply():
    replies = iter(["no list here", "1. x\n2. y"])

    class Flaky:
        retryable = False

        def send(self, request):
            return next(replies), TokenUsage(1, 1)

    plan = decompose(SPEND, "", Strategy.ATOMIC_SEQUENTIAL, LlmGateway(Flaky()))
    assert plan.sub_questions == ("x", "y") and not plan.fallback_used


def test_non_structured_strategy_rejected():
    with pytest.raises(ValueError):
        decompose(SPEND, "", Strategy.FALLBACK_RANDOM, scripted([]))


@pytest.mark.parametrize(
    "reply, decision",
    [
        ("PROCEED", FallbackDecision.PROCEED),
        ("TOO_SIMPLE: single lookup", FallbackDecision.NO_DECOMPOSITION),
        ("This is ill-specified.", FallbackDecision.RANDOM_DECOMPOSITION),
        ("ILL_SPECIFIED", FallbackDecision.RANDOM_DECOMPOSITION),
        ("hmm", FallbackDecision.PROCEED),
    ],
)
def test_fallback_check_mapping(reply, decision):
    llm = scripted([{"purpose_tag": "decompose", "matcher": "TASK: DECOMPOSABILITY CHECK", "response": reply}])
    assert fallback_check(SPEND, llm) is decision


def test_random_decomposition_deterministic_and_seed_sensitive():
    q = "List students, their classes, and the teachers who teach them"
    assert random_decomposition(q, 1) == random_decomposition(q, 1)
    plans = {random_decomposition(q, s).sub_questions for s in range(10)}
    assert len(plans) >= 2
    for p in plans:
        assert " ".join(p).replace(",", "").split() == q.replace(",", "").split()


def test_random_decomposition_single_clause():
    plan = random_decomposition("How many students are there?", 0)
    assert plan.sub_questions == ("How many students are there?",)
    assert plan.fallback_used


def test_direct_plan_and_plan_invariants():
    p = direct_plan(SPEND)
    assert p.strategy is Strategy.NO_DECOMPOSITION and p.sub_questions == (SPEND.text,)
    with pytest.raises(ValueError):
        SubQuestionPlan(Strategy.TABLE_WISE, ())


@given(st.lists(st.text(alphabet="abc xyz", min_size=1).map(str.strip).filter(bool), min_size=1, max_size=6))
def test_numbered_list_roundtrip(items):
    assert parse_numbered_list(render_numbered_list(items)) == items


def test_parse_numbered_list_none_for_prose():
    assert parse_numbered_list("just words") is None
    assert parse_numbered_list("- a\n* b") == ["a", "b"]
