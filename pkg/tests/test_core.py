from __future__ import annotations

import json

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sqlrecall.core import (
    CandidateSql,
    ErrorType,
    ExecutionOutcome,
    Question,
    ResultKind,
    Status,
    Strategy,
    Style,
    TokenUsage,
    candidate_from_record,
    outcome_from_record,
    parse_error_types,
    result_class,
    scan_error_types,
    subsumes,
    to_record,
)
from sqlrecall.errors import UnknownErrorType

error_sets = st.frozensets(st.sampled_from(list(ErrorType)))
usages = st.builds(TokenUsage, st.integers(0, 10**6), st.integers(0, 10**6))


def test_error_type_parsing_accepts_codes_and_names():
    assert ErrorType.parse("E4") is ErrorType.E4
    assert ErrorType.parse("select output error") is ErrorType.E4
    assert ErrorType.parse("E4: Select Output Error") is ErrorType.E4
    assert len(list(ErrorType)) == 9
    with pytest.raises(UnknownErrorType):
        ErrorType.parse("E10")


def test_scan_error_types_from_free_text():
    assert scan_error_types("E2, E4 | fix both") == {ErrorType.E2, ErrorType.E4}
    assert scan_error_types("nothing here E10") == frozenset()
    assert parse_error_types(["E1", "E1"]) == {ErrorType.E1}


@given(error_sets, error_sets)
def test_subsumes_is_subset(a, b):
    assert subsumes(a, b) == (b <= a)


@given(error_sets)
def test_subsumes_reflexive(a):
    assert subsumes(a, a)


@given(error_sets, error_sets, error_sets)
def test_subsumes_transitive(a, b, c):
    if subsumes(a, b) and subsumes(b, c):
        assert subsumes(a, c)


@given(usages, usages, usages)
def test_token_usage_associative(a, b, c):
    assert (a + b) + c == a + (b + c)
    assert TokenUsage.sum([a, b, c]).total == a.total + b.total + c.total


def test_token_usage_rejects_negative():
    with pytest.raises(ValueError):
        TokenUsage(-1, 0)


def test_question_requires_text():
    with pytest.raises(ValueError):
        Question("q", "db", "  ")


def test_candidate_order_key_and_roundtrip():
    a = CandidateSql("q", Strategy.TABLE_WISE, Style.NESTED, "SELECT 1")
    b = CandidateSql("q", Strategy.HIERARCHICAL, Style.CTE, "SELECT 1")
    c = CandidateSql("q", Strategy.TABLE_WISE, Style.CTE, "SELECT 1", generation=1)
    assert sorted([c, b, a], key=CandidateSql.order_key) == [a, b, c]
    rec = json.loads(json.dumps(to_record(c)))
    assert candidate_from_record(rec) == c
    with pytest.raises(ValueError):
        CandidateSql("q", Strategy.TABLE_WISE, Style.CTE, "")


def test_outcome_invariants():
    with pytest.raises(ValueError):
        ExecutionOutcome(Status.OK)
    with pytest.raises(ValueError):
        ExecutionOutcome(Status.EMPTY, rows=((1,),))
    assert ExecutionOutcome.from_rows([]).status is Status.EMPTY
    o = ExecutionOutcome.from_rows([(1.0, None), (2.5, "x")])
    assert o.rows == ((1, None), (2.5, "x"))
    assert outcome_from_record(to_record(o)) == o


def test_result_class_kinds():
    assert result_class(ExecutionOutcome(Status.EMPTY)).kind is ResultKind.EMPTY
    err = result_class(ExecutionOutcome(Status.PARSE_ERROR, message="x"))
    assert err.kind is ResultKind.ERROR and err.fingerprint == "error:parse"
    rows = result_class(ExecutionOutcome.from_rows([(1,)]))
    assert rows.kind is ResultKind.ROWS and rows.fingerprint.startswith("rows:")


def test_result_class_set_vs_multiset():
    dup = ExecutionOutcome.from_rows([(1,), (1,)])
    one = ExecutionOutcome.from_rows([(1,)])
    assert result_class(dup) != result_class(one)
    assert result_class(dup, "set") == result_class(one, "set")


cells = st.one_of(st.none(), st.integers(-50, 50), st.sampled_from(["a", "b", "c"]), st.sampled_from([0.5, 1.25]))


@settings(max_examples=150)
@given(st.integers(1, 4).flatmap(lambda n: st.lists(st.tuples(*[cells] * n), min_size=1, max_size=8)), st.randoms())
def test_result_class_invariant_to_row_and_column_order(rows, rnd):
    ncols = len(rows[0])
    perm = list(range(ncols))
    rnd.shuffle(perm)
    shuffled = [tuple(r[c] for c in perm) for r in rows]
    rnd.shuffle(shuffled)
    a = result_class(ExecutionOutcome.from_rows(rows))
    b = result_class(ExecutionOutcome.from_rows(shuffled))
    assert a == b


def test_result_class_numeric_normalization():
    a = result_class(ExecutionOutcome.from_rows([(1.0000001,)]))
    b = result_class(ExecutionOutcome.from_rows([(1,)]))
    assert a == b
