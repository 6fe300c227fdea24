from __future__ import annotations

import math
import random
import threading

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import scripted
from sqlrecall.core import ErrorType, Question
from sqlrecall.errors import EmbedderMismatch
from sqlrecall.memory import (
    ExemplarStore,
    MemoryEntry,
    MemoryIndex,
    append,
    build_offline,
    dedup_filter,
    parse_annotation,
    pick_representative,
    retrieve,
)
from sqlrecall.skeleton import make_key

E = ErrorType


class TableEmbedder:
    """Maps exact texts to fixed vectors; anything else maps to ``default``."""

    def __init__(self, dim, table=None, default=None, fingerprint="table"):
        self.dim = dim
        self.table = table or {}
        self.default = default if default is not None else np.ones(dim)
        self._fp = fingerprint

    @property
    def fingerprint(self):
        return self._fp

    def embed(self, texts):
        return np.array([self.table.get(t, self.default) for t in texts], dtype=float)


def entry(types, vector, qid="", q="q", wrong="SELECT a FROM t"):
    return MemoryEntry(q, "SELECT b FROM t", wrong, frozenset(types), "fix", make_key(q, wrong), tuple(vector), qid)


def oracle_top_k(vectors, query, k):
    """Full-scan cosine in pure Python; ties keep insertion order."""

    def cos(a, b):
        dot = sum(x * y for x, y in zip(a, b))
        na = math.sqrt(sum(x * x for x in a))
        nb = math.sqrt(sum(y * y for y in b))
        return 0.0 if na == 0 or nb == 0 else dot / (na * nb)

    scored = [(cos(v, query), i) for i, v in enumerate(vectors)]
    scored.sort(key=lambda s: (-s[0], s[1]))
    return [i for _, i in scored[:k]]


def oracle_dedup(types, max_n):
    kept = []
    for t in types:
        if len(kept) == max_n:
            break
        if not any(t.issubset(k) for k in kept):
            kept.append(t)
    return kept


def test_entry_invariants():
    with pytest.raises(ValueError):
        entry([], [1.0, 0.0])
    with pytest.raises(ValueError):
        entry([E.E1], [float("nan"), 0.0])


def test_orthogonal_ranking():
    idx = MemoryIndex("table", 3)
    for i in range(3):
        v = [0.0] * 3
        v[i] = 1.0
        idx.append(entry([E.E1], v, qid=str(i)))
    emb = TableEmbedder(3, default=np.array([0.0, 1.0, 0.0]))
    ranked = retrieve("anything", idx, emb, k=40)
    assert ranked[0][0].question_id == "1" and ranked[0][1] == pytest.approx(1.0)
    assert len(ranked) == 3


def test_retrieve_matches_full_scan_oracle():
    rng = np.random.default_rng(0)
    vecs = rng.normal(size=(100, 16))
    idx = MemoryIndex("table", 16, [entry([E.E1], v, qid=str(i)) for i, v in enumerate(vecs)])
    q = rng.normal(size=16)
    got = [int(e.question_id) for e, _ in retrieve("x", idx, TableEmbedder(16, default=q), k=40)]
    assert got == oracle_top_k(vecs.tolist(), q.tolist(), 40)


def test_retrieve_refuses_other_embedder():
    idx = MemoryIndex("table", 2, [entry([E.E1], [1.0, 0.0])])
    with pytest.raises(EmbedderMismatch):
        retrieve("x", idx, TableEmbedder(2, fingerprint="other"))


def test_empty_index_returns_empty():
    assert retrieve("x", MemoryIndex("table", 2), TableEmbedder(2)) == []


def test_dedup_examples():
    ranked = [entry(t, [1, 0]) for t in ([E.E2], [E.E2], [E.E1, E.E2], [E.E1])]
    assert [e.error_types for e in dedup_filter(ranked)] == [{E.E2}, {E.E1, E.E2}]
    assert len(dedup_filter([entry([E.E4], [1, 0]) for _ in range(6)])) == 1
    incomparable = [entry([list(E)[i]], [1, 0]) for i in range(9)]
    assert dedup_filter(incomparable) == incomparable[:5]


type_sets = st.frozensets(st.sampled_from(list(E)), min_size=1, max_size=4)


@given(st.lists(type_sets, max_size=15), st.integers(1, 8))
def test_dedup_properties(types, max_n):
    ranked = [entry(t, [1, 0]) for t in types]
    out = dedup_filter(ranked, max_n)
    assert [e.error_types for e in out] == oracle_dedup(types, max_n)
    it = iter(ranked)
    assert all(any(o is r for r in it) for o in out)  # ordered sublist
    for i in range(len(out)):
        for j in range(i + 1, len(out)):
            assert not out[j].error_types <= out[i].error_types


def test_append_self_retrieval_and_duplicates(embedder):
    idx = MemoryIndex.empty_for(embedder)
    q = Question("q1", "db", "how many users")
    from sqlrecall.memory import make_entry

    e1 = make_entry(q, "SELECT COUNT(*) FROM users", "SELECT COUNT(id) FROM users", frozenset({E.E3}), "x", embedder)
    append(e1, idx)
    append(e1, idx)
    other = make_entry(Question("q2", "db", "list cities"), "SELECT city FROM t", "SELECT name FROM t",
                       frozenset({E.E4}), "y", embedder)
    append(other, idx)
    ranked = retrieve(e1.key, idx, embedder)
    assert ranked[0][0] is e1 and ranked[1][0] is e1
    assert ranked[0][1] == pytest.approx(1.0)
    with pytest.raises(EmbedderMismatch):
        idx.append(entry([E.E1], [1.0, 0.0]))


def test_persist_roundtrip_bit_exact(tmp_path, embedder, toy_memory):
    path = tmp_path / "mem.jsonl"
    toy_memory.save(path)
    loaded = MemoryIndex.load(path)
    for text in ("How many students?", "price of lamp", "teacher"):
        a = [(e.question_id, s) for e, s in retrieve(text, toy_memory, embedder)]
        b = [(e.question_id, s) for e, s in retrieve(text, loaded, embedder)]
        assert a == b


def test_concurrent_appends_and_reads():
    idx = MemoryIndex("table", 2)
    emb = TableEmbedder(2)

    def writer(n):
        for i in range(50):
            idx.append(entry([E.E1], [1.0, float(i)], qid=f"{n}-{i}"))

    def reader():
        for _ in range(50):
            for e, s in retrieve("x", idx, emb, k=1000):
                assert len(e.vector) == 2

    threads = [threading.Thread(target=writer, args=(n,)) for n in range(4)] + [threading.Thread(target=reader)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert len(idx) == 200


def test_exemplar_store_excludes_self(embedder):
    store = ExemplarStore.build([("a", "count users", "SELECT COUNT(*) FROM users"),
                                 ("b", "count orders", "SELECT COUNT(*) FROM orders")], embedder)
    hits = store.retrieve("count users [SEP] SELECT COUNT ( * ) FROM _", embedder, 5, exclude_question_id="a")
    assert [e.question_id for e, _ in hits] == ["b"]


def test_parse_annotation_and_representative():
    assert parse_annotation("E2 | tighten WHERE") == (frozenset({E.E2}), "tighten WHERE")
    assert parse_annotation("no idea") is None
    gold = "SELECT a FROM t WHERE b = 1"
    assert pick_representative(["SELECT COUNT(*) FROM t GROUP BY a", "SELECT a FROM t WHERE b > 1"], gold) == \
        "SELECT a FROM t WHERE b > 1"


class Item:
    def __init__(self, qid, db, q, gold):
        self.question_id, self.db_id, self.question, self.evidence, self.gold_sql = qid, db, q, "", gold


def test_build_offline_keeps_semantic_failures_only(executor, embedder):
    gold = "SELECT name FROM students WHERE grade = 10"
    llm = scripted(
        [
            {"purpose_tag": "synthesize", "matcher": "Attempt 1 of", "response": "```sql\nSELEC name FROM students\n```"},
            {"purpose_tag": "synthesize", "matcher": "Attempt 2 of", "response": f"```sql\n{gold}\n```"},
            {"purpose_tag": "synthesize", "matcher": "Attempt 3 of",
             "response": "```sql\nSELECT name FROM students WHERE grade = 11\n```"},
            {"purpose_tag": "synthesize", "response": "```sql\nSELECT name FROM students WHERE grade = 11\n```"},
            {"purpose_tag": "annotate_memory", "response": "E2 | tighten WHERE"},
        ]
    )
    report = build_offline([Item("t1", "school", "Who is in grade 10?", gold)], llm, executor, embedder,
                           lambda db: "schema", k_candidates=4)
    assert len(report.entries) == 1
    e = report.entries[0]
    assert e.error_types == {E.E2} and e.suggestions == "tighten WHERE"
    assert e.s_minus == "SELECT name FROM students WHERE grade = 11"
    assert not executor.ex_match(e.s_minus, e.s_plus, "school")
    assert len(e.vector) == embedder.dim


def test_build_offline_skips_items_without_failures(executor, embedder):
    gold = "SELECT name FROM students WHERE grade = 10"
    llm = scripted([{"purpose_tag": "synthesize", "response": f"```sql\n{gold}\n```"},
                    {"purpose_tag": "synthesize", "response": "x"}])
    bad = Item("t2", "school", "q", "SELECT nope FROM students")
    report = build_offline([Item("t1", "school", "Who?", gold), bad], llm, executor, embedder, lambda db: "")
    assert report.entries == []
    assert [s[0] for s in report.skipped] == ["t1", "t2"]


def test_build_offline_survives_backend_errors(executor, embedder):
    llm = scripted([])
    report = build_offline([Item("t1", "school", "Who?", "SELECT 1")], llm, executor, embedder, lambda db: "")
    assert report.entries == [] and report.skipped[0][0] == "t1"


def test_random_ties_resolve_by_insertion_order():
    rng = random.Random(1)
    base = [rng.choice([[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]]) for _ in range(60)]
    idx = MemoryIndex("table", 2, [entry([E.E1], v, qid=str(i)) for i, v in enumerate(base)])
    got = [int(e.question_id) for e, _ in retrieve("x", idx, TableEmbedder(2, default=np.array([1.0, 0.0])), k=40)]
    assert got == oracle_top_k(base, [1.0, 0.0], 40)
