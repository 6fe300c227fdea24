from __future__ import annotations

import hashlib
import itertools
import json
import sqlite3
from concurrent.futures import ThreadPoolExecutor

import pytest

import toy
from sqlrecall.core import Status
from sqlrecall.errors import UnknownDatabase
from sqlrecall.executor import DatabaseManifest, SqlExecutor, classify_statement


def _norm(v):
    if isinstance(v, float):
        r = round(v, 6)
        return int(r) if r.is_integer() else r
    return v


def sort_and_compare(path, pred, gold) -> bool:
    """Independent EX oracle: plain sqlite3, sorted rows, any column permutation of pred."""

    def rows(sql):
        conn = sqlite3.connect(f"file:{path}?mode=ro", uri=True)
        try:
            return [tuple(_norm(v) for v in r) for r in conn.execute(sql).fetchall()]
        finally:
            conn.close()

    try:
        p, g = rows(pred), rows(gold)
    except sqlite3.Error:
        return False
    if not p or not g:
        return not p and not g
    if len(p[0]) != len(g[0]):
        return False
    key = lambda r: [(type(v).__name__ if v is not None else "", str(v)) for v in r]  # noqa: E731
    target = sorted(g, key=key)
    return any(sorted([tuple(r[i] for i in perm) for r in p], key=key) == target
               for perm in itertools.permutations(range(len(p[0]))))


def checksum(path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def test_basic_outcomes(executor):
    assert executor.execute("school", "SELECT 1").rows == ((1,),)
    assert executor.execute("school", "SELEC 1").status is Status.PARSE_ERROR
    assert executor.execute("school", "SELECT id FROM students WHERE 1=0").status is Status.EMPTY
    assert executor.execute("school", "SELECT nope FROM students").status is Status.RUNTIME_ERROR


def test_unknown_database(executor):
    with pytest.raises(UnknownDatabase):
        executor.execute("nope", "SELECT 1")


@pytest.mark.parametrize(
    "sql",
    [
        "DELETE FROM students",
        "UPDATE students SET grade = 1",
        "DROP TABLE students",
        "INSERT INTO classes VALUES (9, 'x', 'y')",
        "WITH x AS (SELECT 1) DELETE FROM students",
        "ATTACH DATABASE ':memory:' AS other",
        "PRAGMA query_only = 0",
        "SELECT 1; DELETE FROM students",
    ],
)
def test_writes_refused_and_db_unchanged(executor, manifest, sql):
    path = manifest.resolve("school")
    before = checksum(path)
    out = executor.execute("school", sql)
    assert out.status.is_error
    assert checksum(path) == before
    assert executor.execute("school", "SELECT COUNT(*) FROM students").rows == ((7,),)


def test_classify_statement():
    assert classify_statement("SELECT 1") is None
    assert classify_statement("SELECT 1;") is None
    assert classify_statement("SELECT 1; SELECT 2").status is Status.PARSE_ERROR
    assert classify_statement("").status is Status.PARSE_ERROR


def test_timeout(manifest):
    ex = SqlExecutor(manifest, timeout_s=0.2)
    out = ex.execute("school", "WITH RECURSIVE r(i) AS (SELECT 1 UNION ALL SELECT i + 1 FROM r) SELECT MAX(i) FROM r")
    assert out.status is Status.TIMEOUT


def test_ex_match_examples(executor):
    gold = "SELECT name FROM students WHERE grade = 10"
    assert executor.ex_match(gold, gold, "school")
    assert executor.ex_match(gold + " ORDER BY name DESC", gold, "school")
    assert not executor.ex_match("SELECT nope FROM students", gold, "school")
    empty = "SELECT name FROM students WHERE 1 = 0"
    assert executor.ex_match(empty, "SELECT name FROM students WHERE grade = 99", "school")


def test_ex_match_three_row_order_oracle(executor, manifest):
    gold = "SELECT title FROM classes"
    pred = "SELECT title FROM classes ORDER BY title DESC"
    assert executor.ex_match(pred, gold, "school") == sort_and_compare(manifest.resolve("school"), pred, gold) is True


def test_ex_match_symmetric_and_agrees_with_oracle(executor, manifest):
    for db_id, pred, gold in toy.ex_pair_suite(120, seed=3):
        got = executor.ex_match(pred, gold, db_id)
        assert got == executor.ex_match(gold, pred, db_id)
        assert got == sort_and_compare(manifest.resolve(db_id), pred, gold), (pred, gold)


def test_set_semantics(manifest):
    ex = SqlExecutor(manifest, row_semantics="set")
    assert ex.ex_match("SELECT teacher FROM classes", "SELECT DISTINCT teacher FROM classes", "school")
    assert not SqlExecutor(manifest).ex_match("SELECT teacher FROM classes", "SELECT DISTINCT teacher FROM classes", "school")


def test_concurrent_reads(executor):
    with ThreadPoolExecutor(8) as pool:
        outs = list(pool.map(lambda _: executor.execute("shop", "SELECT COUNT(*) FROM orders"), range(40)))
    assert {o.rows for o in outs} == {((8,),)}


def test_manifest_json_roundtrip(tmp_path, manifest):
    path = tmp_path / "m.json"
    manifest.to_json(path)
    again = DatabaseManifest.from_json(path)
    assert again.resolve("shop") == manifest.resolve("shop")
    rel = tmp_path / "rel.json"
    rel.write_text(json.dumps({"x": "sub/x.sqlite"}))
    assert DatabaseManifest.from_json(rel).resolve("x") == tmp_path / "sub" / "x.sqlite"
