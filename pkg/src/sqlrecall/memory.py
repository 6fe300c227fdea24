"""Error-correction memory and the correct-example store.

Both stores are flat dense tables searched exhaustively by cosine
similarity; ties resolve by insertion order. The memory holds quintuples
(question, gold SQL, erroneous SQL, error types, suggestions) keyed on the
question plus the skeleton of the erroneous SQL.
"""

from __future__ import annotations

import json
import logging
import os
import tempfile
import threading
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Generic, Iterable, Sequence, TypeVar

import numpy as np

from .core import ErrorType, Question, Status, error_codes, parse_error_types, scan_error_types
from .embedding import Embedder
from .errors import BackendError, EmbedderMismatch, LexError
from .executor import SqlExecutor
from .llm import ChatRequest, LlmGateway, Purpose
from .prompts import render
from .skeleton import RetrievalKey, Skeleton, make_key, skeletonize
from .sqltext import extract_sql

log = logging.getLogger(__name__)

DEFAULT_TOP_K = 40
DEFAULT_MAX_EXEMPLARS = 5
TAXONOMY_TEXT = "; ".join(f"{t.code}: {t.display_name}" for t in ErrorType)


@dataclass(frozen=True)
class MemoryEntry:
    q: str
    s_plus: str
    s_minus: str
    error_types: frozenset[ErrorType]
    suggestions: str
    key: RetrievalKey
    vector: tuple[float, ...]
    question_id: str = ""
    db_id: str = ""

    def __post_init__(self) -> None:
        if not self.error_types:
            raise ValueError("memory entries need at least one error type")
        if not all(np.isfinite(self.vector)):
            raise ValueError("embedding has non-finite entries")

    def to_record(self) -> dict:
        return {
            "question_id": self.question_id,
            "db_id": self.db_id,
            "q": self.q,
            "s_plus": self.s_plus,
            "s_minus": self.s_minus,
            "error_types": error_codes(self.error_types),
            "suggestions": self.suggestions,
            "key": {
                "question_text": self.key.question_text,
                "skeleton": {
                    "text": self.key.skeleton.text,
                    "keyword_sequence": list(self.key.skeleton.keyword_sequence),
                },
                "combined": self.key.combined,
            },
            "vector": list(self.vector),
        }

    @classmethod
    def from_record(cls, rec: dict) -> "MemoryEntry":
        k = rec["key"]
        key = RetrievalKey(k["question_text"], Skeleton(k["skeleton"]["text"], tuple(k["skeleton"]["keyword_sequence"])))
        return cls(
            q=rec["q"],
            s_plus=rec["s_plus"],
            s_minus=rec["s_minus"],
            error_types=parse_error_types(rec["error_types"]),
            suggestions=rec["suggestions"],
            key=key,
            vector=tuple(float(v) for v in rec["vector"]),
            question_id=rec.get("question_id", ""),
            db_id=rec.get("db_id", ""),
        )


@dataclass(frozen=True)
class Exemplar:
    """A correct (question, SQL) experience used as an in-context example."""

    question_id: str
    question: str
    sql: str
    vector: tuple[float, ...]

    def to_record(self) -> dict:
        return {"question_id": self.question_id, "question": self.question, "sql": self.sql, "vector": list(self.vector)}

    @classmethod
    def from_record(cls, rec: dict) -> "Exemplar":
        return cls(rec["question_id"], rec["question"], rec["sql"], tuple(float(v) for v in rec["vector"]))


T = TypeVar("T", MemoryEntry, Exemplar)


def cosine_scores(matrix: np.ndarray, query: np.ndarray) -> np.ndarray:
    """Row-wise cosine; elementwise products keep identical rows bit-identical."""
    if matrix.shape[0] == 0:
        return np.zeros(0)
    norms = np.sqrt((matrix * matrix).sum(axis=1))
    qnorm = float(np.sqrt((query * query).sum()))
    dots = (matrix * query[None, :]).sum(axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        sims = dots / (norms * qnorm)
    return np.where((norms == 0) | (qnorm == 0), 0.0, sims)


class VectorTable(Generic[T]):
    """Append-only dense table with exhaustive cosine top-k search.

    Appends are serialized; readers work on an immutable snapshot so they
    never observe a half-written row.
    """

    def __init__(self, embedder_fingerprint: str, dim: int, items: Iterable[T] = ()) -> None:
        self.embedder_fingerprint = embedder_fingerprint
        self.dim = dim
        self._lock = threading.Lock()
        self._items: tuple[T, ...] = ()
        self._matrix = np.zeros((0, dim))
        for item in items:
            self.append(item)

    def __len__(self) -> int:
        return len(self._items)

    @property
    def items(self) -> tuple[T, ...]:
        return self._items

    def _check(self, embedder_fingerprint: str | None, dim: int) -> None:
        if embedder_fingerprint is not None and embedder_fingerprint != self.embedder_fingerprint:
            raise EmbedderMismatch(
                f"index built with {self.embedder_fingerprint!r}, query embedded with {embedder_fingerprint!r}"
            )
        if dim != self.dim:
            raise EmbedderMismatch(f"vector dim {dim} != index dim {self.dim}")

    def append(self, item: T) -> None:
        self._check(None, len(item.vector))
        row = np.asarray(item.vector, dtype=np.float64)[None, :]
        with self._lock:
            matrix = np.vstack([self._matrix, row])
            self._items, self._matrix = self._items + (item,), matrix

    def search(self, vector: np.ndarray, k: int, embedder_fingerprint: str | None = None) -> list[tuple[T, float]]:
        vector = np.asarray(vector, dtype=np.float64)
        self._check(embedder_fingerprint, vector.shape[0])
        items, matrix = self._items, self._matrix
        if not items or k <= 0:
            return []
        sims = cosine_scores(matrix, vector)
        order = np.argsort(-sims, kind="stable")[:k]
        return [(items[i], float(sims[i])) for i in order]

    def save(self, path: str | Path, kind: str) -> None:
        """JSON-lines body plus a ``.header.json`` sidecar; both written atomically."""
        path = Path(path)
        header = {"kind": kind, "embedder": self.embedder_fingerprint, "dim": self.dim, "count": len(self._items)}
        _atomic_write(path, "".join(json.dumps(i.to_record(), ensure_ascii=False) + "\n" for i in self._items))
        _atomic_write(header_path(path), json.dumps(header, indent=2))


def header_path(path: Path) -> Path:
    return path.with_name(path.name + ".header.json")


def _atomic_write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _load_table(path: str | Path, factory: Callable[[dict], T], expected_kind: str) -> tuple[dict, list[T]]:
    path = Path(path)
    header = json.loads(header_path(path).read_text(encoding="utf-8"))
    if header.get("kind") != expected_kind:
        raise ValueError(f"{path} holds {header.get('kind')!r}, expected {expected_kind!r}")
    items = [factory(json.loads(line)) for line in path.read_text(encoding="utf-8").splitlines() if line.strip()]
    return header, items


class MemoryIndex(VectorTable[MemoryEntry]):
    def retrieve(self, key: RetrievalKey | str, embedder: Embedder, k: int = DEFAULT_TOP_K) -> list[tuple[MemoryEntry, float]]:
        text = key.combined if isinstance(key, RetrievalKey) else key
        return self.search(embedder.embed([text])[0], k, embedder.fingerprint)

    def save(self, path: str | Path) -> None:  # type: ignore[override]
        super().save(path, "memory")

    @classmethod
    def load(cls, path: str | Path) -> "MemoryIndex":
        header, items = _load_table(path, MemoryEntry.from_record, "memory")
        return cls(header["embedder"], header["dim"], items)

    @classmethod
    def empty_for(cls, embedder: Embedder) -> "MemoryIndex":
        return cls(embedder.fingerprint, embedder.dim)


class ExemplarStore(VectorTable[Exemplar]):
    def retrieve(
        self, key_text: str, embedder: Embedder, n: int = 5, exclude_question_id: str | None = None
    ) -> list[tuple[Exemplar, float]]:
        # over-fetch by the number of self matches so exclusion never shortens the list
        extra = sum(1 for e in self._items if e.question_id == exclude_question_id) if exclude_question_id else 0
        hits = self.search(embedder.embed([key_text])[0], n + extra, embedder.fingerprint)
        return [(e, s) for e, s in hits if exclude_question_id is None or e.question_id != exclude_question_id][:n]

    def save(self, path: str | Path) -> None:  # type: ignore[override]
        super().save(path, "exemplars")

    @classmethod
    def load(cls, path: str | Path) -> "ExemplarStore":
        header, items = _load_table(path, Exemplar.from_record, "exemplars")
        return cls(header["embedder"], header["dim"], items)

    @classmethod
    def build(cls, pairs: Iterable[tuple[str, str, str]], embedder: Embedder) -> "ExemplarStore":
        """``pairs`` are (question_id, question, gold_sql); keyed by question + gold skeleton."""
        pairs = list(pairs)
        store = cls(embedder.fingerprint, embedder.dim)
        if not pairs:
            return store
        texts = []
        for _, q, sql in pairs:
            try:
                texts.append(make_key(q, sql).combined)
            except LexError:
                texts.append(q)
        vectors = embedder.embed(texts)
        for (qid, q, sql), vec in zip(pairs, vectors):
            store.append(Exemplar(qid, q, sql, tuple(float(v) for v in vec)))
        return store


def retrieve(key: RetrievalKey | str, index: MemoryIndex, embedder: Embedder, k: int = DEFAULT_TOP_K) -> list[tuple[MemoryEntry, float]]:
    return index.retrieve(key, embedder, k)


def dedup_filter(ranked: Sequence[MemoryEntry], max_exemplars: int = DEFAULT_MAX_EXEMPLARS) -> list[MemoryEntry]:
    """Greedy pass in similarity order dropping entries whose error types an earlier keeper covers."""
    kept: list[MemoryEntry] = []
    for entry in ranked:
        if len(kept) >= max_exemplars:
            break
        if any(entry.error_types <= prev.error_types for prev in kept):
            continue
        kept.append(entry)
    return kept


def append(entry: MemoryEntry, index: MemoryIndex) -> MemoryIndex:
    index.append(entry)
    return index


def make_entry(
    question: Question,
    gold_sql: str,
    wrong_sql: str,
    error_types: frozenset[ErrorType],
    suggestions: str,
    embedder: Embedder,
) -> MemoryEntry:
    key = make_key(question, wrong_sql)
    vector = embedder.embed([key.combined])[0]
    return MemoryEntry(
        question.text,
        gold_sql,
        wrong_sql,
        frozenset(error_types),
        suggestions,
        key,
        tuple(float(v) for v in vector),
        question.id,
        question.db_id,
    )


def parse_annotation(reply: str) -> tuple[frozenset[ErrorType], str] | None:
    head, sep, tail = reply.strip().partition("|")
    types = scan_error_types(head)
    if not types:
        return None
    return types, (tail if sep else head).strip()


def _skeleton_distance(a: str, b: str) -> float:
    from .schema_linker import normalized_edit_distance

    try:
        return normalized_edit_distance(skeletonize(a).text, skeletonize(b).text)
    except LexError:
        return float("inf")


def pick_representative(failures: Sequence[str], gold_sql: str) -> str:
    """Failing candidate whose skeleton is closest to the gold skeleton; first one wins ties."""
    return min(failures, key=lambda s: _skeleton_distance(s, gold_sql))


@dataclass
class BuildReport:
    entries: list[MemoryEntry]
    skipped: list[tuple[str, str]]


def build_offline(
    corpus: Iterable,
    llm: LlmGateway,
    executor: SqlExecutor,
    embedder: Embedder,
    schema_text: Callable[[str], str],
    k_candidates: int = 4,
) -> BuildReport:
    """Sample candidates per training item, keep semantic failures, annotate them.

    ``corpus`` yields objects with ``question_id``, ``db_id``, ``question``,
    ``evidence`` and ``gold_sql`` attributes. Failures on one item are logged
    and skipped.
    """
    entries: list[MemoryEntry] = []
    skipped: list[tuple[str, str]] = []
    for item in corpus:
        question = Question(item.question_id, item.db_id, item.question, item.evidence or "")
        try:
            entry = _build_one(question, item.gold_sql, llm, executor, embedder, schema_text, k_candidates)
        except (BackendError, LexError, ValueError) as exc:
            log.warning("memory build skipped %s: %s", question.id, exc)
            skipped.append((question.id, str(exc)))
            continue
        if isinstance(entry, str):
            skipped.append((question.id, entry))
        else:
            entries.append(entry)
    return BuildReport(entries, skipped)


def _build_one(
    question: Question,
    gold_sql: str,
    llm: LlmGateway,
    executor: SqlExecutor,
    embedder: Embedder,
    schema_text: Callable[[str], str],
    k_candidates: int,
) -> MemoryEntry | str:
    schema = schema_text(question.db_id)
    gold = executor.execute(question.db_id, gold_sql)
    if not gold.ok:
        return f"gold SQL fails: {gold.message}"
    failures: list[str] = []
    for i in range(1, k_candidates + 1):
        prompt, tid = render(
            "memory_sample",
            sample=i,
            total=k_candidates,
            schema=schema,
            question=question.text,
            evidence=question.evidence or "none",
        )
        reply = llm.complete(
            ChatRequest.simple(prompt, Purpose.SYNTHESIZE, temperature=0.8, seed=i, question_id=question.id, template_id=tid)
        ).text
        sql = extract_sql(reply)
        if not sql or sql in failures:
            continue
        outcome = executor.execute(question.db_id, sql)
        # syntax failures are not semantic errors and never enter the memory
        if outcome.status is Status.PARSE_ERROR:
            continue
        if executor.outcomes_match(outcome, gold):
            continue
        failures.append(sql)
    if not failures:
        return "no semantic failure among sampled candidates"
    wrong = pick_representative(failures, gold_sql)
    prompt, tid = render(
        "annotate_memory",
        taxonomy=TAXONOMY_TEXT,
        schema=schema,
        question=question.text,
        gold_sql=gold_sql,
        wrong_sql=wrong,
    )
    reply = llm.complete(ChatRequest.simple(prompt, Purpose.ANNOTATE_MEMORY, question_id=question.id, template_id=tid)).text
    parsed = parse_annotation(reply)
    if parsed is None:
        return f"unparseable annotation: {reply[:80]!r}"
    types, suggestions = parsed
    return make_entry(question, gold_sql, wrong, types, suggestions, embedder)
