"""Shared domain types: error taxonomy, candidates, token usage and result classes."""

from __future__ import annotations

import enum
import hashlib
import itertools
import json
import math
import re
from dataclasses import dataclass, field, fields, is_dataclass
from typing import Any, Iterable, Sequence

from .errors import UnknownErrorType


class ErrorType(enum.Enum):
    E1 = "Join Logic Error"
    E2 = "Filter Condition Error"
    E3 = "Aggregation and Grouping Error"
    E4 = "Select Output Error"
    E5 = "Ordering and Limit Error"
    E6 = "Subquery Logical Error"
    E7 = "Null Handling Error"
    E8 = "Temporal Semantics Error"
    E9 = "Quantifier Intent Error"

    @property
    def code(self) -> str:
        return self.name

    @property
    def display_name(self) -> str:
        return self.value

    @classmethod
    def parse(cls, label: str) -> "ErrorType":
        """Accept ``E4``, ``Select Output Error`` or ``E4: Select Output Error``."""
        text = label.strip()
        head, sep, tail = text.partition(":")
        if sep and head.strip().upper() in cls.__members__:
            member = cls[head.strip().upper()]
            if not tail.strip() or tail.strip().lower() == member.value.lower():
                return member
            raise UnknownErrorType(label)
        if text.upper() in cls.__members__:
            return cls[text.upper()]
        for member in cls:
            if member.value.lower() == text.lower():
                return member
        raise UnknownErrorType(label)


ErrorTypeSet = frozenset  # frozenset[ErrorType]


def parse_error_types(labels: Iterable[str]) -> frozenset[ErrorType]:
    return frozenset(ErrorType.parse(label) for label in labels)


_CODE_RE = re.compile(r"\bE([1-9])\b")


def scan_error_types(text: str) -> frozenset[ErrorType]:
    """Every taxonomy code or display name mentioned anywhere in ``text``."""
    found = {ErrorType[f"E{m.group(1)}"] for m in _CODE_RE.finditer(text)}
    low = text.lower()
    found.update(t for t in ErrorType if t.value.lower() in low)
    return frozenset(found)


def subsumes(retained: frozenset[ErrorType], candidate: frozenset[ErrorType]) -> bool:
    """True iff every error type of ``candidate`` is already covered by ``retained``."""
    return candidate <= retained


def error_codes(types: Iterable[ErrorType]) -> list[str]:
    return sorted(t.code for t in types)


class Strategy(enum.Enum):
    TABLE_WISE = "TableWise"
    HIERARCHICAL = "Hierarchical"
    ATOMIC_SEQUENTIAL = "AtomicSequential"
    FALLBACK_RANDOM = "FallbackRandom"
    NO_DECOMPOSITION = "NoDecomposition"


STRUCTURED_STRATEGIES = (Strategy.TABLE_WISE, Strategy.HIERARCHICAL, Strategy.ATOMIC_SEQUENTIAL)


class Style(enum.Enum):
    CTE = "CTE"
    FLAT_JOIN = "FlatJoin"
    NESTED = "Nested"


STRATEGY_ORDER = {s: i for i, s in enumerate(Strategy)}
STYLE_ORDER = {s: i for i, s in enumerate(Style)}


@dataclass(frozen=True)
class TokenUsage:
    prompt_tokens: int = 0
    completion_tokens: int = 0

    def __post_init__(self) -> None:
        if self.prompt_tokens < 0 or self.completion_tokens < 0:
            raise ValueError("token counts must be non-negative")

    def __add__(self, other: "TokenUsage") -> "TokenUsage":
        return TokenUsage(
            self.prompt_tokens + other.prompt_tokens,
            self.completion_tokens + other.completion_tokens,
        )

    @property
    def total(self) -> int:
        return self.prompt_tokens + self.completion_tokens

    @staticmethod
    def sum(usages: Iterable["TokenUsage"]) -> "TokenUsage":
        total = TokenUsage()
        for u in usages:
            total = total + u
        return total


@dataclass(frozen=True)
class Question:
    id: str
    db_id: str
    text: str
    evidence: str = ""

    def __post_init__(self) -> None:
        if not self.text.strip():
            raise ValueError("question text must be non-empty")


@dataclass(frozen=True)
class CandidateSql:
    question_id: str
    strategy: Strategy
    style: Style
    sql: str
    generation: int = 0
    tokens: TokenUsage = field(default_factory=TokenUsage)
    # set when the SQL could not be extracted from the model reply
    flagged: bool = False
    # distinguishes several paths sharing one strategy tag (random fallbacks)
    path: int = 0

    def __post_init__(self) -> None:
        if self.generation < 0:
            raise ValueError("generation must be >= 0")
        if not self.sql.strip():
            raise ValueError("candidate sql must be non-empty")

    @property
    def slot(self) -> str:
        suffix = f"#{self.path}" if self.path else ""
        return f"{self.strategy.value}{suffix}/{self.style.value}"

    def order_key(self) -> tuple[int, int, int, int]:
        return (self.generation, STRATEGY_ORDER[self.strategy], self.path, STYLE_ORDER[self.style])


class Status(enum.Enum):
    OK = "Ok"
    EMPTY = "Empty"
    PARSE_ERROR = "ParseError"
    RUNTIME_ERROR = "RuntimeError"
    TIMEOUT = "Timeout"

    @property
    def is_error(self) -> bool:
        return self in (Status.PARSE_ERROR, Status.RUNTIME_ERROR, Status.TIMEOUT)


@dataclass(frozen=True)
class ExecutionOutcome:
    status: Status
    rows: tuple[tuple[Any, ...], ...] | None = None
    message: str = ""

    def __post_init__(self) -> None:
        if self.status is Status.OK and not self.rows:
            raise ValueError("Ok outcome requires at least one row")
        if self.status is not Status.OK and self.rows is not None:
            raise ValueError("rows are only present on Ok outcomes")

    @property
    def ok(self) -> bool:
        return not self.status.is_error

    @classmethod
    def from_rows(cls, rows: Sequence[Sequence[Any]]) -> "ExecutionOutcome":
        normalized = tuple(tuple(normalize_cell(v) for v in row) for row in rows)
        if not normalized:
            return cls(Status.EMPTY)
        return cls(Status.OK, normalized)


class ResultKind(enum.Enum):
    ERROR = "Error"
    EMPTY = "Empty"
    ROWS = "Rows"


@dataclass(frozen=True)
class ResultClass:
    fingerprint: str
    kind: ResultKind


EMPTY_FINGERPRINT = "empty"
_ERROR_BUCKETS = {
    Status.PARSE_ERROR: "error:parse",
    Status.RUNTIME_ERROR: "error:runtime",
    Status.TIMEOUT: "error:timeout",
}
_MAX_COLUMN_PERMUTATIONS = 720


def normalize_cell(value: Any) -> Any:
    """NULL stays None, numerics rounded to 6 places (integral floats become int)."""
    if value is None or isinstance(value, str):
        return value
    if isinstance(value, bool):
        return int(value)
    if isinstance(value, int):
        return value
    if isinstance(value, float):
        if not math.isfinite(value):
            return value
        rounded = round(value, 6)
        if rounded.is_integer() and abs(rounded) < 2**53:
            return int(rounded)
        return rounded
    if isinstance(value, (bytes, bytearray, memoryview)):
        return bytes(value)
    return str(value)


def _encode_cell(value: Any) -> list:
    if value is None:
        return [0, ""]
    if isinstance(value, (int, float)):
        return [1, value]
    if isinstance(value, bytes):
        return [3, value.hex()]
    return [2, value]


def _canonical_rows(rows: Sequence[Sequence[Any]], semantics: str) -> list[list[list]]:
    encoded = [[_encode_cell(normalize_cell(v)) for v in row] for row in rows]
    if semantics == "set":
        unique = {json.dumps(r) for r in encoded}
        encoded = [json.loads(s) for s in unique]
    elif semantics != "multiset":
        raise ValueError(f"unknown row semantics {semantics!r}")
    ncols = len(encoded[0])
    if any(len(r) != ncols for r in encoded):
        raise ValueError("ragged result rows")

    def key(cell: list) -> tuple:
        return (cell[0], cell[1])

    # column order is irrelevant: sort columns by their value multiset, and
    # resolve columns with equal multisets by trying their permutations
    signatures = [tuple(sorted((key(r[c]) for r in encoded))) for c in range(ncols)]
    order = sorted(range(ncols), key=lambda c: signatures[c])
    groups = [list(g) for _, g in itertools.groupby(order, key=lambda c: signatures[c])]
    n_perms = math.prod(math.factorial(len(g)) for g in groups)
    if n_perms > _MAX_COLUMN_PERMUTATIONS:
        choices: Iterable[tuple] = [tuple(tuple(g) for g in groups)]
    else:
        choices = itertools.product(*(itertools.permutations(g) for g in groups))

    best = None
    for choice in choices:
        perm = [c for g in choice for c in g]
        candidate = sorted(([key(r[c]) for c in perm] for r in encoded))
        if best is None or candidate < best:
            best = candidate
    return [[list(cell) for cell in row] for row in best]


def result_class(outcome: ExecutionOutcome, semantics: str = "multiset") -> ResultClass:
    """Map an outcome to its vote class; rows are compared ignoring order and column labels."""
    if outcome.status.is_error:
        return ResultClass(_ERROR_BUCKETS[outcome.status], ResultKind.ERROR)
    if outcome.status is Status.EMPTY:
        return ResultClass(EMPTY_FINGERPRINT, ResultKind.EMPTY)
    canonical = _canonical_rows(outcome.rows, semantics)
    payload = json.dumps(canonical, separators=(",", ":"), ensure_ascii=False)
    digest = hashlib.sha256(payload.encode("utf-8")).hexdigest()
    return ResultClass(f"rows:{digest}", ResultKind.ROWS)


def to_record(obj: Any) -> Any:
    """JSON-ready form of any domain value (enums by value, sets as sorted lists)."""
    if is_dataclass(obj) and not isinstance(obj, type):
        return {f.name: to_record(getattr(obj, f.name)) for f in fields(obj)}
    if isinstance(obj, ErrorType):
        return obj.code
    if isinstance(obj, enum.Enum):
        return obj.value
    if isinstance(obj, (set, frozenset)):
        return sorted(to_record(v) for v in obj)
    if isinstance(obj, (list, tuple)):
        return [to_record(v) for v in obj]
    if isinstance(obj, dict):
        return {str(k): to_record(v) for k, v in obj.items()}
    if isinstance(obj, bytes):
        return obj.hex()
    return obj


def dumps(obj: Any) -> str:
    return json.dumps(to_record(obj), ensure_ascii=False, sort_keys=True)


def candidate_from_record(rec: dict) -> CandidateSql:
    return CandidateSql(
        question_id=rec["question_id"],
        strategy=Strategy(rec["strategy"]),
        style=Style(rec["style"]),
        sql=rec["sql"],
        generation=rec.get("generation", 0),
        tokens=TokenUsage(**rec.get("tokens", {})),
        flagged=rec.get("flagged", False),
        path=rec.get("path", 0),
    )


def outcome_from_record(rec: dict) -> ExecutionOutcome:
    rows = rec.get("rows")
    if rows is not None:
        rows = tuple(tuple(r) for r in rows)
    return ExecutionOutcome(Status(rec["status"]), rows, rec.get("message", ""))


__all__ = [
    "CandidateSql",
    "ErrorType",
    "ErrorTypeSet",
    "ExecutionOutcome",
    "Question",
    "ResultClass",
    "ResultKind",
    "STRUCTURED_STRATEGIES",
    "Status",
    "Strategy",
    "Style",
    "TokenUsage",
    "scan_error_types",
    "dumps",
    "parse_error_types",
    "result_class",
    "subsumes",
    "to_record",
]
