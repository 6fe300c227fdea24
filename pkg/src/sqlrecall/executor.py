"""Read-only sandboxed execution of candidate SQL against SQLite benchmark files."""

from __future__ import annotations

import json
import logging
import sqlite3
import time
from pathlib import Path
from typing import Mapping

from .core import ExecutionOutcome, Status, result_class
from .errors import LexError, UnknownDatabase
from .skeleton import _raw_tokens

log = logging.getLogger(__name__)

DEFAULT_TIMEOUT_S = 30.0

_WRITE_VERBS = frozenset(
    """INSERT UPDATE DELETE REPLACE UPSERT CREATE DROP ALTER ATTACH DETACH PRAGMA VACUUM
    REINDEX ANALYZE BEGIN COMMIT END ROLLBACK SAVEPOINT RELEASE""".split()
)
_PARSE_MARKERS = ("syntax error", "incomplete input", "unrecognized token", "one statement at a time")

_ALLOWED_ACTIONS = {
    sqlite3.SQLITE_SELECT,
    sqlite3.SQLITE_READ,
    sqlite3.SQLITE_FUNCTION,
    getattr(sqlite3, "SQLITE_RECURSIVE", 33),
}


def _authorizer(action: int, *_args: object) -> int:
    return sqlite3.SQLITE_OK if action in _ALLOWED_ACTIONS else sqlite3.SQLITE_DENY


class DatabaseManifest:
    """Maps ``db_id`` to a SQLite file path."""

    def __init__(self, paths: Mapping[str, str | Path]) -> None:
        self.paths = {k: Path(v) for k, v in paths.items()}

    @classmethod
    def from_json(cls, path: str | Path) -> "DatabaseManifest":
        path = Path(path)
        raw = json.loads(path.read_text(encoding="utf-8"))
        base = path.parent
        return cls({k: (base / v) if not Path(v).is_absolute() else Path(v) for k, v in raw.items()})

    @classmethod
    def from_directory(cls, root: str | Path) -> "DatabaseManifest":
        """BIRD/Spider layout: ``root/<db_id>/<db_id>.sqlite``; flat ``root/<db_id>.sqlite`` also accepted."""
        root = Path(root)
        paths: dict[str, Path] = {}
        for f in sorted(root.glob("*/*.sqlite")):
            if f.stem == f.parent.name:
                paths[f.stem] = f
        for f in sorted(root.glob("*.sqlite")):
            paths.setdefault(f.stem, f)
        return cls(paths)

    def to_json(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps({k: str(v) for k, v in sorted(self.paths.items())}, indent=2))

    def resolve(self, db_id: str) -> Path:
        try:
            return self.paths[db_id]
        except KeyError:
            raise UnknownDatabase(db_id) from None

    def __contains__(self, db_id: object) -> bool:
        return db_id in self.paths

    def __iter__(self):
        return iter(sorted(self.paths))


def connect_readonly(path: Path) -> sqlite3.Connection:
    conn = sqlite3.connect(f"{path.resolve().as_uri()}?mode=ro", uri=True, check_same_thread=False)
    conn.text_factory = lambda b: b.decode("utf-8", errors="replace")
    conn.execute("PRAGMA query_only = 1")
    return conn


def classify_statement(sql: str) -> ExecutionOutcome | None:
    """Reject anything other than one read statement before it reaches the engine."""
    try:
        tokens = list(_raw_tokens(sql))
    except LexError as exc:
        return ExecutionOutcome(Status.PARSE_ERROR, message=str(exc))
    while tokens and tokens[-1].text == ";":
        tokens.pop()
    if not tokens:
        return ExecutionOutcome(Status.PARSE_ERROR, message="empty statement")
    if any(t.text == ";" for t in tokens):
        return ExecutionOutcome(Status.PARSE_ERROR, message="multiple statements refused")
    if tokens[0].text.upper() in _WRITE_VERBS:
        return ExecutionOutcome(Status.RUNTIME_ERROR, message=f"refused {tokens[0].text.upper()} statement")
    return None


class SqlExecutor:
    """Executes one read-only statement per connection with a wall-clock timeout."""

    def __init__(
        self,
        manifest: DatabaseManifest,
        timeout_s: float = DEFAULT_TIMEOUT_S,
        row_semantics: str = "multiset",
    ) -> None:
        self.manifest = manifest
        self.timeout_s = timeout_s
        self.row_semantics = row_semantics

    def execute(self, db_id: str, sql: str, timeout_s: float | None = None) -> ExecutionOutcome:
        path = self.manifest.resolve(db_id)
        refused = classify_statement(sql)
        if refused is not None:
            return refused
        limit = self.timeout_s if timeout_s is None else timeout_s
        deadline = time.monotonic() + limit
        try:
            conn = connect_readonly(path)
        except sqlite3.Error as exc:
            return ExecutionOutcome(Status.RUNTIME_ERROR, message=f"cannot open database: {exc}")
        try:
            conn.set_authorizer(_authorizer)
            conn.set_progress_handler(lambda: int(time.monotonic() > deadline), 1000)
            rows = conn.execute(sql.strip().rstrip(";")).fetchall()
        except sqlite3.Warning as exc:
            return ExecutionOutcome(Status.PARSE_ERROR, message=str(exc))
        except sqlite3.Error as exc:
            msg = str(exc)
            if "interrupted" in msg and time.monotonic() > deadline:
                return ExecutionOutcome(Status.TIMEOUT, message=f"exceeded {limit}s")
            if any(m in msg for m in _PARSE_MARKERS):
                return ExecutionOutcome(Status.PARSE_ERROR, message=msg)
            return ExecutionOutcome(Status.RUNTIME_ERROR, message=msg)
        except (OverflowError, ValueError) as exc:
            return ExecutionOutcome(Status.RUNTIME_ERROR, message=str(exc))
        finally:
            conn.close()
        return ExecutionOutcome.from_rows(rows)

    def outcomes_match(self, pred: ExecutionOutcome, gold: ExecutionOutcome) -> bool:
        if not (pred.ok and gold.ok):
            return False
        return result_class(pred, self.row_semantics) == result_class(gold, self.row_semantics)

    def ex_match(self, pred_sql: str, gold_sql: str, db_id: str) -> bool:
        """Execution match; empty results on both sides count as a match."""
        pred = self.execute(db_id, pred_sql)
        gold = self.execute(db_id, gold_sql)
        return self.outcomes_match(pred, gold)
