"""Helpers for pulling SQL out of model replies and rendering results into prompts."""

from __future__ import annotations

import re

from .core import ExecutionOutcome, Status

_FENCE_RE = re.compile(r"```[ \t]*([A-Za-z0-9_-]*)[ \t]*\n(.*?)```", re.S)
_BARE_SQL_RE = re.compile(r"^\s*(SELECT|WITH)\b", re.I)


def extract_sql(reply: str) -> str | None:
    """SQL from the first ```sql block (any fenced block as a fallback), or a bare query."""
    blocks = _FENCE_RE.findall(reply)
    for lang, body in blocks:
        if lang.lower() in ("sql", "sqlite") and body.strip():
            return body.strip()
    for _, body in blocks:
        if body.strip():
            return body.strip()
    if _BARE_SQL_RE.match(reply):
        return reply.strip()
    return None


def fence(sql: str) -> str:
    return f"```sql\n{sql}\n```"


def render_outcome(outcome: ExecutionOutcome, max_rows: int = 5) -> str:
    if outcome.status is Status.EMPTY:
        return "empty result (0 rows)"
    if outcome.status is not Status.OK:
        return f"{outcome.status.value}: {outcome.message}"
    rows = outcome.rows or ()
    shown = "\n".join(" | ".join("NULL" if v is None else str(v) for v in row) for row in rows[:max_rows])
    more = f"\n... ({len(rows)} rows total)" if len(rows) > max_rows else ""
    return f"{len(rows)} row(s):\n{shown}{more}"
