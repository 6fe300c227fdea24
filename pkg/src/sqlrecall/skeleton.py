"""SQL skeleton extraction and retrieval keys.

A skeleton keeps SQL keywords, function names and operators and masks every
literal and table/column identifier as ``_``. Aliases are dropped. The lexer
is table driven so half-broken candidate SQL still produces a key.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from typing import Iterator, NamedTuple

from .core import Question
from .errors import LexError

SEP = " [SEP] "
MASK = "_"

KEYWORDS = frozenset(
    """
    SELECT FROM WHERE GROUP BY HAVING ORDER ASC DESC LIMIT OFFSET JOIN INNER LEFT
    RIGHT FULL OUTER CROSS NATURAL ON USING AND OR NOT IN EXISTS BETWEEN LIKE GLOB
    REGEXP MATCH IS NULL AS DISTINCT ALL UNION INTERSECT EXCEPT WITH RECURSIVE CASE
    WHEN THEN ELSE END CAST COLLATE ESCAPE NULLS INSERT INTO VALUES UPDATE SET
    DELETE CREATE TABLE DROP ALTER REPLACE TRUE FALSE OVER PARTITION FILTER WINDOW
    COUNT SUM AVG MIN MAX TOTAL
    """.split()
)

_TOKEN_RE = re.compile(
    r"""
    (?P<ws>\s+)
  | (?P<num>0[xX][0-9A-Fa-f]+|(?:\d+\.?\d*|\.\d+)(?:[eE][+-]?\d+)?)
  | (?P<word>[A-Za-z_][A-Za-z0-9_$]*)
  | (?P<param>[?][0-9]*|[:@$][A-Za-z_][A-Za-z0-9_]*)
  | (?P<op><=|>=|<>|!=|==|\|\||<<|>>|->>|->|[=<>+\-*/%&|~,().;])
    """,
    re.VERBOSE,
)


class Token(NamedTuple):
    kind: str  # keyword | ident | literal | op | mask | func
    text: str
    pos: int


@dataclass(frozen=True)
class Skeleton:
    text: str
    keyword_sequence: tuple[str, ...]


@dataclass(frozen=True)
class RetrievalKey:
    question_text: str
    skeleton: Skeleton
    combined: str = field(init=False)

    def __post_init__(self) -> None:
        object.__setattr__(self, "combined", self.question_text + SEP + self.skeleton.text)


def _scan_quoted(sql: str, start: int, close: str) -> int:
    """Return the index just past the closing quote; doubled quotes escape."""
    i = start + 1
    while True:
        j = sql.find(close, i)
        if j < 0:
            raise LexError("unterminated quoted token", start)
        if close != "]" and sql.startswith(close * 2, j):
            i = j + 2
            continue
        return j + 1


def _raw_tokens(sql: str) -> Iterator[Token]:
    i, n = 0, len(sql)
    while i < n:
        ch = sql[i]
        if sql.startswith("--", i):
            j = sql.find("\n", i)
            i = n if j < 0 else j + 1
            continue
        if sql.startswith("/*", i):
            j = sql.find("*/", i + 2)
            if j < 0:
                raise LexError("unterminated comment", i)
            i = j + 2
            continue
        if ch == "'":
            j = _scan_quoted(sql, i, "'")
            yield Token("literal", sql[i:j], i)
            i = j
            continue
        if ch in "\"`[":
            j = _scan_quoted(sql, i, {"\"": "\"", "`": "`", "[": "]"}[ch])
            yield Token("ident", sql[i:j], i)
            i = j
            continue
        if ch in "xX" and sql.startswith("'", i + 1):
            j = _scan_quoted(sql, i + 1, "'")
            yield Token("literal", sql[i:j], i)
            i = j
            continue
        m = _TOKEN_RE.match(sql, i)
        if m is None:
            raise LexError(f"unexpected character {ch!r}", i)
        kind = m.lastgroup
        text = m.group()
        if kind == "word":
            if text == MASK:
                kind = "mask"
            elif text.upper() in KEYWORDS:
                kind = "keyword"
            else:
                kind = "ident"
        elif kind in ("num", "param"):
            kind = "literal"
        if kind != "ws":
            yield Token(kind, text, i)
        i = m.end()


def _operand_expected(prev: Token | None) -> bool:
    if prev is None:
        return True
    if prev.kind == "keyword":
        return True
    return prev.kind == "op" and prev.text != ")"


def tokenize(sql: str) -> list[Token]:
    """Lex ``sql`` and fold signed numbers and function calls."""
    raw = list(_raw_tokens(sql))
    out: list[Token] = []
    k = 0
    while k < len(raw):
        tok = raw[k]
        nxt = raw[k + 1] if k + 1 < len(raw) else None
        if (
            tok.kind == "op"
            and tok.text in "+-"
            and nxt is not None
            and nxt.kind == "literal"
            and (nxt.text[:1].isdigit() or nxt.text.startswith("."))
            and nxt.pos == tok.pos + 1
            and _operand_expected(out[-1] if out else None)
        ):
            out.append(Token("literal", tok.text + nxt.text, tok.pos))
            k += 2
            continue
        if tok.kind == "ident" and tok.text[0].isalpha() and nxt is not None and nxt.text == "(":
            out.append(Token("func", tok.text.upper(), tok.pos))
        elif tok.kind == "keyword":
            out.append(Token("keyword", tok.text.upper(), tok.pos))
        else:
            out.append(tok)
        k += 1
    return out


def skeletonize(sql: str) -> Skeleton:
    tokens = tokenize(sql)
    while tokens and tokens[-1].text == ";":
        tokens.pop()
    if not tokens:
        raise LexError("empty input", 0)
    keyword_sequence = tuple(t.text for t in tokens if t.kind == "keyword")

    parts: list[str] = []
    # paren stack entries: True when the paren opened a CAST(...)
    parens: list[bool] = []
    k = 0
    while k < len(tokens):
        tok = tokens[k]
        nxt = tokens[k + 1] if k + 1 < len(tokens) else None
        in_cast = bool(parens) and parens[-1]
        if tok.kind == "keyword" and tok.text == "AS":
            if in_cast:
                # type names inside CAST(... AS TYPE) are kept verbatim
                parts.append("AS")
                k += 1
                while k < len(tokens) and tokens[k].text != ")":
                    parts.append(tokens[k].text.upper() if tokens[k].kind != "literal" else MASK)
                    k += 1
                continue
            if nxt is not None and nxt.kind in ("ident", "literal", "mask"):
                k += 2  # alias dropped
                continue
            parts.append("AS")
            k += 1
            continue
        if tok.text == "(":
            parens.append(bool(parts) and parts[-1] == "CAST")
            parts.append("(")
        elif tok.text == ")":
            if parens:
                parens.pop()
            parts.append(")")
        elif tok.kind in ("ident", "literal", "mask"):
            if parts and parts[-1] == MASK:
                pass  # implicit alias or adjacent masks collapse
            elif len(parts) >= 2 and parts[-1] == "." and parts[-2] == MASK:
                parts.pop()  # qualified name a.b -> _
            else:
                parts.append(MASK)
        else:
            parts.append(tok.text)
        k += 1
    return Skeleton(" ".join(parts), keyword_sequence)


def make_key(question: Question | str, sql: str) -> RetrievalKey:
    text = question.text if isinstance(question, Question) else question
    return RetrievalKey(text, skeletonize(sql))


def key_or_question(question: Question | str, sql: str | None) -> str:
    """Combined key text, degrading to the bare question when ``sql`` will not lex."""
    text = question.text if isinstance(question, Question) else question
    if sql:
        try:
            return make_key(text, sql).combined
        except LexError:
            pass
    return text
