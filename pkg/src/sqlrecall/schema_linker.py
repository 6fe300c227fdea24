"""Schema preprocessing and linking.

Schema elements are shingled and MinHashed once per database; at query time
LLM-extracted keywords are matched through LSH band collisions and then
kept if either their normalized edit distance or embedding similarity to the
element passes a threshold.
"""

from __future__ import annotations

import hashlib
import json
import logging
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .core import Question
from .embedding import Embedder
from .errors import BadBanding, LengthMismatch, UnknownDatabase
from .executor import connect_readonly
from .llm import ChatRequest, LlmGateway, Purpose
from .prompts import render

log = logging.getLogger(__name__)

_UINT64 = np.uint64
_MAX_HASH = np.iinfo(np.uint64).max
_CAMEL_RE = re.compile(r"(?<=[a-z0-9])(?=[A-Z])")
_SPLIT_RE = re.compile(r"[\s_.\-/]+")
_ITEM_RE = re.compile(r"^[\w][\w .\-/]*$", re.UNICODE)

STOPWORDS = frozenset(
    """a an the and or but of in on at to for from by with without about as is are was were be been
    being do does did has have had what which who whom whose when where why how many much more most
    less least than then that this these those there their its it they them his her he she we you i
    me my our your all any each every some no not only own same so too very can will just should
    would could list show give find tell name names number get please also among between per""".split()
)


@dataclass(frozen=True)
class SchemaElement:
    db_id: str
    kind: str  # "table" | "column"
    qualified_name: str
    foreign_key_links: tuple[str, ...] = ()

    @property
    def name(self) -> str:
        return self.qualified_name.rsplit(".", 1)[-1]


@dataclass(frozen=True)
class SchemaCatalog:
    db_id: str
    tables: dict[str, tuple[str, ...]]
    foreign_keys: tuple[tuple[str, str], ...] = ()

    def elements(self) -> list[SchemaElement]:
        links: dict[str, list[str]] = {}
        for src, dst in self.foreign_keys:
            links.setdefault(src, []).append(dst)
            links.setdefault(dst, []).append(src)
        out = []
        for table in sorted(self.tables):
            out.append(SchemaElement(self.db_id, "table", table))
            for col in self.tables[table]:
                q = f"{table}.{col}"
                out.append(SchemaElement(self.db_id, "column", q, tuple(sorted(links.get(q, ())))))
        return out

    def render(self, linked: Sequence[SchemaElement] | None = None) -> str:
        lines = [f"{t}({', '.join(cols)})" for t, cols in sorted(self.tables.items())]
        if self.foreign_keys:
            lines.append("Foreign keys: " + "; ".join(f"{a} = {b}" for a, b in self.foreign_keys))
        if linked:
            lines.append("Relevant schema items: " + ", ".join(e.qualified_name for e in linked))
        return "\n".join(lines)


def read_schema(path: str | Path, db_id: str) -> SchemaCatalog:
    conn = connect_readonly(Path(path))
    try:
        names = [
            r[0]
            for r in conn.execute(
                "SELECT name FROM sqlite_master WHERE type = 'table' AND name NOT LIKE 'sqlite_%' ORDER BY name"
            )
        ]
        tables: dict[str, tuple[str, ...]] = {}
        fks: list[tuple[str, str]] = []
        for name in names:
            quoted = name.replace('"', '""')
            tables[name] = tuple(r[1] for r in conn.execute(f'PRAGMA table_info("{quoted}")'))
            for r in conn.execute(f'PRAGMA foreign_key_list("{quoted}")'):
                ref_table, src_col, dst_col = r[2], r[3], r[4]
                if dst_col is None:
                    # implicit reference to the primary key
                    pk = [c[1] for c in conn.execute(f'PRAGMA table_info("{ref_table}")') if c[5]]
                    dst_col = pk[0] if pk else "rowid"
                fks.append((f"{name}.{src_col}", f"{ref_table}.{dst_col}"))
    finally:
        conn.close()
    if not tables:
        raise ValueError(f"database {db_id!r} has no tables")
    return SchemaCatalog(db_id, tables, tuple(fks))


def split_name(name: str) -> list[str]:
    """``orders.customerId`` -> ``['orders', 'customer', 'id']``."""
    parts = []
    for chunk in _SPLIT_RE.split(name):
        parts.extend(p.lower() for p in _CAMEL_RE.split(chunk) if p)
    return parts


def shingles(name: str, n: int = 3) -> set[str]:
    out: set[str] = set()
    for tok in split_name(name):
        if len(tok) <= n:
            out.add(tok)
        else:
            out.update(tok[i : i + n] for i in range(len(tok) - n + 1))
    return out


def _base_hashes(items: Iterable[str]) -> np.ndarray:
    vals = [int.from_bytes(hashlib.blake2b(s.encode("utf-8"), digest_size=8).digest(), "little") for s in items]
    return np.asarray(vals, dtype=np.uint64)


def _splitmix64(x: np.ndarray) -> np.ndarray:
    with np.errstate(over="ignore"):
        z = x + _UINT64(0x9E3779B97F4A7C15)
        z = (z ^ (z >> _UINT64(30))) * _UINT64(0xBF58476D1CE4E5B9)
        z = (z ^ (z >> _UINT64(27))) * _UINT64(0x94D049BB133111EB)
        return z ^ (z >> _UINT64(31))


@dataclass(frozen=True)
class Fingerprint:
    signature: tuple[int, ...]

    def __len__(self) -> int:
        return len(self.signature)


class MinHasher:
    """P salted variants of one 64-bit hash; the salts derive from ``seed``."""

    def __init__(self, num_perm: int = 128, seed: int = 0) -> None:
        self.num_perm = num_perm
        self.seed = seed
        rng = np.random.default_rng(seed)
        self.salts = rng.integers(0, _MAX_HASH, size=num_perm, dtype=np.uint64, endpoint=True)

    def signature(self, items: Iterable[str]) -> Fingerprint:
        base = _base_hashes(sorted(set(items)))
        if base.size == 0:
            return Fingerprint(tuple([int(_MAX_HASH)] * self.num_perm))
        mixed = _splitmix64(base[:, None] ^ self.salts[None, :])
        return Fingerprint(tuple(int(v) for v in mixed.min(axis=0)))


def jaccard_estimate(a: Fingerprint, b: Fingerprint) -> float:
    if len(a) != len(b):
        raise LengthMismatch(f"signature lengths differ: {len(a)} vs {len(b)}")
    if len(a) == 0:
        return 0.0
    return sum(x == y for x, y in zip(a.signature, b.signature)) / len(a)


def _band_key(values: Sequence[int]) -> str:
    raw = b"".join(int(v).to_bytes(8, "little") for v in values)
    return hashlib.blake2b(raw, digest_size=8).hexdigest()


@dataclass
class SchemaIndex:
    db_id: str
    num_perm: int
    bands: int
    rows: int
    seed: int
    elements: list[SchemaElement]
    fingerprints: dict[str, Fingerprint]
    buckets: list[dict[str, list[str]]]
    _element_vectors: dict[tuple[str, str], np.ndarray] = field(default_factory=dict, repr=False, compare=False)

    @property
    def hasher(self) -> MinHasher:
        return MinHasher(self.num_perm, self.seed)

    def band_keys(self, fp: Fingerprint) -> list[str]:
        return [_band_key(fp.signature[b * self.rows : (b + 1) * self.rows]) for b in range(self.bands)]

    def candidates(self, fp: Fingerprint) -> list[str]:
        """Elements sharing at least one band bucket with ``fp``, in schema order."""
        hits: set[str] = set()
        for band, key in enumerate(self.band_keys(fp)):
            hits.update(self.buckets[band].get(key, ()))
        return [e.qualified_name for e in self.elements if e.qualified_name in hits]

    def element(self, qualified_name: str) -> SchemaElement:
        for e in self.elements:
            if e.qualified_name == qualified_name:
                return e
        raise KeyError(qualified_name)

    def to_json(self) -> dict:
        return {
            "db_id": self.db_id,
            "params": {"P": self.num_perm, "B": self.bands, "R": self.rows, "seed": self.seed},
            "elements": [
                {"kind": e.kind, "qualified_name": e.qualified_name, "foreign_key_links": list(e.foreign_key_links)}
                for e in self.elements
            ],
            "fingerprints": {k: list(v.signature) for k, v in self.fingerprints.items()},
            "buckets": self.buckets,
        }

    @classmethod
    def from_json(cls, data: dict) -> "SchemaIndex":
        p = data["params"]
        elements = [
            SchemaElement(data["db_id"], e["kind"], e["qualified_name"], tuple(e["foreign_key_links"]))
            for e in data["elements"]
        ]
        return cls(
            data["db_id"],
            p["P"],
            p["B"],
            p["R"],
            p["seed"],
            elements,
            {k: Fingerprint(tuple(v)) for k, v in data["fingerprints"].items()},
            [dict(b) for b in data["buckets"]],
        )

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_json()), encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "SchemaIndex":
        return cls.from_json(json.loads(Path(path).read_text(encoding="utf-8")))


def build_index(catalog: SchemaCatalog, num_perm: int = 128, bands: int = 32, rows: int = 4, seed: int = 0) -> SchemaIndex:
    if bands * rows != num_perm:
        raise BadBanding(f"bands*rows = {bands}*{rows} = {bands * rows} != {num_perm}")
    elements = catalog.elements()
    if not elements:
        raise ValueError("schema is empty")
    hasher = MinHasher(num_perm, seed)
    index = SchemaIndex(catalog.db_id, num_perm, bands, rows, seed, elements, {}, [{} for _ in range(bands)])
    for e in elements:
        # columns are fingerprinted on their own name so attribute keywords
        # ("name", "price") collide with every table's column of that name
        fp = hasher.signature(shingles(e.name))
        index.fingerprints[e.qualified_name] = fp
        for band, key in enumerate(index.band_keys(fp)):
            index.buckets[band].setdefault(key, []).append(e.qualified_name)
    return index


def levenshtein(a: str, b: str) -> int:
    if len(a) < len(b):
        a, b = b, a
    prev = list(range(len(b) + 1))
    for i, ca in enumerate(a, 1):
        cur = [i]
        for j, cb in enumerate(b, 1):
            cur.append(min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (ca != cb)))
        prev = cur
    return prev[-1]


def normalized_edit_distance(a: str, b: str) -> float:
    if not a and not b:
        return 0.0
    return levenshtein(a, b) / max(len(a), len(b))


def heuristic_keywords(text: str) -> list[str]:
    """Question words of length >= 3 outside a stopword list, in first-seen order."""
    out: list[str] = []
    for tok in re.findall(r"[A-Za-z][A-Za-z0-9_]*", text):
        low = tok.lower()
        if len(low) >= 3 and low not in STOPWORDS and low not in out:
            out.append(low)
    return out


def parse_keyword_reply(reply: str) -> list[str] | None:
    """Parse a comma/line separated keyword list; ``None`` if the reply is not a list."""
    text = reply.strip()
    if not text or text.upper() in ("NONE", "[]"):
        return []
    items: list[str] | None = None
    if text.startswith("["):
        try:
            parsed = json.loads(text)
            if isinstance(parsed, list) and all(isinstance(x, str) for x in parsed):
                items = parsed
        except ValueError:
            pass
    if items is None:
        items = []
        for chunk in re.split(r"[,\n;]", text):
            item = re.sub(r"^\s*(?:[-*•]|\d+[.)])\s*", "", chunk).strip().strip("\"'`").strip()
            if item:
                items.append(item)
    out: list[str] = []
    for item in items:
        item = item.strip().lower()
        if not item:
            continue
        if len(item.split()) > 4 or not _ITEM_RE.match(item):
            return None
        if item not in out:
            out.append(item)
    return out


def extract_keywords(question: Question, llm: LlmGateway) -> list[str]:
    prompt, template_id = render("keywords", question=question.text, evidence=question.evidence or "none")
    reply = llm.complete(
        ChatRequest.simple(prompt, Purpose.KEYWORDS, question_id=question.id, template_id=template_id)
    ).text
    parsed = parse_keyword_reply(reply)
    if parsed is None:
        log.info("unparseable keyword reply for %s; using token heuristic", question.id)
        return heuristic_keywords(question.text)
    return parsed


@dataclass(frozen=True)
class LinkedElement:
    element: SchemaElement
    cosine: float
    edit_distance: float


def link_scored(
    keywords: Sequence[str],
    index: SchemaIndex,
    embedder: Embedder,
    edit_max: float = 0.25,
    sem_min: float = 0.60,
) -> list[LinkedElement]:
    if not keywords:
        return []
    hasher = index.hasher
    tag = embedder.fingerprint
    missing = [e for e in index.elements if (tag, e.qualified_name) not in index._element_vectors]
    if missing:
        vecs = embedder.embed([e.name for e in missing])
        index._element_vectors.update({(tag, e.qualified_name): v for e, v in zip(missing, vecs)})
    kw_vecs = embedder.embed(list(keywords))

    best: dict[str, LinkedElement] = {}
    for kw, kv in zip(keywords, kw_vecs):
        kw_low = kw.lower()
        fp = hasher.signature(shingles(kw))
        for qname in index.candidates(fp):
            elem = index.element(qname)
            ev = index._element_vectors[(tag, qname)]
            na, nb = float(np.sqrt((kv * kv).sum())), float(np.sqrt((ev * ev).sum()))
            cos = float((kv * ev).sum()) / (na * nb) if na and nb else 0.0
            cos = min(cos, 1.0)
            edit = min(
                normalized_edit_distance(kw_low, elem.name.lower()),
                normalized_edit_distance(kw_low, qname.lower()),
            )
            if edit <= edit_max or cos >= sem_min:
                prev = best.get(qname)
                if prev is None or (cos, -edit) > (prev.cosine, -prev.edit_distance):
                    best[qname] = LinkedElement(elem, cos, edit)
    return sorted(best.values(), key=lambda le: (-le.cosine, le.edit_distance, le.element.qualified_name))


def link(
    keywords: Sequence[str],
    index: SchemaIndex,
    embedder: Embedder,
    edit_max: float = 0.25,
    sem_min: float = 0.60,
    db_id: str | None = None,
) -> list[SchemaElement]:
    if db_id is not None and db_id != index.db_id:
        raise UnknownDatabase(db_id)
    return [le.element for le in link_scored(keywords, index, embedder, edit_max, sem_min)]
