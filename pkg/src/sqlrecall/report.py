"""Tabular and graphical summaries of one or more run reports."""

from __future__ import annotations

import csv
from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .bench import RunReport, compute_ex  # noqa: E402

SUMMARY_FIELDS = ["label", "questions", "ex_pct", "tokens_per_query", "seconds_per_query", "calls_per_query", "approximate_tokens"]
QUESTION_FIELDS = [
    "label", "repeat", "question_id", "db_id", "ex", "tokens", "seconds", "llm_calls",
    "n_candidates", "decision", "selection_failed", "cause",
]


def summary_rows(reports: Sequence[tuple[str, RunReport]]) -> list[dict]:
    out = []
    for label, rep in reports:
        agg = rep.aggregate
        out.append({"label": label, **{k: agg[k] for k in SUMMARY_FIELDS[1:]}})
    return out


def _write_tsv(path: Path, fieldnames: list[str], rows: list[dict]) -> None:
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=fieldnames, delimiter="\t", lineterminator="\n", extrasaction="ignore")
        writer.writeheader()
        writer.writerows(rows)


def _save(fig, path: Path) -> None:
    fig.tight_layout()
    # no timestamp metadata, so identical inputs give identical files
    fig.savefig(path, dpi=100, metadata={"Software": None})
    plt.close(fig)


def write_report(reports: Sequence[tuple[str, RunReport]], out_dir: str | Path) -> list[Path]:
    """``summary.tsv``, ``questions.tsv`` and three PNG figures; returns the written paths."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []

    summary = summary_rows(reports)
    _write_tsv(out / "summary.tsv", SUMMARY_FIELDS, summary)
    written.append(out / "summary.tsv")

    per_q = []
    for label, rep in reports:
        for r in rep.rows:
            row = {f: getattr(r, f, None) for f in QUESTION_FIELDS[1:]}
            per_q.append({"label": label, **row})
    _write_tsv(out / "questions.tsv", QUESTION_FIELDS, per_q)
    written.append(out / "questions.tsv")

    labels = [label for label, _ in reports]
    fig, ax = plt.subplots(figsize=(max(4, 1.2 * len(labels)), 3.5))
    ax.bar(labels, [compute_ex(rep) for _, rep in reports], color="tab:blue")
    ax.set_ylabel("EX (%)")
    ax.set_ylim(0, 100)
    ax.tick_params(axis="x", rotation=30)
    _save(fig, out / "ex.png")
    written.append(out / "ex.png")

    fig, ax = plt.subplots(figsize=(5, 3.5))
    for label, rep in reports:
        ax.hist([r.tokens for r in rep.rows], bins=20, alpha=0.6, label=label)
    ax.set_xlabel("tokens per question")
    ax.set_ylabel("questions")
    ax.legend(fontsize="small")
    _save(fig, out / "tokens.png")
    written.append(out / "tokens.png")

    fig, ax = plt.subplots(figsize=(5, 3.5))
    for label, rep in reports:
        ax.scatter([r.tokens for r in rep.rows], [r.seconds for r in rep.rows], s=12, label=label)
    ax.set_xlabel("tokens per question")
    ax.set_ylabel("seconds per question")
    ax.legend(fontsize="small")
    _save(fig, out / "cost.png")
    written.append(out / "cost.png")
    return written
