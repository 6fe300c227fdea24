from __future__ import annotations

import itertools
import json

import pytest

import toy
from sqlrecall.core import Question, parse_error_types
from sqlrecall.embedding import HashingEmbedder
from sqlrecall.executor import DatabaseManifest, SqlExecutor
from sqlrecall.llm import LlmGateway, ScriptedBackend
from sqlrecall.memory import ExemplarStore, MemoryIndex, make_entry


@pytest.fixture(scope="session")
def db_root(tmp_path_factory):
    root = tmp_path_factory.mktemp("dbs")
    toy.build_databases(root)
    return root


@pytest.fixture(scope="session")
def manifest(db_root):
    return DatabaseManifest.from_directory(db_root)


@pytest.fixture
def executor(manifest):
    return SqlExecutor(manifest, timeout_s=5)


@pytest.fixture(scope="session")
def embedder():
    return HashingEmbedder()


@pytest.fixture
def fake_clock():
    """Deterministic clock: every reading advances by 0.25 s."""
    counter = itertools.count()
    return lambda: next(counter) * 0.25


def scripted(rules, **kw) -> LlmGateway:
    return LlmGateway(ScriptedBackend(rules), **kw)


@pytest.fixture(scope="session")
def toy_memory(embedder):
    index = MemoryIndex.empty_for(embedder)
    for qid, db_id, text, gold, wrong, note in toy.TRAINING:
        types_text, _, suggestion = note.partition("|")
        types = parse_error_types(t.strip() for t in types_text.split(","))
        index.append(make_entry(Question(qid, db_id, text), gold, wrong, types, suggestion.strip(), embedder))
    return index


@pytest.fixture(scope="session")
def toy_exemplars(embedder):
    return ExemplarStore.build(((qid, text, gold) for qid, _, text, gold, _, _ in toy.TRAINING), embedder)


@pytest.fixture
def dataset_file(tmp_path):
    path = tmp_path / "dev.json"
    path.write_text(json.dumps(toy.dataset_records()), encoding="utf-8")
    return path


def toy_pipeline(executor, embedder, memory=None, exemplars=None, clock=None, rules=None, trace_dir=None, **cfg):
    """Pipeline over the toy suite with a scripted backend; ``cfg`` overrides config fields."""
    from sqlrecall.bench import Pipeline
    from sqlrecall.config import config_from_dict

    if clock is None:
        counter = itertools.count()
        clock = lambda: next(counter) * 0.25  # noqa: E731
    return Pipeline(
        ScriptedBackend(rules if rules is not None else toy.suite_rules()),
        executor,
        config_from_dict(cfg),
        embedder,
        memory,
        exemplars,
        clock=clock,
        trace_dir=trace_dir,
    )


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    if mod is not None and mod.RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in mod.RESULTS:
            terminalreporter.write_line(line)
