"""Run configuration: one JSON or TOML document, every field defaulted."""

from __future__ import annotations

import json
import sys
from dataclasses import asdict, dataclass, field, fields, is_dataclass
from pathlib import Path
from typing import Any

from .errors import ConfigError

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

POLICY_MODES = ("filtered", "top_k_unfiltered", "random_k", "none_direct")
EMPTY_POLICIES = ("keep", "discard_empty")


@dataclass
class BackendConfig:
    kind: str = "scripted"  # scripted | remote
    script: str | None = None
    endpoint: str | None = None
    model: str | None = None
    api_key_env: str = "SQLRECALL_API_KEY"
    timeout_s: float = 120.0
    max_attempts: int = 3


@dataclass
class EmbedderConfig:
    kind: str = "hashing"  # hashing | remote
    dim: int = 512
    endpoint: str | None = None
    model: str | None = None
    api_key_env: str = "SQLRECALL_API_KEY"


@dataclass
class SchemaLinkConfig:
    num_perm: int = 128
    bands: int = 32
    rows: int = 4
    edit_max: float = 0.25
    sem_min: float = 0.60


@dataclass
class MemoryConfig:
    top_k: int = 40
    max_exemplars: int = 5
    k_candidates: int = 4


@dataclass
class PolicyConfig:
    mode: str = "filtered"
    # exemplar count for top_k_unfiltered / random_k
    k: int = 4

    def __post_init__(self) -> None:
        if self.mode not in POLICY_MODES:
            raise ConfigError(f"policy mode must be one of {POLICY_MODES}, got {self.mode!r}")
        if self.mode != "none_direct" and self.k < 1:
            raise ConfigError("policy k must be >= 1")


@dataclass
class AblationFlags:
    schema_linking: bool = True
    structured_decomposition: bool = True
    react_reflect: bool = True
    multi_style: bool = True
    refinement: bool = True
    final_icl: bool = True


@dataclass
class PipelineConfig:
    seed: int = 0
    workers: int = 1
    path_workers: int = 1
    repeat: int = 1
    timeout_s: float = 30.0
    row_semantics: str = "multiset"
    icl_exemplars: int = 5
    max_rounds: int = 3
    empty_policy: str = "keep"
    single_style: str = "FlatJoin"
    schema: SchemaLinkConfig = field(default_factory=SchemaLinkConfig)
    memory: MemoryConfig = field(default_factory=MemoryConfig)
    policy: PolicyConfig = field(default_factory=PolicyConfig)
    ablation: AblationFlags = field(default_factory=AblationFlags)
    llm: BackendConfig = field(default_factory=BackendConfig)
    embedder: EmbedderConfig = field(default_factory=EmbedderConfig)

    def __post_init__(self) -> None:
        if self.empty_policy not in EMPTY_POLICIES:
            raise ConfigError(f"empty_policy must be one of {EMPTY_POLICIES}")
        if self.row_semantics not in ("multiset", "set"):
            raise ConfigError("row_semantics must be 'multiset' or 'set'")
        if self.max_rounds < 0 or self.repeat < 1 or self.workers < 1:
            raise ConfigError("max_rounds >= 0, repeat >= 1 and workers >= 1 required")

    def to_dict(self) -> dict:
        return asdict(self)


def _build(cls: type, data: dict, where: str) -> Any:
    if not isinstance(data, dict):
        raise ConfigError(f"{where or 'config'} must be a table/object")
    known = {f.name: f for f in fields(cls)}
    unknown = set(data) - set(known)
    if unknown:
        raise ConfigError(f"unknown config keys in {where or 'config'}: {sorted(unknown)}")
    kwargs = {}
    for name, value in data.items():
        default = known[name].default_factory() if callable(known[name].default_factory) else None
        if is_dataclass(default):
            kwargs[name] = _build(type(default), value, f"{where}.{name}".lstrip("."))
        else:
            kwargs[name] = value
    return cls(**kwargs)


def config_from_dict(data: dict) -> PipelineConfig:
    return _build(PipelineConfig, data, "")


def load_config(path: str | Path | None) -> PipelineConfig:
    if path is None:
        return PipelineConfig()
    path = Path(path)
    raw = path.read_bytes()
    if path.suffix.lower() == ".toml":
        data = tomllib.loads(raw.decode("utf-8"))
    else:
        data = json.loads(raw)
    return config_from_dict(data)
