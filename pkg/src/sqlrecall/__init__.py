"""Training-free NL2SQL: structured decomposition, error-memory guided correction and result voting."""

from __future__ import annotations

from .core import (
    CandidateSql,
    ErrorType,
    ExecutionOutcome,
    Question,
    ResultClass,
    Status,
    Strategy,
    Style,
    TokenUsage,
    result_class,
    subsumes,
)
from .skeleton import RetrievalKey, Skeleton, make_key, skeletonize

__version__ = "0.1.0"

__all__ = [
    "CandidateSql",
    "ErrorType",
    "ExecutionOutcome",
    "Question",
    "ResultClass",
    "RetrievalKey",
    "Skeleton",
    "Status",
    "Strategy",
    "Style",
    "TokenUsage",
    "make_key",
    "result_class",
    "skeletonize",
    "subsumes",
]
