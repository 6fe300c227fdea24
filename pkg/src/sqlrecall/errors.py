"""Exception hierarchy shared across the package."""

from __future__ import annotations


class SqlRecallError(Exception):
    """Base class for all package errors."""


class UnknownErrorType(SqlRecallError, ValueError):
    def __init__(self, label: str) -> None:
        super().__init__(f"unknown error type label: {label!r}")
        self.label = label


class LexError(SqlRecallError, ValueError):
    def __init__(self, message: str, position: int) -> None:
        super().__init__(f"{message} at position {position}")
        self.position = position


class BadBanding(SqlRecallError, ValueError):
    """Raised when bands * rows does not equal the signature length."""


class LengthMismatch(SqlRecallError, ValueError):
    pass


class UnknownDatabase(SqlRecallError, KeyError):
    def __init__(self, db_id: str) -> None:
        super().__init__(db_id)
        self.db_id = db_id

    def __str__(self) -> str:
        return f"unknown database: {self.db_id!r}"


class UnknownQuestion(SqlRecallError, KeyError):
    def __init__(self, question_id: str) -> None:
        super().__init__(question_id)
        self.question_id = question_id

    def __str__(self) -> str:
        return f"no ledger for question: {self.question_id!r}"


class BackendError(SqlRecallError, RuntimeError):
    def __init__(self, message: str, status: int | None = None) -> None:
        super().__init__(message if status is None else f"[{status}] {message}")
        self.status = status


class BackendTimeout(BackendError):
    pass


class EmbedderMismatch(SqlRecallError, ValueError):
    pass


class FormatError(SqlRecallError, ValueError):
    def __init__(self, message: str, record: str | int | None = None) -> None:
        where = "" if record is None else f" (record {record})"
        super().__init__(f"{message}{where}")
        self.record = record


class EmptyReport(SqlRecallError, ValueError):
    pass


class ConfigError(SqlRecallError, ValueError):
    pass
