"""Chat-completion gateway.

Every model call in the package goes through :meth:`LlmGateway.complete`, which
handles retries, token accounting per question, and transcript logging.
Two backends are provided: an OpenAI-compatible HTTP client and a scripted
rule table used for deterministic tests and dry runs.
"""

from __future__ import annotations

import enum
import json
import logging
import os
import re
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Iterable, Protocol, Sequence

import requests

from .core import TokenUsage, to_record
from .errors import BackendError, BackendTimeout, UnknownQuestion

log = logging.getLogger(__name__)

GLOBAL_QUESTION = "_global"


class Purpose(enum.Enum):
    KEYWORDS = "keywords"
    DECOMPOSE = "decompose"
    REACT_REASON = "react_reason"
    REACT_REFLECT = "react_reflect"
    SYNTHESIZE = "synthesize"
    CRITIC = "critic"
    REFINE = "refine"
    ANNOTATE_MEMORY = "annotate_memory"


@dataclass(frozen=True)
class Message:
    role: str
    content: str


@dataclass(frozen=True)
class ChatRequest:
    messages: tuple[Message, ...]
    purpose: Purpose
    temperature: float = 0.0
    max_tokens: int = 1024
    seed: int | None = None
    question_id: str | None = None
    template_id: str | None = None

    def __post_init__(self) -> None:
        if not self.messages:
            raise ValueError("a chat request needs at least one message")
        if not isinstance(self.purpose, Purpose):
            raise ValueError("purpose tag must be a Purpose")

    @classmethod
    def simple(cls, prompt: str, purpose: Purpose, *, system: str | None = None, **kw: Any) -> "ChatRequest":
        msgs = [Message("user", prompt)]
        if system:
            msgs.insert(0, Message("system", system))
        return cls(tuple(msgs), purpose, **kw)

    @property
    def prompt_text(self) -> str:
        return "\n".join(m.content for m in self.messages)


@dataclass(frozen=True)
class ChatResponse:
    text: str
    usage: TokenUsage
    latency: float
    # True when usage was estimated by whitespace splitting
    approximate: bool = False


@dataclass(frozen=True)
class CallRecord:
    question_id: str
    purpose: Purpose
    template_id: str | None
    prompt: str
    response: str
    usage: TokenUsage
    latency: float
    approximate: bool


@dataclass
class Ledger:
    usage: TokenUsage = field(default_factory=TokenUsage)
    model_seconds: float = 0.0
    calls: int = 0
    approximate: bool = False
    wall_seconds: float | None = None


class Backend(Protocol):
    retryable: bool

    def send(self, request: ChatRequest) -> tuple[str, TokenUsage | None]: ...


class TransientBackendError(BackendError):
    """Transport failure or 5xx; the gateway retries these."""


@dataclass(frozen=True)
class ScriptRule:
    purpose: Purpose
    contains: tuple[str, ...] = ()
    regex: str | None = None
    response: str | None = None
    error: str | None = None

    def matches(self, request: ChatRequest) -> bool:
        if request.purpose is not self.purpose:
            return False
        text = request.prompt_text
        if any(s not in text for s in self.contains):
            return False
        if self.regex is not None and re.search(self.regex, text, re.S) is None:
            return False
        return True

    @classmethod
    def from_dict(cls, d: dict) -> "ScriptRule":
        matcher = d.get("matcher")
        contains: tuple[str, ...] = ()
        regex = None
        if isinstance(matcher, str):
            contains = (matcher,)
        elif isinstance(matcher, list):
            contains = tuple(matcher)
        elif isinstance(matcher, dict):
            c = matcher.get("contains", ())
            contains = (c,) if isinstance(c, str) else tuple(c)
            regex = matcher.get("regex")
        elif matcher is not None:
            raise ValueError(f"bad matcher: {matcher!r}")
        if (d.get("response") is None) == (d.get("error") is None):
            raise ValueError("script rule needs exactly one of response / error")
        return cls(Purpose(d["purpose_tag"]), contains, regex, d.get("response"), d.get("error"))

    def to_dict(self) -> dict:
        out: dict[str, Any] = {"purpose_tag": self.purpose.value}
        if self.contains or self.regex:
            out["matcher"] = {"contains": list(self.contains), **({"regex": self.regex} if self.regex else {})}
        if self.error is not None:
            out["error"] = self.error
        else:
            out["response"] = self.response
        return out


class ScriptedBackend:
    """Rule table backend: the first rule whose purpose and matcher fit wins."""

    retryable = False

    def __init__(self, rules: Iterable[ScriptRule | dict]) -> None:
        self.rules = [r if isinstance(r, ScriptRule) else ScriptRule.from_dict(r) for r in rules]

    @classmethod
    def from_json(cls, path: str | Path) -> "ScriptedBackend":
        data = json.loads(Path(path).read_text(encoding="utf-8"))
        if isinstance(data, dict):
            data = data["rules"]
        return cls(data)

    def send(self, request: ChatRequest) -> tuple[str, TokenUsage | None]:
        for rule in self.rules:
            if rule.matches(request):
                if rule.error is not None:
                    raise BackendError(rule.error)
                return rule.response, None
        raise BackendError(f"no script rule for purpose {request.purpose.value!r}")


class RemoteBackend:
    """OpenAI-compatible ``/chat/completions`` client."""

    retryable = True

    def __init__(
        self,
        endpoint: str,
        model: str,
        api_key_env: str = "SQLRECALL_API_KEY",
        timeout_s: float = 120.0,
        session: requests.Session | None = None,
    ) -> None:
        self.endpoint = endpoint.rstrip("/")
        self.model = model
        self.api_key_env = api_key_env
        self.timeout_s = timeout_s
        self.session = session or requests.Session()

    def payload(self, request: ChatRequest) -> dict:
        body: dict[str, Any] = {
            "model": self.model,
            "messages": [{"role": m.role, "content": m.content} for m in request.messages],
            "temperature": request.temperature,
            "max_tokens": request.max_tokens,
        }
        if request.seed is not None:
            body["seed"] = request.seed
        return body

    def send(self, request: ChatRequest) -> tuple[str, TokenUsage | None]:
        headers = {"Content-Type": "application/json"}
        key = os.environ.get(self.api_key_env)
        if key:
            headers["Authorization"] = f"Bearer {key}"
        try:
            resp = self.session.post(
                f"{self.endpoint}/chat/completions",
                json=self.payload(request),
                headers=headers,
                timeout=self.timeout_s,
            )
        except requests.Timeout as exc:
            raise BackendTimeout(str(exc)) from exc
        except requests.RequestException as exc:
            raise TransientBackendError(str(exc)) from exc
        if resp.status_code >= 500 or resp.status_code == 429:
            raise TransientBackendError(resp.text[:500], status=resp.status_code)
        if resp.status_code >= 400:
            raise BackendError(resp.text[:500], status=resp.status_code)
        try:
            data = resp.json()
            text = data["choices"][0]["message"]["content"] or ""
        except (ValueError, KeyError, IndexError, TypeError) as exc:
            raise BackendError(f"malformed completion payload: {exc}") from exc
        usage = None
        if isinstance(data.get("usage"), dict):
            u = data["usage"]
            usage = TokenUsage(int(u.get("prompt_tokens", 0)), int(u.get("completion_tokens", 0)))
        return text, usage


def approximate_usage(request: ChatRequest, text: str) -> TokenUsage:
    return TokenUsage(len(request.prompt_text.split()), len(text.split()))


class LlmGateway:
    """Single chokepoint for model calls, with per-question usage ledgers."""

    def __init__(
        self,
        backend: Backend,
        *,
        max_attempts: int = 3,
        backoff_s: float = 0.5,
        clock: Callable[[], float] = time.perf_counter,
        sleep: Callable[[float], None] = time.sleep,
    ) -> None:
        self.backend = backend
        self.max_attempts = max_attempts
        self.backoff_s = backoff_s
        self.clock = clock
        self.sleep = sleep
        self._lock = threading.Lock()
        self._ledgers: dict[str, Ledger] = {}
        self._log: list[CallRecord] = []

    def complete(self, request: ChatRequest) -> ChatResponse:
        attempts = self.max_attempts if getattr(self.backend, "retryable", False) else 1
        for attempt in range(attempts):
            start = self.clock()
            try:
                text, usage = self.backend.send(request)
                break
            except (TransientBackendError, BackendTimeout) as exc:
                if attempt == attempts - 1:
                    raise
                delay = self.backoff_s * (2**attempt)
                log.warning("backend error (%s); retry %d in %.1fs", exc, attempt + 1, delay)
                self.sleep(delay)
        latency = self.clock() - start
        approximate = usage is None
        if usage is None:
            usage = approximate_usage(request, text)
        response = ChatResponse(text, usage, latency, approximate)
        self._record(request, response)
        return response

    def _record(self, request: ChatRequest, response: ChatResponse) -> None:
        qid = request.question_id or GLOBAL_QUESTION
        rec = CallRecord(
            qid,
            request.purpose,
            request.template_id,
            request.prompt_text,
            response.text,
            response.usage,
            response.latency,
            response.approximate,
        )
        with self._lock:
            ledger = self._ledgers.setdefault(qid, Ledger())
            ledger.usage = ledger.usage + response.usage
            ledger.model_seconds += response.latency
            ledger.calls += 1
            ledger.approximate |= response.approximate
            self._log.append(rec)

    def open_question(self, question_id: str) -> None:
        with self._lock:
            self._ledgers.setdefault(question_id, Ledger())

    def close_question(self, question_id: str, wall_seconds: float) -> None:
        with self._lock:
            self._ledgers.setdefault(question_id, Ledger()).wall_seconds = wall_seconds

    def usage_ledger(self, question_id: str) -> Ledger:
        with self._lock:
            if question_id not in self._ledgers:
                raise UnknownQuestion(question_id)
            led = self._ledgers[question_id]
            return Ledger(led.usage, led.model_seconds, led.calls, led.approximate, led.wall_seconds)

    def calls(self, question_id: str | None = None, purpose: Purpose | None = None) -> list[CallRecord]:
        with self._lock:
            return [
                r
                for r in self._log
                if (question_id is None or r.question_id == question_id)
                and (purpose is None or r.purpose is purpose)
            ]

    def call_counts(self, question_id: str | None = None) -> dict[str, int]:
        counts: dict[str, int] = {}
        for r in self.calls(question_id):
            counts[r.purpose.value] = counts.get(r.purpose.value, 0) + 1
        return counts

    def transcript(self, question_ids: Sequence[str] | None = None) -> str:
        """JSON lines transcript; grouped by question so it is stable under parallel runs."""
        records = self.calls()
        if question_ids is not None:
            wanted = set(question_ids)
            records = [r for r in records if r.question_id in wanted]
        records.sort(key=lambda r: r.question_id)
        lines = []
        for r in records:
            rec = to_record(r)
            rec.pop("latency")
            lines.append(json.dumps(rec, sort_keys=True, ensure_ascii=False))
        return "\n".join(lines)
