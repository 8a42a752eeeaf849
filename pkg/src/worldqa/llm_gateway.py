"""Backend-agnostic chat-completion access.

Backends implement ``complete(request) -> list[str]``. ``Gateway`` adds
retries with exponential backoff, an in-flight bound and a usage ledger.

Backends:

- ``HttpBackend`` speaks the common chat-completion wire format over HTTP.
- ``ScriptedBackend`` answers from an ordered transcript, a pattern table
  (exact, prefix or substring match on the last message) or named handlers.
- ``RecordingBackend`` wraps any backend and appends every exchange to a
  JSONL transcript; ``ReplayBackend`` plays such a transcript back.

Transcript line: ``{"request_hash": str, "request": {...}, "responses": [...]}``.
"""
from __future__ import annotations

import json
import logging
import os
import threading
import time
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence, Union

import requests

from worldqa.common import content_hash

log = logging.getLogger(__name__)

ROLES = ("system", "user", "assistant", "tool")


class GatewayError(RuntimeError):
    pass


class GatewayExhausted(GatewayError):
    """The retry budget ran out."""


class TransientError(GatewayError):
    """Worth retrying (rate limit, server error, dropped connection)."""

    def __init__(self, message: str, status: Optional[int] = None):
        super().__init__(message)
        self.status = status


class TranscriptDivergence(GatewayError):
    pass


class UnmatchedPrompt(GatewayError):
    pass


@dataclass(frozen=True)
class ChatMessage:
    role: str
    content: str

    def __post_init__(self) -> None:
        if self.role not in ROLES:
            raise ValueError(f"bad role {self.role!r}")
        if self.role in ("user", "assistant") and not self.content:
            raise ValueError(f"{self.role} message needs content")

    def to_json(self) -> dict:
        return {"role": self.role, "content": self.content}


@dataclass(frozen=True)
class CompletionRequest:
    """One completion call.

    ``metadata`` never goes over the wire and is excluded from the request
    hash; in-process scripted handlers may read it.
    """

    model: str
    messages: tuple[ChatMessage, ...]
    temperature: float = 0.0
    n: int = 1
    max_tokens: int = 512
    metadata: dict = field(default_factory=dict, compare=False, repr=False)

    def __post_init__(self) -> None:
        object.__setattr__(self, "messages", tuple(
            m if isinstance(m, ChatMessage) else ChatMessage(**m) for m in self.messages))
        if not self.messages:
            raise ValueError("a request needs at least one message")
        if not 0.0 <= self.temperature <= 2.0:
            raise ValueError("temperature must lie in [0, 2]")
        if self.n < 1 or self.max_tokens < 1:
            raise ValueError("n and max_tokens must be positive")

    @property
    def prompt(self) -> str:
        return self.messages[-1].content

    def to_wire(self) -> dict:
        return {"model": self.model, "messages": [m.to_json() for m in self.messages],
                "temperature": self.temperature, "n": self.n, "max_tokens": self.max_tokens}

    @classmethod
    def from_wire(cls, d: dict) -> "CompletionRequest":
        return cls(d["model"], tuple(ChatMessage(**m) for m in d["messages"]),
                   d.get("temperature", 0.0), d.get("n", 1), d.get("max_tokens", 512))

    def digest(self) -> str:
        return content_hash(self.to_wire(), 32)


def estimate_tokens(text: str) -> int:
    return (len(text) + 3) // 4


class UsageLedger:
    """Thread-safe per-backend counters."""

    FIELDS = ("requests", "prompt_tokens", "response_tokens", "failures", "retries")

    def __init__(self) -> None:
        self._lock = threading.Lock()
        self._counts: dict[str, dict[str, int]] = defaultdict(lambda: dict.fromkeys(self.FIELDS, 0))

    def add(self, backend: str, **deltas: int) -> None:
        with self._lock:
            row = self._counts[backend]
            for k, v in deltas.items():
                if k not in row:
                    raise KeyError(k)
                if v < 0:
                    raise ValueError("ledger counters are monotone")
                row[k] += v

    def snapshot(self) -> dict[str, dict[str, int]]:
        with self._lock:
            return {k: dict(v) for k, v in sorted(self._counts.items())}

    def get(self, backend: str, name: str) -> int:
        return self.snapshot().get(backend, {}).get(name, 0)


# ---------------------------------------------------------------------------
# backends


class HttpBackend:
    """Chat-completion endpoint; raises ``TransientError`` on 429/5xx."""

    def __init__(self, base_url: str, model: Optional[str] = None, api_key_env: str = "OPENAI_API_KEY",
                 timeout: float = 60.0, post: Callable = requests.post, name: str = "http"):
        self.url = base_url.rstrip("/") + "/chat/completions"
        self.model = model
        self.api_key_env = api_key_env
        self.timeout = timeout
        self._post = post
        self.name = name

    def complete(self, request: CompletionRequest) -> list[str]:
        body = request.to_wire()
        if self.model:
            body["model"] = self.model
        headers = {"Content-Type": "application/json"}
        key = os.environ.get(self.api_key_env)
        if key:
            headers["Authorization"] = f"Bearer {key}"
        try:
            resp = self._post(self.url, json=body, headers=headers, timeout=self.timeout)
        except (requests.ConnectionError, requests.Timeout) as e:
            raise TransientError(str(e)) from e
        status = resp.status_code
        if status == 429 or status >= 500:
            raise TransientError(f"HTTP {status}", status)
        if status >= 400:
            raise GatewayError(f"HTTP {status}: {resp.text[:200]}")
        choices = resp.json()["choices"]
        return [c["message"]["content"] or "" for c in choices]


Reply = Union[str, Sequence[str]]
Handler = Callable[[CompletionRequest], Reply]


@dataclass(frozen=True)
class Rule:
    pattern: str
    replies: tuple = ()
    mode: str = "contains"      # exact | prefix | contains
    handler: Optional[str] = None

    def __post_init__(self) -> None:
        if self.mode not in ("exact", "prefix", "contains"):
            raise ValueError(f"bad match mode {self.mode!r}")
        if isinstance(self.replies, str):
            object.__setattr__(self, "replies", (self.replies,))
        object.__setattr__(self, "replies", tuple(self.replies))
        if not self.replies and self.handler is None:
            raise ValueError("a rule needs replies or a handler")

    def matches(self, prompt: str) -> bool:
        if self.mode == "exact":
            return prompt == self.pattern
        if self.mode == "prefix":
            return prompt.startswith(self.pattern)
        return self.pattern in prompt


def _as_list(reply: Reply, n: int) -> list[str]:
    items = [reply] if isinstance(reply, str) else list(reply)
    if not items:
        raise UnmatchedPrompt("handler produced no reply")
    return [items[i % len(items)] for i in range(n)]


class ScriptedBackend:
    """Deterministic canned replies.

    Resolution order per call: the next unused ``transcript`` entry, then the
    first matching rule, then ``default`` handler. A rule's replies fill the
    ``n`` samples in order (cycling when ``n`` exceeds them). Anything left
    unmatched raises ``UnmatchedPrompt``.
    """

    def __init__(self, rules: Union[Sequence[Rule], dict, None] = None,
                 transcript: Optional[Sequence[Reply]] = None,
                 handlers: Optional[dict[str, Handler]] = None,
                 default: Optional[str] = None, name: str = "scripted"):
        if isinstance(rules, dict):
            rules = [v if isinstance(v, Rule) else Rule(_split_key(k)[0], v, _split_key(k)[1])
                     for k, v in rules.items()]
        self.rules = tuple(rules or ())
        self.handlers = dict(handlers or {})
        self.default = default
        for r in self.rules:
            if r.handler is not None and r.handler not in self.handlers:
                raise KeyError(f"unknown handler {r.handler!r}")
        if default is not None and default not in self.handlers:
            raise KeyError(f"unknown handler {default!r}")
        self._transcript = list(transcript or ())
        self._cursor = 0
        self._lock = threading.Lock()
        self.name = name

    def complete(self, request: CompletionRequest) -> list[str]:
        with self._lock:
            if self._cursor < len(self._transcript):
                reply = self._transcript[self._cursor]
                self._cursor += 1
                return _as_list(reply, request.n)
        for rule in self.rules:
            if rule.matches(request.prompt):
                if rule.handler is not None:
                    return _as_list(self.handlers[rule.handler](request), request.n)
                return _as_list(rule.replies, request.n)
        if self.default is not None:
            return _as_list(self.handlers[self.default](request), request.n)
        raise UnmatchedPrompt(request.prompt[:200])


def _split_key(key: str) -> tuple[str, str]:
    for mode in ("exact", "prefix", "contains"):
        if key.startswith(mode + ":"):
            return key[len(mode) + 1:], mode
    return key, "contains"


class FlakyBackend:
    """Test helper: raises scripted HTTP failures before delegating."""

    def __init__(self, inner, statuses: Sequence[int], name: str = "flaky"):
        self.inner = inner
        self.statuses = list(statuses)
        self.name = name

    def complete(self, request: CompletionRequest) -> list[str]:
        if self.statuses:
            status = self.statuses.pop(0)
            if status == 429 or status >= 500:
                raise TransientError(f"HTTP {status}", status)
        return self.inner.complete(request)


class RecordingBackend:
    def __init__(self, inner, path: Union[str, Path]):
        self.inner = inner
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self.name = getattr(inner, "name", "recorded")
        self._lock = threading.Lock()

    def complete(self, request: CompletionRequest) -> list[str]:
        out = self.inner.complete(request)
        line = {"request_hash": request.digest(), "request": request.to_wire(), "responses": out}
        with self._lock, self.path.open("a", encoding="utf-8") as f:
            f.write(json.dumps(line, sort_keys=True) + "\n")
        return out


def record_session(backend, path: Union[str, Path]) -> RecordingBackend:
    return RecordingBackend(backend, path)


class ReplayBackend:
    """Replays a recorded transcript in call order."""

    def __init__(self, path: Union[str, Path], name: str = "replay"):
        self.path = Path(path)
        with self.path.open(encoding="utf-8") as f:
            self.entries = [json.loads(line) for line in f if line.strip()]
        self._cursor = 0
        self._lock = threading.Lock()
        self.name = name

    def complete(self, request: CompletionRequest) -> list[str]:
        with self._lock:
            if self._cursor >= len(self.entries):
                raise TranscriptDivergence("transcript exhausted")
            entry = self.entries[self._cursor]
            if entry["request_hash"] != request.digest():
                raise TranscriptDivergence(
                    f"call {self._cursor}: expected request {entry['request_hash']}, got {request.digest()}")
            self._cursor += 1
        return list(entry["responses"])


# ---------------------------------------------------------------------------
# gateway


@dataclass
class RetryPolicy:
    max_attempts: int = 5
    base_delay: float = 1.0
    factor: float = 2.0

    def delays(self) -> list[float]:
        return [self.base_delay * self.factor ** i for i in range(self.max_attempts - 1)]


class Gateway:
    """A named handle ("actor", "annotator", ...) over one backend."""

    def __init__(self, backend, model: str = "scripted", ledger: Optional[UsageLedger] = None,
                 retry: Optional[RetryPolicy] = None, parallelism: int = 4,
                 sleep: Callable[[float], None] = time.sleep, name: Optional[str] = None):
        self.backend = backend
        self.model = model
        self.ledger = ledger or UsageLedger()
        self.retry = retry or RetryPolicy()
        self._sem = threading.BoundedSemaphore(parallelism)
        self._sleep = sleep
        self.name = name or getattr(backend, "name", "backend")
        self.sleeps: list[float] = []

    def request(self, messages, *, temperature: float = 0.0, n: int = 1, max_tokens: int = 512,
                metadata: Optional[dict] = None) -> CompletionRequest:
        if isinstance(messages, str):
            messages = [ChatMessage("user", messages)]
        return CompletionRequest(self.model, tuple(messages), temperature, n, max_tokens, metadata or {})

    def ask(self, messages, **kw) -> list[str]:
        return self.complete(self.request(messages, **kw))

    def complete(self, request: CompletionRequest) -> list[str]:
        delays = self.retry.delays()
        prompt_tokens = sum(estimate_tokens(m.content) for m in request.messages)
        for attempt in range(self.retry.max_attempts):
            try:
                with self._sem:
                    out = self.backend.complete(request)
            except TransientError as e:
                self.ledger.add(self.name, failures=1)
                if attempt + 1 >= self.retry.max_attempts:
                    raise GatewayExhausted(f"{self.name}: {e} after {attempt + 1} attempts") from e
                self.ledger.add(self.name, retries=1)
                log.warning("%s: %s, retry %d in %.1fs", self.name, e, attempt + 1, delays[attempt])
                self.sleeps.append(delays[attempt])
                self._sleep(delays[attempt])
                continue
            if len(out) != request.n:
                raise GatewayError(f"{self.name}: asked for {request.n} samples, got {len(out)}")
            self.ledger.add(self.name, requests=1, prompt_tokens=prompt_tokens,
                            response_tokens=sum(estimate_tokens(o) for o in out))
            return out
        raise AssertionError("unreachable")  # pragma: no cover


def build_backend(cfg: dict, handlers: Optional[dict[str, Handler]] = None):
    """Backend from a config block (secrets come from the environment)."""
    kind = cfg.get("kind", "scripted")
    if kind == "http":
        base = cfg.get("base_url") or os.environ.get("WORLDQA_BASE_URL")
        if not base:
            raise ValueError("http backend needs base_url or WORLDQA_BASE_URL")
        return HttpBackend(base, cfg.get("model"), cfg.get("api_key_env", "OPENAI_API_KEY"),
                           float(cfg.get("timeout", 60.0)))
    if kind == "replay":
        return ReplayBackend(cfg["path"])
    if kind == "scripted":
        handlers = dict(handlers or {})
        rules = [Rule(r["pattern"], tuple(r.get("replies", ())), r.get("mode", "contains"),
                      r.get("handler")) for r in cfg.get("rules", ())]
        return ScriptedBackend(rules, cfg.get("transcript"), handlers, cfg.get("default"))
    raise ValueError(f"unknown backend kind {kind!r}")
