"""Chat-completion backends behind one ``complete(request) -> text`` surface.

Two kinds exist: an OpenAI-compatible HTTP client (retries with jittered
exponential backoff, sliding-window rate limit, bearer auth read from an
environment variable) and a scripted mock for offline, deterministic runs.
Every logical call is appended to a shared JSONL call log.
"""

from __future__ import annotations

import collections
import dataclasses
import datetime as _dt
import enum
import hashlib
import json
import logging
import os
import random
import threading
import time
from pathlib import Path
from typing import Any, Iterable, Mapping, Protocol, Sequence

import httpx

from .errors import (
    AuthError,
    ExhaustedScript,
    GatewayError,
    ProtocolError,
    RateLimited,
    ScriptParseError,
    TransportError,
)

log = logging.getLogger(__name__)

COLLECT_TEMPERATURE = 0.7
JUDGE_TEMPERATURE = 0.0
DEFAULT_MAX_NEW = 1024


class MessageRole(str, enum.Enum):
    SYSTEM = "system"
    USER = "user"
    ASSISTANT = "assistant"


@dataclasses.dataclass(frozen=True)
class Message:
    role: MessageRole
    content: str

    def __post_init__(self) -> None:
        object.__setattr__(self, "role", MessageRole(self.role))

    def to_dict(self) -> dict[str, str]:
        return {"role": self.role.value, "content": self.content}


@dataclasses.dataclass(frozen=True)
class ChatRequest:
    messages: tuple[Message, ...]
    temperature: float = COLLECT_TEMPERATURE
    max_new: int = DEFAULT_MAX_NEW
    model_id: str = ""

    def __post_init__(self) -> None:
        msgs = tuple(m if isinstance(m, Message) else Message(m["role"], m["content"]) for m in self.messages)
        object.__setattr__(self, "messages", msgs)
        if not msgs:
            raise ValueError("ChatRequest needs at least one message")
        for i, m in enumerate(msgs):
            if m.role is MessageRole.SYSTEM and i != 0:
                raise ValueError("system message is only allowed at position 0")
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0")
        if self.max_new < 1:
            raise ValueError("max_new must be positive")

    @classmethod
    def single(cls, content: str, **kw: Any) -> ChatRequest:
        return cls((Message(MessageRole.USER, content),), **kw)

    @property
    def system(self) -> str | None:
        first = self.messages[0]
        return first.content if first.role is MessageRole.SYSTEM else None

    @property
    def non_system(self) -> tuple[Message, ...]:
        return tuple(m for m in self.messages if m.role is not MessageRole.SYSTEM)

    def to_wire(self, model: str | None = None) -> dict[str, Any]:
        return {
            "model": model or self.model_id,
            "messages": [m.to_dict() for m in self.messages],
            "temperature": self.temperature,
            "max_tokens": self.max_new,
        }


class BackendKind(str, enum.Enum):
    HTTP = "http_openai_compatible"
    MOCK = "scripted_mock"


@dataclasses.dataclass(frozen=True)
class RetryPolicy:
    max_attempts: int = 4
    backoff_base: float = 1.0
    backoff_cap: float = 60.0

    def __post_init__(self) -> None:
        if self.max_attempts < 1:
            raise ValueError("max_attempts must be >= 1")
        if self.backoff_base < 0:
            raise ValueError("backoff_base must be >= 0")


@dataclasses.dataclass(frozen=True)
class BackendProfile:
    """Static description of a backend. Holds no secrets, only the env var name."""

    name: str
    kind: BackendKind
    endpoint: str | None = None
    auth_env: str | None = None
    timeout: float = 60.0
    retry: RetryPolicy = RetryPolicy()
    rate_limit: float = 60.0  # requests per minute
    model: str = ""
    temperature: float | None = None  # overrides the caller's default when set
    script_path: str | None = None
    echo: bool = False

    def __post_init__(self) -> None:
        object.__setattr__(self, "kind", BackendKind(self.kind))
        if self.rate_limit <= 0:
            raise ValueError("rate_limit must be > 0")
        if self.timeout <= 0:
            raise ValueError("timeout must be > 0")
        if self.kind is BackendKind.HTTP and not self.endpoint:
            raise ValueError(f"profile {self.name!r}: http backend needs an endpoint")

    def to_dict(self) -> dict[str, Any]:
        d = dataclasses.asdict(self)
        d["kind"] = self.kind.value
        return d


class Backend(Protocol):
    profile: BackendProfile

    def complete(self, req: ChatRequest) -> str: ...


# --- clocks, rate limiting, call log ------------------------------------------


class Clock:
    def now(self) -> float:
        return time.monotonic()

    def sleep(self, seconds: float) -> None:
        if seconds > 0:
            time.sleep(seconds)


class VirtualClock(Clock):
    """Clock whose ``sleep`` advances time instantly. For tests."""

    def __init__(self, start: float = 0.0):
        self.t = start
        self._lock = threading.Lock()

    def now(self) -> float:
        with self._lock:
            return self.t

    def sleep(self, seconds: float) -> None:
        with self._lock:
            self.t += max(seconds, 0.0)


class RateLimiter:
    """Sliding-window limiter: at most ``per_minute`` acquisitions in any 60 s."""

    window = 60.0

    def __init__(self, per_minute: float, clock: Clock | None = None):
        self.capacity = max(int(per_minute), 1)
        self.clock = clock or Clock()
        self._issued: collections.deque[float] = collections.deque()
        self._lock = threading.Lock()

    def acquire(self) -> float:
        """Block until a slot is free; return the time the slot was taken."""
        with self._lock:
            while True:
                now = self.clock.now()
                while self._issued and self._issued[0] <= now - self.window:
                    self._issued.popleft()
                if len(self._issued) < self.capacity:
                    self._issued.append(now)
                    return now
                self.clock.sleep(self._issued[0] + self.window - now)


class CallLog:
    """Thread-safe JSONL call log; also keeps records in memory for audits."""

    def __init__(self, path: str | Path | None = None):
        self.path = Path(path) if path else None
        self.records: list[dict[str, Any]] = []
        self._lock = threading.Lock()
        if self.path:
            self.path.parent.mkdir(parents=True, exist_ok=True)

    def write(
        self,
        profile: str,
        request: ChatRequest,
        response: str | None,
        latency_ms: float,
        attempts: list[dict[str, Any]],
    ) -> None:
        rec = {
            "ts": _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="milliseconds"),
            "profile": profile,
            "request": request.to_wire(),
            "response": response,
            "latency_ms": round(latency_ms, 3),
            "attempts": attempts,
        }
        with self._lock:
            self.records.append(rec)
            if self.path:
                with open(self.path, "a", encoding="utf-8") as fh:
                    fh.write(json.dumps(rec, ensure_ascii=False) + "\n")

    def for_profile(self, name: str) -> list[dict[str, Any]]:
        with self._lock:
            return [r for r in self.records if r["profile"] == name]


def _resolve_temperature(profile: BackendProfile, req: ChatRequest) -> ChatRequest:
    changes: dict[str, Any] = {}
    if profile.temperature is not None and profile.temperature != req.temperature:
        changes["temperature"] = profile.temperature
    if profile.model and not req.model_id:
        changes["model_id"] = profile.model
    return dataclasses.replace(req, **changes) if changes else req


# --- scripted mock -------------------------------------------------------------


@dataclasses.dataclass(frozen=True)
class MockRule:
    match: str
    reply: str


def _expand(reply: str, req: ChatRequest) -> str:
    # Placeholders let one rule produce request-specific but deterministic text.
    if "{{" not in reply:
        return reply
    last = req.messages[-1].content
    digest = hashlib.sha256(json.dumps(req.to_wire(""), sort_keys=True).encode()).hexdigest()[:8]
    return (
        reply.replace("{{last}}", last)
        .replace("{{n_messages}}", str(len(req.messages)))
        .replace("{{hash}}", digest)
    )


class MockBackend:
    """Deterministic scripted backend.

    Resolution order per call: first rule whose ``match`` substring occurs in
    any message, then the next queued reply, then echo of the last user message
    (if enabled), else :class:`ExhaustedScript`. Queue consumption follows the
    global call order.
    """

    def __init__(
        self,
        profile: BackendProfile | None = None,
        *,
        rules: Sequence[MockRule] = (),
        queue: Iterable[str] = (),
        echo: bool | None = None,
        call_log: CallLog | None = None,
    ):
        self.profile = profile or BackendProfile("mock", BackendKind.MOCK)
        self.rules = list(rules)
        self.queue = collections.deque(queue)
        self.echo = self.profile.echo if echo is None else echo
        self.call_log = call_log
        self.requests: list[ChatRequest] = []
        self._lock = threading.Lock()

    @classmethod
    def from_script(cls, profile: BackendProfile, call_log: CallLog | None = None) -> MockBackend:
        rules: list[MockRule] = []
        queue: list[str] = []
        echo = profile.echo
        if profile.script_path:
            rules, queue, scripted_echo = parse_mock_script(profile.script_path)
            echo = echo or scripted_echo
        return cls(profile, rules=rules, queue=queue, echo=echo, call_log=call_log)

    def _resolve(self, req: ChatRequest) -> str:
        haystack = "\n".join(m.content for m in req.messages)
        for rule in self.rules:
            if rule.match in haystack:
                return _expand(rule.reply, req)
        if self.queue:
            return _expand(self.queue.popleft(), req)
        if self.echo:
            users = [m for m in req.messages if m.role is MessageRole.USER]
            return (users or list(req.messages))[-1].content
        raise ExhaustedScript(f"mock {self.profile.name!r}: no rule matched and the reply queue is empty")

    def complete(self, req: ChatRequest) -> str:
        req = _resolve_temperature(self.profile, req)
        start = time.perf_counter()
        with self._lock:
            self.requests.append(req)
            try:
                reply = self._resolve(req)
            except ExhaustedScript as exc:
                if self.call_log:
                    attempts = [{"attempt": 1, "status": "error", "error": str(exc)}]
                    self.call_log.write(self.profile.name, req, None, 0.0, attempts)
                raise
        if self.call_log:
            latency = (time.perf_counter() - start) * 1000
            self.call_log.write(self.profile.name, req, reply, latency, [{"attempt": 1, "status": "ok"}])
        return reply


def parse_mock_script(path: str | Path) -> tuple[list[MockRule], list[str], bool]:
    """Parse a mock script.

    Each JSONL line is one of ``{"match": s, "reply": r}`` (rule),
    ``{"reply": r}`` (queued reply) or ``{"echo": true}``. Blank lines and
    lines starting with ``#`` are ignored.
    """
    rules: list[MockRule] = []
    queue: list[str] = []
    echo = False
    try:
        lines = Path(path).read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise ScriptParseError(path, 0, f"cannot read mock script: {exc}") from exc
    for lineno, line in enumerate(lines, 1):
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ScriptParseError(path, lineno, f"invalid JSON: {exc.msg}") from exc
        if not isinstance(obj, dict):
            raise ScriptParseError(path, lineno, "expected a JSON object")
        extra = set(obj) - {"match", "reply", "echo"}
        if extra:
            raise ScriptParseError(path, lineno, f"unknown keys {sorted(extra)}")
        if "echo" in obj:
            echo = bool(obj["echo"])
            continue
        reply = obj.get("reply")
        if not isinstance(reply, str):
            raise ScriptParseError(path, lineno, "'reply' must be a string")
        if "match" in obj and obj["match"] is not None:
            if not isinstance(obj["match"], str):
                raise ScriptParseError(path, lineno, "'match' must be a string")
            rules.append(MockRule(obj["match"], reply))
        else:
            queue.append(reply)
    return rules, queue, echo


def load_mock_script(path: str | Path, name: str | None = None) -> BackendProfile:
    """Validate a mock script and return a profile that replays it."""
    parse_mock_script(path)
    return BackendProfile(name or Path(path).stem, BackendKind.MOCK, script_path=str(path))


# --- HTTP ---------------------------------------------------------------------


class _Retryable(Exception):
    def __init__(self, error: GatewayError, retry_after: float | None = None):
        super().__init__(str(error))
        self.error = error
        self.retry_after = retry_after


def extract_content(body: Any) -> str:
    """Pull ``choices[0].message.content`` out of a chat-completions body."""
    try:
        content = body["choices"][0]["message"]["content"]
    except (KeyError, IndexError, TypeError) as exc:
        raise ProtocolError(f"malformed completion body: missing choices[0].message.content ({exc!r})") from None
    if not isinstance(content, str):
        raise ProtocolError("malformed completion body: message content is not a string")
    return content


class HttpBackend:
    def __init__(
        self,
        profile: BackendProfile,
        *,
        call_log: CallLog | None = None,
        limiter: RateLimiter | None = None,
        clock: Clock | None = None,
        rng: random.Random | None = None,
        transport: httpx.BaseTransport | None = None,
    ):
        self.profile = profile
        self.call_log = call_log
        self.clock = clock or Clock()
        self.limiter = limiter or RateLimiter(profile.rate_limit, self.clock)
        self.rng = rng or random.Random()
        self._client = httpx.Client(timeout=profile.timeout, transport=transport)

    def close(self) -> None:
        self._client.close()

    def _headers(self) -> dict[str, str]:
        headers = {"Content-Type": "application/json"}
        env = self.profile.auth_env
        if env:
            secret = os.environ.get(env)
            if not secret:
                raise AuthError(f"profile {self.profile.name!r}: environment variable {env} is not set")
            headers["Authorization"] = f"Bearer {secret}"
        return headers

    def backoff(self, attempt: int) -> float:
        base = self.profile.retry.backoff_base * (2 ** (attempt - 1))
        return min(base * (0.5 + self.rng.random()), self.profile.retry.backoff_cap)

    def _attempt(self, payload: dict[str, Any], headers: dict[str, str]) -> str:
        self.limiter.acquire()
        try:
            resp = self._client.post(self.profile.endpoint, json=payload, headers=headers)
        except httpx.TimeoutException as exc:
            raise _Retryable(TransportError(f"timeout: {exc}")) from exc
        except httpx.TransportError as exc:
            raise _Retryable(TransportError(f"transport failure: {exc}")) from exc
        if resp.status_code in (401, 403):
            raise AuthError(f"profile {self.profile.name!r}: credential rejected (HTTP {resp.status_code})")
        if resp.status_code == 429:
            retry_after = resp.headers.get("retry-after")
            try:
                wait = float(retry_after) if retry_after else None
            except ValueError:
                wait = None
            raise _Retryable(RateLimited("HTTP 429 from backend"), wait)
        if resp.status_code >= 500:
            raise _Retryable(TransportError(f"HTTP {resp.status_code} from backend"))
        if resp.status_code >= 400:
            raise ProtocolError(f"HTTP {resp.status_code}: {resp.text[:200]}")
        try:
            body = resp.json()
        except ValueError:
            raise ProtocolError("completion body is not JSON") from None
        return extract_content(body)

    def complete(self, req: ChatRequest) -> str:
        req = _resolve_temperature(self.profile, req)
        headers = self._headers()
        payload = req.to_wire(self.profile.model or req.model_id)
        attempts: list[dict[str, Any]] = []
        start = time.perf_counter()
        policy = self.profile.retry
        for n in range(1, policy.max_attempts + 1):
            try:
                content = self._attempt(payload, headers)
            except _Retryable as exc:
                attempts.append({"attempt": n, "status": "error", "error": str(exc.error)})
                if n == policy.max_attempts:
                    self._log(req, None, start, attempts)
                    raise exc.error from None
                wait = exc.retry_after if exc.retry_after is not None else self.backoff(n)
                log.warning("%s: attempt %d failed (%s); retrying in %.2fs", self.profile.name, n, exc.error, wait)
                self.clock.sleep(wait)
            except GatewayError as exc:
                attempts.append({"attempt": n, "status": "error", "error": str(exc)})
                self._log(req, None, start, attempts)
                raise
            else:
                attempts.append({"attempt": n, "status": "ok"})
                self._log(req, content, start, attempts)
                return content
        raise AssertionError("unreachable")

    def _log(self, req: ChatRequest, response: str | None, start: float, attempts: list[dict[str, Any]]) -> None:
        if self.call_log:
            self.call_log.write(self.profile.name, req, response, (time.perf_counter() - start) * 1000, attempts)


def connect(profile: BackendProfile, *, call_log: CallLog | None = None, **kw: Any) -> Backend:
    """Instantiate the backend described by ``profile``."""
    if profile.kind is BackendKind.MOCK:
        return MockBackend.from_script(profile, call_log=call_log)
    return HttpBackend(profile, call_log=call_log, **kw)


_backends: dict[BackendProfile, Backend] = {}
_backends_lock = threading.Lock()


def complete(profile: BackendProfile, req: ChatRequest, *, call_log: CallLog | None = None) -> str:
    """One-shot completion through a process-wide backend cached per profile."""
    with _backends_lock:
        backend = _backends.get(profile)
        if backend is None:
            backend = _backends[profile] = connect(profile, call_log=call_log)
    return backend.complete(req)


def profile_from_mapping(name: str, data: Mapping[str, Any], base_dir: Path | None = None) -> BackendProfile:
    data = dict(data)
    retry = RetryPolicy(**data.pop("retry", {}))
    script = data.pop("script_path", None)
    if script and base_dir and not Path(script).is_absolute():
        script = str(base_dir / script)
    return BackendProfile(name=name, retry=retry, script_path=script, **data)


def ensure_backend(obj: Backend | BackendProfile, call_log: CallLog | None = None) -> Backend:
    return connect(obj, call_log=call_log) if isinstance(obj, BackendProfile) else obj

