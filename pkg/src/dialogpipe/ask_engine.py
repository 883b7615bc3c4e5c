"""User simulation and the session-collection loop.

A session starts from a seed query; the assistant backend answers, the
simulator proposes the next user query from the history, and the loop repeats
until the target number of query-response pairs is reached.
"""

from __future__ import annotations

import concurrent.futures
import dataclasses
import enum
import hashlib
import json
import logging
import os
import random
import threading
from pathlib import Path
from typing import Iterable, Mapping, Sequence

from .conversation import BRACKET_TEMPLATE, Conversation, Role, SeedOrigin, render_transcript, require_valid
from .errors import ConfigError, EmptyGeneration, PipelineError
from .gateway import COLLECT_TEMPERATURE, Backend, BackendProfile, ChatRequest, Message, MessageRole, connect
from .prompts import load_prompt

log = logging.getLogger(__name__)

DEFAULT_TARGET_TURNS = 10
HISTORY_SLOT = "{###conversation history}"

# History roles as presented to a query-generating model: it speaks the user's part.
ASK_ROLE_MAP = {Role.USER: MessageRole.ASSISTANT, Role.ASSISTANT: MessageRole.USER}


class SimulatorMode(str, enum.Enum):
    ASK_MODEL = "ask_model"
    PROMPTED_ASSISTANT = "prompted_assistant"


@dataclasses.dataclass(frozen=True)
class SimulatorSpec:
    mode: SimulatorMode
    backend: Backend
    prompt_overrides: Mapping[str, str] = dataclasses.field(default_factory=dict)
    temperature: float = COLLECT_TEMPERATURE
    max_new: int = 256

    def __post_init__(self) -> None:
        object.__setattr__(self, "mode", SimulatorMode(self.mode))
        if isinstance(self.backend, BackendProfile):
            object.__setattr__(self, "backend", connect(self.backend))
        unknown = set(self.prompt_overrides) - {"ask_system", "user_sim"}
        if unknown:
            raise ConfigError(f"unknown prompt overrides: {sorted(unknown)}")

    def prompt(self, key: str) -> str:
        path = self.prompt_overrides.get(key)
        if path:
            return Path(path).read_text(encoding="utf-8").removesuffix("\n")
        return load_prompt(f"{key}.txt")


def ask_system_prompt() -> str:
    """System prompt that casts a query-generating model as the user."""
    return load_prompt("ask_system.txt")


def user_sim_prompt(history: Conversation, template: str | None = None) -> str:
    """Prompt asking a general chat model to continue ``history`` as the user."""
    if not history.is_complete:
        raise PipelineError("user simulation needs a history that ends with an assistant turn")
    template = load_prompt("user_sim.txt") if template is None else template
    return template.replace(HISTORY_SLOT, render_transcript(history, BRACKET_TEMPLATE))


def simulator_request(history: Conversation, sim: SimulatorSpec) -> ChatRequest:
    if not history.is_complete:
        raise PipelineError("user simulation needs a history that ends with an assistant turn")
    if sim.mode is SimulatorMode.ASK_MODEL:
        msgs = [Message(MessageRole.SYSTEM, sim.prompt("ask_system"))]
        msgs += [Message(ASK_ROLE_MAP[t.role], t.content) for t in history.turns]
    else:
        msgs = [Message(MessageRole.USER, user_sim_prompt(history, sim.prompt("user_sim")))]
    return ChatRequest(tuple(msgs), temperature=sim.temperature, max_new=sim.max_new)


def next_user_query(history: Conversation, sim: SimulatorSpec) -> str:
    text = sim.backend.complete(simulator_request(history, sim)).strip()
    if not text:
        raise EmptyGeneration("simulator returned a blank query")
    return text


class SessionFailed(PipelineError):
    """Collection aborted; ``partial`` holds the turns gathered so far."""

    def __init__(self, partial: Conversation, cause: BaseException):
        super().__init__(f"session {partial.session_id} failed after {len(partial.turns)} turns: {cause}")
        self.partial = partial
        self.cause = cause


def collect_session(
    seed: str,
    target_turns: int,
    assistant: Backend,
    sim: SimulatorSpec,
    *,
    session_id: str = "session",
    seed_origin: SeedOrigin | str = SeedOrigin.OTHER,
    max_new: int = 1024,
) -> Conversation:
    """Run the assistant/simulator loop for ``target_turns`` query-response pairs."""
    if target_turns < 1:
        raise ValueError("target_turns must be >= 1")
    if not seed.strip():
        raise ValueError("seed query is blank")
    conv = Conversation(session_id, (), seed_origin, {"simulator": sim.mode.value})
    query = seed
    try:
        for pair in range(target_turns):
            if pair > 0:
                query = next_user_query(conv, sim)
            conv = conv.append(Role.USER, query)
            req = ChatRequest(tuple(Message(m["role"], m["content"]) for m in conv.messages()), max_new=max_new)
            reply = assistant.complete(req)
            if not reply.strip():
                raise EmptyGeneration("assistant returned a blank response")
            conv = conv.append(Role.ASSISTANT, reply)
    except Exception as exc:
        raise SessionFailed(conv.with_metadata(status="in_progress"), exc) from exc
    require_valid(conv)
    return conv


# --- seeds -----------------------------------------------------------------------


@dataclasses.dataclass(frozen=True)
class Seed:
    session_id: str
    query: str
    seed_origin: SeedOrigin


def seed_session_id(position: int, query: str, origin: SeedOrigin | str) -> str:
    digest = hashlib.sha1(query.encode("utf-8")).hexdigest()[:8]
    return f"{SeedOrigin(origin).value}-{position:06d}-{digest}"


def read_seeds(path: str | Path) -> list[Seed]:
    """Read a seed file of ``{"query", "seed_origin"}`` JSONL records."""
    seeds = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                query = obj["query"]
                origin = SeedOrigin(obj.get("seed_origin", SeedOrigin.OTHER.value))
            except (ValueError, KeyError, TypeError) as exc:
                raise ConfigError(f"{path}:{lineno}: bad seed record: {exc}") from exc
            if not isinstance(query, str) or not query.strip():
                raise ConfigError(f"{path}:{lineno}: seed query is empty")
            seeds.append(Seed(seed_session_id(len(seeds), query, origin), query, origin))
    return seeds


def sample_seeds(seeds: Sequence[Seed], n: int, rng_seed: int = 0) -> list[Seed]:
    """Uniform sample without replacement; keeps file order among the chosen."""
    if n >= len(seeds):
        return list(seeds)
    chosen = sorted(random.Random(rng_seed).sample(range(len(seeds)), n))
    return [seeds[i] for i in chosen]


# --- batch driver -------------------------------------------------------------------


@dataclasses.dataclass
class CollectionJob:
    seeds: Sequence[Seed]
    assistant: Backend
    simulator: SimulatorSpec
    output_path: str | Path
    checkpoint_path: str | Path
    target_turns: int = DEFAULT_TARGET_TURNS
    workers: int = 1

    def __post_init__(self) -> None:
        if self.target_turns < 1:
            raise ConfigError("target_turns must be >= 1")
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")
        if isinstance(self.assistant, BackendProfile):
            self.assistant = connect(self.assistant)


@dataclasses.dataclass(frozen=True)
class JobSummary:
    completed: int
    failed: int
    resumed: int


class Checkpoint:
    """Append-only JSONL log of session outcomes; the last record per session wins."""

    def __init__(self, path: str | Path):
        self.path = Path(path)
        self._lock = threading.Lock()
        self.records: dict[str, dict] = {}
        if self.path.exists():
            with open(self.path, encoding="utf-8") as fh:
                for lineno, line in enumerate(fh, 1):
                    if not line.strip():
                        continue
                    try:
                        rec = json.loads(line)
                    except json.JSONDecodeError:
                        log.warning("%s:%d: ignoring torn checkpoint line", self.path, lineno)
                        continue
                    self.records[rec["session_id"]] = rec

    def completed(self) -> dict[str, Conversation]:
        return {
            sid: Conversation.from_dict(rec["conversation"])
            for sid, rec in self.records.items()
            if rec["status"] == "completed"
        }

    def record(self, session_id: str, status: str, conv: Conversation, error: str | None = None) -> None:
        rec = {"session_id": session_id, "status": status, "conversation": conv.to_dict(), "error": error}
        line = json.dumps(rec, ensure_ascii=False) + "\n"
        with self._lock:
            self.records[session_id] = rec
            self.path.parent.mkdir(parents=True, exist_ok=True)
            with open(self.path, "a", encoding="utf-8") as fh:
                fh.write(line)
                fh.flush()


def run_job(job: CollectionJob) -> JobSummary:
    """Collect every seed's session, resuming from the checkpoint.

    Output is rewritten at the end with all completed sessions of the job,
    sorted by session_id, so it does not depend on worker count or timing.
    """
    ids = [s.session_id for s in job.seeds]
    if len(set(ids)) != len(ids):
        raise ConfigError("seed session ids are not unique")
    checkpoint = Checkpoint(job.checkpoint_path)
    done = checkpoint.completed()
    pending = [s for s in job.seeds if s.session_id not in done]
    resumed = len(job.seeds) - len(pending)

    def work(seed: Seed) -> bool:
        try:
            conv = collect_session(
                seed.query,
                job.target_turns,
                job.assistant,
                job.simulator,
                session_id=seed.session_id,
                seed_origin=seed.seed_origin,
            )
        except SessionFailed as exc:
            log.warning("%s", exc)
            checkpoint.record(seed.session_id, "failed", exc.partial, f"{type(exc.cause).__name__}: {exc.cause}")
            return False
        checkpoint.record(seed.session_id, "completed", conv)
        return True

    with concurrent.futures.ThreadPoolExecutor(max_workers=job.workers) as pool:
        outcomes = list(pool.map(work, pending))

    done = checkpoint.completed()
    convs = [done[sid] for sid in sorted(ids) if sid in done]
    _write_atomic(job.output_path, "".join(json.dumps(c.to_dict(), ensure_ascii=False) + "\n" for c in convs))
    return JobSummary(completed=sum(outcomes), failed=len(outcomes) - sum(outcomes), resumed=resumed)


def _write_atomic(path: str | Path, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text, encoding="utf-8")
    os.replace(tmp, path)


def seeds_from_queries(queries: Iterable[str], origin: SeedOrigin | str = SeedOrigin.OTHER) -> list[Seed]:
    return [Seed(seed_session_id(i, q, origin), q, SeedOrigin(origin)) for i, q in enumerate(queries)]
