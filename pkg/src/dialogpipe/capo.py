"""Context-aware preference pairs.

For each selected context-dependent query the dataset's original response is
the chosen answer; rejected answers simulate three context failures:

* neglect: the query answered with no history at all;
* hallucination: the backend first guesses what the query's references mean
  without seeing the history, then answers under that guess;
* misunderstanding: the backend sees the history but is told to bind the
  query to an earlier, wrong topic.

The strategy prompts are original to this package (see ``templates/capo_*``).
"""

from __future__ import annotations

import concurrent.futures
import dataclasses
import enum
import json
import logging
from pathlib import Path
from typing import Iterable, Mapping, Sequence

from .conversation import ROLE_PREFIX_TEMPLATE, Conversation, Role, Turn, render_transcript
from .errors import EmptyGeneration, EmptyGuess, InsufficientHistory, PipelineError
from .gateway import COLLECT_TEMPERATURE, Backend, ChatRequest
from .prompts import load_prompt

log = logging.getLogger(__name__)


class Strategy(str, enum.Enum):
    NEGLECT = "neglect"
    HALLUCINATION = "hallucination"
    MISUNDERSTANDING = "misunderstanding"


STRATEGY_ORDER = {s: i for i, s in enumerate(Strategy)}


@dataclasses.dataclass(frozen=True)
class PreferencePair:
    session_id: str
    turn_index: int
    context: tuple[Turn, ...]
    query: str
    chosen: str
    rejected: str
    strategy: Strategy

    def __post_init__(self) -> None:
        object.__setattr__(self, "strategy", Strategy(self.strategy))
        object.__setattr__(self, "context", tuple(self.context))
        if self.chosen == self.rejected:
            raise ValueError("chosen and rejected responses are identical")
        if self.context and self.context[-1].role is not Role.ASSISTANT:
            raise ValueError("pair context must end with an assistant turn")

    @property
    def sort_key(self) -> tuple[str, int, int]:
        return (self.session_id, self.turn_index, STRATEGY_ORDER[self.strategy])

    def context_conversation(self) -> Conversation:
        return Conversation(self.session_id, self.context)

    def to_dict(self) -> dict:
        return {
            "session_id": self.session_id,
            "turn_index": self.turn_index,
            "strategy": self.strategy.value,
            "context": [{"role": t.role.value, "content": t.content} for t in self.context],
            "query": self.query,
            "chosen": self.chosen,
            "rejected": self.rejected,
        }

    @classmethod
    def from_dict(cls, obj: Mapping) -> PreferencePair:
        context = tuple(Turn(i, Role(m["role"]), m["content"]) for i, m in enumerate(obj["context"]))
        return cls(
            obj["session_id"], int(obj["turn_index"]), context, obj["query"], obj["chosen"], obj["rejected"],
            Strategy(obj["strategy"]),
        )  # fmt: skip


def _request(prompt: str, temperature: float) -> ChatRequest:
    return ChatRequest.single(prompt, temperature=temperature)


def _nonblank(text: str, what: str) -> str:
    if not text.strip():
        raise EmptyGeneration(f"{what} came back blank")
    return text


def gen_neglect(query: str, backend: Backend, *, temperature: float = COLLECT_TEMPERATURE) -> str:
    """Answer the bare query as a single user message: no history, no instructions."""
    return _nonblank(backend.complete(_request(query, temperature)), "neglect response")


def hallucination_prompts(query: str, guess: str | None = None) -> str:
    if guess is None:
        return load_prompt("capo_hallucination_guess.txt").format(query=query)
    return load_prompt("capo_hallucination_answer.txt").format(query=query, guess=guess)


def gen_hallucination(query: str, backend: Backend, *, temperature: float = COLLECT_TEMPERATURE) -> str:
    """Two calls: guess the referents without context, then answer under the guess."""
    guess = backend.complete(_request(hallucination_prompts(query), temperature)).strip()
    if not guess:
        raise EmptyGuess("backend produced no guess for the query's references")
    answer = backend.complete(_request(hallucination_prompts(query, guess), temperature))
    return _nonblank(answer, "hallucination response")


def misunderstanding_prompt(history: Conversation, query: str) -> str:
    return load_prompt("capo_misunderstanding.txt").format(
        history=render_transcript(history, ROLE_PREFIX_TEMPLATE), query=query
    )


def gen_misunderstanding(
    history: Conversation, query: str, backend: Backend, *, temperature: float = COLLECT_TEMPERATURE
) -> str:
    """Answer with the query deliberately bound to an earlier, non-adjacent topic.

    Needs at least two completed pairs so a non-adjacent topic exists.
    """
    if history.n_pairs < 2 or not history.is_complete:
        raise InsufficientHistory(f"need >= 2 completed pairs of history, got {history.n_pairs}")
    prompt = misunderstanding_prompt(history, query)
    return _nonblank(backend.complete(_request(prompt, temperature)), "misunderstanding response")


@dataclasses.dataclass(frozen=True)
class PairFailure:
    session_id: str
    turn_index: int
    strategy: Strategy
    error: str


@dataclasses.dataclass
class CapoResult:
    pairs: list[PreferencePair]
    drops: list[tuple[str, int, Strategy]]
    failures: list[PairFailure]


def _rejected(strategy: Strategy, context: Conversation, query: str, backend: Backend, temperature: float) -> str:
    if strategy is Strategy.NEGLECT:
        return gen_neglect(query, backend, temperature=temperature)
    if strategy is Strategy.HALLUCINATION:
        return gen_hallucination(query, backend, temperature=temperature)
    return gen_misunderstanding(context, query, backend, temperature=temperature)


def build_pairs(
    dataset: Iterable[Conversation] | Mapping[str, Conversation],
    selection: Sequence[tuple[str, int]],
    strategies: Iterable[Strategy | str],
    backend: Backend,
    *,
    workers: int = 1,
    temperature: float = COLLECT_TEMPERATURE,
) -> CapoResult:
    """One pair per (selected query, strategy), ordered by (session, turn, strategy).

    Rejected answers identical to the chosen one are dropped; generation errors
    are recorded as failures. Neither aborts the batch.
    """
    by_id = dict(dataset) if isinstance(dataset, Mapping) else {c.session_id: c for c in dataset}
    strategies = sorted({Strategy(s) for s in strategies}, key=STRATEGY_ORDER.get)
    tasks = []
    for sid, idx in sorted(set(selection)):
        conv = by_id.get(sid)
        if conv is None:
            raise PipelineError(f"selected session {sid!r} is not in the dataset")
        if not (0 <= idx < len(conv.turns) - 1) or conv.turns[idx].role is not Role.USER:
            raise PipelineError(f"{sid}#{idx} is not an answered user turn")
        tasks += [(conv, idx, s) for s in strategies]

    def work(task):
        conv, idx, strategy = task
        context = conv.prefix(idx)
        query, chosen = conv.turns[idx].content, conv.turns[idx + 1].content
        try:
            rejected = _rejected(strategy, context, query, backend, temperature)
        except PipelineError as exc:
            return PairFailure(conv.session_id, idx, strategy, f"{type(exc).__name__}: {exc}")
        if rejected == chosen:
            return (conv.session_id, idx, strategy)
        return PreferencePair(conv.session_id, idx, context.turns, query, chosen, rejected, strategy)

    with concurrent.futures.ThreadPoolExecutor(max_workers=max(workers, 1)) as pool:
        outcomes = list(pool.map(work, tasks))
    result = CapoResult([], [], [])
    for out in outcomes:
        if isinstance(out, PreferencePair):
            result.pairs.append(out)
        elif isinstance(out, PairFailure):
            log.warning("pair %s#%d/%s failed: %s", out.session_id, out.turn_index, out.strategy.value, out.error)
            result.failures.append(out)
        else:
            result.drops.append(out)
    return result


def write_pairs(path: str | Path, pairs: Iterable[PreferencePair]) -> int:
    n = 0
    with open(path, "w", encoding="utf-8") as fh:
        for p in pairs:
            fh.write(json.dumps(p.to_dict(), ensure_ascii=False) + "\n")
            n += 1
    return n


def read_pairs(path: str | Path) -> list[PreferencePair]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if line.strip():
                try:
                    out.append(PreferencePair.from_dict(json.loads(line)))
                except (ValueError, KeyError, TypeError) as exc:
                    raise PipelineError(f"{path}:{lineno}: bad pair record: {exc}") from exc
    return out
