"""Multi-turn LLM-as-judge evaluation (MT-Bench++ protocol).

A candidate model answers every benchmark session turn by turn with the full
history; a judge model then rates each turn 1-10 from a fixed prompt, and
ratings are averaged overall, per turn and over the turn buckets
1, 2, 3-5 and 6-8.
"""

from __future__ import annotations

import concurrent.futures
import dataclasses
import json
import logging
import math
import re
from pathlib import Path
from typing import Iterable, Mapping, Sequence

from .conversation import Conversation, Role
from .errors import ConfigError, NoRating, OutOfRange, PipelineError
from .gateway import COLLECT_TEMPERATURE, JUDGE_TEMPERATURE, Backend, ChatRequest
from .prompts import load_prompt

log = logging.getLogger(__name__)

MT_BENCH_PP_TURNS = 8
BUCKETS = {"turn1": (1, 1), "turn2": (2, 2), "turn3_5": (3, 5), "turn6_8": (6, 8)}


@dataclasses.dataclass(frozen=True)
class BenchSession:
    session_id: str
    category: str
    queries: tuple[str, ...]
    references: tuple[str, ...] | None = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "queries", tuple(self.queries))
        if self.references is not None:
            object.__setattr__(self, "references", tuple(self.references))
            if len(self.references) != len(self.queries):
                raise ConfigError(f"{self.session_id}: references do not align with queries")
        if not self.queries:
            raise ConfigError(f"{self.session_id}: no queries")

    def reference(self, turn: int) -> str | None:
        return None if self.references is None else self.references[turn - 1]


def load_bench(path: str | Path, n_turns: int | None = MT_BENCH_PP_TURNS) -> list[BenchSession]:
    """Read a JSONL bench of ``{"session_id","category","queries","references"?}``."""
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                sess = BenchSession(obj["session_id"], obj.get("category", ""), obj["queries"], obj.get("references"))
            except (ValueError, KeyError, TypeError) as exc:
                raise ConfigError(f"{path}:{lineno}: bad bench record: {exc}") from exc
            if n_turns is not None and len(sess.queries) != n_turns:
                raise ConfigError(f"{path}:{lineno}: expected {n_turns} queries, got {len(sess.queries)}")
            out.append(sess)
    if len({s.session_id for s in out}) != len(out):
        raise ConfigError(f"{path}: duplicate session ids")
    return out


@dataclasses.dataclass
class CandidateRun:
    transcripts: dict[str, Conversation]
    failures: dict[str, str]


def _answer_session(sess: BenchSession, candidate: Backend, temperature: float, max_new: int) -> Conversation:
    conv = Conversation(sess.session_id, (), metadata={"category": sess.category})
    for q in sess.queries:
        conv = conv.append(Role.USER, q)
        reply = candidate.complete(ChatRequest(tuple(conv.messages()), temperature=temperature, max_new=max_new))
        if not reply.strip():
            raise PipelineError(f"{sess.session_id}: candidate returned a blank response")
        conv = conv.append(Role.ASSISTANT, reply)
    return conv


def run_candidate(
    bench: Sequence[BenchSession],
    candidate: Backend,
    *,
    workers: int = 1,
    temperature: float = COLLECT_TEMPERATURE,
    max_new: int = 1024,
) -> CandidateRun:
    """Answer every bench query in order, each request carrying all prior pairs."""

    def work(sess: BenchSession):
        try:
            return _answer_session(sess, candidate, temperature, max_new)
        except PipelineError as exc:
            return exc

    run = CandidateRun({}, {})
    with concurrent.futures.ThreadPoolExecutor(max_workers=max(workers, 1)) as pool:
        for sess, out in zip(bench, pool.map(work, bench)):
            if isinstance(out, Conversation):
                run.transcripts[sess.session_id] = out
            else:
                log.warning("candidate failed on %s: %s", sess.session_id, out)
                run.failures[sess.session_id] = str(out)
    return run


_ORDINALS = ("first", "second", "third", "fourth", "fifth", "sixth", "seventh", "eighth", "ninth", "tenth")


def ordinal(n: int) -> str:
    if 1 <= n <= len(_ORDINALS):
        return _ORDINALS[n - 1]
    suffix = "th" if 10 <= n % 100 <= 20 else {1: "st", 2: "nd", 3: "rd"}.get(n % 10, "th")
    return f"{n}{suffix}"


def conversation_block(transcript: Conversation) -> str:
    lines = []
    for t in transcript.turns:
        lines.append(("### User:" if t.role is Role.USER else "### Assistant A:") + t.content)
    return "\n".join(lines)


def render_judge_prompt(
    transcript: Conversation,
    turn: int,
    reference: str | None = None,
    *,
    referenced: bool | None = None,
) -> str:
    """Judge prompt for the response at 1-based ``turn``.

    The whole conversation is shown; the closing section restates the judged
    question and, in referenced mode, the reference answer. Referenced mode is
    on whenever a reference is given unless ``referenced`` says otherwise.
    """
    if not transcript.is_complete:
        raise PipelineError("judge prompt needs a completed transcript")
    if not 1 <= turn <= transcript.n_pairs:
        raise ValueError(f"turn {turn} outside 1..{transcript.n_pairs}")
    if referenced is None:
        referenced = reference is not None
    if referenced and reference is None:
        raise PipelineError(f"referenced mode needs a reference answer for turn {turn}")
    nth = ordinal(turn)
    clause = load_prompt("judge_reference_clause.txt") if referenced else ""
    block = load_prompt("judge_reference_block.txt").format(reference=reference) if referenced else ""
    instruction = load_prompt("judge_instruction.txt").format(ordinal=nth, reference_clause=clause)
    return load_prompt("judge_page.txt").format(
        instruction=instruction,
        conversation=conversation_block(transcript),
        ordinal=nth,
        question=transcript.turns[2 * (turn - 1)].content,
        reference_block=block,
    )


_RATING = re.compile(r"Rating:\s*\[\[\s*(-?\d+)\s*\]\]")


def parse_rating(judge_output: str) -> int:
    """Integer from the last ``Rating: [[N]]`` in the text."""
    matches = _RATING.findall(judge_output)
    if not matches:
        raise NoRating("no 'Rating: [[N]]' in judge output")
    n = int(matches[-1])
    if not 1 <= n <= 10:
        raise OutOfRange(f"rating {n} outside 1..10")
    return n


def _explanation(judge_output: str) -> str:
    last = None
    for last in _RATING.finditer(judge_output):
        pass
    return judge_output[: last.start()].strip() if last else judge_output.strip()


@dataclasses.dataclass(frozen=True)
class JudgeVerdict:
    session_id: str
    turn: int
    explanation: str
    rating: int

    def __post_init__(self) -> None:
        if not 1 <= self.rating <= 10:
            raise ValueError("rating must lie in 1..10")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclasses.dataclass
class JudgeRun:
    verdicts: list[JudgeVerdict]
    failures: list[tuple[str, int, str]]

    @property
    def n_failed(self) -> int:
        return len(self.failures)


def judge_turn(
    transcript: Conversation,
    turn: int,
    judge: Backend,
    *,
    reference: str | None = None,
    retries: int = 1,
    referenced: bool | None = None,
) -> JudgeVerdict:
    prompt = render_judge_prompt(transcript, turn, reference, referenced=referenced)
    req = ChatRequest.single(prompt, temperature=JUDGE_TEMPERATURE, max_new=1024)
    for attempt in range(retries + 1):
        output = judge.complete(req)
        try:
            rating = parse_rating(output)
        except (NoRating, OutOfRange) as exc:
            if attempt == retries:
                raise
            log.info("%s turn %d: %s; re-asking", transcript.session_id, turn, exc)
            continue
        return JudgeVerdict(transcript.session_id, turn, _explanation(output), rating)
    raise AssertionError("unreachable")


def judge_all(
    transcripts: Mapping[str, Conversation] | Iterable[Conversation],
    bench: Sequence[BenchSession],
    judge: Backend,
    retries: int = 1,
    *,
    workers: int = 1,
    referenced: bool | None = None,
) -> JudgeRun:
    """One verdict per (session, turn); sessions missing a transcript are skipped."""
    if not isinstance(transcripts, Mapping):
        transcripts = {t.session_id: t for t in transcripts}
    tasks = []
    for sess in bench:
        conv = transcripts.get(sess.session_id)
        if conv is None:
            continue
        if conv.n_pairs != len(sess.queries):
            raise PipelineError(f"{sess.session_id}: transcript does not align with the bench session")
        tasks += [(conv, sess, k) for k in range(1, len(sess.queries) + 1)]

    def work(task):
        conv, sess, k = task
        try:
            return judge_turn(conv, k, judge, reference=sess.reference(k), retries=retries, referenced=referenced)
        except PipelineError as exc:
            return (sess.session_id, k, f"{type(exc).__name__}: {exc}")

    run = JudgeRun([], [])
    with concurrent.futures.ThreadPoolExecutor(max_workers=max(workers, 1)) as pool:
        for out in pool.map(work, tasks):
            (run.verdicts if isinstance(out, JudgeVerdict) else run.failures).append(out)
    return run


@dataclasses.dataclass(frozen=True)
class EvalReport:
    overall: float | None
    per_turn: dict[int, float]
    buckets: dict[str, float | None]
    n_judged: int
    n_failed: int = 0

    @property
    def defined(self) -> bool:
        return self.n_judged > 0

    def to_dict(self) -> dict:
        return {
            "overall": self.overall,
            "per_turn": {str(k): v for k, v in sorted(self.per_turn.items())},
            "buckets": dict(self.buckets),
            "n_judged": self.n_judged,
            "n_failed": self.n_failed,
            "defined": self.defined,
        }

    @classmethod
    def from_dict(cls, obj: Mapping) -> EvalReport:
        return cls(
            obj["overall"],
            {int(k): v for k, v in obj["per_turn"].items()},
            dict(obj["buckets"]),
            obj["n_judged"],
            obj.get("n_failed", 0),
        )

    def table_rows(self, name: str) -> list[str]:
        """Rows shaped ``name | Overall | Turn 1 | Turn 2`` and ``name | Overall | Turn 3-5 | Turn 6-8``."""
        b = self.buckets
        return [
            " | ".join([name, _fmt(self.overall), _fmt(b["turn1"]), _fmt(b["turn2"])]),
            " | ".join([name, _fmt(self.overall), _fmt(b["turn3_5"]), _fmt(b["turn6_8"])]),
        ]


TABLE_HEADERS = ("Model | Overall | Turn 1 | Turn 2", "Model | Overall | Turn 3-5 | Turn 6-8")


def _fmt(x: float | None) -> str:
    return "NA" if x is None else f"{x:.2f}"


def _mean(xs: Sequence[int]) -> float | None:
    return math.fsum(xs) / len(xs) if xs else None


def aggregate(verdicts: Iterable[JudgeVerdict], n_failed: int = 0) -> EvalReport:
    """Means over all ratings, per turn and per turn bucket; empty inputs give None."""
    verdicts = list(verdicts)
    by_turn: dict[int, list[int]] = {}
    for v in verdicts:
        by_turn.setdefault(v.turn, []).append(v.rating)
    ratings = sorted(v.rating for v in verdicts)
    buckets = {
        name: _mean(sorted(r for t, rs in by_turn.items() if lo <= t <= hi for r in rs))
        for name, (lo, hi) in BUCKETS.items()
    }
    return EvalReport(
        overall=_mean(ratings),
        per_turn={t: _mean(sorted(rs)) for t, rs in sorted(by_turn.items())},
        buckets=buckets,
        n_judged=len(verdicts),
        n_failed=n_failed,
    )
