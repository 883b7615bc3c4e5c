"""Post-collection filtering and context-dependent query detection."""

from __future__ import annotations

import concurrent.futures
import dataclasses
import enum
import json
import re
from pathlib import Path
from typing import Iterable, Iterator, Sequence

from .conversation import Conversation, Role, render_transcript, require_valid
from .errors import ConfigError, UnparseableJudgment
from .gateway import JUDGE_TEMPERATURE, Backend, ChatRequest
from .metrics import rouge_l
from .prompts import load_prompt


class DropMode(str, enum.Enum):
    DROP_SESSION = "drop_session"
    TRUNCATE = "truncate_at_violation"


@dataclasses.dataclass(frozen=True)
class FilterPolicy:
    min_query_chars: int = 8
    repetition_threshold: float = 0.8
    blocklist_path: str | None = None
    drop_mode: DropMode = DropMode.TRUNCATE
    blocklist: tuple[str, ...] = ()  # literal terms in addition to the file

    def __post_init__(self) -> None:
        object.__setattr__(self, "drop_mode", DropMode(self.drop_mode))
        object.__setattr__(self, "blocklist", tuple(self.blocklist))
        if self.min_query_chars < 0:
            raise ValueError("min_query_chars must be >= 0")
        if not 0.0 <= self.repetition_threshold <= 1.0:
            raise ValueError("repetition_threshold must lie in [0, 1]")

    def terms(self) -> tuple[str, ...]:
        terms = list(self.blocklist)
        if self.blocklist_path:
            try:
                text = Path(self.blocklist_path).read_text(encoding="utf-8")
            except OSError as exc:
                raise ConfigError(f"cannot read blocklist {self.blocklist_path}: {exc}") from exc
            terms += [ln.strip() for ln in text.splitlines() if ln.strip()]
        return tuple(t.lower() for t in terms)


@dataclasses.dataclass(frozen=True)
class Removal:
    turn_index: int
    reason: str  # short | repetitive | sensitive


@dataclasses.dataclass(frozen=True)
class FilterOutcome:
    kept: Conversation | None
    removals: tuple[Removal, ...]


def find_violations(conv: Conversation, policy: FilterPolicy, terms: Sequence[str] | None = None) -> list[Removal]:
    terms = policy.terms() if terms is None else terms
    found: list[Removal] = []
    earlier: list[str] = []
    for turn in conv.turns:
        if turn.role is Role.USER:
            if len(turn.content.strip()) < policy.min_query_chars:
                found.append(Removal(turn.index, "short"))
            if any(rouge_l(prev, turn.content).f1 > policy.repetition_threshold for prev in earlier):
                found.append(Removal(turn.index, "repetitive"))
            earlier.append(turn.content)
        lowered = turn.content.lower()
        if any(term in lowered for term in terms):
            found.append(Removal(turn.index, "sensitive"))
    return found


def apply_filters(conv: Conversation, policy: FilterPolicy, *, terms: Sequence[str] | None = None) -> FilterOutcome:
    """Flag short, repetitive and sensitive turns and drop or truncate the session.

    In truncate mode the session is cut back to the last whole pair before the
    first violation; if nothing survives the session is dropped.
    """
    require_valid(conv)
    removals = find_violations(conv, policy, terms)
    if not removals:
        return FilterOutcome(conv, ())
    if policy.drop_mode is DropMode.DROP_SESSION:
        return FilterOutcome(None, tuple(removals))
    first = min(r.turn_index for r in removals)
    keep = 2 * (first // 2)
    kept = conv.prefix(keep) if keep else None
    return FilterOutcome(kept, tuple(removals))


def filter_dataset(
    dataset: Iterable[Conversation], policy: FilterPolicy
) -> Iterator[tuple[Conversation, FilterOutcome]]:
    terms = policy.terms()
    for conv in dataset:
        yield conv, apply_filters(conv, policy, terms=terms)


# --- pronoun / ellipsis heuristic ------------------------------------------------

PRONOUNS = ("them", "they", "their", "theirs", "it", "its")
DEMONSTRATIVES = ("this", "that", "these", "those")
ELLIPSIS_PHRASES = ("what about", "how about")
# Definite descriptions that almost always point back into the conversation.
BACKREF_NOUNS = (
    "plan", "above", "previous", "same", "latter", "former", "aforementioned",
    "list", "story", "example", "answer", "response", "summary", "itinerary",
    "essay", "poem", "table", "script",
)  # fmt: skip
# Head nouns that make a demonstrative deictic in time, not anaphoric.
TEMPORAL_HEADS = frozenset(
    "time year week month day morning afternoon evening night weekend season summer winter spring century".split()
)
FUNCTION_WORDS = frozenset(
    """a an the i you we he she they it there this that these those my your our his her their its
    is are was were be been am do does did can could will would should may might must
    and or but if so to of in on at by for with as from into about than then not no
    me us him them what which who how why when where""".split()
)
# Words after which "that" stands as an object or subject, not a relativiser.
THAT_OBJECT_PREV = frozenset(
    """explain explained do does did is was are about of on in with for like than use make change fix
    rewrite expand summarize describe try mean means what what's whats how why and but or to from into by at
    elaborate clarify repeat show translate need want""".split()
)

LEXICON = PRONOUNS + DEMONSTRATIVES + ELLIPSIS_PHRASES + tuple(f"the {n}" for n in BACKREF_NOUNS) + ("and ...?",)

_WORD = re.compile(r"[A-Za-z0-9]+(?:'[A-Za-z]+)?")
_CLAUSE_BREAK = re.compile(r"[.,;:!?()\[\]\"]")


def _stem(word: str) -> str:
    w = word.lower()
    for suffix in ("ies", "es", "s"):
        if w.endswith(suffix) and len(w) > len(suffix) + 2:
            return w[: -len(suffix)] + ("y" if suffix == "ies" else "")
    return w


def _tokens(query: str) -> list[tuple[str, int, int, bool]]:
    """(lowercased word, start, end, clause break before it)."""
    out = []
    prev_end = 0
    for m in _WORD.finditer(query):
        gap = query[prev_end : m.start()]
        out.append((m.group().lower(), m.start(), m.end(), bool(_CLAUSE_BREAK.search(gap)) or not out))
        prev_end = m.end()
    return out


def _self_resolved(head: str, toks, i: int) -> bool:
    """True when ``head`` already occurred earlier in the same query."""
    target = _stem(head)
    return any(_stem(w) == target for w, *_ in toks[:i])


def _demonstrative_marks(toks, i: int) -> bool:
    word = toks[i][0]
    nxt = toks[i + 1] if i + 1 < len(toks) and not toks[i + 1][3] else None
    if word == "that":
        if nxt and nxt[0] in FUNCTION_WORDS:
            return False  # complementiser: "that the ...", "that I ..."
        prev_ok = toks[i][3] or toks[i - 1][0] in THAT_OBJECT_PREV
        if not prev_ok:
            return False  # relative clause: "a function that takes ..."
    if nxt is None or nxt[0] in FUNCTION_WORDS or nxt[0].isdigit():
        return True  # pronominal use: "explain this", "is that true"
    head = nxt[0]
    if head in TEMPORAL_HEADS:
        return False
    return not _self_resolved(head, toks, i)


def detect_ctx_pronoun(query: str) -> str | None:
    """Return the first anaphora/ellipsis cue in ``query``, or None.

    Cues: third-person pronouns (them, they, their, theirs, it, its),
    demonstratives (this, that, these, those), "what about"/"how about",
    a leading "And ...?" fragment, and definite back-references such as
    "the plan". Matching is case-insensitive on word boundaries.

    A demonstrative followed by a head noun that already appears earlier in
    the same query ("... economic indicators ... those indicators") resolves
    inside the query and is not a cue. "that" used as a complementiser or
    relativiser, and demonstratives over time nouns ("this year"), are skipped.
    """
    toks = _tokens(query)
    hits: list[tuple[int, str]] = []
    stripped = query.strip()
    if toks and toks[0][0] == "and" and stripped.endswith("?"):
        hits.append((toks[0][1], query[toks[0][1] : toks[0][2]]))
    for i, (word, start, end, _) in enumerate(toks):
        if word in PRONOUNS:
            hits.append((start, query[start:end]))
        elif word in DEMONSTRATIVES and _demonstrative_marks(toks, i):
            hits.append((start, query[start:end]))
        elif i + 1 < len(toks) and not toks[i + 1][3]:
            pair = f"{word} {toks[i + 1][0]}"
            if pair in ELLIPSIS_PHRASES:
                hits.append((start, query[start : toks[i + 1][2]]))
            elif word == "the" and toks[i + 1][0] in BACKREF_NOUNS and not _self_resolved(toks[i + 1][0], toks, i):
                hits.append((start, query[start : toks[i + 1][2]]))
    if not hits:
        return None
    return min(hits)[1]


# --- LLM judgment ----------------------------------------------------------------


class Evidence(str, enum.Enum):
    PRONOUN = "pronoun_heuristic"
    JUDGE = "llm_judge"


@dataclasses.dataclass(frozen=True)
class CtxLabel:
    session_id: str
    turn_index: int
    dependent: bool
    evidence: Evidence
    detail: str

    def __post_init__(self) -> None:
        object.__setattr__(self, "evidence", Evidence(self.evidence))

    def to_dict(self) -> dict:
        return {
            "session_id": self.session_id,
            "turn_index": self.turn_index,
            "dependent": self.dependent,
            "evidence": self.evidence.value,
            "detail": self.detail,
        }


_VERDICT = re.compile(r"^\W*(YES|NO)\W*$", re.IGNORECASE)


def parse_yes_no(text: str) -> bool | None:
    m = _VERDICT.match(text.strip())
    return None if m is None else m.group(1).upper() == "YES"


def ctx_judge_prompt(history: Conversation, turn_index: int) -> str:
    context = history.prefix(turn_index)
    return load_prompt("ctx_judge.txt").format(
        context=render_transcript(context), query=history.turns[turn_index].content
    )


def judge_ctx_dependent(history: Conversation, turn_index: int, judge: Backend) -> CtxLabel:
    """Ask ``judge`` whether the query at ``turn_index`` needs the earlier turns.

    One reprompt is made if the first answer is not a bare YES/NO.
    """
    if not (0 <= turn_index < len(history.turns)) or history.turns[turn_index].role is not Role.USER:
        raise ValueError(f"turn {turn_index} is not a user turn")
    if turn_index < 2:
        raise ValueError("the judged query needs at least one preceding pair")
    prompt = ctx_judge_prompt(history, turn_index)
    answer = judge.complete(ChatRequest.single(prompt, temperature=JUDGE_TEMPERATURE, max_new=8))
    verdict = parse_yes_no(answer)
    if verdict is None:
        retry = prompt + "\n\n" + load_prompt("ctx_judge_retry.txt")
        answer = judge.complete(ChatRequest.single(retry, temperature=JUDGE_TEMPERATURE, max_new=8))
        verdict = parse_yes_no(answer)
    if verdict is None:
        raise UnparseableJudgment(f"judge answered {answer!r} for {history.session_id}#{turn_index}")
    return CtxLabel(history.session_id, turn_index, verdict, Evidence.JUDGE, answer.strip())


class SelectionPolicy(str, enum.Enum):
    HEURISTIC_ONLY = "heuristic_only"
    JUDGE_ONLY = "judge_only"
    HEURISTIC_THEN_JUDGE = "heuristic_then_judge"


def label_dataset(
    dataset: Iterable[Conversation],
    policy: SelectionPolicy | str = SelectionPolicy.HEURISTIC_ONLY,
    judge: Backend | None = None,
    *,
    workers: int = 1,
) -> list[CtxLabel]:
    """Label every user turn after the first, sorted by (session_id, turn_index).

    Opening queries have no context and are never labelled.
    """
    policy = SelectionPolicy(policy)
    if policy is not SelectionPolicy.HEURISTIC_ONLY and judge is None:
        raise ConfigError(f"selection policy {policy.value} needs a judge backend")
    heuristic: list[CtxLabel] = []
    to_judge: list[tuple[Conversation, int]] = []
    for conv in sorted(dataset, key=lambda c: c.session_id):
        for turn in conv.user_turns[1:]:
            cue = detect_ctx_pronoun(turn.content)
            if policy is SelectionPolicy.JUDGE_ONLY or (policy is SelectionPolicy.HEURISTIC_THEN_JUDGE and cue):
                to_judge.append((conv, turn.index))
            else:
                heuristic.append(CtxLabel(conv.session_id, turn.index, cue is not None, Evidence.PRONOUN, cue or ""))
    with concurrent.futures.ThreadPoolExecutor(max_workers=max(workers, 1)) as pool:
        judged = list(pool.map(lambda item: judge_ctx_dependent(item[0], item[1], judge), to_judge))
    return sorted(heuristic + judged, key=lambda lb: (lb.session_id, lb.turn_index))


def select_ctx_queries(
    dataset: Iterable[Conversation],
    policy: SelectionPolicy | str = SelectionPolicy.HEURISTIC_ONLY,
    limit: int | None = None,
    judge: Backend | None = None,
    *,
    workers: int = 1,
) -> list[tuple[str, int]]:
    """Up to ``limit`` context-dependent (session_id, turn_index) pairs in stable order."""
    if limit is not None and limit <= 0:
        return []
    labels = label_dataset(dataset, policy, judge, workers=workers)
    chosen = [(lb.session_id, lb.turn_index) for lb in labels if lb.dependent]
    return chosen if limit is None else chosen[:limit]


def write_labels(path: str | Path, labels: Iterable[CtxLabel]) -> int:
    n = 0
    with open(path, "w", encoding="utf-8") as fh:
        for lb in labels:
            fh.write(json.dumps(lb.to_dict(), ensure_ascii=False) + "\n")
            n += 1
    return n


def read_labels(path: str | Path) -> list[dict]:
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]
