"""Conversation data model, rendering templates and loss masks.

A conversation is an alternating sequence of user/assistant turns. Masks are
expressed over rendered text segments rather than tokens; any tokenizer with
offset mapping recovers the token-level mask from them.
"""

from __future__ import annotations

import dataclasses
import enum
import json
from pathlib import Path
from typing import Any, Iterable, Iterator, Mapping

from .errors import InvalidConversation, TemplateError


class Role(str, enum.Enum):
    USER = "user"
    ASSISTANT = "assistant"

    @property
    def other(self) -> Role:
        return Role.ASSISTANT if self is Role.USER else Role.USER


class SeedOrigin(str, enum.Enum):
    SHAREGPT = "sharegpt"
    ULTRACHAT = "ultrachat"
    OTHER = "other"


class Direction(str, enum.Enum):
    """Which side of the conversation carries the training loss."""

    CHAT = "chat"  # responses trainable
    ASK = "ask"  # queries trainable

    @property
    def trainable_role(self) -> Role:
        return Role.ASSISTANT if self is Direction.CHAT else Role.USER


@dataclasses.dataclass(frozen=True)
class Turn:
    index: int
    role: Role
    content: str

    def __post_init__(self) -> None:
        object.__setattr__(self, "role", Role(self.role))


@dataclasses.dataclass(frozen=True)
class Conversation:
    """One session: ordered turns plus provenance.

    ``metadata`` never influences rendering. A session whose last turn is a
    user turn is in progress (used by collection checkpoints).
    """

    session_id: str
    turns: tuple[Turn, ...]
    seed_origin: SeedOrigin = SeedOrigin.OTHER
    metadata: Mapping[str, str] = dataclasses.field(default_factory=dict)

    def __post_init__(self) -> None:
        object.__setattr__(self, "turns", tuple(self.turns))
        object.__setattr__(self, "seed_origin", SeedOrigin(self.seed_origin))
        object.__setattr__(self, "metadata", dict(self.metadata))

    def __hash__(self) -> int:
        return hash((self.session_id, self.turns, self.seed_origin))

    @classmethod
    def from_messages(
        cls,
        session_id: str,
        messages: Iterable[tuple[str, str] | Mapping[str, str]],
        seed_origin: SeedOrigin | str = SeedOrigin.OTHER,
        metadata: Mapping[str, str] | None = None,
    ) -> Conversation:
        turns = []
        for i, msg in enumerate(messages):
            role, content = (msg["role"], msg["content"]) if isinstance(msg, Mapping) else msg
            turns.append(Turn(i, Role(role), content))
        return cls(session_id, tuple(turns), SeedOrigin(seed_origin), dict(metadata or {}))

    @property
    def n_pairs(self) -> int:
        """Number of query-response pairs (T). Counts complete pairs only."""
        return len(self.turns) // 2

    @property
    def is_complete(self) -> bool:
        return bool(self.turns) and self.turns[-1].role is Role.ASSISTANT

    @property
    def user_turns(self) -> list[Turn]:
        return [t for t in self.turns if t.role is Role.USER]

    def prefix(self, n_turns: int) -> Conversation:
        """Conversation truncated to its first ``n_turns`` turns."""
        return dataclasses.replace(self, turns=self.turns[:n_turns])

    def append(self, role: Role | str, content: str) -> Conversation:
        turn = Turn(len(self.turns), Role(role), content)
        return dataclasses.replace(self, turns=self.turns + (turn,))

    def with_metadata(self, **tags: str) -> Conversation:
        return dataclasses.replace(self, metadata={**self.metadata, **tags})

    def messages(self) -> list[dict[str, str]]:
        return [{"role": t.role.value, "content": t.content} for t in self.turns]

    def to_dict(self) -> dict[str, Any]:
        # Key order is part of the file contract.
        return {
            "session_id": self.session_id,
            "seed_origin": self.seed_origin.value,
            "turns": self.messages(),
            "metadata": dict(self.metadata),
        }

    @classmethod
    def from_dict(cls, obj: Mapping[str, Any]) -> Conversation:
        return cls.from_messages(
            obj["session_id"],
            obj["turns"],
            obj.get("seed_origin", SeedOrigin.OTHER.value),
            obj.get("metadata") or {},
        )


@dataclasses.dataclass(frozen=True)
class Violation:
    turn_index: int | None
    code: str
    message: str


def validate_conversation(conv: Conversation, *, allow_in_progress: bool = False) -> list[Violation]:
    """Return every structural violation in ``conv``; an empty list means valid.

    With ``allow_in_progress`` a session may end on a user turn.
    """
    out: list[Violation] = []
    if not conv.session_id:
        out.append(Violation(None, "missing_session_id", "session_id is empty"))
    if not conv.turns:
        out.append(Violation(None, "empty", "conversation has no turns"))
        return out
    for pos, turn in enumerate(conv.turns):
        if turn.index != pos:
            out.append(Violation(pos, "bad_index", f"turn index {turn.index} at position {pos}"))
        if not turn.content.strip():
            out.append(Violation(pos, "empty_content", "turn content is blank"))
        if pos == 0:
            if turn.role is not Role.USER:
                out.append(Violation(0, "first_not_user", "first turn is not a user turn"))
        elif turn.role is conv.turns[pos - 1].role:
            out.append(Violation(pos, "non_alternating", f"two consecutive {turn.role.value} turns"))
    last = conv.turns[-1]
    if last.role is not Role.ASSISTANT and not allow_in_progress:
        out.append(Violation(last.index, "incomplete", "completed session must end with an assistant turn"))
    return out


def require_valid(conv: Conversation, *, allow_in_progress: bool = False) -> None:
    problems = validate_conversation(conv, allow_in_progress=allow_in_progress)
    if problems:
        detail = "; ".join(f"{v.code}@{v.turn_index}" for v in problems)
        raise InvalidConversation(f"session {conv.session_id!r} is invalid: {detail}", problems)


# --- rendering ---------------------------------------------------------------


@dataclasses.dataclass(frozen=True)
class RenderTemplate:
    """Role markers and turn separator used to flatten a conversation.

    Rendering is ``separator.join(marker + content)``. Content must not contain
    ``separator + marker`` for either role, otherwise parsing is ambiguous.
    """

    name: str
    user_marker: str
    assistant_marker: str
    separator: str

    def marker(self, role: Role) -> str:
        return self.user_marker if Role(role) is Role.USER else self.assistant_marker

    def to_dict(self) -> dict[str, str]:
        return dataclasses.asdict(self)


BRACKET_TEMPLATE = RenderTemplate("bracket", "[USER] ", "[ASSISTANT] ", " ")
ROLE_PREFIX_TEMPLATE = RenderTemplate("role_prefix", "User: ", "Assistant: ", "\n\n")

TEMPLATES = {t.name: t for t in (BRACKET_TEMPLATE, ROLE_PREFIX_TEMPLATE)}


def get_template(name: str | RenderTemplate) -> RenderTemplate:
    if isinstance(name, RenderTemplate):
        return name
    try:
        return TEMPLATES[name]
    except KeyError:
        raise TemplateError(f"unknown template {name!r}; known: {sorted(TEMPLATES)}") from None


def _check_renderable(turn: Turn, template: RenderTemplate) -> None:
    for role in Role:
        if template.separator + template.marker(role) in turn.content:
            raise TemplateError(
                f"turn {turn.index} contains the {template.name!r} turn boundary "
                f"{template.separator + template.marker(role)!r}"
            )


@dataclasses.dataclass(frozen=True)
class Segment:
    text: str
    role: Role
    trainable: bool
    is_content: bool = False

    def to_dict(self) -> dict[str, Any]:
        return {"text": self.text, "trainable": self.trainable, "role": self.role.value}


@dataclasses.dataclass(frozen=True)
class MaskedSequence:
    segments: tuple[Segment, ...]
    direction: Direction

    @property
    def text(self) -> str:
        return "".join(s.text for s in self.segments)

    def trainable_segments(self) -> list[Segment]:
        return [s for s in self.segments if s.trainable]

    def char_mask(self) -> list[bool]:
        """Per-character trainable flags over :attr:`text`."""
        return [s.trainable for s in self.segments for _ in s.text]


def _segments(conv: Conversation, template: RenderTemplate) -> Iterator[tuple[Turn, str, bool]]:
    # (turn, text, is_content) in render order
    for turn in conv.turns:
        _check_renderable(turn, template)
        if turn.index > 0:
            yield turn, template.separator, False
        yield turn, template.marker(turn.role), False
        yield turn, turn.content, True


def render_transcript(
    conv: Conversation,
    template: RenderTemplate | str = BRACKET_TEMPLATE,
    *,
    allow_in_progress: bool = False,
) -> str:
    """Flatten ``conv`` to text, e.g. ``"[USER] hi [ASSISTANT] yo"``."""
    require_valid(conv, allow_in_progress=allow_in_progress)
    template = get_template(template)
    return "".join(text for _, text, _ in _segments(conv, template))


def parse_transcript(
    text: str,
    template: RenderTemplate | str = BRACKET_TEMPLATE,
    *,
    session_id: str = "parsed",
) -> Conversation:
    """Inverse of :func:`render_transcript`.

    Roles are known to alternate, so each turn ends at the first
    ``separator + marker`` of the next expected role.
    """
    template = get_template(template)
    role = Role.USER
    if not text.startswith(template.marker(role)):
        raise TemplateError(f"transcript does not start with {template.marker(role)!r}")
    pos = len(template.marker(role))
    turns = []
    while True:
        boundary = template.separator + template.marker(role.other)
        end = text.find(boundary, pos)
        if end < 0:
            turns.append(Turn(len(turns), role, text[pos:]))
            break
        turns.append(Turn(len(turns), role, text[pos:end]))
        pos = end + len(boundary)
        role = role.other
    return Conversation(session_id, tuple(turns))


def build_mask(
    conv: Conversation,
    direction: Direction | str,
    template: RenderTemplate | str = BRACKET_TEMPLATE,
    *,
    allow_in_progress: bool = False,
) -> MaskedSequence:
    """Segment the rendered conversation and flag the trainable segments.

    ``chat`` trains on assistant content, ``ask`` on user content. Markers and
    separators are never trainable.
    """
    direction = Direction(direction)
    require_valid(conv, allow_in_progress=allow_in_progress)
    template = get_template(template)
    want = direction.trainable_role
    segs = tuple(
        Segment(text, turn.role, is_content and turn.role is want, is_content)
        for turn, text, is_content in _segments(conv, template)
    )
    return MaskedSequence(segs, direction)


# --- persistence -------------------------------------------------------------


def dumps_conversation(conv: Conversation) -> str:
    return json.dumps(conv.to_dict(), ensure_ascii=False)


def write_conversations(path: str | Path, convs: Iterable[Conversation]) -> int:
    n = 0
    with open(path, "w", encoding="utf-8") as fh:
        for conv in convs:
            fh.write(dumps_conversation(conv) + "\n")
            n += 1
    return n


def iter_conversations(path: str | Path) -> Iterator[Conversation]:
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                yield Conversation.from_dict(json.loads(line))
            except (ValueError, KeyError, TypeError) as exc:
                raise InvalidConversation(f"{path}:{lineno}: bad conversation record: {exc}") from exc


def read_conversations(path: str | Path) -> list[Conversation]:
    return list(iter_conversations(path))
