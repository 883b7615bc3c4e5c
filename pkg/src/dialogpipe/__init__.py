"""Multi-turn instruction-tuning data pipeline: session collection with a
simulated user, curation, dataset statistics, context-aware preference pairs,
trainer exports and multi-turn LLM-as-judge evaluation."""

__version__ = "0.1.0"

from .conversation import (
    BRACKET_TEMPLATE,
    ROLE_PREFIX_TEMPLATE,
    Conversation,
    Direction,
    MaskedSequence,
    RenderTemplate,
    Role,
    Segment,
    Turn,
    build_mask,
    parse_transcript,
    render_transcript,
    validate_conversation,
)
from .gateway import BackendProfile, ChatRequest, MockBackend, complete, connect, load_mock_script

__all__ = [
    "BRACKET_TEMPLATE",
    "ROLE_PREFIX_TEMPLATE",
    "BackendProfile",
    "ChatRequest",
    "Conversation",
    "Direction",
    "MaskedSequence",
    "MockBackend",
    "RenderTemplate",
    "Role",
    "Segment",
    "Turn",
    "build_mask",
    "complete",
    "connect",
    "load_mock_script",
    "parse_transcript",
    "render_transcript",
    "validate_conversation",
]
