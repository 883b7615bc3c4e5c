from __future__ import annotations

import json
from pathlib import Path

import pytest

from dialogpipe.conversation import Conversation

GOLDEN = Path(__file__).parent / "golden"

# The eight economic-indicators queries of the MT-Bench++ example session.
TABLE2_QUERIES = [
    "Provide insights into the correlation between economic indicators such as GDP, inflation, and "
    "unemployment rates. Explain how fiscal and monetary policies affect those indicators.",
    "Now, explain them again like I'm five.",
    "How do they impact the lives of ordinary people?",
    "What about their impact on underage students?",
    "How can this knowledge be explained in detail to high school students in a simple and understandable "
    "way in the classroom?",
    "Please provide a detailed 40-minute lesson plan on this issue.",
    "Can some more interactive elements be incorporated into the plan?",
    "Do these indicators in turn influence financial and monetary policies?",
]


def make_conv(n_pairs: int, session_id: str = "s", prefix: str = "") -> Conversation:
    msgs = []
    for i in range(n_pairs):
        msgs.append(("user", f"{prefix}question number {i} about topic {i}"))
        msgs.append(("assistant", f"{prefix}answer number {i}"))
    return Conversation.from_messages(session_id, msgs)


def write_jsonl(path: Path, rows) -> Path:
    path.write_text("".join(json.dumps(r) + "\n" for r in rows), encoding="utf-8")
    return path


@pytest.fixture
def table2_session() -> Conversation:
    msgs = []
    for i, q in enumerate(TABLE2_QUERIES):
        msgs += [("user", q), ("assistant", f"Answer {i + 1}.")]
    return Conversation.from_messages("econ", msgs)


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import RESULTS
    except ImportError:
        return
    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in RESULTS:
            terminalreporter.write_line(line)
