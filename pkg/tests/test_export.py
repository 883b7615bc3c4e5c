import json

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dialogpipe.capo import PreferencePair
from dialogpipe.conversation import Conversation, Role, Turn, render_transcript
from dialogpipe.export import (
    DPO_TRAINER_DEFAULTS,
    SFT_TRAINER_DEFAULTS,
    ExportConfig,
    approx_token_count,
    dpo_prompt,
    export_dpo,
    export_sft,
    fit_session,
    read_export,
)


def short_conv(n, sid="s"):
    msgs = []
    for i in range(n):
        msgs += [("user", f"u{i}"), ("assistant", f"a{i}")]
    return Conversation.from_messages(sid, msgs)


def chars(limit, **kw):
    return ExportConfig(max_units=limit, unit="characters", **kw)


def test_approx_tokens_counts_utf8_bytes():
    assert approx_token_count("") == 0
    assert approx_token_count("abcd") == 1 and approx_token_count("abcde") == 2
    assert approx_token_count("é") == 1 and approx_token_count("你好") == 2  # 2 and 6 bytes


def test_defaults():
    cfg = ExportConfig()
    assert (cfg.max_units, cfg.unit.value, cfg.direction.value) == (4096, "approx_tokens", "chat")
    assert SFT_TRAINER_DEFAULTS["learning_rate"] == 3e-5 and SFT_TRAINER_DEFAULTS["epochs"] == 3
    assert DPO_TRAINER_DEFAULTS["learning_rate"] == 1e-5
    with pytest.raises(ValueError):
        ExportConfig(max_units=0)


# "[USER] u0 [ASSISTANT] a0" is 24 characters; each further pair adds 25.
@pytest.mark.parametrize("limit, pairs", [(74, 3), (73, 2), (49, 2), (48, 1), (24, 1), (23, None)])
def test_sft_truncates_at_whole_pairs(limit, pairs):
    conv = short_conv(3)
    assert len(render_transcript(conv)) == 74
    fitted = fit_session(conv, chars(limit))
    assert (fitted.n_pairs if fitted else None) == pairs


def test_export_sft_summary_and_records(tmp_path):
    data = [short_conv(1, "a"), short_conv(3, "b"), Conversation.from_messages("c", [("user", "x" * 50), ("assistant", "y")])]
    summary = export_sft(data, chars(60), tmp_path / "sft.jsonl")
    assert (summary.written, summary.truncated, summary.skipped) == (1, 1, 1)
    meta, records = read_export(tmp_path / "sft.jsonl")
    assert meta["kind"] == "sft" and meta["max_units"] == 60 and meta["trainer_defaults"] == SFT_TRAINER_DEFAULTS
    assert [r["session_id"] for r in records] == ["a", "b"]
    b = records[1]["segments"]
    assert "".join(s["text"] for s in b) == render_transcript(short_conv(2, "b"))
    assert [s["text"] for s in b if s["trainable"]] == ["a0", "a1"]


def test_export_sft_ask_direction(tmp_path):
    export_sft([short_conv(2)], chars(100, direction="ask"), tmp_path / "ask.jsonl")
    _, (rec,) = read_export(tmp_path / "ask.jsonl")
    assert [s["text"] for s in rec["segments"] if s["trainable"]] == ["u0", "u1"]
    assert all(s["role"] == "user" for s in rec["segments"] if s["trainable"])


def pair_with_context(n_ctx):
    ctx = short_conv(n_ctx).turns
    return PreferencePair("s", 2 * n_ctx, ctx, "q", "good", "bad", "neglect")


# full prompt "[USER] u0 [ASSISTANT] a0 [USER] u1 [ASSISTANT] a1 [USER] q" is 58 characters
@pytest.mark.parametrize("limit, dropped", [(58, 0), (57, 1), (33, 1), (32, 2), (8, 2), (7, None)])
def test_dpo_drops_oldest_context_first(limit, dropped):
    out = dpo_prompt(pair_with_context(2), chars(limit))
    if dropped is None:
        assert out is None
        return
    prompt, n = out
    assert n == dropped and prompt.endswith("[USER] q") and len(prompt) <= limit
    kept = ["u0", "u1"][dropped:]
    assert all(f"[USER] {u} " in prompt for u in kept)
    assert all(f"[USER] {u} " not in prompt for u in ["u0", "u1"][:dropped])


def test_export_dpo_file(tmp_path):
    pairs = [pair_with_context(2), pair_with_context(0), pair_with_context(1)]
    summary = export_dpo(pairs, chars(40, trainer_defaults=DPO_TRAINER_DEFAULTS), tmp_path / "dpo.jsonl")
    assert (summary.written, summary.truncated, summary.skipped) == (2, 1, 0)
    meta, records = read_export(tmp_path / "dpo.jsonl")
    assert meta["kind"] == "dpo" and meta["trainer_defaults"]["algorithm"] == "DPO"
    assert records[0] == {"prompt": "[USER] u1 [ASSISTANT] a1 [USER] q", "chosen": "good", "rejected": "bad"}
    assert records[1]["prompt"] == "[USER] q"


def test_read_export_requires_header(tmp_path):
    (tmp_path / "x.jsonl").write_text(json.dumps({"prompt": "p"}) + "\n")
    with pytest.raises(ValueError):
        read_export(tmp_path / "x.jsonl")


words = st.text(alphabet="abcdef xyz", min_size=1, max_size=20).filter(str.strip)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.tuples(words, words), min_size=1, max_size=6), st.integers(5, 200))
def test_sft_fit_is_longest_fitting_prefix(pairs, limit):
    msgs = [m for u, a in pairs for m in (("user", u), ("assistant", a))]
    conv = Conversation.from_messages("h", msgs)
    cfg = chars(limit)
    fitted = fit_session(conv, cfg)
    fits = [k for k in range(1, conv.n_pairs + 1) if len(render_transcript(conv.prefix(2 * k))) <= limit]
    assert (fitted.n_pairs if fitted else None) == (max(fits) if fits else None)
    if fitted:
        assert fitted.turns == conv.turns[: len(fitted.turns)]


def test_dpo_context_turns_preserved_by_round_trip():
    ctx = (Turn(0, Role.USER, "hello"), Turn(1, Role.ASSISTANT, "hi"))
    pair = PreferencePair("s", 2, ctx, "and then?", "c", "r", "neglect")
    prompt, dropped = dpo_prompt(pair, ExportConfig())
    assert dropped == 0 and prompt == "[USER] hello [ASSISTANT] hi [USER] and then?"
