import json
import subprocess
import sys

import pytest

from dialogpipe.cli import main
from dialogpipe.config import PipelineConfig, load_config, parse_config
from dialogpipe.conversation import Conversation, read_conversations, write_conversations
from dialogpipe.errors import AuthError, ConfigError
from dialogpipe.gateway import BackendKind, ChatRequest, connect

from conftest import TABLE2_QUERIES, make_conv, write_jsonl

CONFIG = """
[paths]
call_log = "logs/calls.jsonl"

[[profiles]]
name = "remote"
kind = "http_openai_compatible"
endpoint = "http://127.0.0.1:9/v1/chat/completions"
auth_env = "DIALOGPIPE_TEST_KEY_UNSET"
retry = { max_attempts = 2, backoff_base = 0.0 }

[[profiles]]
name = "offline"
kind = "scripted_mock"
script_path = "mock.jsonl"

[filter]
min_query_chars = 4
blocklist_path = "block.txt"

[collect]
target_turns = 3
"""


def test_config_parses_and_resolves_paths(tmp_path):
    (tmp_path / "cfg.toml").write_text(CONFIG)
    cfg = load_config(tmp_path / "cfg.toml")
    assert cfg.profile("remote").kind is BackendKind.HTTP
    assert cfg.profile("remote").retry.max_attempts == 2
    assert cfg.profile("offline").script_path == str(tmp_path / "mock.jsonl")
    assert cfg.paths["call_log"] == str(tmp_path / "logs/calls.jsonl")
    assert cfg.filter_policy().blocklist_path == str(tmp_path / "block.txt")
    assert cfg.filter_policy(min_query_chars=9).min_query_chars == 9
    with pytest.raises(ConfigError):
        cfg.profile("nope")


def test_missing_secret_only_fails_at_use(tmp_path, monkeypatch):
    monkeypatch.delenv("DIALOGPIPE_TEST_KEY_UNSET", raising=False)
    backend = connect(parse_config(CONFIG).profile("remote"))
    with pytest.raises(AuthError):
        backend.complete(ChatRequest.single("hi"))


@pytest.mark.parametrize(
    "text",
    [
        "[collect]\nturns = 3\n",
        "[bogus]\n",
        '[[profiles]]\nname = "a"\nkind = "scripted_mock"\n[[profiles]]\nname = "a"\nkind = "scripted_mock"\n',
        '[[profiles]]\nname = "a"\nkind = "telepathy"\n',
        '[[profiles]]\nname = "a"\nkind = "scripted_mock"\napi_key = "sk-123"\n',
        '[ctx]\npolicy = "vibes"\n',
        "[collect\n",
    ],
)
def test_config_errors(text):
    with pytest.raises(ConfigError):
        parse_config(text)


def test_parse_error_carries_position():
    with pytest.raises(ConfigError, match="line 2"):
        parse_config("[collect]\ntarget_turns = = 3\n")


def test_snapshot_is_json_safe():
    snap = parse_config(CONFIG).snapshot()
    assert json.loads(json.dumps(snap)) == snap
    assert "DIALOGPIPE_TEST_KEY_UNSET" in json.dumps(snap)  # the env var name, never a value
    assert PipelineConfig().snapshot()["profiles"] == {}


# --- CLI -----------------------------------------------------------------------------


def run(argv, capsys):
    code = main([str(a) for a in argv])
    return code, capsys.readouterr()


def test_usage_errors_exit_2(capsys):
    assert run([], capsys)[0] == 2
    assert run(["collect"], capsys)[0] == 2
    assert run(["stats", "--data", "x", "--format", "xml"], capsys)[0] == 2


def test_operational_errors_exit_1(tmp_path, capsys):
    code, out = run(["stats", "--data", tmp_path / "missing.jsonl"], capsys)
    assert code == 1 and "error" in out.err
    seeds = write_jsonl(tmp_path / "s.jsonl", [{"query": "hello there"}])
    code, out = run(["collect", "--seeds", seeds, "--assistant", "ghost", "--simulator", "echo", "--out", tmp_path / "o"], capsys)
    assert code == 1 and "unknown profile 'ghost'" in out.err
    (tmp_path / "bad.toml").write_text("[collect]\nturns = 1\n")
    assert run(["--config", tmp_path / "bad.toml", "stats", "--data", seeds], capsys)[0] == 1


def test_stats_json_and_table(tmp_path, capsys):
    msgs = [m for q in TABLE2_QUERIES for m in (("user", q), ("assistant", "ok"))]
    data = tmp_path / "d.jsonl"
    write_conversations(data, [Conversation.from_messages("econ", msgs), make_conv(2, "b")])
    code, out = run(["stats", "--data", data, "--format", "json", "--out", tmp_path / "st.json"], capsys)
    stats = json.loads(out.out)
    assert code == 0 and stats["n_sessions"] == 2 and stats["avg_pairs"] == 5.0 and stats["avg_ctx_queries"] == 3.5
    code, out = run(["stats", "--data", data, "--name", "mine"], capsys)
    assert out.out.splitlines()[1].startswith("mine | 2 | 5.00 | 3.50 | ")
    manifest = json.loads((tmp_path / "st.json.manifest.json").read_text())
    assert manifest["command"] == "stats" and str(data) in manifest["inputs"]
    code, out = run(["report", "--stats", f"mine={tmp_path / 'st.json'}"], capsys)
    assert code == 0 and out.out.splitlines()[1].startswith("mine | 2 | 5.00")


def test_cli_pipeline_end_to_end(tmp_path, capsys):
    mock = write_jsonl(tmp_path / "mock.jsonl", [{"match": "", "reply": "reply {{hash}} to {{last}}"}])
    (tmp_path / "cfg.toml").write_text(CONFIG)
    (tmp_path / "block.txt").write_text("forbidden\n")
    seeds = write_jsonl(tmp_path / "seeds.jsonl", [{"query": f"Tell me about topic {i}"} for i in range(4)])
    base = ["--config", tmp_path / "cfg.toml"]
    out_data = tmp_path / "sessions.jsonl"
    code, out = run(base + ["collect", "--seeds", seeds, "--assistant", "offline", "--simulator", f"mock:{mock}", "--out", out_data], capsys)
    assert code == 0 and json.loads(out.out) == {"completed": 4, "failed": 0, "resumed": 0}
    convs = read_conversations(out_data)
    assert [c.n_pairs for c in convs] == [3] * 4
    assert (tmp_path / "logs/calls.jsonl").exists()

    code, out = run(base + ["filter", "--data", out_data, "--out", tmp_path / "f.jsonl"], capsys)
    assert code == 0 and json.loads(out.out)["kept"] == 4

    code, _ = run(base + ["ctx-label", "--data", tmp_path / "f.jsonl", "--out", tmp_path / "labels.jsonl"], capsys)
    assert code == 0
    code, out = run(
        base + ["capo", "--data", tmp_path / "f.jsonl", "--backend", f"mock:{mock}", "--out", tmp_path / "pairs.jsonl"]
        + ["--ctx-labels", tmp_path / "labels.jsonl"],
        capsys,
    )
    assert code == 0
    code, out = run(base + ["export-dpo", "--pairs", tmp_path / "pairs.jsonl", "--out", tmp_path / "dpo.jsonl"], capsys)
    assert code == 0
    code, out = run(base + ["export-sft", "--data", tmp_path / "f.jsonl", "--out", tmp_path / "sft.jsonl", "--direction", "ask"], capsys)
    assert code == 0 and json.loads(out.out) == {"written": 4, "truncated": 0, "skipped": 0}
    for name in ("sessions.jsonl", "f.jsonl", "labels.jsonl", "pairs.jsonl", "dpo.jsonl", "sft.jsonl"):
        assert (tmp_path / f"{name}.manifest.json").exists(), name


def test_cli_eval_and_report(tmp_path, capsys):
    bench = write_jsonl(
        tmp_path / "bench.jsonl",
        [{"session_id": f"b{i}", "queries": [f"q{k}" for k in range(8)], "references": ["r"] * 8} for i in range(2)],
    )
    judge = write_jsonl(tmp_path / "judge.jsonl", [{"match": "", "reply": "Solid. Rating: [[6]]"}])
    code, out = run(
        ["eval", "--bench", bench, "--candidate", "echo", "--judge", f"mock:{judge}", "--out", tmp_path / "ev.json", "--name", "m"],
        capsys,
    )
    assert code == 0 and out.out.splitlines() == ["m | 6.00 | 6.00 | 6.00", "m | 6.00 | 6.00 | 6.00"]
    assert len((tmp_path / "ev.json.verdicts.jsonl").read_text().splitlines()) == 16
    code, out = run(["report", "--eval", f"m={tmp_path / 'ev.json'}"], capsys)
    assert code == 0 and "Model | Overall | Turn 1 | Turn 2" in out.out
    assert run(["report"], capsys)[0] == 1


def test_module_entry_point():
    proc = subprocess.run([sys.executable, "-m", "dialogpipe", "--version"], capture_output=True, text=True)
    assert proc.returncode == 0 and proc.stdout.startswith("dialogpipe ")
