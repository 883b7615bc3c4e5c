import json
import random
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

import httpx
import pytest

from dialogpipe.errors import (
    AuthError,
    ExhaustedScript,
    ProtocolError,
    RateLimited,
    ScriptParseError,
    TransportError,
)
from dialogpipe.gateway import (
    BackendKind,
    BackendProfile,
    CallLog,
    ChatRequest,
    HttpBackend,
    Message,
    MockBackend,
    MockRule,
    RateLimiter,
    RetryPolicy,
    VirtualClock,
    complete,
    connect,
    load_mock_script,
)

from conftest import write_jsonl


def req(text="hello", **kw):
    return ChatRequest.single(text, **kw)


def test_chat_request_invariants():
    with pytest.raises(ValueError):
        ChatRequest(())
    with pytest.raises(ValueError):
        ChatRequest((Message("user", "a"), Message("system", "late")))
    r = ChatRequest((Message("system", "s"), Message("user", "u")), temperature=0.2, max_new=7, model_id="m")
    assert r.to_wire() == {
        "model": "m",
        "messages": [{"role": "system", "content": "s"}, {"role": "user", "content": "u"}],
        "temperature": 0.2,
        "max_tokens": 7,
    }


def test_profile_invariants():
    with pytest.raises(ValueError):
        RetryPolicy(max_attempts=0)
    with pytest.raises(ValueError):
        BackendProfile("p", BackendKind.MOCK, rate_limit=0)


def test_mock_queue_in_order():
    mock = MockBackend(queue=["A", "B"])
    assert mock.complete(req()) == "A"
    assert mock.complete(req()) == "B"
    with pytest.raises(ExhaustedScript):
        mock.complete(req())


def test_mock_echo_returns_last_user_message():
    mock = MockBackend(echo=True)
    r = ChatRequest((Message("system", "sys"), Message("user", "ping"), Message("assistant", "x")))
    assert mock.complete(r) == "ping"


def test_mock_script_rule_match_and_precedence(tmp_path):
    path = write_jsonl(
        tmp_path / "m.jsonl",
        [
            {"match": "capital of France", "reply": "Paris"},
            {"match": "capital", "reply": "second rule"},
            {"reply": "queued"},
        ],
    )
    backend = connect(load_mock_script(path))
    assert backend.complete(req("What is the capital of France?")) == "Paris"
    assert backend.complete(req("capital of Spain")) == "second rule"
    assert backend.complete(req("other")) == "queued"
    with pytest.raises(ExhaustedScript):
        backend.complete(req("other"))


def test_empty_script_exhausts(tmp_path):
    path = tmp_path / "empty.jsonl"
    path.write_text("")
    with pytest.raises(ExhaustedScript):
        connect(load_mock_script(path)).complete(req())


def test_script_parse_error_has_line_number(tmp_path):
    path = tmp_path / "bad.jsonl"
    path.write_text('{"reply": "ok"}\n\n{not json}\n')
    with pytest.raises(ScriptParseError) as exc:
        load_mock_script(path)
    assert exc.value.lineno == 3
    path.write_text('{"reply": 5}\n')
    with pytest.raises(ScriptParseError):
        load_mock_script(path)


def test_mock_placeholders_are_deterministic():
    mock = MockBackend(rules=[MockRule("", "re:{{last}}#{{n_messages}}#{{hash}}")])
    a = mock.complete(req("x"))
    assert a.startswith("re:x#1#") and a == mock.complete(req("x"))
    assert a != mock.complete(req("y"))


def test_module_level_complete_caches_backend(tmp_path):
    path = write_jsonl(tmp_path / "q.jsonl", [{"reply": "one"}, {"reply": "two"}])
    profile = load_mock_script(path, name="cached")
    assert complete(profile, req()) == "one"
    assert complete(profile, req()) == "two"


# --- HTTP against a real local stub server ----------------------------------------


class _Stub(BaseHTTPRequestHandler):
    responses: list = []
    seen: list = []

    def do_POST(self):
        body = json.loads(self.rfile.read(int(self.headers["Content-Length"])))
        type(self).seen.append((dict(self.headers), body))
        status, payload = type(self).responses.pop(0) if type(self).responses else (200, {"choices": []})
        data = payload if isinstance(payload, bytes) else json.dumps(payload).encode()
        self.send_response(status)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(data)))
        self.end_headers()
        self.wfile.write(data)

    def log_message(self, *args):
        pass


@pytest.fixture
def stub_server():
    _Stub.responses, _Stub.seen = [], []
    server = ThreadingHTTPServer(("127.0.0.1", 0), _Stub)
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    yield f"http://127.0.0.1:{server.server_address[1]}/v1/chat/completions"
    server.shutdown()
    server.server_close()


def canned(text):
    return {"id": "x", "choices": [{"index": 0, "message": {"role": "assistant", "content": text}}]}


def http_profile(url, **kw):
    kw.setdefault("retry", RetryPolicy(max_attempts=3, backoff_base=0.0))
    return BackendProfile("remote", BackendKind.HTTP, endpoint=url, model="gpt-test", **kw)


def test_http_extracts_message_content(stub_server, monkeypatch):
    monkeypatch.setenv("STUB_KEY", "sekret")
    _Stub.responses = [(200, canned("canned answer"))]
    log = CallLog()
    backend = HttpBackend(http_profile(stub_server, auth_env="STUB_KEY"), call_log=log)
    assert backend.complete(req("hi", temperature=0.5, max_new=12)) == "canned answer"
    headers, body = _Stub.seen[0]
    assert headers["Authorization"] == "Bearer sekret"
    assert body == {"model": "gpt-test", "messages": [{"role": "user", "content": "hi"}], "temperature": 0.5, "max_tokens": 12}
    (rec,) = log.records
    assert set(rec) == {"ts", "profile", "request", "response", "latency_ms", "attempts"}
    assert rec["response"] == "canned answer" and rec["attempts"] == [{"attempt": 1, "status": "ok"}]


def test_http_retries_then_succeeds_single_success_logged(stub_server):
    _Stub.responses = [(503, {"error": "busy"}), (429, {"error": "slow"}), (200, canned("ok"))]
    log = CallLog()
    clock = VirtualClock()
    backend = HttpBackend(
        http_profile(stub_server, retry=RetryPolicy(max_attempts=3, backoff_base=1.0)), call_log=log, clock=clock,
        rng=random.Random(0),
    )  # fmt: skip
    assert backend.complete(req()) == "ok"
    (rec,) = log.records
    assert [a["status"] for a in rec["attempts"]] == ["error", "error", "ok"]
    assert len(_Stub.seen) == 3
    assert 0.5 * (1 + 2) <= clock.now() <= 1.5 * (1 + 2)


def test_http_retries_exhausted(stub_server):
    _Stub.responses = [(500, {})] * 3
    with pytest.raises(TransportError):
        HttpBackend(http_profile(stub_server)).complete(req())
    _Stub.responses = [(429, {})] * 3
    with pytest.raises(RateLimited):
        HttpBackend(http_profile(stub_server)).complete(req())


def test_http_protocol_error_not_retried(stub_server):
    _Stub.responses = [(200, {"choices": [{"message": {}}]}), (200, canned("late"))]
    with pytest.raises(ProtocolError):
        HttpBackend(http_profile(stub_server)).complete(req())
    assert len(_Stub.seen) == 1
    _Stub.responses = [(200, b"not json")]
    with pytest.raises(ProtocolError):
        HttpBackend(http_profile(stub_server)).complete(req())


def test_http_auth_errors(stub_server, monkeypatch):
    monkeypatch.delenv("MISSING_KEY", raising=False)
    backend = HttpBackend(http_profile(stub_server, auth_env="MISSING_KEY"))
    with pytest.raises(AuthError):
        backend.complete(req())
    assert _Stub.seen == []
    _Stub.responses = [(401, {"error": "bad key"})]
    with pytest.raises(AuthError):
        HttpBackend(http_profile(stub_server)).complete(req())


def test_http_unreachable_is_transport_error():
    profile = http_profile("http://127.0.0.1:9/v1/chat/completions", retry=RetryPolicy(2, 0.0), timeout=2)
    with pytest.raises(TransportError):
        HttpBackend(profile).complete(req())


def test_backoff_grows_and_is_capped():
    b = HttpBackend(
        http_profile("http://x/", retry=RetryPolicy(5, backoff_base=1.0, backoff_cap=3.0)), rng=random.Random(1)
    )
    waits = [b.backoff(n) for n in range(1, 6)]
    assert 0.5 <= waits[0] <= 1.5 and all(w <= 3.0 for w in waits)


# --- rate limiting with a virtual clock ---------------------------------------------


def test_rate_limiter_window_virtual_clock():
    clock = VirtualClock()
    limiter = RateLimiter(per_minute=5, clock=clock)
    stamps = [limiter.acquire() for _ in range(23)]
    for i, t in enumerate(stamps):
        in_window = [s for s in stamps if t - 60 < s <= t]
        assert len(in_window) <= 5, (i, t)
    assert stamps[4] == 0 and stamps[5] == 60


def test_http_requests_respect_rate_limit():
    clock = VirtualClock()
    sent = []

    def handler(request):
        sent.append(clock.now())
        return httpx.Response(200, json=canned("x"))

    profile = http_profile("http://stub/v1/chat/completions", rate_limit=3)
    backend = HttpBackend(profile, clock=clock, transport=httpx.MockTransport(handler))
    threads = [threading.Thread(target=backend.complete, args=(req(),)) for _ in range(10)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert len(sent) == 10
    for t in sent:
        assert sum(1 for s in sent if t - 60 < s <= t) <= 3


def test_concurrent_mock_consumes_queue_once():
    mock = MockBackend(queue=[str(i) for i in range(200)])
    out = []
    lock = threading.Lock()

    def worker():
        for _ in range(20):
            r = mock.complete(req())
            with lock:
                out.append(r)

    threads = [threading.Thread(target=worker) for _ in range(10)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert sorted(out, key=int) == [str(i) for i in range(200)]


def test_call_log_file(tmp_path):
    log = CallLog(tmp_path / "logs" / "calls.jsonl")
    MockBackend(queue=["a"], call_log=log).complete(req("q"))
    (line,) = (tmp_path / "logs" / "calls.jsonl").read_text().splitlines()
    rec = json.loads(line)
    assert list(rec) == ["ts", "profile", "request", "response", "latency_ms", "attempts"]
    assert rec["request"]["messages"] == [{"role": "user", "content": "q"}]
