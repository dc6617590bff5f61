import json
import threading
import time
from concurrent.futures import ThreadPoolExecutor

import httpx
import pytest

from ptkbench.llm import (AuthError, Backend, BackendError, CacheCorrupt, ChatCache, Gateway, GenerationParams,
                          MalformedResponse, MockBackend, OpenAIChatBackend, RetryExhausted, cache_key)
from ptkbench.mock import mock_complete, parse_prompt

PROMPT = """Rewrite the query.

## Current turn
History:
User: I am planning a trip to Istanbul. What Turkish souvenirs are popular?
Assistant: Carpets and ceramics.
PTKB:
1. I am vegetarian.
2. My mother collects antique crystal glassware.
Utterance: Which one do you suggest for my mom?

Write five numbered rewrites, then a line starting with "Response:".
"""
MSGS = [{"role": "user", "content": PROMPT}]


def test_mock_is_pure_and_seed_sensitive():
    p1, p2 = GenerationParams(seed=1), GenerationParams(seed=2)
    assert mock_complete(MSGS, p1) == mock_complete(MSGS, p1)
    a, b = mock_complete(MSGS, p1)[0], mock_complete(MSGS, p2)[0]
    assert a != b
    assert len(a.splitlines()) == len(b.splitlines()) == 6


def test_mock_without_seed_is_unperturbed_template():
    out = mock_complete(MSGS, GenerationParams())[0].splitlines()
    assert out[0].startswith("1. Which one do you suggest for my mom ")
    assert "vegetarian" in out[0] and "souvenirs" in out[0]
    assert out[-1].startswith("Response: ")


def test_mock_choice_count():
    assert len(mock_complete(MSGS, GenerationParams(seed=3, n_choices=3))) == 3


def test_parse_prompt_tasks():
    assert parse_prompt(PROMPT)["task"] == "rewrite"
    bare = PROMPT.replace('then a line starting with "Response:"', "")
    assert parse_prompt(bare + "Selected:")["task"] == "select"
    assert parse_prompt(bare + "Selected:\nResponse:")["task"] == "sar"
    parsed = parse_prompt(PROMPT)
    assert parsed["ptkb"] == [(1, "I am vegetarian."), (2, "My mother collects antique crystal glassware.")]


def test_cache_key_sensitivity():
    k = cache_key("b", MSGS, GenerationParams(seed=1))
    assert k == cache_key("b", MSGS, GenerationParams(seed=1))
    assert k != cache_key("b", MSGS, GenerationParams(seed=2))
    assert k != cache_key("c", MSGS, GenerationParams(seed=1))
    assert k != cache_key("b", MSGS, GenerationParams(seed=1, temperature=0.5))


def test_cached_complete_hits_and_misses(tmp_path):
    gw = Gateway(MockBackend(), ChatCache(tmp_path))
    p = GenerationParams(seed=1)
    first, hit1 = gw.cached_complete(MSGS, p)
    second, hit2 = gw.cached_complete(MSGS, p)
    assert (hit1, hit2) == (False, True) and first == second
    _, hit3 = gw.cached_complete(MSGS, p.with_seed(2))
    assert hit3 is False
    assert gw.backend_calls == 2 and gw.cache_hits == 1 and gw.calls == 3
    # a fresh process sees the persisted cache
    gw2 = Gateway(MockBackend(), ChatCache(tmp_path))
    assert gw2.cached_complete(MSGS, p) == (first, True)
    assert gw2.backend_calls == 0


def test_cache_disabled_never_hits():
    gw = Gateway(MockBackend())
    assert gw.cached_complete(MSGS, GenerationParams(seed=1))[1] is False
    assert gw.cached_complete(MSGS, GenerationParams(seed=1))[1] is False
    assert gw.backend_calls == 2


def test_corrupt_cache_entry(tmp_path):
    gw = Gateway(MockBackend(), ChatCache(tmp_path))
    gw.cached_complete(MSGS, GenerationParams(seed=1))
    with open(tmp_path / "mock-perturb.jsonl", "a") as fh:
        fh.write("{broken\n")
    with pytest.raises(CacheCorrupt, match=":2:"):
        Gateway(MockBackend(), ChatCache(tmp_path)).cached_complete(MSGS, GenerationParams(seed=1))
    repaired = Gateway(MockBackend(), ChatCache(tmp_path, repair=True))
    assert repaired.cached_complete(MSGS, GenerationParams(seed=1))[1] is True


def test_compact_keeps_one_record_per_key(tmp_path):
    cache = ChatCache(tmp_path)
    p = GenerationParams()
    cache.put("b", "k1", MSGS, p, ["old"])
    cache.put("b", "k1", MSGS, p, ["new"])
    cache.put("b", "k2", MSGS, p, ["x"])
    assert cache.compact("b") == 2
    assert ChatCache(tmp_path).get("b", "k1") == ["new"]
    lines = (tmp_path / "b.jsonl").read_text().splitlines()
    assert {"key", "request", "response", "timestamp"} <= set(json.loads(lines[0]))


def _backend(handler, **kw):
    client = httpx.Client(transport=httpx.MockTransport(handler))
    return OpenAIChatBackend("http://llm/v1", api_key_env="PTKB_TEST_KEY", client=client,
                             sleep=lambda s: None, **kw)


def _ok(n=1):
    return httpx.Response(200, json={"choices": [{"message": {"content": f"out{i}"}} for i in range(n)]})


def test_openai_wire_format(monkeypatch):
    monkeypatch.setenv("PTKB_TEST_KEY", "sekret")
    seen = []

    def handler(req):
        seen.append((str(req.url), req.headers.get("authorization"), json.loads(req.content)))
        return _ok(seen[-1][2]["n"])

    b = _backend(handler)
    assert b.complete(MSGS, GenerationParams(seed=7, n_choices=2)) == ["out0", "out1"]
    url, auth, body = seen[0]
    assert url == "http://llm/v1/chat/completions" and auth == "Bearer sekret"
    assert body == {"model": "gpt-4o-mini", "messages": MSGS, "temperature": 1.0, "seed": 7, "n": 2,
                    "max_tokens": 512}
    b.complete(MSGS, GenerationParams())
    assert "seed" not in seen[1][2]


def test_retry_then_success():
    replies = iter([httpx.Response(429), httpx.Response(502), _ok()])
    b = _backend(lambda r: next(replies))
    assert b.complete(MSGS, GenerationParams()) == ["out0"]
    assert b.requests == 3


def test_transport_error_exhausts_retries():
    def handler(req):
        raise httpx.ConnectError("unreachable")

    sleeps = []
    b = _backend(handler, max_retries=3)
    b.sleep = sleeps.append
    with pytest.raises(RetryExhausted, match="4 attempts"):
        b.complete(MSGS, GenerationParams())
    assert sleeps == [1.0, 2.0, 4.0]


def test_auth_failure_not_retried():
    b = _backend(lambda r: httpx.Response(401))
    with pytest.raises(AuthError):
        b.complete(MSGS, GenerationParams())
    assert b.requests == 1
    with pytest.raises(BackendError):
        _backend(lambda r: httpx.Response(400, text="bad")).complete(MSGS, GenerationParams())


def test_malformed_response():
    with pytest.raises(MalformedResponse):
        _backend(lambda r: httpx.Response(200, json={"nope": 1})).complete(MSGS, GenerationParams())
    with pytest.raises(MalformedResponse):
        _backend(lambda r: _ok(1)).complete(MSGS, GenerationParams(n_choices=3))


class _Slow(Backend):
    backend_id = "slow"

    def __init__(self):
        super().__init__()
        self.active = 0
        self.peak = 0
        self.guard = threading.Lock()

    def complete(self, messages, params):
        self._count()
        with self.guard:
            self.active += 1
            self.peak = max(self.peak, self.active)
        time.sleep(0.01)
        with self.guard:
            self.active -= 1
        return [messages[0]["content"]]


def test_inflight_bound_and_order_independence(tmp_path):
    backend = _Slow()
    gw = Gateway(backend, ChatCache(tmp_path), max_inflight=3)
    prompts = [[{"role": "user", "content": f"p{i}"}] for i in range(24)]
    with ThreadPoolExecutor(12) as pool:
        outs = list(pool.map(lambda m: gw.cached_complete(m, GenerationParams()), prompts))
    assert backend.peak <= 3
    assert [o for o, _ in outs] == [[f"p{i}"] for i in range(24)]
    cache = ChatCache(tmp_path)
    for m in prompts:
        assert cache.get("slow", cache_key("slow", m, GenerationParams())) == [m[0]["content"]]


def test_generation_params_validation():
    with pytest.raises(ValueError):
        GenerationParams(temperature=-0.1)
    with pytest.raises(ValueError):
        GenerationParams(n_choices=0)
    assert GenerationParams().temperature == 1.0
