from __future__ import annotations

import numpy as np
import pytest

from src.errors import CapabilityError, ConfigError, LLMError, PreconditionError, RetryableLLMError
from src.llm_client import (
    LLMConfig,
    MockLLMClient,
    OpenAICompatibleClient,
    ResponseCache,
    cache_key,
    mock_completion,
    mock_embedding,
    mock_true_token_prob,
)


def test_mock_chat_is_a_function_of_the_prompt(llm):
    a = MockLLMClient().chat("ping", llm)
    b = MockLLMClient().chat("ping", llm)
    assert a == b
    assert a.startswith("[mock ")
    assert a != MockLLMClient().chat("pong", llm)


def test_mock_completion_respects_max_tokens():
    prompt = " ".join(f"w{i}" for i in range(100))
    reply = mock_completion(prompt, max_tokens=5)
    assert reply.split()[2:] == ["w95", "w96", "w97", "w98", "w99"]


def test_chat_rejects_empty_prompt(mock_client, llm):
    with pytest.raises(PreconditionError):
        mock_client.chat("   ", llm)


def test_cache_hit_skips_the_endpoint(llm):
    client = MockLLMClient(cache=ResponseCache())
    first = client.chat("hello there", llm)
    second = client.chat("hello there", llm)
    assert first == second
    assert client.network_calls == 1
    assert [c.cached for c in client.calls] == [False, True]


def test_cache_key_depends_on_model_and_temperature():
    base = LLMConfig(model_name="a")
    assert cache_key("mock", "chat", base, "x") != cache_key("mock", "chat", LLMConfig(model_name="b"), "x")
    assert cache_key("mock", "chat", base, "x") != cache_key(
        "mock", "chat", LLMConfig(model_name="a", temperature=1.0), "x"
    )


def test_persistent_cache_survives_restart_and_torn_lines(tmp_path, llm):
    path = tmp_path / "cache.jsonl"
    client = MockLLMClient(cache=ResponseCache(path))
    answer = client.chat("persist me", llm)
    with path.open("a", encoding="utf-8") as fh:
        fh.write('{"key": "torn')

    reloaded = MockLLMClient(cache=ResponseCache(path), responder=lambda p: "different")
    assert reloaded.chat("persist me", llm) == answer
    assert reloaded.network_calls == 0


def test_retryable_errors_are_retried_then_succeed(llm):
    attempts = []

    def flaky(prompt: str) -> str:
        attempts.append(prompt)
        if len(attempts) < 3:
            raise RetryableLLMError("boom", endpoint="http://x", status=503)
        return "ok"

    client = MockLLMClient(responder=flaky, retries=3)
    assert client.chat("q", llm) == "ok"
    assert client.network_calls == 3


def test_exhausted_retries_raise_with_status(llm):
    def down(prompt: str) -> str:
        raise RetryableLLMError("unavailable", endpoint="http://x", status=503)

    client = MockLLMClient(responder=down, retries=2)
    with pytest.raises(LLMError) as info:
        client.chat("q", llm)
    assert info.value.status == 503
    assert "after 2 attempts" in str(info.value)


def test_zero_retries_is_a_config_error():
    with pytest.raises(ConfigError, match="retries"):
        MockLLMClient(retries=0)


def test_require_logprobs_raises_capability_error(llm):
    client = MockLLMClient(logprobs_available=False)
    with pytest.raises(CapabilityError):
        client.require_logprobs(llm, "reranking")
    # Capability errors are configuration problems (CLI exit 2).
    assert issubclass(CapabilityError, ConfigError)


def test_embeddings_are_unit_length_and_deterministic(mock_client, llm):
    a, b, c = mock_client.embed(["red apple", "red apple", "steam engine"], llm)
    assert a.shape == (256,)
    assert np.linalg.norm(a) == pytest.approx(1.0)
    assert np.array_equal(a, b)
    assert not np.array_equal(a, c)


@pytest.mark.parametrize("text", ["???", "-- !!", "a", "   "])
def test_embeddings_have_unit_norm_for_punctuation_and_blank_text(text):
    vec = mock_embedding(text)
    assert np.linalg.norm(vec) == pytest.approx(1.0)


def test_punctuation_only_texts_embed_differently():
    assert not np.array_equal(mock_embedding("???"), mock_embedding("-- !!"))


def test_embed_rejects_empty_text(mock_client, llm):
    with pytest.raises(PreconditionError):
        mock_client.embed(["fine", ""], llm)


def test_mock_true_token_prob_tracks_overlap():
    assert mock_true_token_prob("Query: red apple Document: a red apple Relevant:") == pytest.approx(0.95)
    assert mock_true_token_prob("Query: red apple Document: steam Relevant:") == pytest.approx(0.05)
    assert mock_true_token_prob("no scoring pattern here") == 0.5


# ---------------------------------------------------------------------------
# HTTP client with a stand-in session
# ---------------------------------------------------------------------------

class _Response:
    def __init__(self, status_code: int, payload: dict | None = None):
        self.status_code = status_code
        self._payload = payload or {}
        self.text = str(payload)

    def json(self):
        return self._payload


class _Session:
    def __init__(self, responses: list[_Response]):
        self.responses = responses
        self.requests = []

    def post(self, url, json=None, headers=None, timeout=None):
        self.requests.append((url, json, headers))
        return self.responses.pop(0)


def _chat_payload(text: str) -> dict:
    return {"choices": [{"message": {"content": text}}]}


def test_http_client_needs_the_named_key_variable(monkeypatch):
    monkeypatch.delenv("RAGOPT_TEST_KEY", raising=False)
    client = OpenAICompatibleClient(session=_Session([]), requests_per_second=0)
    with pytest.raises(ConfigError, match="RAGOPT_TEST_KEY"):
        client.chat("hi", LLMConfig(api_key_env="RAGOPT_TEST_KEY"))


def test_http_client_retries_server_errors(monkeypatch):
    monkeypatch.setenv("RAGOPT_TEST_KEY", "secret")
    session = _Session([_Response(503), _Response(200, _chat_payload("hello"))])
    client = OpenAICompatibleClient(session=session, requests_per_second=0, backoff=0.0)
    cfg = LLMConfig(api_key_env="RAGOPT_TEST_KEY", endpoint_url="http://llm.local/v1")
    assert client.chat("hi", cfg) == "hello"
    url, body, headers = session.requests[-1]
    assert url == "http://llm.local/v1/chat/completions"
    assert body["messages"][0]["content"] == "hi"
    assert headers["Authorization"] == "Bearer secret"


def test_http_client_client_errors_are_final(monkeypatch):
    monkeypatch.setenv("RAGOPT_TEST_KEY", "secret")
    session = _Session([_Response(401, {"error": "bad key"})])
    client = OpenAICompatibleClient(session=session, requests_per_second=0, backoff=0.0)
    with pytest.raises(LLMError) as info:
        client.chat("hi", LLMConfig(api_key_env="RAGOPT_TEST_KEY"))
    assert info.value.status == 401
    assert not isinstance(info.value, RetryableLLMError)


def test_http_true_token_prob_is_two_way_softmax(monkeypatch):
    monkeypatch.setenv("RAGOPT_TEST_KEY", "secret")
    payload = {"choices": [{"logprobs": {"content": [{"top_logprobs": [
        {"token": "True", "logprob": np.log(0.6)},
        {"token": "False", "logprob": np.log(0.2)},
    ]}]}}]}
    client = OpenAICompatibleClient(session=_Session([_Response(200, payload)]), requests_per_second=0)
    prob = client.true_token_prob("Query: a Document: b Relevant:", LLMConfig(api_key_env="RAGOPT_TEST_KEY"))
    assert prob == pytest.approx(0.75)
