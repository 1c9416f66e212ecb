"""Chat-completion and embedding access over an OpenAI-compatible wire shape.

Every module that talks to a model goes through a client from this file:

* ``OpenAICompatibleClient``: real HTTP endpoints via ``requests``.
* ``MockLLMClient``: deterministic offline stand-ins used by ``--mock-llm``
  and the test suite.  Replies depend only on the request bytes.

Both share ``BaseLLMClient``, which owns the precondition checks, the
response cache, the request-rate limiter, the retry loop and per-call wall
time bookkeeping.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import os
import re
import threading
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np
import requests
from pydantic import BaseModel, ConfigDict, Field, PositiveInt

import config
from src.errors import (
    CapabilityError,
    ConfigError,
    LLMError,
    PreconditionError,
    RetryableLLMError,
)
from src.text import word_tokens

logger = logging.getLogger(__name__)

EmbeddingVector = np.ndarray


class LLMConfig(BaseModel):
    """Model + endpoint settings for one chat or embedding call site."""

    model_config = ConfigDict(extra="forbid", frozen=True)

    model_name: str = Field(default=config.DEFAULT_CHAT_MODEL, min_length=1)
    temperature: float = Field(default=0.0, ge=0.0, allow_inf_nan=False)
    max_tokens: PositiveInt | None = None
    endpoint_url: str = config.DEFAULT_ENDPOINT_URL
    api_key_env: str = config.DEFAULT_API_KEY_ENV
    supports_logprobs: bool = True


@dataclass(frozen=True)
class CallRecord:
    kind: str
    model_name: str
    seconds: float
    cached: bool


# ---------------------------------------------------------------------------
# Cache and rate limiting
# ---------------------------------------------------------------------------

class ResponseCache:
    """Append-only response cache keyed by content hash.

    With a *path* the cache is persisted as JSON lines and reloaded on the
    next run; without one it lives in memory only.
    """

    def __init__(self, path: Path | str | None = None):
        self.path = Path(path) if path else None
        self._entries: dict[str, object] = {}
        self._lock = threading.Lock()
        if self.path and self.path.exists():
            self._load()

    def _load(self) -> None:
        with self.path.open(encoding="utf-8") as fh:
            for line_number, line in enumerate(fh, 1):
                if not line.strip():
                    continue
                try:
                    entry = json.loads(line)
                    self._entries[entry["key"]] = entry["value"]
                except (ValueError, KeyError):
                    # A run interrupted mid-write leaves a torn last line.
                    logger.warning("Skipping unreadable cache line %d in %s", line_number, self.path)

    def get(self, key: str):
        with self._lock:
            return self._entries.get(key)

    def put(self, key: str, value) -> None:
        with self._lock:
            if key in self._entries:
                return
            self._entries[key] = value
            if self.path:
                self.path.parent.mkdir(parents=True, exist_ok=True)
                with self.path.open("a", encoding="utf-8") as fh:
                    fh.write(json.dumps({"key": key, "value": value}) + "\n")

    def __len__(self) -> int:
        with self._lock:
            return len(self._entries)


class RateLimiter:
    """Spaces requests at least ``1 / requests_per_second`` apart."""

    def __init__(self, requests_per_second: float = 0.0):
        self.interval = 1.0 / requests_per_second if requests_per_second > 0 else 0.0
        self._next_slot = 0.0
        self._lock = threading.Lock()

    def wait(self) -> None:
        if not self.interval:
            return
        with self._lock:
            now = time.monotonic()
            slot = max(now, self._next_slot)
            self._next_slot = slot + self.interval
        delay = slot - now
        if delay > 0:
            time.sleep(delay)


def cache_key(namespace: str, kind: str, cfg: LLMConfig, text: str) -> str:
    """Content hash of everything that determines a response."""
    payload = json.dumps(
        [namespace, kind, cfg.model_name, cfg.temperature, cfg.max_tokens, text],
        ensure_ascii=False,
    )
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()


# ---------------------------------------------------------------------------
# Base client
# ---------------------------------------------------------------------------

class BaseLLMClient:
    """Shared request plumbing; subclasses implement the ``_raw_*`` calls."""

    namespace = "base"

    def __init__(
        self,
        cache: ResponseCache | None = None,
        requests_per_second: float = 0.0,
        retries: int = config.LLM_RETRIES,
        backoff: float = config.LLM_BACKOFF,
    ):
        if retries < 1:
            raise ConfigError(f"retries must be at least 1, got {retries}")
        self.cache = cache
        self.retries = retries
        self.backoff = backoff
        self.network_calls = 0
        self.calls: list[CallRecord] = []
        self._limiter = RateLimiter(requests_per_second)
        self._lock = threading.Lock()

    # -- public API --------------------------------------------------------

    def chat(self, prompt: str, cfg: LLMConfig) -> str:
        """Return the completion text for *prompt*."""
        if not prompt or not prompt.strip():
            raise PreconditionError("chat prompt must be non-empty")
        return self._cached_call("chat", cfg, prompt, lambda: self._raw_chat(prompt, cfg))

    def embed(self, texts: list[str], cfg: LLMConfig) -> list[EmbeddingVector]:
        """Return one embedding per text, all of the same dimension."""
        if not texts:
            raise PreconditionError("embed needs at least one text")
        if any(not t or not t.strip() for t in texts):
            raise PreconditionError("embed texts must be non-empty")

        results: list[list[float] | None] = [None] * len(texts)
        missing: dict[str, list[int]] = {}
        for i, text in enumerate(texts):
            key = cache_key(self.namespace, "embed", cfg, text)
            hit = self.cache.get(key) if self.cache is not None else None
            if hit is not None:
                results[i] = hit
            else:
                missing.setdefault(text, []).append(i)

        if missing:
            unique = list(missing)
            start = time.perf_counter()
            vectors = self._with_retries(lambda: self._raw_embed(unique, cfg), cfg)
            self._record("embed", cfg, time.perf_counter() - start, cached=False)
            if len(vectors) != len(unique):
                raise LLMError(
                    f"{cfg.endpoint_url}: expected {len(unique)} embeddings, got {len(vectors)}",
                    endpoint=cfg.endpoint_url,
                )
            for text, vector in zip(unique, vectors):
                values = [float(v) for v in vector]
                if self.cache is not None:
                    self.cache.put(cache_key(self.namespace, "embed", cfg, text), values)
                for i in missing[text]:
                    results[i] = values
        else:
            self._record("embed", cfg, 0.0, cached=True)

        arrays = [np.asarray(v, dtype=np.float64) for v in results]
        dims = {a.shape[0] for a in arrays}
        if len(dims) != 1:
            raise LLMError(f"{cfg.model_name}: embeddings of mixed dimension {sorted(dims)}")
        if not all(np.all(np.isfinite(a)) for a in arrays):
            raise LLMError(f"{cfg.model_name}: embedding contains non-finite values")
        return arrays

    def supports_logprobs(self, cfg: LLMConfig) -> bool:
        return cfg.supports_logprobs

    def require_logprobs(self, cfg: LLMConfig, purpose: str) -> None:
        """Raise ``CapabilityError`` when *cfg* cannot return token log-probs."""
        if not self.supports_logprobs(cfg):
            raise CapabilityError(
                f"{purpose} needs token log-probabilities, which "
                f"{cfg.model_name} at {cfg.endpoint_url} does not provide"
            )

    def true_token_prob(self, prompt: str, cfg: LLMConfig) -> float:
        """Probability that the next token is 'True' (vs 'False')."""
        if not prompt.strip():
            raise PreconditionError("scoring prompt must be non-empty")
        return float(self._cached_call(
            "true_token", cfg, prompt, lambda: self._raw_true_token_prob(prompt, cfg)
        ))

    def sequence_logprob(self, prefix: str, continuation: str, cfg: LLMConfig) -> float:
        """Mean log-probability of *continuation* tokens given *prefix*."""
        if not continuation.strip():
            raise PreconditionError("continuation must be non-empty")
        text = prefix + "\x00" + continuation
        return float(self._cached_call(
            "logprob", cfg, text, lambda: self._raw_sequence_logprob(prefix, continuation, cfg)
        ))

    def total_seconds(self) -> float:
        with self._lock:
            return sum(c.seconds for c in self.calls)

    # -- plumbing ----------------------------------------------------------

    def _cached_call(self, kind: str, cfg: LLMConfig, text: str, fn: Callable):
        key = cache_key(self.namespace, kind, cfg, text)
        if self.cache is not None:
            hit = self.cache.get(key)
            if hit is not None:
                self._record(kind, cfg, 0.0, cached=True)
                return hit
        start = time.perf_counter()
        value = self._with_retries(fn, cfg)
        self._record(kind, cfg, time.perf_counter() - start, cached=False)
        if self.cache is not None:
            self.cache.put(key, value)
        return value

    def _with_retries(self, fn: Callable, cfg: LLMConfig):
        """Run *fn*, retrying transport failures with exponential backoff."""
        last_exc: RetryableLLMError | None = None
        for attempt in range(self.retries):
            self._limiter.wait()
            with self._lock:
                self.network_calls += 1
            try:
                return fn()
            except RetryableLLMError as exc:
                last_exc = exc
                if attempt + 1 < self.retries:
                    wait = self.backoff * (2 ** attempt)
                    logger.warning(
                        "%s (retry %d/%d in %.1fs)", exc, attempt + 1, self.retries - 1, wait
                    )
                    time.sleep(wait)
        raise LLMError(
            f"{last_exc.endpoint or cfg.endpoint_url} failed after {self.retries} attempts"
            f" (status {last_exc.status if last_exc.status is not None else 'n/a'}): {last_exc}",
            endpoint=last_exc.endpoint or cfg.endpoint_url,
            status=last_exc.status,
        )

    def _record(self, kind: str, cfg: LLMConfig, seconds: float, cached: bool) -> None:
        with self._lock:
            self.calls.append(CallRecord(kind, cfg.model_name, seconds, cached))

    def _raw_chat(self, prompt: str, cfg: LLMConfig) -> str:
        raise NotImplementedError

    def _raw_embed(self, texts: list[str], cfg: LLMConfig) -> list[list[float]]:
        raise NotImplementedError

    def _raw_true_token_prob(self, prompt: str, cfg: LLMConfig) -> float:
        raise NotImplementedError

    def _raw_sequence_logprob(self, prefix: str, continuation: str, cfg: LLMConfig) -> float:
        raise NotImplementedError


# ---------------------------------------------------------------------------
# HTTP client
# ---------------------------------------------------------------------------

class OpenAICompatibleClient(BaseLLMClient):
    """Client for ``/chat/completions``, ``/embeddings`` and ``/completions``."""

    namespace = "http"

    def __init__(
        self,
        cache: ResponseCache | None = None,
        requests_per_second: float = config.LLM_REQUESTS_PER_SECOND,
        timeout: float = config.HTTP_TIMEOUT_SECONDS,
        session: requests.Session | None = None,
        **kwargs,
    ):
        super().__init__(cache=cache, requests_per_second=requests_per_second, **kwargs)
        self.timeout = timeout
        self.session = session or requests.Session()

    def _post(self, cfg: LLMConfig, path: str, body: dict) -> dict:
        api_key = os.environ.get(cfg.api_key_env, "")
        if not api_key:
            raise ConfigError(f"environment variable {cfg.api_key_env} is not set")
        url = cfg.endpoint_url.rstrip("/") + path
        try:
            resp = self.session.post(
                url,
                json=body,
                headers={"Authorization": f"Bearer {api_key}"},
                timeout=self.timeout,
            )
        except requests.RequestException as exc:
            raise RetryableLLMError(f"{url}: {exc}", endpoint=url) from exc

        if resp.status_code == 429 or resp.status_code >= 500:
            raise RetryableLLMError(f"{url} returned {resp.status_code}", endpoint=url, status=resp.status_code)
        if resp.status_code >= 400:
            raise LLMError(
                f"{url} returned {resp.status_code}: {resp.text[:200]}",
                endpoint=url,
                status=resp.status_code,
            )
        try:
            return resp.json()
        except ValueError as exc:
            raise RetryableLLMError(f"{url}: invalid JSON response", endpoint=url, status=resp.status_code) from exc

    def _chat_body(self, prompt: str, cfg: LLMConfig) -> dict:
        body = {
            "model": cfg.model_name,
            "messages": [{"role": "user", "content": prompt}],
            "temperature": cfg.temperature,
        }
        if cfg.max_tokens is not None:
            body["max_tokens"] = cfg.max_tokens
        return body

    def _raw_chat(self, prompt: str, cfg: LLMConfig) -> str:
        data = self._post(cfg, "/chat/completions", self._chat_body(prompt, cfg))
        try:
            return data["choices"][0]["message"]["content"] or ""
        except (KeyError, IndexError, TypeError) as exc:
            raise LLMError(f"{cfg.endpoint_url}: malformed chat response", endpoint=cfg.endpoint_url) from exc

    def _raw_embed(self, texts: list[str], cfg: LLMConfig) -> list[list[float]]:
        data = self._post(cfg, "/embeddings", {"model": cfg.model_name, "input": texts})
        try:
            items = sorted(data["data"], key=lambda d: d.get("index", 0))
            return [item["embedding"] for item in items]
        except (KeyError, TypeError) as exc:
            raise LLMError(f"{cfg.endpoint_url}: malformed embedding response", endpoint=cfg.endpoint_url) from exc

    def _raw_true_token_prob(self, prompt: str, cfg: LLMConfig) -> float:
        body = self._chat_body(prompt, cfg)
        body.update({"max_tokens": 1, "logprobs": True, "top_logprobs": 20})
        data = self._post(cfg, "/chat/completions", body)
        try:
            top = data["choices"][0]["logprobs"]["content"][0]["top_logprobs"]
        except (KeyError, IndexError, TypeError) as exc:
            raise LLMError(f"{cfg.endpoint_url}: response carries no logprobs", endpoint=cfg.endpoint_url) from exc

        best = {"true": -math.inf, "false": -math.inf}
        for item in top:
            token = str(item.get("token", "")).strip().lower()
            if token in best:
                best[token] = max(best[token], float(item["logprob"]))
        if best["true"] == -math.inf:
            return 0.0
        # Two-way softmax over the True/False tokens.
        return 1.0 / (1.0 + math.exp(best["false"] - best["true"]))

    def _raw_sequence_logprob(self, prefix: str, continuation: str, cfg: LLMConfig) -> float:
        body = {
            "model": cfg.model_name,
            "prompt": prefix + continuation,
            "max_tokens": 0,
            "echo": True,
            "logprobs": 0,
            "temperature": cfg.temperature,
        }
        data = self._post(cfg, "/completions", body)
        try:
            lp = data["choices"][0]["logprobs"]
            pairs = zip(lp["text_offset"], lp["token_logprobs"])
        except (KeyError, IndexError, TypeError) as exc:
            raise LLMError(f"{cfg.endpoint_url}: response carries no logprobs", endpoint=cfg.endpoint_url) from exc
        values = [v for offset, v in pairs if offset >= len(prefix) and v is not None]
        if not values:
            raise LLMError(f"{cfg.endpoint_url}: no continuation tokens scored", endpoint=cfg.endpoint_url)
        return float(sum(values) / len(values))


# ---------------------------------------------------------------------------
# Deterministic mocks
# ---------------------------------------------------------------------------

def _digest(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def mock_completion(prompt: str, max_tokens: int | None = None) -> str:
    """Digest-tagged echo of the prompt tail; a function of prompt bytes only."""
    n = max_tokens or config.MOCK_MAX_TOKENS
    words = prompt.split()[-n:]
    return f"[mock {_digest(prompt)[:8]}] " + " ".join(words)


def mock_embedding(text: str, dim: int = config.MOCK_EMBED_DIM) -> np.ndarray:
    """Hashed bag of whitespace tokens, L2-normalized.

    Text without tokens maps to the first basis vector so every embedding
    has unit norm.
    """
    vec = np.zeros(dim, dtype=np.float64)
    tokens = text.split()
    if not tokens:
        vec[0] = 1.0
        return vec
    for token in tokens:
        bucket = int.from_bytes(hashlib.blake2b(token.encode("utf-8"), digest_size=8).digest(), "big") % dim
        vec[bucket] += 1.0
    return vec / np.linalg.norm(vec)


_SCORING_PROMPT_RE = re.compile(r"Query:(?P<query>.*?)Document:(?P<doc>.*?)Relevant:", re.S)


def mock_true_token_prob(prompt: str) -> float:
    """Overlap-driven relevance probability for ``Query: .. Document: .. Relevant:`` prompts."""
    m = _SCORING_PROMPT_RE.search(prompt)
    if not m:
        return 0.5
    query_terms = set(word_tokens(m.group("query")))
    doc_terms = set(word_tokens(m.group("doc")))
    if not query_terms:
        return 0.5
    return 0.05 + 0.9 * len(query_terms & doc_terms) / len(query_terms)


def mock_sequence_logprob(prefix: str, continuation: str) -> float:
    """Smoothed unigram log-likelihood of the continuation under the prefix."""
    prefix_tokens = word_tokens(prefix)
    counts: dict[str, int] = {}
    for tok in prefix_tokens:
        counts[tok] = counts.get(tok, 0) + 1
    cont = word_tokens(continuation) or continuation.split()
    n = len(prefix_tokens)
    return float(np.mean([math.log((counts.get(t, 0) + 0.5) / (n + 1.0)) for t in cont]))


class MockLLMClient(BaseLLMClient):
    """Offline client.  Each endpoint can be pinned with a callable."""

    namespace = "mock"

    def __init__(
        self,
        responder: Callable[[str], str] | None = None,
        true_prob: Callable[[str], float] | None = None,
        logprob: Callable[[str, str], float] | None = None,
        logprobs_available: bool = True,
        embed_dim: int = config.MOCK_EMBED_DIM,
        cache: ResponseCache | None = None,
        **kwargs,
    ):
        kwargs.setdefault("backoff", 0.0)
        super().__init__(cache=cache, **kwargs)
        self.responder = responder
        self.true_prob = true_prob
        self.logprob = logprob
        self.logprobs_available = logprobs_available
        self.embed_dim = embed_dim

    def supports_logprobs(self, cfg: LLMConfig) -> bool:
        return self.logprobs_available and cfg.supports_logprobs

    def _raw_chat(self, prompt: str, cfg: LLMConfig) -> str:
        if self.responder is not None:
            return self.responder(prompt)
        return mock_completion(prompt, cfg.max_tokens)

    def _raw_embed(self, texts: list[str], cfg: LLMConfig) -> list[list[float]]:
        return [mock_embedding(t, self.embed_dim).tolist() for t in texts]

    def _raw_true_token_prob(self, prompt: str, cfg: LLMConfig) -> float:
        fn = self.true_prob or mock_true_token_prob
        return float(fn(prompt))

    def _raw_sequence_logprob(self, prefix: str, continuation: str, cfg: LLMConfig) -> float:
        fn = self.logprob or mock_sequence_logprob
        return float(fn(prefix, continuation))


def build_client(mock: bool, cache_path: Path | str | None = None, **kwargs) -> BaseLLMClient:
    """Create the client used for a run; ``cache_path=None`` keeps the cache in memory."""
    cache = ResponseCache(cache_path)
    if mock:
        return MockLLMClient(cache=cache, **kwargs)
    return OpenAICompatibleClient(cache=cache, **kwargs)
