"""Passage rerankers.

Three mechanisms cover the reranker families:

* pass: keep the incoming order, truncate.
* pointwise: score every (query, passage) pair with a ``PointwiseScorer``
  and sort.  Scorers: query-term overlap (offline default), embedding
  cosine, probability of a 'True' token, and query log-likelihood given
  the passage.
* listwise: ask a chat model for a permutation ``[3] > [1] > [2]``.

The named rerankers (``monot5``, ``tart``, ``upr`` ...) are presets that pick a
mechanism and a default model; see ``RERANKER_PRESETS``.
"""

from __future__ import annotations

import logging
import re
from dataclasses import dataclass
from typing import Literal, Protocol

from src.corpus import PassageStore
from src.errors import PreconditionError
from src.llm_client import BaseLLMClient, LLMConfig
from src.prompt_maker import fill_placeholders, load_prompt_text
from src.retrieval import RankedEntry, RankedList, cosine, rank_scores
from src.text import word_tokens

logger = logging.getLogger(__name__)

ScorerKind = Literal["overlap", "embedding_cosine", "true_token", "query_logprob"]

LISTWISE_PROMPT = "rankgpt_v1"
UPR_PROMPT = "Passage: {passage}\nPlease write a question based on this passage.\nQuestion: "

_PERMUTATION_RE = re.compile(r"\[(\d+)\]")


# ---------------------------------------------------------------------------
# Scorers
# ---------------------------------------------------------------------------

class PointwiseScorer(Protocol):
    name: str

    def score(self, query: str, passage_text: str) -> float: ...


class OverlapScorer:
    """|query terms in passage| / |query terms|."""

    name = "overlap"

    def score(self, query: str, passage_text: str) -> float:
        query_terms = set(word_tokens(query))
        if not query_terms:
            return 0.0
        return len(query_terms & set(word_tokens(passage_text))) / len(query_terms)


class EmbeddingCosineScorer:
    name = "embedding_cosine"

    def __init__(self, client: BaseLLMClient, llm: LLMConfig):
        self.client = client
        self.llm = llm

    def score(self, query: str, passage_text: str) -> float:
        q, p = self.client.embed([query, passage_text], self.llm)
        return cosine(q, p)


class TrueTokenScorer:
    """P('True') after a ``Query: .. Document: .. Relevant:`` prompt."""

    name = "true_token"

    def __init__(self, client: BaseLLMClient, llm: LLMConfig, instruction: str = ""):
        client.require_logprobs(llm, "true-token reranking")
        self.client = client
        self.llm = llm
        self.instruction = instruction

    def prompt(self, query: str, passage_text: str) -> str:
        if self.instruction:
            query = f"{self.instruction} {query}"
        return f"Query: {query} Document: {passage_text} Relevant:"

    def score(self, query: str, passage_text: str) -> float:
        return self.client.true_token_prob(self.prompt(query, passage_text), self.llm)


class QueryLogprobScorer:
    """Mean log-probability of the query given the passage."""

    name = "query_logprob"

    def __init__(self, client: BaseLLMClient, llm: LLMConfig):
        client.require_logprobs(llm, "query log-likelihood reranking")
        self.client = client
        self.llm = llm

    def score(self, query: str, passage_text: str) -> float:
        prefix = fill_placeholders(UPR_PROMPT, passage=passage_text)
        return self.client.sequence_logprob(prefix, query, self.llm)


def true_token_prob_scorer(client: BaseLLMClient, llm: LLMConfig, instruction: str = "") -> TrueTokenScorer:
    return TrueTokenScorer(client, llm, instruction=instruction)


def query_logprob_scorer(client: BaseLLMClient, llm: LLMConfig) -> QueryLogprobScorer:
    return QueryLogprobScorer(client, llm)


def build_scorer(
    kind: ScorerKind,
    client: BaseLLMClient | None = None,
    llm: LLMConfig | None = None,
    instruction: str = "",
) -> PointwiseScorer:
    if kind == "overlap":
        return OverlapScorer()
    if client is None or llm is None:
        raise PreconditionError(f"scorer '{kind}' needs an LLM client and config")
    if kind == "embedding_cosine":
        return EmbeddingCosineScorer(client, llm)
    if kind == "true_token":
        return true_token_prob_scorer(client, llm, instruction=instruction)
    if kind == "query_logprob":
        return query_logprob_scorer(client, llm)
    raise PreconditionError(f"unknown scorer kind {kind!r}")


# ---------------------------------------------------------------------------
# Named presets
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class RerankerPreset:
    mechanism: Literal["pass", "pointwise", "listwise"]
    scorer: ScorerKind | None = None
    model_name: str = ""
    instruction: str = ""


RERANKER_PRESETS: dict[str, RerankerPreset] = {
    "pass_reranker": RerankerPreset("pass"),
    "monot5": RerankerPreset("pointwise", "true_token", "castorini/monot5-3b-msmarco-10k"),
    "tart": RerankerPreset(
        "pointwise", "true_token", "facebook/tart-full-flan-t5-xl",
        instruction="Find passage to answer given question",
    ),
    "flag_embedding_llm_reranker": RerankerPreset("pointwise", "true_token", "BAAI/bge-reranker-v2-gemma"),
    "upr": RerankerPreset("pointwise", "query_logprob", "t5-large"),
    "rankgpt": RerankerPreset("listwise", None, ""),
    "colbert_reranker": RerankerPreset("pointwise", "embedding_cosine", "colbert-ir/colbertv2.0"),
    "sentence_transformer_reranker": RerankerPreset(
        "pointwise", "embedding_cosine", "cross-encoder/ms-marco-MiniLM-L-2-v2"
    ),
    "flag_embedding_reranker": RerankerPreset("pointwise", "embedding_cosine", "BAAI/bge-reranker-large"),
}


# ---------------------------------------------------------------------------
# Rerankers
# ---------------------------------------------------------------------------

def rerank_pass(ranked: RankedList, top_k: int = 5) -> RankedList:
    return ranked.truncate(top_k)


def rerank_pointwise(
    ranked: RankedList,
    query: str,
    scorer: PointwiseScorer,
    store: PassageStore,
    top_k: int = 5,
) -> RankedList:
    """Score every passage with *scorer*, sort, truncate.

    A passage the scorer fails on is dropped (logged), never kept with its
    retrieval score.
    """
    scores: dict[str, float] = {}
    for entry in ranked.entries:
        try:
            scores[entry.passage_id] = float(scorer.score(query, store[entry.passage_id].text))
        except Exception as exc:
            logger.warning(
                "query %r: %s scorer failed on %s, dropping it: %s",
                ranked.qid, scorer.name, entry.passage_id, exc,
            )
    return rank_scores(ranked.qid, scores, scorer.name, top_k)


def parse_permutation(reply: str, n: int) -> list[int]:
    """0-based indices named in *reply* as ``[i]``; first mention wins."""
    order: list[int] = []
    for m in _PERMUTATION_RE.finditer(reply):
        idx = int(m.group(1)) - 1
        if 0 <= idx < n and idx not in order:
            order.append(idx)
    return order


def rerank_listwise_llm(
    ranked: RankedList,
    query: str,
    client: BaseLLMClient,
    llm: LLMConfig,
    store: PassageStore,
    top_k: int = 5,
    prompt_name: str = LISTWISE_PROMPT,
) -> RankedList:
    """Single-window permutation reranking.

    Passages the reply leaves out follow in their input order; a reply with
    no usable ``[i]`` keeps the input order.
    """
    if not ranked.entries:
        raise PreconditionError(f"query {ranked.qid!r}: listwise reranking needs a non-empty list")
    n = len(ranked.entries)
    numbered = "\n".join(
        f"[{i}] {store[e.passage_id].text}" for i, e in enumerate(ranked.entries, 1)
    )
    prompt = fill_placeholders(load_prompt_text(prompt_name), query=query, passages=numbered, num=str(n))
    order = parse_permutation(client.chat(prompt, llm), n)
    if not order:
        logger.warning("query %r: unparsable permutation, keeping input order", ranked.qid)
    order += [i for i in range(n) if i not in order]

    entries = tuple(
        RankedEntry(ranked.entries[i].passage_id, float(n - pos), pos + 1)
        for pos, i in enumerate(order[:top_k])
    )
    return RankedList(qid=ranked.qid, entries=entries, producer="listwise")
