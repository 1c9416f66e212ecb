"""Query expansion: pass-through, multi-hop decomposition and HyDE.

An expansion turns one user query into one or more search texts
(``ExpandedQuery.variants``).  ``retrieve_expanded`` runs a retriever per
variant and merges the lists by each passage's best score.
"""

from __future__ import annotations

import logging
import re
from dataclasses import dataclass
from typing import Literal, Sequence

import config
from src.errors import PreconditionError
from src.llm_client import BaseLLMClient, LLMConfig
from src.prompt_maker import fill_placeholders, load_prompt_text
from src.retrieval import RankedList, Retriever, rank_scores

logger = logging.getLogger(__name__)

ExpansionKind = Literal["pass", "decompose", "hyde"]

DECOMPOSE_PROMPT = "decompose_v1"
HYDE_PROMPT = "hyde_v1"

# "1. question", "2) question"
_NUMBERED_LINE_RE = re.compile(r"^\s*\d+\s*[.)]\s*(?P<text>\S.*?)\s*$", re.M)


@dataclass(frozen=True)
class ExpandedQuery:
    qid: str
    variants: tuple[str, ...]
    kind: ExpansionKind = "pass"

    def __post_init__(self):
        if not self.variants:
            raise PreconditionError(f"query {self.qid!r}: expansion produced no variants")
        if any(not v or not v.strip() for v in self.variants):
            raise PreconditionError(f"query {self.qid!r}: expansion produced an empty variant")

    def to_dict(self) -> dict:
        return {"qid": self.qid, "kind": self.kind, "variants": list(self.variants)}

    @classmethod
    def from_dict(cls, data: dict) -> "ExpandedQuery":
        return cls(qid=data["qid"], variants=tuple(data["variants"]), kind=data["kind"])


def _check_query(query: str) -> None:
    if not query or not query.strip():
        raise PreconditionError("query must be non-empty")


def expand_pass(query: str, qid: str = "") -> ExpandedQuery:
    _check_query(query)
    return ExpandedQuery(qid=qid, variants=(query,), kind="pass")


def parse_numbered_lines(text: str) -> list[str]:
    return [m.group("text") for m in _NUMBERED_LINE_RE.finditer(text)]


def expand_decompose(
    query: str,
    client: BaseLLMClient,
    llm: LLMConfig,
    qid: str = "",
    prompt_name: str = DECOMPOSE_PROMPT,
) -> ExpandedQuery:
    """Split a multi-hop question into single-hop questions.

    Falls back to the original query when the reply has no numbered lines.
    """
    _check_query(query)
    prompt = fill_placeholders(load_prompt_text(prompt_name), query=query)
    reply = client.chat(prompt, llm)
    variants = parse_numbered_lines(reply)
    if not variants:
        logger.warning("query %r: decomposition reply has no numbered questions; using the original query", qid)
        variants = [query]
    return ExpandedQuery(qid=qid, variants=tuple(variants), kind="decompose")


def expand_hyde(
    query: str,
    client: BaseLLMClient,
    llm: LLMConfig,
    qid: str = "",
    prompt_name: str = HYDE_PROMPT,
) -> ExpandedQuery:
    """Replace the query by a generated hypothetical passage (max_tokens words)."""
    _check_query(query)
    if llm.max_tokens is None:
        llm = llm.model_copy(update={"max_tokens": config.HYDE_MAX_TOKENS})
    prompt = fill_placeholders(load_prompt_text(prompt_name), query=query)
    words = client.chat(prompt, llm).split()[: llm.max_tokens]
    if not words:
        logger.warning("query %r: HyDE reply is empty; using the original query", qid)
        words = query.split()
    return ExpandedQuery(qid=qid, variants=(" ".join(words),), kind="hyde")


# ---------------------------------------------------------------------------
# Multi-variant retrieval
# ---------------------------------------------------------------------------

def merge_variant_lists(qid: str, lists: Sequence[RankedList], top_k: int, producer: str = "") -> RankedList:
    """Max-score merge of per-variant lists, re-sorted and truncated."""
    best: dict[str, float] = {}
    for ranked in lists:
        for entry in ranked.entries:
            if entry.passage_id not in best or entry.score > best[entry.passage_id]:
                best[entry.passage_id] = entry.score
    if not producer and lists:
        producer = lists[0].producer
    return rank_scores(qid, best, producer, top_k)


def retrieve_expanded(eq: ExpandedQuery, retriever: Retriever, top_k: int) -> RankedList:
    lists = [retriever.search(v, top_k, qid=eq.qid) for v in eq.variants]
    return merge_variant_lists(eq.qid, lists, top_k, producer=retriever.name)
