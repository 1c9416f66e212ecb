from __future__ import annotations

import itertools
import math

import pytest

from src.errors import CapabilityError, PreconditionError
from src.llm_client import LLMConfig, MockLLMClient
from src.metrics import context_precision_at_k
from src.reranker import (
    RERANKER_PRESETS,
    OverlapScorer,
    TrueTokenScorer,
    build_scorer,
    parse_permutation,
    rerank_listwise_llm,
    rerank_pass,
    rerank_pointwise,
)
from src.retrieval import rank_scores


@pytest.fixture
def fruit_store(make_store):
    return make_store({"d": ["green pear tart", "red apple pie", "apple and pear crumble", "steam engine"]})


@pytest.fixture
def fruit_ranked():
    return rank_scores("q", {"d-0000": 4.0, "d-0001": 3.0, "d-0002": 2.0, "d-0003": 1.0}, "bm25")


def test_pass_truncates(fruit_ranked):
    assert rerank_pass(fruit_ranked, top_k=2).ids == ["d-0000", "d-0001"]


def test_overlap_scorer_reorders(fruit_ranked, fruit_store):
    ranked = rerank_pointwise(fruit_ranked, "apple pie", OverlapScorer(), fruit_store, top_k=3)
    assert ranked.ids[0] == "d-0001"
    assert ranked.producer == "overlap"
    assert [e.rank for e in ranked.entries] == [1, 2, 3]


def test_true_token_scorer_matches_overlap_order(fruit_ranked, fruit_store, llm):
    scorer = build_scorer("true_token", MockLLMClient(), llm)
    ranked = rerank_pointwise(fruit_ranked, "apple pear", scorer, fruit_store, top_k=4)
    assert ranked.ids[0] == "d-0002"
    assert ranked.entries[0].score == pytest.approx(0.95)


def test_tart_instruction_is_prefixed(llm):
    preset = RERANKER_PRESETS["tart"]
    scorer = TrueTokenScorer(MockLLMClient(), llm, instruction=preset.instruction)
    assert scorer.prompt("what fruit", "pear").startswith(
        "Query: Find passage to answer given question what fruit Document:"
    )


def test_logprob_scorers_need_capability(llm):
    client = MockLLMClient(logprobs_available=False)
    for kind in ("true_token", "query_logprob"):
        with pytest.raises(CapabilityError):
            build_scorer(kind, client, llm)
    build_scorer("embedding_cosine", client, llm)


def test_query_logprob_prefers_passages_that_contain_the_query(fruit_ranked, fruit_store, llm):
    scorer = build_scorer("query_logprob", MockLLMClient(), llm)
    ranked = rerank_pointwise(fruit_ranked, "steam engine", scorer, fruit_store, top_k=1)
    assert ranked.ids == ["d-0003"]


def test_failing_passages_are_dropped(fruit_ranked, fruit_store):
    class Picky:
        name = "picky"

        def score(self, query, text):
            if "steam" in text:
                raise RuntimeError("cannot score")
            return len(text)

    ranked = rerank_pointwise(fruit_ranked, "q", Picky(), fruit_store, top_k=5)
    assert "d-0003" not in ranked.ids
    assert len(ranked) == 3


def test_every_preset_names_a_known_mechanism():
    assert len(RERANKER_PRESETS) == 9
    for preset in RERANKER_PRESETS.values():
        assert preset.mechanism in ("pass", "pointwise", "listwise")
        if preset.mechanism == "pointwise":
            assert preset.scorer is not None


def test_parse_permutation():
    assert parse_permutation("[3] > [1] > [3] > [9] > [2]", 4) == [2, 0, 1]
    assert parse_permutation("no idea", 4) == []


def test_listwise_applies_permutation_and_appends_the_rest(fruit_ranked, fruit_store, llm):
    seen = []

    def responder(prompt: str) -> str:
        seen.append(prompt)
        return "[4] > [2]"

    ranked = rerank_listwise_llm(fruit_ranked, "engines", MockLLMClient(responder=responder), llm, fruit_store, top_k=4)
    assert ranked.ids == ["d-0003", "d-0001", "d-0000", "d-0002"]
    assert ranked.scores == [4.0, 3.0, 2.0, 1.0]
    assert "[1] green pear tart" in seen[0]
    assert "engines" in seen[0]


def test_listwise_unparsable_reply_keeps_input_order(fruit_ranked, fruit_store, llm):
    client = MockLLMClient(responder=lambda p: "I cannot rank these.")
    ranked = rerank_listwise_llm(fruit_ranked, "q", client, llm, fruit_store, top_k=2)
    assert ranked.ids == ["d-0000", "d-0001"]


def test_listwise_needs_input(fruit_store, llm):
    from src.retrieval import RankedList

    with pytest.raises(PreconditionError):
        rerank_listwise_llm(RankedList("q"), "q", MockLLMClient(), llm, fruit_store)


def test_unknown_scorer_kind(llm):
    with pytest.raises(PreconditionError):
        build_scorer("crystal_ball", MockLLMClient(), LLMConfig())


class _ConstantScorer:
    name = "constant"

    def score(self, query: str, passage_text: str) -> float:
        return 0.5


class _StretchedOverlap:
    """OverlapScorer through a strictly increasing map."""

    name = "stretched"

    def score(self, query: str, passage_text: str) -> float:
        return math.exp(3.0 * OverlapScorer().score(query, passage_text)) + 2.0


def test_constant_scorer_orders_by_passage_id(fruit_store):
    ranked = rank_scores("q", {"d-0003": 4.0, "d-0001": 3.0, "d-0000": 2.0, "d-0002": 1.0}, "bm25")
    out = rerank_pointwise(ranked, "apple", _ConstantScorer(), fruit_store, top_k=4)
    assert out.ids == ["d-0000", "d-0001", "d-0002", "d-0003"]


@pytest.mark.parametrize("query", ["apple pear", "red apple pie", "steam", "nothing matches"])
def test_order_survives_an_increasing_transform(fruit_ranked, fruit_store, query):
    plain = rerank_pointwise(fruit_ranked, query, OverlapScorer(), fruit_store, top_k=4)
    stretched = rerank_pointwise(fruit_ranked, query, _StretchedOverlap(), fruit_store, top_k=4)
    assert stretched.ids == plain.ids


def test_overlap_reranking_never_lowers_context_precision(make_store):
    store = make_store({"d": [
        "alpha beta gamma one", "gamma beta alpha two",
        "alpha only", "beta only", "gamma only", "delta only",
    ]})
    gold = {"d-0000", "d-0001"}
    judgments = {pid: pid in gold for pid in store.ids}
    query = "alpha beta gamma"
    for order in itertools.permutations(store.ids):
        ranked = rank_scores("q", {pid: float(len(order) - i) for i, pid in enumerate(order)}, "bm25")
        before = context_precision_at_k(ranked, judgments, 5)
        after = context_precision_at_k(rerank_pointwise(ranked, query, OverlapScorer(), store, top_k=5), judgments, 5)
        assert after >= before
        assert after == 1.0
