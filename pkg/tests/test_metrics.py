from __future__ import annotations

import itertools
import random

import numpy as np
import pytest

from src.corpus import Passage, QARecord
from src.errors import PreconditionError
from src.llm_client import LLMConfig, MockLLMClient
from src.metrics import (
    GoldJudge,
    LLMJudge,
    aggregate_generation,
    context_precision_at_k,
    g_eval,
    judge_llm,
    lcs_length,
    mean_or_none,
    meteor,
    parse_aspect_score,
    parse_verdict,
    rouge,
    sem_score,
)
from src.retrieval import rank_scores

# ---------------------------------------------------------------------------
# Context precision
# ---------------------------------------------------------------------------


def _enumerated_precision(relevance: tuple[bool, ...]) -> float:
    hits, numerator = 0, 0.0
    for k in range(1, len(relevance) + 1):
        precision_at_k = sum(relevance[:k]) / k
        numerator += precision_at_k * relevance[k - 1]
        hits += relevance[k - 1]
    return numerator / hits if hits else 0.0


def test_context_precision_matches_enumeration():
    cases = 0
    for k in range(1, 6):
        for relevance in itertools.product((False, True), repeat=k):
            ids = [f"p{i}" for i in range(k)]
            ranked = rank_scores("q", {pid: float(k - i) for i, pid in enumerate(ids)}, "")
            judgments = dict(zip(ids, relevance))
            assert context_precision_at_k(ranked, judgments, k) == _enumerated_precision(relevance)
            cases += 1
    assert cases == 62


def test_context_precision_extremes():
    ranked = rank_scores("q", {"a": 3.0, "b": 2.0, "c": 1.0}, "")
    assert context_precision_at_k(ranked, {"a": True, "b": True, "c": True}, 3) == 1.0
    assert context_precision_at_k(ranked, {"a": False, "b": False, "c": False}, 3) == 0.0
    assert context_precision_at_k(ranked, {"a": False, "b": True, "c": False}, 3) == 0.5


def test_context_precision_only_looks_at_top_k():
    ranked = rank_scores("q", {"a": 3.0, "b": 2.0, "c": 1.0}, "")
    assert context_precision_at_k(ranked, {"a": False, "b": False}, 2) == 0.0


def test_context_precision_needs_judgments_and_positive_k():
    ranked = rank_scores("q", {"a": 1.0}, "")
    with pytest.raises(PreconditionError):
        context_precision_at_k(ranked, {}, 1)
    with pytest.raises(PreconditionError):
        context_precision_at_k(ranked, {"a": True}, 0)


def test_gold_judge():
    qa = QARecord("q", "question", "answer", ("d-0001",))
    judge = GoldJudge()
    assert judge.judge(qa, Passage("d-0001", "d", 1, "x")).relevant
    assert not judge.judge(qa, Passage("d-0002", "d", 2, "x")).relevant
    with pytest.raises(PreconditionError):
        judge.judge(QARecord("q", "question", "answer"), Passage("d-0001", "d", 1, "x"))


def test_llm_judge_parses_and_retries(llm):
    replies = iter(["hmm", "Yes."])
    client = MockLLMClient(responder=lambda p: next(replies))
    verdict = judge_llm("q", "a", Passage("d-0000", "d", 0, "text"), client, llm, qid="q1")
    assert verdict.relevant
    assert client.network_calls == 2


def test_llm_judge_unparsable_counts_irrelevant(llm):
    client = MockLLMClient(responder=lambda p: "maybe")
    assert not judge_llm("q", "a", Passage("d-0000", "d", 0, "text"), client, llm).relevant


def test_llm_judge_memoizes(llm):
    client = MockLLMClient(responder=lambda p: "yes")
    judge = LLMJudge(client, llm)
    qa = QARecord("q", "question", "answer")
    passage = Passage("d-0000", "d", 0, "text")
    judge.judge(qa, passage)
    judge.judge(qa, passage)
    assert client.network_calls == 1


def test_parse_verdict():
    assert parse_verdict("Yes, it is") is True
    assert parse_verdict("NO") is False
    assert parse_verdict("yesterday") is None


# ---------------------------------------------------------------------------
# Lexical generation metrics
# ---------------------------------------------------------------------------

def test_rouge_l_golden_value():
    assert rouge("the cat sat", "the cat") == pytest.approx(0.8, abs=1e-9)


def test_rouge_variants_and_edges():
    assert rouge("the cat sat on the mat", "the cat sat on the mat", "rouge2") == 1.0
    assert rouge("a b", "b a", "rouge1") == 1.0
    assert rouge("a b", "b a", "rougeL") == 0.5
    assert rouge("", "anything") == 0.0
    assert lcs_length(list("abcbdab"), list("bdcaba")) == 4


def test_meteor_bounds():
    assert meteor("the cat sat on the mat", "the cat sat on the mat") == pytest.approx(1 - 0.5 * (1 / 6) ** 3)
    assert meteor("dog", "the cat") == 0.0
    assert meteor("", "the cat") == 0.0
    assert 0.0 < meteor("the cat sat", "the cat sat on the mat") < 1.0


def test_meteor_penalizes_fragmentation():
    assert meteor("a b c d", "a b c d") > meteor("d c b a", "a b c d")


# ---------------------------------------------------------------------------
# SemScore / G-Eval
# ---------------------------------------------------------------------------

def _embed():
    client = MockLLMClient()
    cfg = LLMConfig(model_name="mock-embed")
    return lambda texts: client.embed(texts, cfg)


def test_sem_score_identical_texts():
    assert sem_score("the keeper relit the lamp", "the keeper relit the lamp", _embed()) == pytest.approx(1.0)


def test_sem_score_shifted_mapping():
    embed = lambda texts: [np.array([1.0, 0.0]), np.array([-1.0, 0.0])]
    assert sem_score("a", "b", embed) == -1.0
    assert sem_score("a", "b", embed, mapping="shifted") == 0.0


def test_sem_score_rejects_empty_text():
    with pytest.raises(PreconditionError):
        sem_score("", "x", _embed())


def _aspect_responder(scores: dict[str, str]):
    def responder(prompt: str) -> str:
        for aspect, reply in scores.items():
            if f"- {aspect.capitalize()} (1-5):" in prompt:
                return reply
        raise AssertionError("unexpected prompt")
    return responder


def test_g_eval_mean_of_aspects(llm):
    client = MockLLMClient(responder=_aspect_responder(
        {"coherence": "5", "consistency": "5", "fluency": "1", "relevance": "1"}
    ))
    result = g_eval("q", "answer", client, llm, reference="ref")
    assert result.value == 3.0
    assert result.aspects == {"coherence": 5, "consistency": 5, "fluency": 1, "relevance": 1}


def test_g_eval_unparsable_aspect_is_missing(llm):
    client = MockLLMClient(responder=_aspect_responder(
        {"coherence": "5", "consistency": "great", "fluency": "4", "relevance": "3"}
    ))
    result = g_eval("q", "answer", client, llm)
    assert result.value is None
    assert result.aspects["consistency"] is None


def test_parse_aspect_score():
    assert parse_aspect_score("Score: 4") == 4
    assert parse_aspect_score("7 out of 10") is None


def test_mean_or_none():
    assert mean_or_none([None, 1.0, 3.0]) == 2.0
    assert mean_or_none([None]) is None


# ---------------------------------------------------------------------------
# Aggregation
# ---------------------------------------------------------------------------

def test_aggregation_picks_the_documented_prompt_maker():
    means = {
        "fstring": {"meteor": 0.3235, "rouge": 0.3093, "sem_score": 0.9196, "g_eval": 3.8505},
        "long_context_reorder": {"meteor": 0.3142, "rouge": 0.3055, "sem_score": 0.9221, "g_eval": 3.7874},
    }
    values = aggregate_generation(means)
    assert values["fstring"] == pytest.approx(0.75)
    assert values["long_context_reorder"] == pytest.approx(0.25)


def test_aggregation_missing_metric_counts_zero():
    values = aggregate_generation({"a": {"rouge": 0.5, "g_eval": None}, "b": {"rouge": 0.4, "g_eval": 3.0}})
    assert values == {"a": 0.5, "b": 0.5}


def test_aggregation_argmax_is_affine_invariant():
    rng = np.random.default_rng(11)
    metrics = ["meteor", "rouge", "sem_score", "g_eval"]
    for _ in range(100):
        means = {f"m{i}": {m: float(rng.random()) for m in metrics} for i in range(rng.integers(2, 6))}
        before = aggregate_generation(means)
        metric = metrics[rng.integers(len(metrics))]
        scale, shift = float(rng.uniform(0.1, 10.0)), float(rng.uniform(-5.0, 5.0))
        rescaled = {mod: {**vals, metric: vals[metric] * scale + shift} for mod, vals in means.items()}
        after = aggregate_generation(rescaled)
        assert max(before, key=before.get) == max(after, key=after.get)
        for mod in means:
            assert after[mod] == pytest.approx(before[mod], abs=1e-9)


def test_aggregation_needs_modules():
    with pytest.raises(PreconditionError):
        aggregate_generation({})


def test_random_context_precision_is_bounded():
    rng = random.Random(3)
    for _ in range(50):
        k = rng.randint(1, 10)
        ranked = rank_scores("q", {f"p{i}": float(-i) for i in range(k)}, "")
        judgments = {f"p{i}": rng.random() < 0.5 for i in range(k)}
        assert 0.0 <= context_precision_at_k(ranked, judgments, k) <= 1.0
