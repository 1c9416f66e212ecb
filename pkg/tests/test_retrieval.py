from __future__ import annotations

import math
import random

import numpy as np
import pytest

from src.errors import ContractError, PreconditionError, RagOptError
from src.llm_client import LLMConfig, MockLLMClient, mock_embedding
from src.retrieval import (
    ConvexConfig,
    DenseIndex,
    HybridRetriever,
    IndexRetriever,
    MemoRetriever,
    RankedList,
    RRFConfig,
    bm25_build,
    bm25_search,
    cosine,
    dense_build,
    dense_search,
    fuse_convex,
    fuse_rrf,
    load_index,
    normalize,
    rank_scores,
    save_index,
    timed_search,
)

# ---------------------------------------------------------------------------
# Golden values
# ---------------------------------------------------------------------------


def test_rrf_symmetric_rank_one():
    lex = rank_scores("q", {"a": 3.0}, "bm25")
    sem = rank_scores("q", {"a": 0.9}, "vectordb")
    fused = fuse_rrf(lex, sem, RRFConfig(eta=10, top_k=5))
    assert fused.entries[0].score == 2 / 11


def test_three_sigma_golden_value():
    assert normalize([1, 2, 3], "three_sigma")[2] == pytest.approx(0.70412, abs=1e-5)


def test_minmax_endpoints_are_exact():
    values = normalize([4.0, 7.5, 2.0, 9.0], "minmax")
    assert min(values) == 0.0
    assert max(values) == 1.0


def test_degenerate_normalizations():
    assert normalize([2.0, 2.0], "minmax") == [1.0, 1.0]
    assert normalize([2.0, 2.0], "three_sigma") == [0.5, 0.5]
    with pytest.raises(PreconditionError):
        normalize([], "minmax")


def test_fusion_refuses_lists_of_different_queries():
    with pytest.raises(ContractError):
        fuse_rrf(rank_scores("q1", {"a": 1.0}, ""), rank_scores("q2", {"a": 1.0}, ""), RRFConfig())


def test_convex_missing_documents_take_zero():
    lex = rank_scores("q", {"a": 2.0, "b": 1.0}, "bm25")
    sem = rank_scores("q", {"c": 0.5, "a": 0.1}, "vectordb")
    fused = fuse_convex(lex, sem, ConvexConfig(alpha=0.7, normalization="minmax", top_k=5))
    scores = fused.score_map()
    assert scores["a"] == pytest.approx(0.7)
    assert scores["b"] == pytest.approx(0.0)
    assert scores["c"] == pytest.approx(0.3)
    assert fused.producer == "hybrid_cc"


def test_convex_minmax_golden_values():
    lex = rank_scores("q", {"d1": 2.0, "d2": 1.0, "d3": 0.0}, "bm25")
    sem = rank_scores("q", {"d1": 0.9, "d2": 0.1, "d3": 0.5}, "vectordb")
    fused = fuse_convex(lex, sem, ConvexConfig(alpha=0.7, normalization="minmax", top_k=3))
    assert fused.ids == ["d1", "d2", "d3"]
    assert [e.score for e in fused.entries] == pytest.approx([1.0, 0.35, 0.15])


def test_fusion_with_one_empty_list():
    lex = rank_scores("q", {"a": 2.0, "b": 1.0}, "bm25")
    empty = RankedList("q")
    assert fuse_rrf(lex, empty, RRFConfig(eta=60, top_k=5)).ids == ["a", "b"]
    assert fuse_convex(lex, empty, ConvexConfig(normalization="three_sigma")).producer == "hybrid_dbsf"


# ---------------------------------------------------------------------------
# Fusion against brute-force oracles
# ---------------------------------------------------------------------------

def _random_list(rng: random.Random, qid: str) -> RankedList:
    pool = [f"p{i:02d}" for i in range(30)]
    ids = rng.sample(pool, rng.randint(0, 20))
    return rank_scores(qid, {pid: rng.uniform(-5.0, 5.0) for pid in ids}, "")


def _oracle_order(scores: dict[str, float], top_k: int) -> list[tuple[str, float]]:
    return sorted(scores.items(), key=lambda kv: (-kv[1], kv[0]))[:top_k]


def _oracle_rrf(lex: RankedList, sem: RankedList, eta: float, top_k: int):
    scores: dict[str, float] = {}
    for ranked in (lex, sem):
        for rank, entry in enumerate(ranked.entries, 1):
            scores[entry.passage_id] = scores.get(entry.passage_id, 0.0) + 1.0 / (eta + rank)
    return _oracle_order(scores, top_k)


def _oracle_normalize(values: list[float], method: str) -> list[float]:
    lo, hi = min(values), max(values)
    if method == "minmax":
        return [1.0] * len(values) if hi == lo else [(v - lo) / (hi - lo) for v in values]
    mean = math.fsum(values) / len(values)
    sd = math.sqrt(math.fsum((v - mean) ** 2 for v in values) / len(values))
    if sd == 0:
        return [0.5] * len(values)
    return [(v - (mean - 3 * sd)) / (6 * sd) for v in values]


def _oracle_convex(lex: RankedList, sem: RankedList, alpha: float, method: str, top_k: int):
    sides = []
    for ranked in (lex, sem):
        values = [e.score for e in ranked.entries]
        sides.append(dict(zip(ranked.ids, _oracle_normalize(values, method))) if values else {})
    union = set(lex.ids) | set(sem.ids)
    scores = {pid: alpha * sides[0].get(pid, 0.0) + (1 - alpha) * sides[1].get(pid, 0.0) for pid in union}
    return _oracle_order(scores, top_k)


def _assert_matches(fused: RankedList, expected: list[tuple[str, float]]):
    assert fused.ids == [pid for pid, _ in expected]
    for entry, (_, score) in zip(fused.entries, expected):
        assert abs(entry.score - score) <= 1e-12
    assert [e.rank for e in fused.entries] == list(range(1, len(expected) + 1))


def test_rrf_never_penalizes_a_better_rank():
    rng = random.Random(11)
    for trial in range(200):
        lex, sem = _random_list(rng, "q"), _random_list(rng, "q")
        if len(lex) < 2:
            continue
        before = fuse_rrf(lex, sem, RRFConfig(eta=10, top_k=60)).score_map()
        i = rng.randint(1, len(lex) - 1)
        scores = lex.score_map()
        up, down = lex.ids[i], lex.ids[i - 1]
        scores[up], scores[down] = scores[down], scores[up]
        promoted = rank_scores("q", scores, "")
        assert promoted.ids.index(up) == i - 1
        after = fuse_rrf(promoted, sem, RRFConfig(eta=10, top_k=60)).score_map()
        assert after[up] >= before[up]


def test_fusion_matches_oracles_on_random_pairs():
    rng = random.Random(20240731)
    for trial in range(500):
        lex, sem = _random_list(rng, "q"), _random_list(rng, "q")
        top_k = rng.randint(1, 25)
        eta = rng.choice([1.0, 3.0, 10.0, 60.0])
        _assert_matches(fuse_rrf(lex, sem, RRFConfig(eta=eta, top_k=top_k)), _oracle_rrf(lex, sem, eta, top_k))

        alpha = round(rng.random(), 3)
        for method in ("minmax", "three_sigma"):
            fused = fuse_convex(lex, sem, ConvexConfig(alpha=alpha, normalization=method, top_k=top_k))
            _assert_matches(fused, _oracle_convex(lex, sem, alpha, method, top_k))


# ---------------------------------------------------------------------------
# BM25
# ---------------------------------------------------------------------------

VOCAB = ["apple", "pear", "plum", "fig", "kiwi", "lime", "date", "yam", "oat", "rye", "nut", "pea"]


def _oracle_bm25(texts: dict[str, list[str]], query: list[str], k1: float, b: float) -> list[str]:
    n_docs = len(texts)
    avgdl = sum(len(t) for t in texts.values()) / n_docs
    scores = {}
    for pid, terms in texts.items():
        score = 0.0
        for term in query:
            tf = terms.count(term)
            if tf == 0:
                continue
            n = sum(1 for t in texts.values() if term in t)
            idf = math.log(1.0 + (n_docs - n + 0.5) / (n + 0.5))
            norm = k1 * (1.0 - b + b * len(terms) / avgdl)
            score += idf * tf * (k1 + 1.0) / (tf + norm)
        scores[pid] = score
    return [pid for pid, _ in sorted(scores.items(), key=lambda kv: (-kv[1], kv[0]))]


def test_bm25_matches_naive_okapi(make_store):
    rng = random.Random(7)
    for trial in range(20):
        n = rng.randint(1, 15)
        texts = [[rng.choice(VOCAB) for _ in range(rng.randint(1, 20))] for _ in range(n)]
        store = make_store({f"doc{trial}": [" ".join(t) for t in texts]})
        index = bm25_build(store)
        oracle_texts = {p.passage_id: t for p, t in zip(store, texts)}
        for _ in range(5):
            query = [rng.choice(VOCAB + ["zzz"]) for _ in range(rng.randint(1, 4))]
            ranked = bm25_search(index, " ".join(query), top_k=n)
            assert ranked.ids == _oracle_bm25(oracle_texts, query, index.k1, index.b)


def test_bm25_hand_evaluated_scores(make_store):
    store = make_store({"d": ["cat sat", "dog ran", "cat cat"]})
    ranked = bm25_search(bm25_build(store, k1=1.5, b=0.75), "cat", top_k=3)
    idf = math.log(1.0 + (3 - 2 + 0.5) / (2 + 0.5))
    assert ranked.ids == ["d-0002", "d-0000", "d-0001"]
    assert [e.score for e in ranked.entries] == pytest.approx([idf * 5.0 / 3.5, idf, 0.0])


def test_bm25_edge_cases(make_store):
    store = make_store({"d": ["red apple pie", "green pear", "red red wine"]})
    index = bm25_build(store)
    assert len(bm25_search(index, "?!", top_k=3)) == 0
    ranked = bm25_search(index, "apple", top_k=1)
    assert ranked.ids == ["d-0000"]
    with pytest.raises(PreconditionError):
        bm25_search(index, "apple", top_k=0)


def test_bm25_rare_term_wins(make_store):
    store = make_store({"d": ["common words here", "common words there", "common zyxel words"]})
    assert bm25_search(bm25_build(store), "zyxel common", top_k=3).ids[0] == "d-0002"


# ---------------------------------------------------------------------------
# Dense
# ---------------------------------------------------------------------------

def _embed_fn():
    client = MockLLMClient()
    cfg = LLMConfig(model_name="mock-embed")
    return lambda texts: client.embed(texts, cfg)


def test_dense_search_finds_identical_text(make_store):
    store = make_store({"d": ["granite tower walls", "apple harvest crates", "steam locomotive"]})
    index = dense_build(store, _embed_fn())
    ranked = dense_search(index, "apple harvest crates", top_k=2)
    assert ranked.ids[0] == "d-0001"
    assert ranked.entries[0].score == pytest.approx(1.0)
    assert ranked.producer == "vectordb"


def test_dense_search_matches_brute_force_cosine(make_store):
    rng = random.Random(3)
    for trial in range(20):
        n = rng.randint(1, 20)
        texts = [" ".join(rng.choice(VOCAB) for _ in range(rng.randint(1, 8))) for _ in range(n)]
        store = make_store({f"doc{trial}": texts})
        index = dense_build(store, _embed_fn())
        vectors = {p.passage_id: mock_embedding(p.text) for p in store}
        for _ in range(3):
            query = " ".join(rng.choice(VOCAB) for _ in range(rng.randint(1, 3)))
            q = mock_embedding(query)
            oracle = {pid: float(np.dot(v, q) / (np.linalg.norm(v) * np.linalg.norm(q))) for pid, v in vectors.items()}
            top_k = rng.randint(1, n)
            ranked = dense_search(index, query, top_k=top_k)

            assert len(ranked) == top_k
            got = [e.score for e in ranked.entries]
            assert got == sorted(got, reverse=True)
            for entry in ranked.entries:
                assert entry.score == pytest.approx(oracle[entry.passage_id], abs=1e-12)
            # equal to the oracle's top scores, whatever order near-ties take
            assert got == pytest.approx(sorted(oracle.values(), reverse=True)[:top_k], abs=1e-12)


def test_zero_vectors_rank_last():
    vectors = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
    index = DenseIndex(["a", "b", "c"], vectors, embed=lambda texts: [np.array([1.0, 0.2])])
    ranked = index.search("anything", top_k=3)
    assert ranked.ids == ["b", "c", "a"]
    assert ranked.entries[-1].score == -np.inf


def test_cosine_of_zero_vector_is_zero():
    assert cosine(np.zeros(3), np.ones(3)) == 0.0
    assert cosine(np.array([1.0, 0.0]), np.array([2.0, 0.0])) == pytest.approx(1.0)


def test_index_snapshots_round_trip(tmp_path, make_store):
    store = make_store({"d": ["red apple", "green pear", "blue plum"]})
    bm25 = bm25_build(store)
    save_index(bm25, tmp_path / "bm25.pkl")
    restored = load_index(tmp_path / "bm25.pkl")
    assert restored.search("pear", 3).ids == bm25.search("pear", 3).ids

    embed = _embed_fn()
    dense = dense_build(store, embed)
    save_index(dense, tmp_path / "dense.pkl")
    restored = load_index(tmp_path / "dense.pkl", embed=embed)
    assert restored.search("blue plum", 1).ids == ["d-0002"]


def test_loading_a_foreign_file_fails(tmp_path):
    path = tmp_path / "junk.pkl"
    path.write_bytes(b"\x80\x04N.")  # pickled None
    with pytest.raises(RagOptError):
        load_index(path)


# ---------------------------------------------------------------------------
# Retrievers
# ---------------------------------------------------------------------------

class _SlowRetriever:
    name = "slow"

    def __init__(self, ranked: dict[str, float]):
        self.ranked = ranked
        self.calls = 0

    def search(self, query: str, top_k: int, qid: str = "") -> RankedList:
        self.calls += 1
        return rank_scores(qid, self.ranked, "slow", top_k)


def test_memo_retriever_charges_original_cost():
    inner = _SlowRetriever({"a": 1.0, "b": 0.5})
    memo = MemoRetriever(inner)
    first, cost = timed_search(memo, "query", 2, "q1")
    second, again = timed_search(memo, "query", 2, "q2")
    assert inner.calls == 1
    assert again == cost
    assert second.qid == "q2" and second.ids == first.ids


def test_hybrid_retriever_reports_component_cost(make_store):
    store = make_store({"d": ["red apple pie", "green pear tart", "red plum jam"]})
    lexical = MemoRetriever(IndexRetriever(bm25_build(store)))
    semantic = MemoRetriever(IndexRetriever(dense_build(store, _embed_fn())))
    _, lex_cost = timed_search(lexical, "red apple", 3, "q")
    _, sem_cost = timed_search(semantic, "red apple", 3, "q")

    hybrid = HybridRetriever(lexical, semantic, method="dbsf", alpha=0.7, name="hybrid_dbsf")
    fused, seconds = timed_search(hybrid, "red apple", 3, "q")
    assert seconds >= lex_cost + sem_cost
    assert fused.producer == "hybrid_dbsf"
    assert fused.ids[0] == "d-0000"
