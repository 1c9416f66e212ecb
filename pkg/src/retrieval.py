"""Lexical, dense and hybrid retrieval.

* BM25 (Okapi) over an inverted index, IDF = ln(1 + (N - n + 0.5) / (n + 0.5)).
* Dense retrieval: exhaustive cosine similarity over passage embeddings.
* Hybrid fusion of one lexical and one semantic ranked list:
    - reciprocal rank fusion   f = 1/(eta + rank_lex) + 1/(eta + rank_sem)
    - convex combination       f = alpha * phi(lex) + (1 - alpha) * phi(sem)
      with phi = min-max ("hybrid_cc") or the 3-sigma variant ("hybrid_dbsf").

Ordering everywhere: descending score, then ascending passage_id.
"""

from __future__ import annotations

import logging
import math
import pickle
import threading
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Literal, Mapping, Protocol

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, PositiveInt

import config
from src.corpus import PassageStore
from src.errors import ContractError, PreconditionError, RagOptError
from src.text import get_tokenizer, word_tokens

logger = logging.getLogger(__name__)

INDEX_FORMAT = "ragopt-index"
INDEX_FORMAT_VERSION = 1


# ---------------------------------------------------------------------------
# Ranked lists
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class RankedEntry:
    passage_id: str
    score: float
    rank: int


@dataclass(frozen=True)
class RankedList:
    qid: str
    entries: tuple[RankedEntry, ...] = ()
    producer: str = ""

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def ids(self) -> list[str]:
        return [e.passage_id for e in self.entries]

    @property
    def scores(self) -> list[float]:
        return [e.score for e in self.entries]

    def score_map(self) -> dict[str, float]:
        return {e.passage_id: e.score for e in self.entries}

    def truncate(self, top_k: int) -> "RankedList":
        return replace(self, entries=self.entries[:top_k])

    def to_dict(self) -> dict:
        return {
            "qid": self.qid,
            "producer": self.producer,
            "entries": [[e.passage_id, e.score, e.rank] for e in self.entries],
        }

    @classmethod
    def from_dict(cls, data: dict) -> "RankedList":
        return cls(
            qid=data["qid"],
            producer=data.get("producer", ""),
            entries=tuple(RankedEntry(pid, float(score), int(rank)) for pid, score, rank in data["entries"]),
        )


def rank_scores(
    qid: str,
    scores: Mapping[str, float],
    producer: str,
    top_k: int | None = None,
) -> RankedList:
    """Sort ``{passage_id: score}`` into a RankedList with ranks 1..n."""
    order = sorted(scores.items(), key=lambda kv: (-kv[1], kv[0]))
    if top_k is not None:
        order = order[:top_k]
    return RankedList(
        qid=qid,
        entries=tuple(RankedEntry(pid, float(s), i) for i, (pid, s) in enumerate(order, 1)),
        producer=producer,
    )


def _check_top_k(top_k: int) -> None:
    if top_k < 1:
        raise PreconditionError(f"top_k must be >= 1, got {top_k}")


class _ArrayRanker:
    """Shared top-k selection over a fixed passage order."""

    def __init__(self, ids: list[str]):
        self.ids = ids
        # lexicographic rank of each id, the secondary sort key
        self._id_rank = np.empty(len(ids), dtype=np.int64)
        self._id_rank[np.argsort(np.array(ids, dtype=object), kind="stable")] = np.arange(len(ids))

    def _ranked(self, qid: str, scores: np.ndarray, top_k: int, producer: str) -> RankedList:
        order = np.lexsort((self._id_rank, -scores))[:top_k]
        return RankedList(
            qid=qid,
            entries=tuple(
                RankedEntry(self.ids[i], float(scores[i]), r) for r, i in enumerate(order, 1)
            ),
            producer=producer,
        )


# ---------------------------------------------------------------------------
# BM25
# ---------------------------------------------------------------------------

def _bm25_terms(text: str, tokenizer: str) -> list:
    if tokenizer == "word":
        return word_tokens(text)
    return get_tokenizer(tokenizer).encode(text)


class BM25Index(_ArrayRanker):
    """Inverted index: term -> (passage positions, term frequencies)."""

    kind = "bm25"

    def __init__(
        self,
        store: PassageStore,
        k1: float = config.BM25_K1,
        b: float = config.BM25_B,
        tokenizer: str = "word",
    ):
        if len(store) == 0:
            raise PreconditionError("BM25 index needs at least one passage")
        super().__init__(store.ids)
        self.k1 = k1
        self.b = b
        self.tokenizer = tokenizer

        docs = [_bm25_terms(p.text, tokenizer) for p in store]
        self.doc_len = np.array([len(d) for d in docs], dtype=np.float64)
        self.avgdl = float(self.doc_len.mean()) or 1.0

        postings: dict[object, dict[int, int]] = {}
        for i, terms in enumerate(docs):
            for term in terms:
                postings.setdefault(term, {}).setdefault(i, 0)
                postings[term][i] += 1

        n_docs = len(docs)
        self.postings: dict[object, tuple[np.ndarray, np.ndarray]] = {}
        self.idf: dict[object, float] = {}
        for term, tf_by_doc in postings.items():
            idx = np.fromiter(tf_by_doc.keys(), dtype=np.int64, count=len(tf_by_doc))
            tf = np.fromiter(tf_by_doc.values(), dtype=np.float64, count=len(tf_by_doc))
            self.postings[term] = (idx, tf)
            n = len(tf_by_doc)
            self.idf[term] = math.log(1.0 + (n_docs - n + 0.5) / (n + 0.5))

    def get_scores(self, query: str) -> np.ndarray | None:
        """Okapi score of every passage, or None if the query has no terms."""
        terms = _bm25_terms(query, self.tokenizer)
        if not terms:
            return None
        scores = np.zeros(len(self.ids), dtype=np.float64)
        for term in terms:
            posting = self.postings.get(term)
            if posting is None:
                continue
            idx, tf = posting
            norm = self.k1 * (1.0 - self.b + self.b * self.doc_len[idx] / self.avgdl)
            scores[idx] += self.idf[term] * tf * (self.k1 + 1.0) / (tf + norm)
        return scores

    def search(self, query: str, top_k: int, qid: str = "") -> RankedList:
        _check_top_k(top_k)
        scores = self.get_scores(query)
        if scores is None:
            return RankedList(qid=qid, producer="bm25")
        return self._ranked(qid, scores, top_k, "bm25")


def bm25_build(
    store: PassageStore,
    k1: float = config.BM25_K1,
    b: float = config.BM25_B,
    tokenizer: str = "word",
) -> BM25Index:
    return BM25Index(store, k1=k1, b=b, tokenizer=tokenizer)


def bm25_search(index: BM25Index, query: str, top_k: int, qid: str = "") -> RankedList:
    return index.search(query, top_k, qid=qid)


# ---------------------------------------------------------------------------
# Dense retrieval
# ---------------------------------------------------------------------------

EmbedFn = Callable[[list[str]], list[np.ndarray]]


def _unit_rows(matrix: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    norms = np.linalg.norm(matrix, axis=1)
    zero = norms == 0
    safe = np.where(zero, 1.0, norms)
    return matrix / safe[:, None], zero


class DenseIndex(_ArrayRanker):
    """Exhaustive cosine-similarity index over unit-normalized embeddings."""

    kind = "dense"

    def __init__(self, ids: list[str], vectors: np.ndarray, embed: EmbedFn | None, model_name: str = ""):
        super().__init__(ids)
        self.matrix, self.zero_mask = _unit_rows(np.asarray(vectors, dtype=np.float64))
        self.model_name = model_name
        self._embed = embed
        if self.zero_mask.any():
            bad = [ids[i] for i in np.flatnonzero(self.zero_mask)]
            logger.warning("%d passage(s) embed to a zero vector and will rank last: %s", len(bad), bad[:5])

    @property
    def dim(self) -> int:
        return self.matrix.shape[1]

    def attach(self, embed: EmbedFn) -> None:
        self._embed = embed

    def __getstate__(self):
        state = self.__dict__.copy()
        state["_embed"] = None  # clients hold locks and sessions
        return state

    def scores_for(self, vector: np.ndarray) -> np.ndarray:
        vector = np.asarray(vector, dtype=np.float64)
        if vector.shape != (self.dim,):
            raise PreconditionError(f"query vector has dimension {vector.shape}, index has {self.dim}")
        norm = np.linalg.norm(vector)
        if norm == 0:
            logger.warning("query embeds to a zero vector; every passage scores -inf")
            return np.full(len(self.ids), -np.inf)
        scores = self.matrix @ (vector / norm)
        scores[self.zero_mask] = -np.inf
        return scores

    def search(self, query: str, top_k: int, qid: str = "") -> RankedList:
        _check_top_k(top_k)
        if self._embed is None:
            raise RagOptError("dense index has no embedding function attached")
        vector = self._embed([query])[0]
        return self._ranked(qid, self.scores_for(vector), top_k, "vectordb")


def dense_build(store: PassageStore, embed: EmbedFn, batch_size: int = 64, model_name: str = "") -> DenseIndex:
    if len(store) == 0:
        raise PreconditionError("dense index needs at least one passage")
    texts = [p.text for p in store]
    vectors: list[np.ndarray] = []
    for start in range(0, len(texts), batch_size):
        vectors.extend(embed(texts[start:start + batch_size]))
    dims = {len(v) for v in vectors}
    if len(dims) != 1:
        raise PreconditionError(f"passage embeddings have mixed dimensions {sorted(dims)}")
    return DenseIndex(store.ids, np.vstack(vectors), embed, model_name=model_name)


def dense_search(index: DenseIndex, query: str, top_k: int, qid: str = "") -> RankedList:
    return index.search(query, top_k, qid=qid)


def cosine(a: np.ndarray, b: np.ndarray) -> float:
    """Cosine similarity; 0.0 when either vector has zero norm."""
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        return 0.0
    return float(np.dot(a, b) / (na * nb))


# ---------------------------------------------------------------------------
# Normalization and fusion
# ---------------------------------------------------------------------------

Normalization = Literal["minmax", "three_sigma"]


@dataclass(frozen=True)
class NormalizationStats:
    min: float
    max: float
    mean: float
    stddev: float  # population

    @classmethod
    def of(cls, scores) -> "NormalizationStats":
        arr = np.asarray(scores, dtype=np.float64)
        return cls(float(arr.min()), float(arr.max()), float(arr.mean()), float(arr.std()))


def normalize(scores, method: Normalization = "minmax") -> list[float]:
    """Map scores into the normalized space of *method* (no clamping).

    All-equal input maps to 1.0 (minmax) or 0.5 (three_sigma).
    """
    arr = np.asarray(scores, dtype=np.float64)
    if arr.size == 0:
        raise PreconditionError("normalize needs at least one score")
    stats = NormalizationStats.of(arr)
    if method == "minmax":
        if stats.max == stats.min:
            return [1.0] * arr.size
        return ((arr - stats.min) / (stats.max - stats.min)).tolist()
    if method == "three_sigma":
        if stats.stddev == 0:
            return [0.5] * arr.size
        lo = stats.mean - 3.0 * stats.stddev
        hi = stats.mean + 3.0 * stats.stddev
        return ((arr - lo) / (hi - lo)).tolist()
    raise PreconditionError(f"unknown normalization {method!r}")


class RRFConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    eta: float = Field(default=config.RRF_ETA, gt=0)
    top_k: PositiveInt = config.TOP_K_SCHEDULE["retrieval"]


class ConvexConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    alpha: float = Field(default=config.HYBRID_WEIGHTS[0], ge=0.0, le=1.0)
    normalization: Normalization = "minmax"
    top_k: PositiveInt = config.TOP_K_SCHEDULE["retrieval"]


def _check_same_query(lex: RankedList, sem: RankedList) -> None:
    if lex.qid != sem.qid:
        raise ContractError(f"cannot fuse lists for different queries ({lex.qid!r} vs {sem.qid!r})")


def fuse_rrf(lex: RankedList, sem: RankedList, cfg: RRFConfig) -> RankedList:
    """Reciprocal rank fusion; a list that misses a passage adds nothing for it."""
    _check_same_query(lex, sem)
    fused: dict[str, float] = {}
    for ranked in (lex, sem):
        for entry in ranked.entries:
            fused[entry.passage_id] = fused.get(entry.passage_id, 0.0) + 1.0 / (cfg.eta + entry.rank)
    return rank_scores(lex.qid, fused, "hybrid_rrf", cfg.top_k)


def _normalized_map(ranked: RankedList, method: Normalization) -> dict[str, float]:
    finite = [e for e in ranked.entries if math.isfinite(e.score)]
    if not finite:
        return {}
    values = normalize([e.score for e in finite], method)
    return {e.passage_id: v for e, v in zip(finite, values)}


def fuse_convex(lex: RankedList, sem: RankedList, cfg: ConvexConfig) -> RankedList:
    """Convex combination of per-list normalized scores.

    Each list is normalized with its own statistics; a passage missing from
    a list (or scored -inf there) takes 0 from that side.
    """
    _check_same_query(lex, sem)
    lex_norm = _normalized_map(lex, cfg.normalization)
    sem_norm = _normalized_map(sem, cfg.normalization)
    union = set(lex.ids) | set(sem.ids)
    fused = {
        pid: cfg.alpha * lex_norm.get(pid, 0.0) + (1.0 - cfg.alpha) * sem_norm.get(pid, 0.0)
        for pid in union
    }
    producer = "hybrid_dbsf" if cfg.normalization == "three_sigma" else "hybrid_cc"
    return rank_scores(lex.qid, fused, producer, cfg.top_k)


# ---------------------------------------------------------------------------
# Retrievers (query text in, RankedList out)
# ---------------------------------------------------------------------------

class Retriever(Protocol):
    name: str

    def search(self, query: str, top_k: int, qid: str = "") -> RankedList: ...


def timed_search(retriever: Retriever, query: str, top_k: int, qid: str = "") -> tuple[RankedList, float]:
    """Search and return the seconds the result cost to compute.

    Memoized retrievers report the cost of the original computation, so a
    cache hit is charged the same as the first run.
    """
    with_cost = getattr(retriever, "search_with_cost", None)
    if with_cost is not None:
        return with_cost(query, top_k, qid)
    start = time.perf_counter()
    ranked = retriever.search(query, top_k, qid=qid)
    return ranked, time.perf_counter() - start


class IndexRetriever:
    """Adapts a BM25 or dense index to the Retriever protocol."""

    def __init__(self, index: BM25Index | DenseIndex, name: str | None = None):
        self.index = index
        self.name = name or ("bm25" if index.kind == "bm25" else "vectordb")

    def search(self, query: str, top_k: int, qid: str = "") -> RankedList:
        return replace(self.index.search(query, top_k, qid=qid), producer=self.name)


class MemoRetriever:
    """Memoizes another retriever per (query text, top_k); thread-safe."""

    def __init__(self, inner: Retriever):
        self.inner = inner
        self.name = inner.name
        self._memo: dict[tuple[str, int], tuple[RankedList, float]] = {}
        self._lock = threading.Lock()

    def search_with_cost(self, query: str, top_k: int, qid: str = "") -> tuple[RankedList, float]:
        key = (query, top_k)
        with self._lock:
            hit = self._memo.get(key)
        if hit is None:
            hit = timed_search(self.inner, query, top_k, qid)
            with self._lock:
                hit = self._memo.setdefault(key, hit)
        ranked, seconds = hit
        return replace(ranked, qid=qid), seconds

    def search(self, query: str, top_k: int, qid: str = "") -> RankedList:
        return self.search_with_cost(query, top_k, qid)[0]


@dataclass
class HybridRetriever:
    """Runs a lexical and a semantic retriever and fuses their lists."""

    lexical: Retriever
    semantic: Retriever
    method: Literal["rrf", "cc", "dbsf"] = "rrf"
    eta: float = config.RRF_ETA
    alpha: float = config.HYBRID_WEIGHTS[0]
    component_top_k: int | None = None
    name: str = field(default="")

    def __post_init__(self):
        if not self.name:
            self.name = f"hybrid_{self.method}"

    def search_with_cost(self, query: str, top_k: int, qid: str = "") -> tuple[RankedList, float]:
        """Fused list plus component cost and fusion time."""
        depth = self.component_top_k or top_k
        lex, lex_seconds = timed_search(self.lexical, query, depth, qid)
        sem, sem_seconds = timed_search(self.semantic, query, depth, qid)
        start = time.perf_counter()
        if self.method == "rrf":
            fused = fuse_rrf(lex, sem, RRFConfig(eta=self.eta, top_k=top_k))
        else:
            normalization = "three_sigma" if self.method == "dbsf" else "minmax"
            fused = fuse_convex(lex, sem, ConvexConfig(alpha=self.alpha, normalization=normalization, top_k=top_k))
        seconds = lex_seconds + sem_seconds + time.perf_counter() - start
        return replace(fused, producer=self.name), seconds

    def search(self, query: str, top_k: int, qid: str = "") -> RankedList:
        return self.search_with_cost(query, top_k, qid)[0]


# ---------------------------------------------------------------------------
# Snapshots
# ---------------------------------------------------------------------------

def save_index(index: BM25Index | DenseIndex, path: Path | str) -> None:
    """Write a single-file snapshot with a versioned header."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = {"format": INDEX_FORMAT, "version": INDEX_FORMAT_VERSION, "kind": index.kind}
    with path.open("wb") as fh:
        pickle.dump(header, fh)
        pickle.dump(index, fh)


def load_index(path: Path | str, embed: EmbedFn | None = None) -> BM25Index | DenseIndex:
    with Path(path).open("rb") as fh:
        header = pickle.load(fh)
        if not isinstance(header, dict) or header.get("format") != INDEX_FORMAT:
            raise RagOptError(f"{path} is not an index snapshot")
        if header.get("version") != INDEX_FORMAT_VERSION:
            raise RagOptError(
                f"{path}: snapshot version {header.get('version')} != supported {INDEX_FORMAT_VERSION}"
            )
        index = pickle.load(fh)
    if isinstance(index, DenseIndex) and embed is not None:
        index.attach(embed)
    return index
