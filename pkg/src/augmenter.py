"""Passage augmenters: pass-through and prev/next neighbor expansion."""

from __future__ import annotations

import logging

from src.corpus import NEIGHBOR_MODES, PassageStore
from src.errors import ConfigError
from src.reranker import PointwiseScorer
from src.retrieval import RankedList, rank_scores

logger = logging.getLogger(__name__)


def augment_pass(ranked: RankedList, top_k: int = 15) -> RankedList:
    return ranked.truncate(top_k)


def neighbor_candidates(ranked: RankedList, store: PassageStore, mode: str = "both") -> list[str]:
    """Input passages plus their linked neighbors, deduplicated, first-seen order.

    Neighbor ids missing from the store are skipped with a warning.
    """
    if mode not in NEIGHBOR_MODES:
        raise ConfigError(f"mode must be one of {NEIGHBOR_MODES}, got {mode!r}")
    seen: dict[str, None] = {}
    for entry in ranked.entries:
        seen.setdefault(entry.passage_id, None)
        if entry.passage_id not in store:
            continue
        for neighbor in store.neighbors(entry.passage_id, mode):
            if neighbor not in store:
                logger.warning("query %r: dangling neighbor %s of %s skipped", ranked.qid, neighbor, entry.passage_id)
                continue
            seen.setdefault(neighbor, None)
    return list(seen)


def augment_prev_next(
    ranked: RankedList,
    store: PassageStore,
    query: str,
    scorer: PointwiseScorer,
    mode: str = "both",
    top_k: int = 15,
) -> RankedList:
    """Add chunk neighbors, re-score every candidate against *query*, keep top_k."""
    candidates = neighbor_candidates(ranked, store, mode)
    scores = {pid: float(scorer.score(query, store[pid].text)) for pid in candidates}
    return rank_scores(ranked.qid, scores, "prev_next_augmenter", top_k)
