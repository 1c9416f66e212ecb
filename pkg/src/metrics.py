"""Retrieval and generation metrics.

Retrieval
    Context Precision@K over binary relevance judgments, judged either
    against the QA gold passage ids or by an LLM.

Generation
    ROUGE (L by default, 1/2 selectable), METEOR (exact unigram matching),
    SemScore (embedding cosine), G-Eval (LLM-judged 1-5 over four aspects).
    ``aggregate_generation`` folds per-module metric means into one
    selection value per module.
"""

from __future__ import annotations

import logging
import math
import re
import threading
from dataclasses import dataclass
from typing import Callable, Literal, Mapping, Sequence

import numpy as np

import config
from src.corpus import Passage, QARecord
from src.errors import PreconditionError
from src.llm_client import BaseLLMClient, LLMConfig
from src.prompt_maker import fill_placeholders, load_prompt_text
from src.retrieval import RankedList, cosine, normalize
from src.text import word_tokens

logger = logging.getLogger(__name__)

METRIC_SCALES: dict[str, tuple[float, float]] = {
    "context_precision": (0.0, 1.0),
    "rouge": (0.0, 1.0),
    "rouge1": (0.0, 1.0),
    "rouge2": (0.0, 1.0),
    "rougeL": (0.0, 1.0),
    "meteor": (0.0, 1.0),
    "sem_score": (0.0, 1.0),
    "g_eval": (1.0, 5.0),
}
RETRIEVAL_METRIC_NAMES = {"context_precision"}
GENERATION_METRIC_NAMES = set(METRIC_SCALES) - RETRIEVAL_METRIC_NAMES

JUDGE_PROMPT = "relevance_judge_v1"


@dataclass(frozen=True)
class RelevanceJudgment:
    qid: str
    passage_id: str
    relevant: bool
    judge: str


@dataclass(frozen=True)
class MetricScore:
    metric_name: str
    qid: str
    value: float | None  # None = missing (e.g. unparsable judge reply)
    scale: tuple[float, float] = (0.0, 1.0)


# ---------------------------------------------------------------------------
# Context Precision
# ---------------------------------------------------------------------------

def context_precision_at_k(
    ranked: RankedList,
    judgments: Mapping[str, RelevanceJudgment | bool],
    k: int,
) -> float:
    """sum_k(Precision@k * v_k) / true positives in the top K; 0 when there are none."""
    if k < 1:
        raise PreconditionError(f"K must be >= 1, got {k}")
    hits = 0
    total = 0.0
    for rank, entry in enumerate(ranked.entries[:k], 1):
        if entry.passage_id not in judgments:
            raise PreconditionError(f"query {ranked.qid!r}: no relevance judgment for passage {entry.passage_id!r}")
        verdict = judgments[entry.passage_id]
        relevant = verdict.relevant if isinstance(verdict, RelevanceJudgment) else bool(verdict)
        if relevant:
            hits += 1
            total += hits / rank
    return total / hits if hits else 0.0


class GoldJudge:
    """Relevance = membership in the QA record's gold passage ids."""

    name = "gold"

    def judge(self, qa: QARecord, passage: Passage) -> RelevanceJudgment:
        return judge_gold(qa, passage)


def judge_gold(qa: QARecord, passage: Passage) -> RelevanceJudgment:
    if not qa.gold_passage_ids:
        raise PreconditionError(f"query {qa.qid!r} has no gold passage ids for the gold judge")
    return RelevanceJudgment(qa.qid, passage.passage_id, passage.passage_id in qa.gold_passage_ids, "gold")


_YES_NO_RE = re.compile(r"\b(yes|no)\b", re.I)


def parse_verdict(reply: str) -> bool | None:
    m = _YES_NO_RE.search(reply)
    return None if m is None else m.group(1).lower() == "yes"


def judge_llm(
    query: str,
    answer_target: str,
    passage: Passage,
    client: BaseLLMClient,
    llm: LLMConfig,
    qid: str = "",
    prompt_name: str = JUDGE_PROMPT,
) -> RelevanceJudgment:
    """Binary LLM verdict; one retry, then counted irrelevant."""
    prompt = fill_placeholders(
        load_prompt_text(prompt_name), query=query, answer=answer_target, passage=passage.text
    )
    verdict = parse_verdict(client.chat(prompt, llm))
    if verdict is None:
        verdict = parse_verdict(client.chat(prompt + "\n\nAnswer with exactly one word: yes or no.", llm))
    if verdict is None:
        logger.warning("query %r: unparsable relevance verdict for %s, counted irrelevant", qid, passage.passage_id)
        verdict = False
    return RelevanceJudgment(qid, passage.passage_id, verdict, f"llm:{llm.model_name}")


class LLMJudge:
    """``judge_llm`` with a per-(qid, passage) memo shared across candidates."""

    name = "llm"

    def __init__(self, client: BaseLLMClient, llm: LLMConfig):
        self.client = client
        self.llm = llm
        self._memo: dict[tuple[str, str], RelevanceJudgment] = {}
        self._lock = threading.Lock()

    def judge(self, qa: QARecord, passage: Passage) -> RelevanceJudgment:
        key = (qa.qid, passage.passage_id)
        with self._lock:
            hit = self._memo.get(key)
        if hit is None:
            hit = judge_llm(qa.question, qa.ground_truth_answer, passage, self.client, self.llm, qid=qa.qid)
            with self._lock:
                self._memo.setdefault(key, hit)
        return hit


# ---------------------------------------------------------------------------
# ROUGE / METEOR
# ---------------------------------------------------------------------------

def _f1(overlap: int, n_candidate: int, n_reference: int) -> float:
    if overlap == 0:
        return 0.0
    precision = overlap / n_candidate
    recall = overlap / n_reference
    return 2 * precision * recall / (precision + recall)


def lcs_length(a: Sequence[str], b: Sequence[str]) -> int:
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b, 1):
            cur.append(prev[j - 1] + 1 if x == y else max(prev[j], cur[j - 1]))
        prev = cur
    return prev[-1]


def _ngrams(tokens: list[str], n: int) -> dict[tuple[str, ...], int]:
    counts: dict[tuple[str, ...], int] = {}
    for i in range(len(tokens) - n + 1):
        gram = tuple(tokens[i:i + n])
        counts[gram] = counts.get(gram, 0) + 1
    return counts


def rouge(candidate: str, reference: str, variant: Literal["rougeL", "rouge1", "rouge2"] = "rougeL") -> float:
    """ROUGE F1; 0.0 when either side has no tokens."""
    cand, ref = word_tokens(candidate), word_tokens(reference)
    if not cand or not ref:
        return 0.0
    if variant == "rougeL":
        return _f1(lcs_length(cand, ref), len(cand), len(ref))
    n = {"rouge1": 1, "rouge2": 2}[variant]
    cand_grams, ref_grams = _ngrams(cand, n), _ngrams(ref, n)
    if not cand_grams or not ref_grams:
        return 0.0
    overlap = sum(min(c, ref_grams.get(g, 0)) for g, c in cand_grams.items())
    return _f1(overlap, sum(cand_grams.values()), sum(ref_grams.values()))


def _align(cand: list[str], ref: list[str]) -> list[tuple[int, int]]:
    """Greedy exact alignment: each candidate token takes the first free
    reference position with the same token."""
    used = [False] * len(ref)
    pairs = []
    for i, tok in enumerate(cand):
        for j, other in enumerate(ref):
            if not used[j] and other == tok:
                used[j] = True
                pairs.append((i, j))
                break
    return pairs


def meteor(
    candidate: str,
    reference: str,
    alpha: float = config.METEOR_ALPHA,
    beta: float = config.METEOR_BETA,
    gamma: float = config.METEOR_GAMMA,
) -> float:
    cand, ref = word_tokens(candidate), word_tokens(reference)
    if not cand or not ref:
        return 0.0
    pairs = _align(cand, ref)
    matches = len(pairs)
    if matches == 0:
        return 0.0
    precision = matches / len(cand)
    recall = matches / len(ref)
    fmean = precision * recall / (alpha * precision + (1 - alpha) * recall)
    chunks = 1 + sum(
        1 for (i0, j0), (i1, j1) in zip(pairs, pairs[1:]) if not (i1 == i0 + 1 and j1 == j0 + 1)
    )
    penalty = gamma * (chunks / matches) ** beta
    return fmean * (1 - penalty)


# ---------------------------------------------------------------------------
# SemScore / G-Eval
# ---------------------------------------------------------------------------

def sem_score(
    candidate: str,
    reference: str,
    embed: Callable[[list[str]], list[np.ndarray]],
    mapping: Literal["raw", "shifted"] = "raw",
) -> float:
    """Embedding cosine; ``shifted`` maps [-1, 1] onto [0, 1]."""
    if not candidate.strip() or not reference.strip():
        raise PreconditionError("sem_score needs two non-empty texts")
    a, b = embed([candidate, reference])
    value = min(1.0, max(-1.0, cosine(a, b)))
    return (1.0 + value) / 2.0 if mapping == "shifted" else value


_SCORE_RE = re.compile(r"\b([1-5])\b")


@dataclass(frozen=True)
class GEvalResult:
    value: float | None
    aspects: dict[str, int | None]


def parse_aspect_score(reply: str) -> int | None:
    m = _SCORE_RE.search(reply)
    return int(m.group(1)) if m else None


def g_eval(
    query: str,
    answer: str,
    client: BaseLLMClient,
    llm: LLMConfig,
    reference: str = "",
    aspects: Sequence[str] = tuple(config.G_EVAL_ASPECTS),
    qid: str = "",
) -> GEvalResult:
    """Mean of the aspect scores, or a missing value if any aspect is unparsable."""
    scores: dict[str, int | None] = {}
    for aspect in aspects:
        prompt = fill_placeholders(
            load_prompt_text(f"g_eval_{aspect}_v1"), query=query, answer=answer, reference=reference
        )
        score = parse_aspect_score(client.chat(prompt, llm))
        if score is None:
            score = parse_aspect_score(client.chat(prompt + "\n\nReply with a single digit from 1 to 5.", llm))
        if score is None:
            logger.warning("query %r: unparsable G-Eval %s score", qid, aspect)
        scores[aspect] = score
    if any(s is None for s in scores.values()):
        return GEvalResult(None, scores)
    return GEvalResult(float(np.mean(list(scores.values()))), scores)


# ---------------------------------------------------------------------------
# Aggregation
# ---------------------------------------------------------------------------

def mean_or_none(values: Sequence[float | None]) -> float | None:
    valid = [v for v in values if v is not None and math.isfinite(v)]
    return float(np.mean(valid)) if valid else None


def aggregate_generation(module_means: Mapping[str, Mapping[str, float | None]]) -> dict[str, float]:
    """Normalized mean per module.

    For each metric the module means are min-max normalized across modules
    (all equal -> 1.0); a module with no value for a metric gets 0 for it.
    The selection value is the mean over metrics.
    """
    if not module_means:
        raise PreconditionError("aggregate_generation needs at least one module")
    modules = list(module_means)
    metrics = sorted({m for means in module_means.values() for m in means})
    if not metrics:
        raise PreconditionError("aggregate_generation needs at least one metric")

    normalized: dict[str, list[float]] = {mod: [] for mod in modules}
    for metric in metrics:
        present = [mod for mod in modules if module_means[mod].get(metric) is not None]
        values = normalize([module_means[mod][metric] for mod in present], "minmax") if present else []
        lookup = dict(zip(present, values))
        for mod in modules:
            normalized[mod].append(lookup.get(mod, 0.0))
    return {mod: float(np.mean(vals)) for mod, vals in normalized.items()}
