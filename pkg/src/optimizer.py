"""Greedy node-by-node pipeline optimization.

Nodes are swept in a fixed order.  At each node every candidate module runs
on every query, its output is scored, and the winner's outputs become the
next node's inputs.  Query expansion and prompt making are scored through a
fixed downstream module (the fixture): retrieval for expansion, the
generator for prompt making.  The number of module evaluations is the sum of
candidate counts over the nodes, never their product.

Per node, under ``<out_dir>/<node_name>/``:

    scores.csv     module, qid, metric, value, elapsed_seconds, error
    summary.csv    one row per candidate, ``selected`` marks the winner
    outputs.jsonl  the winner's per-query outputs
    node.json      fingerprint + checksums; present only for finished nodes

Run level: ``summary.json`` (deterministic), ``run_info.json`` (timings),
``best_pipeline.yaml`` (loadable by ``run_pipeline`` / ``main.py query``).
"""

from __future__ import annotations

import hashlib
import json
import logging
import random
import re
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable

import numpy as np
import pandas as pd

import config
from src.augmenter import augment_pass, augment_prev_next
from src.corpus import PassageStore, QARecord
from src.errors import ConfigError, NodeFailure, PreconditionError
from src.llm_client import BaseLLMClient
from src.metrics import (
    METRIC_SCALES,
    GoldJudge,
    LLMJudge,
    MetricScore,
    aggregate_generation,
    context_precision_at_k,
    g_eval,
    mean_or_none,
    meteor,
    rouge,
    sem_score,
)
from src.pipeline_config import (
    DEFAULT_MODULES,
    FIXTURE_NODES,
    GENERATION_SIDE_NODES,
    NODE_ORDER,
    RETRIEVAL_SIDE_NODES,
    BM25Params,
    LLMSettings,
    ModuleSpec,
    NodeConfig,
    PipelineConfig,
    Strategy,
    dump_pipeline_config,
    module_params,
)
from src.prompt_maker import PROMPT_MAKERS, PromptTemplate, generate, make_prompt_fstring
from src.query_expansion import (
    ExpandedQuery,
    expand_decompose,
    expand_hyde,
    expand_pass,
    merge_variant_lists,
)
from src.reranker import (
    RERANKER_PRESETS,
    EmbeddingCosineScorer,
    build_scorer,
    rerank_listwise_llm,
    rerank_pass,
    rerank_pointwise,
)
from src.retrieval import (
    BM25Index,
    DenseIndex,
    HybridRetriever,
    IndexRetriever,
    MemoRetriever,
    RankedList,
    Retriever,
    bm25_build,
    dense_build,
    load_index,
    save_index,
    timed_search,
)

logger = logging.getLogger(__name__)

# (qid, question, upstream output) -> (output, seconds)
Stage = Callable[[str, str, Any], tuple[Any, float]]

RANKED_NODES = {"retrieval", "passage_augmenter", "passage_reranker"}


def _sha256(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def _slug(text: str) -> str:
    return re.sub(r"[^\w.-]+", "_", text)


# ---------------------------------------------------------------------------
# Shared run state: corpus, client, indexes, judge
# ---------------------------------------------------------------------------

class PipelineContext:
    """Everything a module needs at run time; indexes are built once and shared."""

    def __init__(
        self,
        store: PassageStore,
        client: BaseLLMClient,
        settings: LLMSettings | None = None,
        judge: str = "gold",
        index_dir: Path | str | None = None,
    ):
        self.store = store
        self.client = client
        self.settings = settings or LLMSettings()
        self.judge_kind = judge
        self.index_dir = Path(index_dir) if index_dir else None
        self.corpus_checksum = _sha256(
            "\n".join(json.dumps(p.to_dict(), sort_keys=True, ensure_ascii=False) for p in store)
        )
        self._retrievers: dict[tuple, MemoRetriever] = {}
        self._lock = threading.Lock()
        self._judge = None

    @property
    def judge(self):
        with self._lock:
            if self._judge is None:
                self._judge = GoldJudge() if self.judge_kind == "gold" else LLMJudge(self.client, self.settings.judge())
        return self._judge

    def embed_fn(self, model_name: str | None = None):
        llm = self.settings.embedding(model_name)
        return lambda texts: self.client.embed(texts, llm)

    def _snapshot_path(self, name: str) -> Path | None:
        if self.index_dir is None:
            return None
        return self.index_dir / f"{_slug(name)}-{self.corpus_checksum[:12]}.pkl"

    def _load_or_build(self, name: str, build: Callable, embed=None):
        path = self._snapshot_path(name)
        if path is not None and path.exists():
            logger.debug("Loading index snapshot %s", path)
            return load_index(path, embed=embed)
        index = build()
        if path is not None:
            save_index(index, path)
        return index

    def bm25(self, params: BM25Params | None = None) -> MemoRetriever:
        params = params or BM25Params()
        key = ("bm25", params.k1, params.b, params.tokenizer)
        with self._lock:
            if key not in self._retrievers:
                index: BM25Index = self._load_or_build(
                    f"bm25-{params.k1}-{params.b}-{params.tokenizer}",
                    lambda: bm25_build(self.store, k1=params.k1, b=params.b, tokenizer=params.tokenizer),
                )
                self._retrievers[key] = MemoRetriever(IndexRetriever(index, name="bm25"))
            return self._retrievers[key]

    def dense(self, model_name: str | None = None) -> MemoRetriever:
        model = model_name or self.settings.embedding_model
        key = ("vectordb", model)
        with self._lock:
            if key not in self._retrievers:
                embed = self.embed_fn(model)
                index: DenseIndex = self._load_or_build(
                    f"dense-{self.client.namespace}-{model}",
                    lambda: dense_build(self.store, embed, model_name=model),
                    embed=embed,
                )
                self._retrievers[key] = MemoRetriever(IndexRetriever(index, name="vectordb"))
            return self._retrievers[key]

    def retriever(self, spec: ModuleSpec) -> Retriever:
        p = module_params("retrieval", spec)
        if spec.module_name == "bm25":
            return self.bm25(p)
        if spec.module_name == "vectordb":
            return self.dense(p.embedding_model)
        lexical, semantic = self.bm25(), self.dense(p.embedding_model)
        if spec.module_name == "hybrid_rrf":
            return HybridRetriever(
                lexical, semantic, method="rrf", eta=p.rrf_k,
                component_top_k=p.component_top_k, name=spec.module_name,
            )
        method = "dbsf" if spec.module_name == "hybrid_dbsf" else "cc"
        return HybridRetriever(
            lexical, semantic, method=method, alpha=p.weights[0],
            component_top_k=p.component_top_k, name=spec.module_name,
        )


# ---------------------------------------------------------------------------
# Module stages
# ---------------------------------------------------------------------------

def _timed(fn: Callable, *args, **kwargs) -> tuple[Any, float]:
    start = time.perf_counter()
    out = fn(*args, **kwargs)
    return out, time.perf_counter() - start


def _passage_texts(ctx: PipelineContext, ranked: RankedList, top_k: int) -> list[str]:
    return [ctx.store[pid].text for pid in ranked.ids[:top_k]]


def build_stage(node_name: str, spec: ModuleSpec, ctx: PipelineContext, top_k: int) -> Stage:
    """Runnable form of *spec* at *node_name*.

    Scorers that need endpoint capabilities are constructed here, so a
    missing capability fails before any query runs.
    """
    p = module_params(node_name, spec)
    name = spec.module_name
    client, settings = ctx.client, ctx.settings

    if node_name == "query_expansion":
        if name == "pass_query_expansion":
            return lambda qid, q, _: _timed(expand_pass, q, qid)
        llm = settings.chat(p.model_name, p.temperature, p.max_tokens)
        expand = expand_decompose if name == "query_decompose" else expand_hyde
        return lambda qid, q, _: _timed(expand, q, client, llm, qid, p.prompt)

    if node_name == "retrieval":
        retriever = ctx.retriever(spec)

        def retrieve(qid: str, q: str, eq: ExpandedQuery | None) -> tuple[RankedList, float]:
            eq = eq or expand_pass(q, qid)
            lists, cost = [], 0.0
            for variant in eq.variants:
                ranked, seconds = timed_search(retriever, variant, top_k, qid)
                lists.append(ranked)
                cost += seconds
            merged, seconds = _timed(merge_variant_lists, qid, lists, top_k, retriever.name)
            return merged, cost + seconds

        return retrieve

    if node_name == "passage_augmenter":
        if name == "pass_passage_augmenter":
            return lambda qid, q, ranked: _timed(augment_pass, ranked, top_k)
        scorer = EmbeddingCosineScorer(client, settings.embedding(p.embedding_model))
        return lambda qid, q, ranked: _timed(augment_prev_next, ranked, ctx.store, q, scorer, p.mode, top_k)

    if node_name == "passage_reranker":
        preset = RERANKER_PRESETS.get(name)
        mechanism = preset.mechanism if preset else ("pointwise" if name == "pointwise_reranker" else "listwise")
        if mechanism == "pass":
            return lambda qid, q, ranked: _timed(rerank_pass, ranked, top_k)

        model = p.model_name or (preset.model_name if preset else None) or None
        if mechanism == "listwise":
            llm = settings.chat(model, p.temperature, None, p.endpoint_url, p.api_key_env, p.supports_logprobs)

            def listwise(qid: str, q: str, ranked: RankedList) -> tuple[RankedList, float]:
                if not ranked.entries:
                    return ranked, 0.0
                return _timed(rerank_listwise_llm, ranked, q, client, llm, ctx.store, top_k, p.prompt)

            return listwise

        kind = preset.scorer if preset else p.scorer
        if kind == "embedding_cosine":
            llm = settings.embedding(model).model_copy(
                update={"endpoint_url": p.endpoint_url or settings.endpoint_url,
                        "api_key_env": p.api_key_env or settings.api_key_env}
            )
        else:
            llm = settings.chat(model, 0.0, None, p.endpoint_url, p.api_key_env, p.supports_logprobs)
        instruction = p.instruction if p.instruction is not None else (preset.instruction if preset else "")
        scorer = build_scorer(kind, client, llm, instruction=instruction)
        return lambda qid, q, ranked: _timed(rerank_pointwise, ranked, q, scorer, ctx.store, top_k)

    if node_name == "prompt_maker":
        template = PromptTemplate.load(p.prompt)
        maker = PROMPT_MAKERS[name]
        return lambda qid, q, ranked: _timed(maker, template, _passage_texts(ctx, ranked, top_k), q, top_k)

    if node_name == "generator":
        llm = settings.chat(p.model_name, p.temperature, p.max_tokens)

        def run_generator(qid: str, q: str, prompt: str) -> tuple[str, float]:
            result = generate(prompt, client, llm)
            return result.answer, result.seconds

        return run_generator

    raise ConfigError(f"unknown node {node_name!r}")


def pass_through(node_name: str, qid: str, question: str, upstream: Any, top_k: int, ctx: PipelineContext) -> Any:
    """Output forwarded for a query the winning module failed on."""
    if node_name == "query_expansion":
        return expand_pass(question, qid)
    if node_name == "retrieval":
        return RankedList(qid=qid, producer="pass")
    if node_name in ("passage_augmenter", "passage_reranker"):
        return upstream.truncate(top_k)
    if node_name == "prompt_maker":
        return make_prompt_fstring(PromptTemplate.load(), _passage_texts(ctx, upstream, top_k), question)
    return ""


# ---------------------------------------------------------------------------
# Output (de)serialization
# ---------------------------------------------------------------------------

def encode_output(node_name: str, qid: str, output: Any) -> dict:
    if node_name == "query_expansion" or node_name in RANKED_NODES:
        return output.to_dict()
    if node_name == "prompt_maker":
        return {"qid": qid, "prompt": output}
    return {"qid": qid, "answer": output}


def decode_output(node_name: str, row: dict) -> tuple[str, Any]:
    if node_name == "query_expansion":
        return row["qid"], ExpandedQuery.from_dict(row)
    if node_name in RANKED_NODES:
        return row["qid"], RankedList.from_dict(row)
    if node_name == "prompt_maker":
        return row["qid"], row["prompt"]
    return row["qid"], row["answer"]


def outputs_text(node_name: str, outputs: dict[str, Any]) -> str:
    return "".join(
        json.dumps(encode_output(node_name, qid, out), sort_keys=True, ensure_ascii=False) + "\n"
        for qid, out in outputs.items()
    )


# ---------------------------------------------------------------------------
# Records and selection
# ---------------------------------------------------------------------------

@dataclass
class QueryOutcome:
    qid: str
    output: Any
    seconds: float
    scores: list[MetricScore] = field(default_factory=list)
    error: str | None = None


@dataclass
class EvaluationRecord:
    node_name: str
    spec: ModuleSpec
    position: int = 0
    means: dict[str, float | None] = field(default_factory=dict)
    mean_elapsed: float = 0.0
    scores: list[MetricScore] = field(default_factory=list)
    missing: dict[str, int] = field(default_factory=dict)
    failed_qids: list[str] = field(default_factory=list)
    n_queries: int = 0
    resolved_params: dict[str, Any] = field(default_factory=dict)
    disqualified: bool = False
    reason: str = ""
    value: float | None = None
    selected: bool = False
    outcomes: list[QueryOutcome] = field(default_factory=list, repr=False)

    @property
    def label(self) -> str:
        return self.spec.label

    @property
    def module_name(self) -> str:
        return self.spec.module_name

    @property
    def params(self) -> dict[str, Any]:
        return dict(self.spec.params)

    def to_summary(self) -> dict:
        """Deterministic view (no timings)."""
        return {
            "label": self.label,
            "module_name": self.module_name,
            "params": self.params,
            "means": self.means,
            "value": self.value,
            "failed_queries": len(self.failed_qids),
            "missing": self.missing,
            "disqualified": self.disqualified,
            "selected": self.selected,
        }

    def to_state(self) -> dict:
        state = self.to_summary()
        state.update({
            "position": self.position,
            "mean_elapsed": self.mean_elapsed,
            "reason": self.reason,
            "failed_qids": self.failed_qids,
            "n_queries": self.n_queries,
            "resolved_params": self.resolved_params,
        })
        return state

    @classmethod
    def from_state(cls, node_name: str, state: dict) -> "EvaluationRecord":
        return cls(
            node_name=node_name,
            spec=ModuleSpec(module_name=state["module_name"], params=state["params"]),
            position=state["position"],
            means=state["means"],
            mean_elapsed=state["mean_elapsed"],
            missing=state.get("missing", {}),
            failed_qids=state.get("failed_qids", []),
            n_queries=state.get("n_queries", 0),
            resolved_params=state.get("resolved_params", {}),
            disqualified=state["disqualified"],
            reason=state.get("reason", ""),
            value=state["value"],
            selected=state["selected"],
        )


def select(
    records: list[EvaluationRecord],
    strategy: Strategy,
    tie_order: list[int] | None = None,
) -> ModuleSpec:
    """Pick the winner and mark it ``selected``.

    Disqualified candidates and (with a speed threshold) slow ones are
    dropped first.  Ties on the aggregated value go to the faster candidate;
    mean times within ``config.TIME_TIE_RESOLUTION_SECONDS`` of the fastest
    tied one count as equal and fall to the earlier candidate (or the
    *tie_order* rank).
    """
    if not records:
        raise PreconditionError("select needs at least one record")
    node_name = records[0].node_name
    for r in records:
        r.selected = False
        r.value = None

    eligible = [r for r in records if not r.disqualified]
    if not eligible:
        raise NodeFailure(node_name, f"all {len(records)} candidates were disqualified")

    threshold = strategy.speed_threshold_seconds
    if threshold is not None:
        for r in eligible:
            if r.mean_elapsed > threshold:
                r.reason = f"mean time {r.mean_elapsed:.3f}s exceeds the {threshold}s speed threshold"
        eligible = [r for r in eligible if r.mean_elapsed <= threshold]
        if not eligible:
            raise NodeFailure(node_name, f"no candidate runs within the {threshold}s speed threshold")

    if strategy.aggregation == "normalized_mean":
        values = aggregate_generation(
            {r.label: {m: r.means.get(m) for m in strategy.metrics} for r in eligible}
        )
    else:
        values = {
            r.label: float(np.mean([r.means.get(m) or 0.0 for m in strategy.metrics]))
            for r in eligible
        }
    for r in eligible:
        r.value = values[r.label]

    best = max(r.value for r in eligible)
    tied = [r for r in eligible if r.value == best]
    fastest = min(r.mean_elapsed for r in tied)
    quick = [r for r in tied if r.mean_elapsed - fastest < config.TIME_TIE_RESOLUTION_SECONDS]
    winner = min(quick, key=lambda r: tie_order[r.position] if tie_order is not None else r.position)
    winner.selected = True
    return winner.spec


# ---------------------------------------------------------------------------
# Summary
# ---------------------------------------------------------------------------

@dataclass
class NodeResult:
    node_name: str
    winner: ModuleSpec
    top_k: int
    evaluated: bool
    records: list[EvaluationRecord]
    input_checksum: str
    output_checksum: str
    seconds: float = 0.0
    resumed: bool = False

    @property
    def winner_record(self) -> EvaluationRecord | None:
        return next((r for r in self.records if r.selected), None)

    def to_summary(self) -> dict:
        winner = self.winner_record
        return {
            "node_name": self.node_name,
            "evaluated": self.evaluated,
            "winner": self.winner.model_dump(mode="json"),
            "label": self.winner.label,
            "top_k": self.top_k,
            "value": winner.value if winner else None,
            "means": winner.means if winner else {},
            "input_checksum": self.input_checksum,
            "output_checksum": self.output_checksum,
            "candidates": [r.to_summary() for r in self.records],
        }


@dataclass
class PipelineSummary:
    pipeline: PipelineConfig
    nodes: list[NodeResult]
    final_metrics: dict[str, float | None]
    total_seconds: float = 0.0
    status: str = "complete"
    failed_node: str | None = None

    @property
    def winners(self) -> list[tuple[str, ModuleSpec]]:
        return [(n.node_name, n.winner) for n in self.nodes]

    def to_dict(self) -> dict:
        data = {
            "status": self.status,
            "nodes": [n.to_summary() for n in self.nodes],
            "final_metrics": self.final_metrics,
        }
        if self.failed_node:
            data["failed_node"] = self.failed_node
        return data


def resolve_nodes(cfg: PipelineConfig) -> list[tuple[str, NodeConfig | None]]:
    """Every node in sweep order, None where the config omits it."""
    return [(name, cfg.node(name)) for name in NODE_ORDER]


def default_spec(node_name: str) -> ModuleSpec:
    if node_name not in DEFAULT_MODULES:
        raise ConfigError(f"node {node_name} has no default module and must be configured")
    return ModuleSpec(module_name=DEFAULT_MODULES[node_name])


# ---------------------------------------------------------------------------
# Optimizer
# ---------------------------------------------------------------------------

class Optimizer:
    """One optimization run over a corpus, a QA set and a pipeline config."""

    def __init__(
        self,
        ctx: PipelineContext,
        qa: list[QARecord],
        cfg: PipelineConfig,
        out_dir: Path | str | None = None,
        workers: int = config.WORKERS,
        seed: int | None = None,
        resume: bool = True,
    ):
        if not qa:
            raise PreconditionError("optimization needs at least one QA record")
        self.ctx = ctx
        self.qa = qa
        self.cfg = cfg
        self.out_dir = Path(out_dir) if out_dir else None
        self.workers = max(1, workers)
        self.seed = seed
        self.resume = resume
        self.evaluations = 0
        self.qa_checksum = _sha256(
            "".join(json.dumps(r.to_dict(), sort_keys=True, ensure_ascii=False) + "\n" for r in qa)
        )
        self._check_judge()

    def _check_judge(self) -> None:
        if self.cfg.judge != "gold":
            return
        if not any(n.node_name in RETRIEVAL_SIDE_NODES for n in self.cfg.nodes):
            return
        missing = [r.qid for r in self.qa if not r.gold_passage_ids]
        if missing:
            raise ConfigError(
                f"judge 'gold' needs gold_passage_ids for every query; {len(missing)} have none",
                [f"qid {q}" for q in missing[:5]],
            )

    # -- scoring -----------------------------------------------------------

    def _score(self, node: NodeConfig, qa: QARecord, evaluated: Any) -> list[MetricScore]:
        scores = []
        for metric in node.strategy.all_metrics:
            scale = METRIC_SCALES[metric]
            if metric == "context_precision":
                top = evaluated.ids[: node.top_k]
                judgments = {pid: self.ctx.judge.judge(qa, self.ctx.store[pid]) for pid in top}
                value = context_precision_at_k(evaluated, judgments, node.top_k)
            elif metric in ("rouge", "rougeL", "rouge1", "rouge2"):
                value = rouge(evaluated, qa.ground_truth_answer, "rougeL" if metric == "rouge" else metric)
            elif metric == "meteor":
                value = meteor(evaluated, qa.ground_truth_answer)
            elif metric == "sem_score":
                value = sem_score(
                    evaluated, qa.ground_truth_answer, self.ctx.embed_fn(), node.strategy.sem_score_mapping
                )
            elif metric == "g_eval":
                value = g_eval(
                    qa.question, evaluated, self.ctx.client, self.ctx.settings.judge(),
                    reference=qa.ground_truth_answer, qid=qa.qid,
                ).value
            else:
                raise ConfigError(f"unknown metric {metric!r}")
            scores.append(MetricScore(metric, qa.qid, value, scale))
        return scores

    # -- evaluation --------------------------------------------------------

    def fixture_for(self, node: NodeConfig) -> ModuleSpec | None:
        if node.node_name not in FIXTURE_NODES:
            return None
        if node.fixture is not None:
            return node.fixture
        if node.node_name == "query_expansion":
            return ModuleSpec(module_name="bm25")
        generator = self.cfg.node("generator")
        return generator.candidates[0] if generator else default_spec("generator")

    def _fixture_stage(self, node: NodeConfig, fixture: ModuleSpec | None) -> Stage | None:
        if fixture is None:
            return None
        fixture_node = FIXTURE_NODES[node.node_name]
        top_k = node.top_k if fixture_node == "retrieval" else config.TOP_K_SCHEDULE[fixture_node]
        return build_stage(fixture_node, fixture, self.ctx, top_k)

    def _evaluate_candidate(
        self,
        node: NodeConfig,
        position: int,
        spec: ModuleSpec,
        inputs: dict[str, Any],
        fixture_stage: Stage | None,
    ) -> EvaluationRecord:
        resolved = module_params(node.node_name, spec).model_dump(mode="json")
        stage = build_stage(node.node_name, spec, self.ctx, node.top_k)

        def job(qa: QARecord) -> QueryOutcome:
            try:
                output, seconds = stage(qa.qid, qa.question, inputs[qa.qid])
                evaluated = fixture_stage(qa.qid, qa.question, output)[0] if fixture_stage else output
                return QueryOutcome(qa.qid, output, seconds, self._score(node, qa, evaluated))
            except ConfigError:
                raise
            except Exception as exc:
                logger.warning("%s %s failed on query %s: %s", node.node_name, spec.label, qa.qid, exc)
                return QueryOutcome(qa.qid, None, 0.0, error=f"{type(exc).__name__}: {exc}")

        with ThreadPoolExecutor(max_workers=self.workers) as pool:
            outcomes = list(pool.map(job, self.qa))
        self.evaluations += 1

        ok = [o for o in outcomes if o.error is None]
        failed = [o.qid for o in outcomes if o.error is not None]
        scores = [s for o in ok for s in o.scores]
        means = {}
        missing = {}
        for metric in node.strategy.all_metrics:
            values = [s.value for s in scores if s.metric_name == metric]
            means[metric] = mean_or_none(values)
            missing[metric] = sum(1 for v in values if v is None)

        record = EvaluationRecord(
            node_name=node.node_name,
            spec=spec,
            position=position,
            means=means,
            mean_elapsed=float(np.mean([o.seconds for o in ok])) if ok else 0.0,
            scores=scores,
            missing=missing,
            failed_qids=failed,
            n_queries=len(outcomes),
            resolved_params=resolved,
            outcomes=outcomes,
        )
        if len(failed) > config.DISQUALIFY_FAILURE_RATE * len(outcomes):
            record.disqualified = True
            record.reason = f"failed on {len(failed)} of {len(outcomes)} queries"
            logger.warning("%s %s disqualified: %s", node.node_name, spec.label, record.reason)
        return record

    def evaluate_node(
        self,
        node: NodeConfig,
        inputs: dict[str, Any],
        downstream_fixture: ModuleSpec | None = None,
    ) -> list[EvaluationRecord]:
        """Evaluate every candidate of *node* on every query (candidates in order)."""
        fixture = downstream_fixture or self.fixture_for(node)
        fixture_stage = self._fixture_stage(node, fixture)
        records = []
        for position, spec in enumerate(node.candidates):
            logger.info("Evaluating %s candidate %d/%d: %s", node.node_name, position + 1, len(node.candidates), spec.label)
            records.append(self._evaluate_candidate(node, position, spec, inputs, fixture_stage))
        return records

    def _tie_order(self, node: NodeConfig) -> list[int] | None:
        if self.seed is None:
            return None
        n = len(node.candidates)
        return random.Random(f"{self.seed}:{node.node_name}").sample(range(n), n)

    def _forward(self, node_name: str, record: EvaluationRecord, inputs: dict[str, Any], top_k: int) -> dict[str, Any]:
        outputs = {}
        by_qid = {o.qid: o for o in record.outcomes}
        for qa in self.qa:
            outcome = by_qid[qa.qid]
            if outcome.error is None:
                outputs[qa.qid] = outcome.output
            else:
                outputs[qa.qid] = pass_through(node_name, qa.qid, qa.question, inputs[qa.qid], top_k, self.ctx)
        return outputs

    def _run_default(self, node_name: str, spec: ModuleSpec, inputs: dict[str, Any], top_k: int) -> dict[str, Any]:
        stage = build_stage(node_name, spec, self.ctx, top_k)

        def job(qa: QARecord):
            try:
                return stage(qa.qid, qa.question, inputs[qa.qid])[0]
            except ConfigError:
                raise
            except Exception as exc:
                logger.warning("%s %s failed on query %s: %s", node_name, spec.label, qa.qid, exc)
                return pass_through(node_name, qa.qid, qa.question, inputs[qa.qid], top_k, self.ctx)

        with ThreadPoolExecutor(max_workers=self.workers) as pool:
            results = list(pool.map(job, self.qa))
        return {qa.qid: out for qa, out in zip(self.qa, results)}

    # -- persistence -------------------------------------------------------

    def _fingerprint(self, node: NodeConfig, fixture: ModuleSpec | None, input_checksum: str) -> str:
        payload = {
            "node": node.model_dump(mode="json"),
            "fixture": fixture.model_dump(mode="json") if fixture else None,
            "input": input_checksum,
            "qa": self.qa_checksum,
            "corpus": self.ctx.corpus_checksum,
            "llm": self.cfg.llm.model_dump(mode="json"),
            "judge": self.cfg.judge,
            "client": self.ctx.client.namespace,
            "seed": self.seed,
        }
        return _sha256(json.dumps(payload, sort_keys=True))

    def _node_dir(self, node_name: str) -> Path:
        return self.out_dir / node_name

    def _try_resume(self, node: NodeConfig, fingerprint: str) -> tuple[list[EvaluationRecord], dict[str, Any], str] | None:
        if not (self.resume and self.out_dir):
            return None
        node_dir = self._node_dir(node.node_name)
        state_path, outputs_path = node_dir / "node.json", node_dir / "outputs.jsonl"
        if not (state_path.exists() and outputs_path.exists()):
            return None
        state = json.loads(state_path.read_text(encoding="utf-8"))
        text = outputs_path.read_text(encoding="utf-8")
        if state.get("fingerprint") != fingerprint or _sha256(text) != state.get("output_checksum"):
            return None
        outputs = dict(decode_output(node.node_name, json.loads(line)) for line in text.splitlines() if line)
        records = [EvaluationRecord.from_state(node.node_name, s) for s in state["records"]]
        logger.info("Resuming %s from %s", node.node_name, node_dir)
        return records, outputs, state["output_checksum"]

    def _write_scores(self, node: NodeConfig, records: list[EvaluationRecord]) -> None:
        rows = []
        for r in records:
            for o in r.outcomes:
                if o.error is not None:
                    for metric in node.strategy.all_metrics:
                        rows.append([r.label, o.qid, metric, None, None, o.error])
                for s in o.scores:
                    rows.append([r.label, o.qid, s.metric_name, s.value, o.seconds, ""])
        node_dir = self._node_dir(node.node_name)
        node_dir.mkdir(parents=True, exist_ok=True)
        pd.DataFrame(
            rows, columns=["module", "qid", "metric", "value", "elapsed_seconds", "error"]
        ).to_csv(node_dir / "scores.csv", index=False)

    def _write_node(
        self,
        node: NodeConfig,
        records: list[EvaluationRecord],
        text: str,
        fingerprint: str,
        input_checksum: str,
        output_checksum: str,
    ) -> None:
        node_dir = self._node_dir(node.node_name)
        rows = []
        for r in records:
            row = {"module": r.label, "module_name": r.module_name, "params": json.dumps(r.params, sort_keys=True)}
            row.update({m: r.means.get(m) for m in node.strategy.all_metrics})
            row.update({
                "value": r.value,
                "mean_elapsed_seconds": r.mean_elapsed,
                "queries": r.n_queries,
                "failed_queries": len(r.failed_qids),
                "disqualified": r.disqualified,
                "reason": r.reason,
                "selected": r.selected,
            })
            rows.append(row)
        pd.DataFrame(rows).to_csv(node_dir / "summary.csv", index=False)
        (node_dir / "outputs.jsonl").write_text(text, encoding="utf-8")
        state = {
            "node_name": node.node_name,
            "fingerprint": fingerprint,
            "input_checksum": input_checksum,
            "output_checksum": output_checksum,
            "records": [r.to_state() for r in records],
        }
        (node_dir / "node.json").write_text(json.dumps(state, indent=2, sort_keys=True), encoding="utf-8")

    # -- sweep -------------------------------------------------------------

    def run(self) -> PipelineSummary:
        start = time.perf_counter()
        inputs: dict[str, Any] = {qa.qid: None for qa in self.qa}
        input_checksum = self.qa_checksum
        results: list[NodeResult] = []

        configured = [n.node_name for n in self.cfg.nodes]
        last = max(NODE_ORDER.index(name) for name in configured)
        summary = PipelineSummary(pipeline=self.best_pipeline(results), nodes=results, final_metrics={})

        for node_name, node in resolve_nodes(self.cfg):
            node_start = time.perf_counter()
            if node is None:
                top_k = config.TOP_K_SCHEDULE[node_name]
                spec = default_spec(node_name)
                if NODE_ORDER.index(node_name) < last:
                    outputs = self._run_default(node_name, spec, inputs, top_k)
                    output_checksum = _sha256(outputs_text(node_name, outputs))
                else:
                    outputs, output_checksum = inputs, input_checksum
                results.append(NodeResult(
                    node_name, spec, top_k, False, [], input_checksum, output_checksum,
                    seconds=time.perf_counter() - node_start,
                ))
            else:
                fixture = self.fixture_for(node)
                fingerprint = self._fingerprint(node, fixture, input_checksum)
                resumed = self._try_resume(node, fingerprint)
                if resumed is not None:
                    records, outputs, output_checksum = resumed
                    winner = next(r for r in records if r.selected).spec
                else:
                    records = self.evaluate_node(node, inputs, fixture)
                    if self.out_dir:
                        self._write_scores(node, records)
                    try:
                        winner = select(records, node.strategy, self._tie_order(node))
                    except NodeFailure:
                        summary.status, summary.failed_node = "failed", node_name
                        summary.total_seconds = time.perf_counter() - start
                        summary.pipeline = self.best_pipeline(results)
                        self._write_run(summary)
                        raise
                    record = next(r for r in records if r.selected)
                    outputs = self._forward(node_name, record, inputs, node.top_k)
                    text = outputs_text(node_name, outputs)
                    output_checksum = _sha256(text)
                    if self.out_dir:
                        self._write_node(node, records, text, fingerprint, input_checksum, output_checksum)
                logger.info("%s winner: %s", node_name, winner.label)
                results.append(NodeResult(
                    node_name, winner, node.top_k, True, records, input_checksum, output_checksum,
                    seconds=time.perf_counter() - node_start, resumed=resumed is not None,
                ))
            inputs, input_checksum = outputs, output_checksum

        summary.final_metrics = self._final_metrics(results)
        summary.total_seconds = time.perf_counter() - start
        summary.pipeline = self.best_pipeline(results)
        self._write_run(summary)
        return summary

    def _final_metrics(self, results: list[NodeResult]) -> dict[str, float | None]:
        for result in reversed(results):
            if result.evaluated and result.node_name in GENERATION_SIDE_NODES:
                return dict(result.winner_record.means)
        return {}

    def best_pipeline(self, results: list[NodeResult]) -> PipelineConfig:
        """Winners so far plus configured first candidates / defaults for the rest."""
        chosen = {r.node_name: r.winner for r in results}
        nodes = []
        for node_name, node in resolve_nodes(self.cfg):
            if node is None:
                continue
            nodes.append(NodeConfig(
                node_name=node_name,
                candidates=[chosen.get(node_name, node.candidates[0])],
                strategy=node.strategy,
                top_k=node.top_k,
            ))
        return PipelineConfig(llm=self.cfg.llm, judge=self.cfg.judge, nodes=nodes)

    def _write_run(self, summary: PipelineSummary) -> None:
        if not self.out_dir:
            return
        self.out_dir.mkdir(parents=True, exist_ok=True)
        (self.out_dir / "summary.json").write_text(
            json.dumps(summary.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8"
        )
        run_info = {
            "total_seconds": summary.total_seconds,
            "evaluations": self.evaluations,
            "workers": self.workers,
            "llm_calls": len(self.ctx.client.calls),
            "network_calls": self.ctx.client.network_calls,
            "llm_seconds": self.ctx.client.total_seconds(),
            "nodes": {
                n.node_name: {
                    "seconds": n.seconds,
                    "resumed": n.resumed,
                    "candidates": {r.label: r.mean_elapsed for r in n.records},
                }
                for n in summary.nodes
            },
        }
        (self.out_dir / "run_info.json").write_text(json.dumps(run_info, indent=2, sort_keys=True) + "\n", encoding="utf-8")
        dump_pipeline_config(summary.pipeline, self.out_dir / "best_pipeline.yaml")


# ---------------------------------------------------------------------------
# Entry points
# ---------------------------------------------------------------------------

def evaluate_node(
    optimizer: Optimizer,
    node: NodeConfig,
    inputs: dict[str, Any],
    downstream_fixture: ModuleSpec | None = None,
) -> list[EvaluationRecord]:
    return optimizer.evaluate_node(node, inputs, downstream_fixture)


def run_optimization(
    store: PassageStore,
    qa: list[QARecord],
    cfg: PipelineConfig,
    client: BaseLLMClient,
    out_dir: Path | str | None = None,
    workers: int = config.WORKERS,
    seed: int | None = None,
    resume: bool = True,
) -> PipelineSummary:
    index_dir = Path(out_dir) / "indexes" if out_dir else None
    ctx = PipelineContext(store, client, cfg.llm, judge=cfg.judge, index_dir=index_dir)
    return Optimizer(ctx, qa, cfg, out_dir=out_dir, workers=workers, seed=seed, resume=resume).run()


@dataclass(frozen=True)
class PipelineAnswer:
    answer: str
    passage_ids: list[str]
    prompt: str
    empty_context: bool


def run_pipeline(
    pipeline: PipelineSummary | PipelineConfig,
    query: str,
    ctx: PipelineContext,
    qid: str = "query",
) -> PipelineAnswer:
    """Send one query through the winning modules."""
    if isinstance(pipeline, PipelineSummary):
        pipeline = pipeline.pipeline
    if not query or not query.strip():
        raise PreconditionError("query must be non-empty")

    upstream: Any = None
    passage_ids: list[str] = []
    prompt = ""
    for node_name, node in resolve_nodes(pipeline):
        spec = node.candidates[0] if node else default_spec(node_name)
        top_k = node.top_k if node else config.TOP_K_SCHEDULE[node_name]
        stage = build_stage(node_name, spec, ctx, top_k)
        try:
            upstream, _ = stage(qid, query, upstream)
        except ConfigError:
            raise
        except Exception as exc:
            raise NodeFailure(node_name, f"{spec.label}: {exc}") from exc
        if isinstance(upstream, RankedList):
            passage_ids = upstream.ids
        if node_name == "prompt_maker":
            prompt = upstream

    if not passage_ids:
        logger.warning("No passages retrieved for %r; the answer comes from an empty context", query)
    return PipelineAnswer(answer=upstream, passage_ids=passage_ids, prompt=prompt, empty_context=not passage_ids)
