"""Pipeline config files: schema, module registry and candidate expansion.

A pipeline config is a YAML file::

    llm:
      chat_model: gpt-3.5-turbo
      embedding_model: text-embedding-3-large
    judge: gold
    nodes:
      - node_name: retrieval
        top_k: 10
        strategy:
          metrics: [context_precision]
        candidates:
          - module_name: bm25
          - module_name: hybrid_rrf
            params: {rrf_k: [3, 5, 10]}

A list given for a scalar parameter expands into one candidate per value
(the cartesian product across several such parameters).  Parameters whose
value is itself a sequence (``weights``) only expand when given a list of
sequences.

The winning pipeline written by the optimizer uses the same schema with one
candidate per node.
"""

from __future__ import annotations

import itertools
import logging
from pathlib import Path
from typing import Any, ClassVar, Literal, get_args

import yaml
from pydantic import (
    BaseModel,
    ConfigDict,
    Field,
    PositiveFloat,
    PositiveInt,
    ValidationError,
    field_validator,
    model_validator,
)

import config
from src.errors import ConfigError, RagOptError
from src.llm_client import LLMConfig
from src.metrics import GENERATION_METRIC_NAMES, RETRIEVAL_METRIC_NAMES
from src.prompt_maker import DEFAULT_QA_TEMPLATE, PromptTemplate, load_prompt_text
from src.reranker import RERANKER_PRESETS, ScorerKind

logger = logging.getLogger(__name__)

NodeName = Literal[
    "query_expansion",
    "retrieval",
    "passage_augmenter",
    "passage_reranker",
    "prompt_maker",
    "generator",
]
NODE_ORDER: list[str] = list(get_args(NodeName))

RETRIEVAL_SIDE_NODES = {"query_expansion", "retrieval", "passage_augmenter", "passage_reranker"}
GENERATION_SIDE_NODES = {"prompt_maker", "generator"}


# ---------------------------------------------------------------------------
# Shared settings
# ---------------------------------------------------------------------------

class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class LLMSettings(_Strict):
    """Endpoint defaults; module params may override the model per call site."""

    endpoint_url: str = config.DEFAULT_ENDPOINT_URL
    api_key_env: str = config.DEFAULT_API_KEY_ENV
    chat_model: str = Field(default=config.DEFAULT_CHAT_MODEL, min_length=1)
    embedding_model: str = Field(default=config.DEFAULT_EMBEDDING_MODEL, min_length=1)
    judge_model: str = Field(default=config.DEFAULT_JUDGE_MODEL, min_length=1)
    supports_logprobs: bool = True

    def chat(
        self,
        model_name: str | None = None,
        temperature: float = 0.0,
        max_tokens: int | None = None,
        endpoint_url: str | None = None,
        api_key_env: str | None = None,
        supports_logprobs: bool | None = None,
    ) -> LLMConfig:
        return LLMConfig(
            model_name=model_name or self.chat_model,
            temperature=temperature,
            max_tokens=max_tokens,
            endpoint_url=endpoint_url or self.endpoint_url,
            api_key_env=api_key_env or self.api_key_env,
            supports_logprobs=self.supports_logprobs if supports_logprobs is None else supports_logprobs,
        )

    def embedding(self, model_name: str | None = None) -> LLMConfig:
        return self.chat(model_name=model_name or self.embedding_model)

    def judge(self) -> LLMConfig:
        return self.chat(model_name=self.judge_model)


class Strategy(_Strict):
    metrics: list[str] = Field(min_length=1)
    aggregation: Literal["mean", "normalized_mean"] | None = None
    speed_threshold_seconds: PositiveFloat | None = None
    # Recorded in the tables but not used for selection.
    record_metrics: list[str] = Field(default_factory=list)
    sem_score_mapping: Literal["raw", "shifted"] = "raw"

    @property
    def all_metrics(self) -> list[str]:
        return self.metrics + [m for m in self.record_metrics if m not in self.metrics]


def default_strategy(node_name: str) -> Strategy:
    if node_name in GENERATION_SIDE_NODES:
        return Strategy(metrics=list(config.GENERATION_METRICS), aggregation="normalized_mean")
    return Strategy(metrics=list(config.RETRIEVAL_METRICS), aggregation="mean")


class ModuleSpec(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    module_name: str = Field(min_length=1)
    params: dict[str, Any] = Field(default_factory=dict)

    @property
    def label(self) -> str:
        if not self.params:
            return self.module_name
        inner = ", ".join(f"{k}={_format_value(v)}" for k, v in self.params.items())
        return f"{self.module_name}({inner})"


def _format_value(value: Any) -> str:
    if isinstance(value, (list, tuple)):
        return "[" + ", ".join(_format_value(v) for v in value) + "]"
    return str(value)


# ---------------------------------------------------------------------------
# Module parameter schemas
# ---------------------------------------------------------------------------

class NoParams(_Strict):
    SEQUENCE_PARAMS: ClassVar[set[str]] = set()


class ChatParams(NoParams):
    model_name: str | None = None
    temperature: float = Field(default=0.0, ge=0.0)
    max_tokens: PositiveInt | None = None


class DecomposeParams(ChatParams):
    prompt: str = "decompose_v1"


class HydeParams(ChatParams):
    max_tokens: PositiveInt = config.HYDE_MAX_TOKENS
    prompt: str = "hyde_v1"


class BM25Params(NoParams):
    k1: PositiveFloat = config.BM25_K1
    b: float = Field(default=config.BM25_B, ge=0.0, le=1.0)
    tokenizer: str = "word"


class VectorDBParams(NoParams):
    embedding_model: str | None = None


class HybridRRFParams(VectorDBParams):
    rrf_k: PositiveFloat = config.RRF_ETA
    component_top_k: PositiveInt | None = None


class HybridConvexParams(VectorDBParams):
    SEQUENCE_PARAMS: ClassVar[set[str]] = {"weights"}

    # (lexical, semantic)
    weights: tuple[float, float] = config.HYBRID_WEIGHTS
    component_top_k: PositiveInt | None = None

    @field_validator("weights")
    @classmethod
    def _check_weights(cls, value: tuple[float, float]) -> tuple[float, float]:
        if any(w < 0 or w > 1 for w in value):
            raise ValueError("weights must lie in [0, 1]")
        if abs(sum(value) - 1.0) > 1e-9:
            raise ValueError(f"weights must sum to 1, got {sum(value)}")
        return value


class PrevNextParams(VectorDBParams):
    mode: Literal["prev", "next", "both"] = "both"


class EndpointParams(NoParams):
    model_name: str | None = None
    endpoint_url: str | None = None
    api_key_env: str | None = None
    supports_logprobs: bool | None = None


class PresetRerankerParams(EndpointParams):
    instruction: str | None = None


class PointwiseRerankerParams(EndpointParams):
    scorer: ScorerKind = "overlap"
    instruction: str = ""


class ListwiseRerankerParams(EndpointParams):
    temperature: float = Field(default=0.0, ge=0.0)
    prompt: str = "rankgpt_v1"


class PromptMakerParams(NoParams):
    prompt: str = DEFAULT_QA_TEMPLATE

    @field_validator("prompt")
    @classmethod
    def _check_template(cls, value: str) -> str:
        try:
            PromptTemplate(name=value, text=load_prompt_text(value))
        except RagOptError as exc:
            raise ValueError(str(exc)) from exc
        return value


_RERANKER_PARAMS: dict[str, type[NoParams]] = {
    name: (
        NoParams if preset.mechanism == "pass"
        else ListwiseRerankerParams if preset.mechanism == "listwise"
        else PresetRerankerParams
    )
    for name, preset in RERANKER_PRESETS.items()
}

MODULE_PARAMS: dict[str, dict[str, type[NoParams]]] = {
    "query_expansion": {
        "pass_query_expansion": NoParams,
        "query_decompose": DecomposeParams,
        "hyde": HydeParams,
    },
    "retrieval": {
        "bm25": BM25Params,
        "vectordb": VectorDBParams,
        "hybrid_rrf": HybridRRFParams,
        "hybrid_cc": HybridConvexParams,
        "hybrid_dbsf": HybridConvexParams,
    },
    "passage_augmenter": {
        "pass_passage_augmenter": NoParams,
        "prev_next_augmenter": PrevNextParams,
    },
    "passage_reranker": {
        **_RERANKER_PARAMS,
        "pointwise_reranker": PointwiseRerankerParams,
        "listwise_reranker": ListwiseRerankerParams,
    },
    "prompt_maker": {
        "fstring": PromptMakerParams,
        "long_context_reorder": PromptMakerParams,
    },
    "generator": {
        "llm": ChatParams,
    },
}

# Module used when a node is omitted from the config (retrieval has none).
DEFAULT_MODULES: dict[str, str] = {
    "query_expansion": "pass_query_expansion",
    "passage_augmenter": "pass_passage_augmenter",
    "passage_reranker": "pass_reranker",
    "prompt_maker": "fstring",
    "generator": "llm",
}

# Which node's modules may serve as a fixture for a node evaluated through one.
FIXTURE_NODES: dict[str, str] = {
    "query_expansion": "retrieval",
    "prompt_maker": "generator",
}


def module_params(node_name: str, spec: ModuleSpec) -> NoParams:
    """Validated parameter model of *spec* at *node_name*."""
    schema = MODULE_PARAMS[node_name].get(spec.module_name)
    if schema is None:
        raise ConfigError(f"unknown module '{spec.module_name}' for node {node_name}")
    try:
        return schema(**spec.params)
    except ValidationError as exc:
        raise ConfigError(f"invalid params for {spec.label}", format_validation_errors(exc)) from exc


# ---------------------------------------------------------------------------
# Node / pipeline schema
# ---------------------------------------------------------------------------

class NodeConfig(_Strict):
    node_name: NodeName
    candidates: list[ModuleSpec] = Field(min_length=1)
    strategy: Strategy | None = None
    top_k: PositiveInt | None = None
    fixture: ModuleSpec | None = None

    @model_validator(mode="after")
    def _fill_defaults(self) -> "NodeConfig":
        if self.strategy is None:
            self.strategy = default_strategy(self.node_name)
        elif self.strategy.aggregation is None:
            self.strategy.aggregation = default_strategy(self.node_name).aggregation
        if self.top_k is None:
            self.top_k = config.TOP_K_SCHEDULE[self.node_name]
        return self


class PipelineConfig(_Strict):
    llm: LLMSettings = Field(default_factory=LLMSettings)
    judge: Literal["gold", "llm"] = "gold"
    nodes: list[NodeConfig] = Field(min_length=1)

    @model_validator(mode="after")
    def _check_nodes(self) -> "PipelineConfig":
        names = [n.node_name for n in self.nodes]
        if len(set(names)) != len(names):
            raise ValueError(f"each node may appear once, got {names}")
        if names != sorted(names, key=NODE_ORDER.index):
            raise ValueError(f"nodes must follow the order {NODE_ORDER}, got {names}")
        if "retrieval" not in names:
            raise ValueError("a retrieval node is required")
        return self

    def node(self, node_name: str) -> NodeConfig | None:
        return next((n for n in self.nodes if n.node_name == node_name), None)


# ---------------------------------------------------------------------------
# Expansion and checks
# ---------------------------------------------------------------------------

def format_validation_errors(exc: ValidationError, prefix: str = "") -> list[str]:
    problems = []
    for err in exc.errors():
        path = ".".join(str(p) for p in (prefix.split(".") if prefix else []) + list(err["loc"]))
        line = f"{path}: {err['msg']}" if path else err["msg"]
        if err.get("type") in ("literal_error", "extra_forbidden"):
            line += f" (got {err.get('input')!r})"
        problems.append(line)
    return problems


def expand_candidates(node_name: str, spec: ModuleSpec) -> list[ModuleSpec]:
    """One spec per combination of list-valued scalar parameters."""
    schema = MODULE_PARAMS[node_name].get(spec.module_name, NoParams)
    axes: list[list[tuple[str, Any]]] = []
    for key, value in spec.params.items():
        expands = isinstance(value, list) and (
            key not in schema.SEQUENCE_PARAMS or all(isinstance(v, (list, tuple)) for v in value)
        )
        if expands and value:
            axes.append([(key, v) for v in value])
        else:
            axes.append([(key, value)])
    return [
        ModuleSpec(module_name=spec.module_name, params=dict(combo))
        for combo in itertools.product(*axes)
    ]


def _check_metrics(node: NodeConfig, path: str) -> list[str]:
    allowed = RETRIEVAL_METRIC_NAMES if node.node_name in RETRIEVAL_SIDE_NODES else GENERATION_METRIC_NAMES
    problems = []
    for field_name in ("metrics", "record_metrics"):
        for j, metric in enumerate(getattr(node.strategy, field_name)):
            if metric not in allowed:
                problems.append(
                    f"{path}.strategy.{field_name}.{j}: metric '{metric}' does not apply to "
                    f"{node.node_name} (choose from {sorted(allowed)})"
                )
    return problems


def _check_spec(node_name: str, spec: ModuleSpec, path: str) -> list[str]:
    modules = MODULE_PARAMS[node_name]
    if spec.module_name not in modules:
        return [f"{path}.module_name: unknown module '{spec.module_name}' for {node_name} (choose from {sorted(modules)})"]
    try:
        modules[spec.module_name](**spec.params)
    except ValidationError as exc:
        return format_validation_errors(exc, prefix=f"{path}.params")
    return []


def parse_pipeline_config(data: Any, source: str = "<config>") -> PipelineConfig:
    """Validate raw config data; every problem is reported with its key path."""
    try:
        cfg = PipelineConfig.model_validate(data if data is not None else {})
    except ValidationError as exc:
        raise ConfigError(f"{source}: invalid pipeline config", format_validation_errors(exc)) from exc

    problems: list[str] = []
    for i, node in enumerate(cfg.nodes):
        path = f"nodes.{i}"
        problems += _check_metrics(node, path)

        expanded: list[ModuleSpec] = []
        for j, spec in enumerate(node.candidates):
            if spec.module_name not in MODULE_PARAMS[node.node_name]:
                problems += _check_spec(node.node_name, spec, f"{path}.candidates.{j}")
                continue
            for variant in expand_candidates(node.node_name, spec):
                found = _check_spec(node.node_name, variant, f"{path}.candidates.{j}")
                problems += [p for p in found if p not in problems]
                expanded.append(variant)
        labels = [s.label for s in expanded]
        duplicates = sorted({label for label in labels if labels.count(label) > 1})
        if duplicates:
            problems.append(f"{path}.candidates: duplicate candidates {duplicates}")
        node.candidates = expanded

        if node.fixture is not None:
            fixture_node = FIXTURE_NODES.get(node.node_name)
            if fixture_node is None:
                problems.append(f"{path}.fixture: {node.node_name} is evaluated directly and takes no fixture")
            else:
                problems += _check_spec(fixture_node, node.fixture, f"{path}.fixture")

    if problems:
        raise ConfigError(f"{source}: invalid pipeline config", problems)
    return cfg


def load_pipeline_config(path: Path | str) -> PipelineConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from exc
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: not valid YAML ({exc})") from exc
    return parse_pipeline_config(data, source=str(path))


def dump_pipeline_config(cfg: PipelineConfig, path: Path | str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    data = cfg.model_dump(mode="json", exclude_none=True)
    path.write_text(yaml.safe_dump(data, sort_keys=False, allow_unicode=True), encoding="utf-8")
