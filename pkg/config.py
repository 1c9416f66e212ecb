"""Configuration settings for the RAG pipeline optimizer."""

import os
from pathlib import Path

from dotenv import load_dotenv

# Load environment variables from .env file
PROJECT_DIR = Path(__file__).parent
ENV_FILE = PROJECT_DIR / ".env"
load_dotenv(ENV_FILE)

# LLM endpoint settings (OpenAI-compatible wire shape)
# The API key itself is never stored here or in a pipeline config: configs
# only name the environment variable that holds it.
DEFAULT_ENDPOINT_URL = os.environ.get("RAGOPT_ENDPOINT_URL") or "https://api.openai.com/v1"
DEFAULT_API_KEY_ENV = "OPENAI_API_KEY"
DEFAULT_CHAT_MODEL = "gpt-3.5-turbo"
DEFAULT_EMBEDDING_MODEL = "text-embedding-3-large"
DEFAULT_JUDGE_MODEL = "gpt-4-0125-preview"
HTTP_TIMEOUT_SECONDS = 60

# Transport retries: attempts and initial backoff (doubles each retry)
LLM_RETRIES = 3
LLM_BACKOFF = 1.0

# Requests per second across all workers sharing one client (0 = unlimited)
LLM_REQUESTS_PER_SECOND = float(os.environ.get("RAGOPT_REQUESTS_PER_SECOND") or "5")

# Response cache: append-only JSONL keyed by content hash.
CACHE_PATH = Path(os.environ.get("RAGOPT_CACHE_PATH") or PROJECT_DIR / ".cache" / "llm_cache.jsonl")

# Mock endpoints (used by --mock-llm and the test suite)
MOCK_EMBED_DIM = 256
MOCK_MAX_TOKENS = 48  # reply length when the request sets no max_tokens

# Corpus chunking
# Token = unit of the configured tokenizer ("whitespace" or "gpt2").
CHUNK_SIZE = 512
CHUNK_OVERLAP = 50
CHUNK_TOKENIZER = "whitespace"

# BM25 (Okapi) parameters
BM25_K1 = 1.5
BM25_B = 0.75

# Top-k schedule per node.  Retrieval-side values double as the K of
# Context Precision@K for that node.
TOP_K_SCHEDULE: dict[str, int] = {
    "query_expansion": 10,
    "retrieval": 10,
    "passage_augmenter": 15,
    "passage_reranker": 5,
    "prompt_maker": 5,
    "generator": 5,
}

# Hybrid retrieval: lexical (BM25) weight first, semantic (dense) second.
HYBRID_WEIGHTS = (0.7, 0.3)
RRF_ETA = 60.0

# HyDE hypothetical passage length
HYDE_MAX_TOKENS = 64

# Optimizer
# A candidate failing more than this share of queries is disqualified.
DISQUALIFY_FAILURE_RATE = 0.5
# Metric ties go to the faster candidate; mean times closer than this count
# as equal and fall to declaration order.
TIME_TIE_RESOLUTION_SECONDS = 0.01
WORKERS = int(os.environ.get("RAGOPT_WORKERS") or "4")

# Output directory for optimization runs
OUTPUT_DIR = Path(os.environ.get("RAGOPT_OUTPUT_DIR") or PROJECT_DIR / "runs")

# Versioned prompt templates shipped with the package
PROMPTS_DIR = PROJECT_DIR / "src" / "prompts"

# Generation metrics evaluated when a strategy does not list its own
GENERATION_METRICS = ["meteor", "rouge", "sem_score", "g_eval"]
RETRIEVAL_METRICS = ["context_precision"]

# G-Eval aspects, averaged into the g_eval score (scale 1-5)
G_EVAL_ASPECTS = ["coherence", "consistency", "fluency", "relevance"]

# METEOR parameters (exact unigram matching only)
METEOR_ALPHA = 0.9
METEOR_BETA = 3.0
METEOR_GAMMA = 0.5
