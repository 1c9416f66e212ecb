"""Prompt assembly and answer generation.

Two prompt makers share one template format (plain text with ``{context}``
and ``{query}`` placeholders):

* f-string: passages in relevance order, separated by blank lines.
* long context reorder: the same, with the rank-1 passage repeated as the
  last context item so it sits at both ends of the context block.

Prompt files (the QA template, the expansion, reranking and judge prompts)
live in ``src/prompts/`` as ``<name>_v<N>.txt``.
"""

from __future__ import annotations

import logging
import re
import time
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path
from typing import Sequence

import config
from src.errors import PreconditionError, TemplateError
from src.llm_client import BaseLLMClient, LLMConfig

logger = logging.getLogger(__name__)

PASSAGE_SEPARATOR = "\n\n"
DEFAULT_QA_TEMPLATE = "qa_expert_v1"

_PLACEHOLDER_RE = re.compile(r"\{([a-z_]+)\}")


# ---------------------------------------------------------------------------
# Prompt files
# ---------------------------------------------------------------------------

@lru_cache(maxsize=64)
def load_prompt_text(name: str) -> str:
    """Read a shipped prompt by name (``hyde_v1``) or a prompt file by path."""
    path = Path(name)
    if not path.is_file():
        path = config.PROMPTS_DIR / f"{name}.txt"
    if not path.is_file():
        raise TemplateError(f"prompt '{name}' not found (looked in {config.PROMPTS_DIR})")
    return path.read_text(encoding="utf-8").rstrip("\n")


def fill_placeholders(template: str, **values: str) -> str:
    """Substitute ``{name}`` tokens in one pass.

    Text that is substituted in is never scanned again, so a passage that
    happens to contain ``{query}`` stays as written.  Unknown tokens are left
    untouched.
    """
    def _sub(m: re.Match) -> str:
        key = m.group(1)
        return values[key] if key in values else m.group(0)

    return _PLACEHOLDER_RE.sub(_sub, template)


@dataclass(frozen=True)
class PromptTemplate:
    name: str
    text: str

    def __post_init__(self):
        problems = []
        for slot in ("context", "query"):
            count = self.text.count("{" + slot + "}")
            if count != 1:
                problems.append(f"'{{{slot}}}' must appear exactly once (found {count})")
        if problems:
            raise TemplateError(f"invalid prompt template '{self.name}'", problems)

    @classmethod
    def load(cls, name: str = DEFAULT_QA_TEMPLATE) -> "PromptTemplate":
        return cls(name=name, text=load_prompt_text(name))

    def render(self, context: str, query: str) -> str:
        return fill_placeholders(self.text, context=context, query=query)


# ---------------------------------------------------------------------------
# Prompt makers
# ---------------------------------------------------------------------------

def _check_budget(passages: Sequence[str], top_k: int | None) -> None:
    if top_k is not None and len(passages) > top_k:
        raise PreconditionError(f"{len(passages)} passages exceed the prompt budget of {top_k}")


def make_prompt_fstring(
    template: PromptTemplate,
    passages: Sequence[str],
    query: str,
    top_k: int | None = None,
) -> str:
    """*passages* are texts in relevance order (rank 1 first)."""
    _check_budget(passages, top_k)
    return template.render(PASSAGE_SEPARATOR.join(passages), query)


def make_prompt_long_context_reorder(
    template: PromptTemplate,
    passages: Sequence[str],
    query: str,
    top_k: int | None = None,
) -> str:
    _check_budget(passages, top_k)
    ordered = list(passages)
    if ordered:
        ordered.append(ordered[0])
    return template.render(PASSAGE_SEPARATOR.join(ordered), query)


PROMPT_MAKERS = {
    "fstring": make_prompt_fstring,
    "long_context_reorder": make_prompt_long_context_reorder,
}


# ---------------------------------------------------------------------------
# Generation
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Generation:
    answer: str
    model_name: str
    temperature: float
    seconds: float


def generate(prompt: str, client: BaseLLMClient, llm: LLMConfig) -> Generation:
    if not prompt or not prompt.strip():
        raise PreconditionError("generation prompt must be non-empty")
    start = time.perf_counter()
    answer = client.chat(prompt, llm)
    return Generation(
        answer=answer.strip(),
        model_name=llm.model_name,
        temperature=llm.temperature,
        seconds=time.perf_counter() - start,
    )
