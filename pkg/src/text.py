"""Tokenizers shared by chunking, BM25, the offline scorers and the metrics.

Two families live here:

* ``word_tokens``: lowercase alphanumeric terms, used wherever text is
  compared term-by-term (BM25, overlap scoring, ROUGE, METEOR, mock
  embeddings).
* ``Tokenizer`` implementations: reversible token streams used to cut
  documents into chunks.  ``whitespace`` is the default; ``gpt2`` loads the
  GPT-2 byte-pair vocabulary through ``transformers`` when it is installed.
"""

from __future__ import annotations

import logging
import re
from functools import lru_cache
from typing import Protocol

from src.errors import ConfigError

logger = logging.getLogger(__name__)

_WORD_RE = re.compile(r"\w+", re.UNICODE)


def word_tokens(text: str) -> list[str]:
    """Lowercase word tokens of *text* (punctuation dropped)."""
    return _WORD_RE.findall(text.lower())


class Tokenizer(Protocol):
    name: str

    def encode(self, text: str) -> list: ...

    def decode(self, tokens: list) -> str: ...


class WhitespaceTokenizer:
    """Split on runs of whitespace; chunks are re-joined with single spaces."""

    name = "whitespace"

    def encode(self, text: str) -> list[str]:
        return text.split()

    def decode(self, tokens: list) -> str:
        return " ".join(tokens)


class HuggingFaceTokenizer:
    """Byte-pair tokenizer loaded from a local vocabulary or a hub name."""

    def __init__(self, name_or_path: str = "gpt2"):
        try:
            from transformers import AutoTokenizer
        except ImportError as exc:  # optional dependency
            raise ConfigError(
                f"tokenizer '{name_or_path}' needs the optional 'transformers' package"
            ) from exc
        self.name = name_or_path
        self._tok = AutoTokenizer.from_pretrained(name_or_path)

    def encode(self, text: str) -> list[int]:
        return list(self._tok.encode(text, add_special_tokens=False))

    def decode(self, tokens: list) -> str:
        return self._tok.decode(tokens).strip()


@lru_cache(maxsize=8)
def get_tokenizer(name: str = "whitespace") -> Tokenizer:
    """Return the tokenizer registered under *name* (cached)."""
    if name == "whitespace":
        return WhitespaceTokenizer()
    logger.debug("Loading byte-pair tokenizer %s", name)
    return HuggingFaceTokenizer(name)
