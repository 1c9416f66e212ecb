"""Shared fixtures: the bundled toy data set, mock clients, small stores."""

from __future__ import annotations

from pathlib import Path

import pytest

from src.corpus import Passage, PassageStore, load_corpus, load_qa
from src.llm_client import LLMConfig, MockLLMClient

TOY_DIR = Path(__file__).resolve().parent.parent / "data" / "toy"


def linked_passages(doc_id: str, texts: list[str]) -> list[Passage]:
    ids = [f"{doc_id}-{i:04d}" for i in range(len(texts))]
    return [
        Passage(
            passage_id=ids[i],
            doc_id=doc_id,
            position=i,
            text=text,
            prev_id=ids[i - 1] if i > 0 else None,
            next_id=ids[i + 1] if i + 1 < len(ids) else None,
        )
        for i, text in enumerate(texts)
    ]


@pytest.fixture
def make_store():
    """``make_store({"doc": ["text 0", "text 1"]})`` -> linked PassageStore."""
    def _make(docs: dict[str, list[str]]) -> PassageStore:
        passages = []
        for doc_id, texts in docs.items():
            passages += linked_passages(doc_id, texts)
        return PassageStore(passages)
    return _make


@pytest.fixture(scope="session")
def toy_store() -> PassageStore:
    return load_corpus(TOY_DIR / "corpus.jsonl")


@pytest.fixture(scope="session")
def toy_qa():
    return load_qa(TOY_DIR / "qa.jsonl")


@pytest.fixture
def mock_client() -> MockLLMClient:
    return MockLLMClient()


@pytest.fixture
def llm() -> LLMConfig:
    return LLMConfig(model_name="mock-chat")
