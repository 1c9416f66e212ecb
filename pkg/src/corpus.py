"""Passage store: chunking documents into linked passages, corpus and QA files.

Corpus file: one JSON object per line::

    {"passage_id": "...", "doc_id": "...", "position": 0, "text": "...",
     "prev_id": null, "next_id": "...", "metadata": {}}

QA file: one JSON object per line::

    {"qid": "...", "question": "...", "ground_truth_answer": "...",
     "gold_passage_ids": ["..."]}
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Iterator

import config
from src.errors import ConfigError, CorpusFormatError, PreconditionError
from src.text import get_tokenizer

logger = logging.getLogger(__name__)

NEIGHBOR_MODES = ("prev", "next", "both")


@dataclass(frozen=True)
class Passage:
    passage_id: str
    doc_id: str
    position: int
    text: str
    prev_id: str | None = None
    next_id: str | None = None
    metadata: dict[str, str] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class QARecord:
    qid: str
    question: str
    ground_truth_answer: str
    gold_passage_ids: tuple[str, ...] = ()

    def to_dict(self) -> dict:
        data = asdict(self)
        data["gold_passage_ids"] = list(self.gold_passage_ids)
        return data


def make_passage_id(doc_id: str, position: int) -> str:
    """Stable id; zero padding keeps lexicographic order equal to position order."""
    return f"{doc_id}-{position:04d}"


# ---------------------------------------------------------------------------
# Chunking
# ---------------------------------------------------------------------------

def chunk_document(
    doc_id: str,
    text: str,
    chunk_size: int = config.CHUNK_SIZE,
    overlap: int = config.CHUNK_OVERLAP,
    tokenizer: str = config.CHUNK_TOKENIZER,
    metadata: dict[str, str] | None = None,
) -> list[Passage]:
    """Cut *text* into overlapping token windows linked via prev/next ids.

    Windows start every ``chunk_size - overlap`` tokens; the sweep stops at
    the first window that reaches the end of the document, so the last
    window may be shorter.
    """
    if chunk_size <= 0:
        raise ConfigError(f"chunk_size must be positive, got {chunk_size}")
    if overlap < 0 or overlap >= chunk_size:
        raise ConfigError(f"overlap must be in [0, chunk_size), got overlap={overlap} chunk_size={chunk_size}")
    if not text or not text.strip():
        raise PreconditionError(f"document {doc_id!r} is empty")

    tok = get_tokenizer(tokenizer)
    tokens = tok.encode(text)
    stride = chunk_size - overlap

    windows: list[tuple[int, int]] = []
    start = 0
    while start < len(tokens):
        end = min(start + chunk_size, len(tokens))
        windows.append((start, end))
        if end >= len(tokens):
            break
        start += stride

    ids = [make_passage_id(doc_id, i) for i in range(len(windows))]
    passages = []
    for i, (start, end) in enumerate(windows):
        meta = dict(metadata or {})
        meta.update({"start_token": str(start), "end_token": str(end), "tokenizer": tok.name})
        passages.append(Passage(
            passage_id=ids[i],
            doc_id=doc_id,
            position=i,
            text=tok.decode(tokens[start:end]),
            prev_id=ids[i - 1] if i > 0 else None,
            next_id=ids[i + 1] if i + 1 < len(ids) else None,
            metadata=meta,
        ))
    return passages


# ---------------------------------------------------------------------------
# Passage store
# ---------------------------------------------------------------------------

class PassageStore:
    """Immutable collection of passages, addressable by id."""

    def __init__(self, passages: Iterable[Passage] = ()):
        self._by_id: dict[str, Passage] = {}
        for p in passages:
            if p.passage_id in self._by_id:
                raise CorpusFormatError(f"duplicate passage_id {p.passage_id!r}")
            self._by_id[p.passage_id] = p
        self._check_links()

    def _check_links(self) -> None:
        for p in self._by_id.values():
            for link, back in ((p.next_id, "prev_id"), (p.prev_id, "next_id")):
                other = self._by_id.get(link) if link else None
                if other is None:
                    continue
                if getattr(other, back) != p.passage_id:
                    raise CorpusFormatError(
                        f"asymmetric link between {p.passage_id!r} and {other.passage_id!r}"
                    )
                if other.doc_id != p.doc_id:
                    raise CorpusFormatError(
                        f"link crosses documents: {p.passage_id!r} -> {other.passage_id!r}"
                    )
            nxt = self._by_id.get(p.next_id) if p.next_id else None
            if nxt is not None and nxt.position <= p.position:
                raise CorpusFormatError(
                    f"position must increase along links: {p.passage_id!r} -> {nxt.passage_id!r}"
                )

    def __len__(self) -> int:
        return len(self._by_id)

    def __iter__(self) -> Iterator[Passage]:
        return iter(self._by_id.values())

    def __contains__(self, passage_id: str) -> bool:
        return passage_id in self._by_id

    def __getitem__(self, passage_id: str) -> Passage:
        return self._by_id[passage_id]

    def __eq__(self, other: object) -> bool:
        return isinstance(other, PassageStore) and list(self) == list(other)

    def get(self, passage_id: str) -> Passage | None:
        return self._by_id.get(passage_id)

    @property
    def ids(self) -> list[str]:
        return list(self._by_id)

    def neighbors(self, passage_id: str, mode: str = "both") -> list[str]:
        """Neighbor ids of *passage_id* named by its links (may be dangling)."""
        if mode not in NEIGHBOR_MODES:
            raise ConfigError(f"mode must be one of {NEIGHBOR_MODES}, got {mode!r}")
        p = self._by_id[passage_id]
        out = []
        if mode in ("prev", "both") and p.prev_id:
            out.append(p.prev_id)
        if mode in ("next", "both") and p.next_id:
            out.append(p.next_id)
        return out

    def documents(self) -> dict[str, list[Passage]]:
        """Passages grouped by document, in position order."""
        docs: dict[str, list[Passage]] = {}
        for p in self._by_id.values():
            docs.setdefault(p.doc_id, []).append(p)
        return {d: sorted(ps, key=lambda p: p.position) for d, ps in docs.items()}


# ---------------------------------------------------------------------------
# File I/O
# ---------------------------------------------------------------------------

def _read_jsonl(path: Path | str) -> Iterator[tuple[int, dict]]:
    path = Path(path)
    try:
        fh = path.open(encoding="utf-8")
    except OSError as exc:
        raise CorpusFormatError(f"cannot read {path}: {exc.strerror}") from exc
    with fh:
        for line_number, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except ValueError as exc:
                raise CorpusFormatError(f"invalid JSON ({exc.msg})", line_number) from exc
            if not isinstance(obj, dict):
                raise CorpusFormatError("expected a JSON object", line_number)
            yield line_number, obj


def _write_jsonl(path: Path | str, rows: Iterable[dict]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as fh:
        for row in rows:
            fh.write(json.dumps(row, ensure_ascii=False, sort_keys=True) + "\n")


def _passage_from_dict(obj: dict, line_number: int) -> Passage:
    try:
        position = obj["position"]
        if not isinstance(position, int) or isinstance(position, bool) or position < 0:
            raise CorpusFormatError(f"position must be a non-negative integer, got {position!r}", line_number)
        text = obj["text"]
        if not isinstance(text, str) or not text.strip():
            raise CorpusFormatError(f"passage {obj.get('passage_id')!r} has empty text", line_number)
        metadata = obj.get("metadata") or {}
        return Passage(
            passage_id=str(obj["passage_id"]),
            doc_id=str(obj["doc_id"]),
            position=position,
            text=text,
            prev_id=obj.get("prev_id"),
            next_id=obj.get("next_id"),
            metadata={str(k): str(v) for k, v in metadata.items()},
        )
    except KeyError as exc:
        raise CorpusFormatError(f"missing key {exc.args[0]!r}", line_number) from exc


def load_corpus(path: Path | str) -> PassageStore:
    """Load a corpus JSONL file; an empty file yields an empty store."""
    passages: list[Passage] = []
    seen: set[str] = set()
    for line_number, obj in _read_jsonl(path):
        passage = _passage_from_dict(obj, line_number)
        if passage.passage_id in seen:
            raise CorpusFormatError(f"duplicate passage_id {passage.passage_id!r}", line_number)
        seen.add(passage.passage_id)
        passages.append(passage)
    store = PassageStore(passages)
    logger.debug("Loaded %d passages from %s", len(store), path)
    return store


def save_corpus(store: PassageStore | Iterable[Passage], path: Path | str) -> None:
    _write_jsonl(path, (p.to_dict() for p in store))


def load_qa(path: Path | str) -> list[QARecord]:
    """Load QA records; duplicate qids and empty questions/answers are rejected."""
    records: list[QARecord] = []
    seen: set[str] = set()
    for line_number, obj in _read_jsonl(path):
        try:
            qid = str(obj["qid"])
            question = obj["question"]
            answer = obj["ground_truth_answer"]
        except KeyError as exc:
            raise CorpusFormatError(f"missing key {exc.args[0]!r}", line_number) from exc
        if qid in seen:
            raise CorpusFormatError(f"duplicate qid {qid!r}", line_number)
        if not isinstance(question, str) or not question.strip():
            raise CorpusFormatError(f"qid {qid!r} has an empty question", line_number)
        if not isinstance(answer, str) or not answer.strip():
            raise CorpusFormatError(f"qid {qid!r} has an empty ground_truth_answer", line_number)
        gold = obj.get("gold_passage_ids") or []
        if not isinstance(gold, list):
            raise CorpusFormatError(f"qid {qid!r}: gold_passage_ids must be a list", line_number)
        seen.add(qid)
        records.append(QARecord(qid, question, answer, tuple(str(g) for g in gold)))
    return records


def save_qa(records: Iterable[QARecord], path: Path | str) -> None:
    _write_jsonl(path, (r.to_dict() for r in records))
