from __future__ import annotations

from pathlib import Path

import pytest

import config
import main
from src.corpus import load_corpus
from src.report import WINNER_MARK

ROOT = Path(__file__).resolve().parent.parent
TOY_CORPUS = str(ROOT / "data" / "toy" / "corpus.jsonl")
TOY_QA = str(ROOT / "data" / "toy" / "qa.jsonl")
SMOKE = str(ROOT / "configs" / "smoke.yaml")


@pytest.fixture(autouse=True)
def _restore_config(monkeypatch):
    # main() writes CLI overrides into the config module
    for name in ("OUTPUT_DIR", "WORKERS", "CHUNK_SIZE", "CHUNK_OVERLAP", "CHUNK_TOKENIZER"):
        monkeypatch.setattr(config, name, getattr(config, name))


@pytest.fixture(scope="module")
def smoke_run(tmp_path_factory) -> Path:
    out = tmp_path_factory.mktemp("run")
    with pytest.MonkeyPatch.context() as mp:
        mp.setattr(config, "OUTPUT_DIR", config.OUTPUT_DIR)
        mp.setattr(config, "WORKERS", config.WORKERS)
        code = main.main([
            "optimize", "--config", SMOKE, "--corpus", TOY_CORPUS, "--qa", TOY_QA,
            "--mock-llm", "--workers", "2", "--out-dir", str(out),
        ])
    assert code == 0
    return out


def test_ingest_chunks_with_overlap(tmp_path):
    docs = tmp_path / "docs"
    docs.mkdir()
    (docs / "essay.txt").write_text(" ".join(f"w{i}" for i in range(1000)), encoding="utf-8")
    corpus = tmp_path / "corpus.jsonl"

    assert main.main(["ingest", str(docs), "--corpus", str(corpus)]) == 0
    store = load_corpus(corpus)
    assert len(store) == 3
    assert [p.doc_id for p in store] == ["essay"] * 3
    assert store["essay-0001"].text.startswith("w462 ")


def test_ingest_keeps_same_named_files_apart(tmp_path):
    docs = tmp_path / "docs"
    for sub, word in (("a", "alpha"), ("b", "beta")):
        (docs / sub).mkdir(parents=True)
        (docs / sub / "notes.txt").write_text(f"{word} " * 20, encoding="utf-8")
    corpus = tmp_path / "corpus.jsonl"

    assert main.main(["ingest", str(docs), "--corpus", str(corpus)]) == 0
    store = load_corpus(corpus)
    assert {p.doc_id for p in store} == {"a/notes", "b/notes"}
    assert store["a/notes-0000"].text.startswith("alpha")
    assert store["b/notes-0000"].text.startswith("beta")


def test_ingest_empty_directory_warns(tmp_path, capsys):
    docs = tmp_path / "empty"
    docs.mkdir()
    assert main.main(["ingest", str(docs), "--corpus", str(tmp_path / "c.jsonl")]) == 0
    assert "Warning" in capsys.readouterr().out


def test_ingest_rejects_bad_overlap(tmp_path, capsys):
    docs = tmp_path / "docs"
    docs.mkdir()
    code = main.main(["ingest", str(docs), "--corpus", str(tmp_path / "c.jsonl"),
                      "--chunk-size", "10", "--overlap", "10"])
    assert code == 2
    assert "ERROR" in capsys.readouterr().out


def test_optimize_writes_artifacts(smoke_run):
    for name in ("summary.json", "run_info.json", "best_pipeline.yaml"):
        assert (smoke_run / name).exists()
    assert (smoke_run / "retrieval" / "scores.csv").exists()


def test_report_stars_one_row_per_node(smoke_run, capsys):
    capsys.readouterr()
    assert main.main(["report", "--out-dir", str(smoke_run)]) == 0
    out = capsys.readouterr().out
    starred = [line for line in out.splitlines() if line.startswith(WINNER_MARK)]
    assert len(starred) == 6
    assert "BEST PIPELINE" in out


def test_report_on_empty_directory(tmp_path):
    assert main.main(["report", "--out-dir", str(tmp_path)]) == 1


def test_query_uses_the_best_pipeline(smoke_run, capsys):
    capsys.readouterr()
    code = main.main(["query", "who kept the lighthouse lamp lit", "--corpus", TOY_CORPUS,
                      "--out-dir", str(smoke_run), "--mock-llm"])
    assert code == 0
    out = capsys.readouterr().out
    assert "Question: who kept the lighthouse lamp lit" in out
    assert "Passages: " in out


def test_query_without_a_run(tmp_path):
    assert main.main(["query", "anything", "--corpus", TOY_CORPUS, "--out-dir", str(tmp_path), "--mock-llm"]) == 1


def test_invalid_config_exits_2(tmp_path, capsys):
    cfg = tmp_path / "bad.yaml"
    cfg.write_text("nodes:\n  - node_name: retriever\n    candidates:\n      - module_name: bm25\n", encoding="utf-8")
    code = main.main(["optimize", "--config", str(cfg), "--corpus", TOY_CORPUS, "--qa", TOY_QA,
                      "--mock-llm", "--out-dir", str(tmp_path / "out")])
    assert code == 2
    assert "retriever" in capsys.readouterr().out


def test_missing_corpus_exits_1(tmp_path, capsys):
    code = main.main(["optimize", "--config", SMOKE, "--corpus", str(tmp_path / "absent.jsonl"),
                      "--qa", TOY_QA, "--mock-llm", "--out-dir", str(tmp_path / "out")])
    assert code == 1
    assert "cannot read" in capsys.readouterr().out


def test_missing_config_exits_2(tmp_path, capsys):
    code = main.main(["optimize", "--config", str(tmp_path / "absent.yaml"), "--corpus", TOY_CORPUS,
                      "--qa", TOY_QA, "--mock-llm", "--out-dir", str(tmp_path / "out")])
    assert code == 2
    assert "cannot read config" in capsys.readouterr().out


def test_workers_must_be_positive(tmp_path):
    with pytest.raises(SystemExit):
        main.main(["optimize", "--config", SMOKE, "--corpus", TOY_CORPUS, "--qa", TOY_QA,
                   "--workers", "0", "--out-dir", str(tmp_path)])
