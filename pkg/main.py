"""RAG Pipeline Optimizer - greedy node-by-node module selection.

Chunks a document collection into a passage corpus, then sweeps the RAG
nodes (query expansion, retrieval, passage augmenter, reranker, prompt
maker, generator) in order, evaluating every candidate module of a node
against a QA set and forwarding the winner's outputs to the next node.

Usage:
    python main.py ingest docs/ --corpus data/corpus.jsonl
    python main.py optimize --config configs/smoke.yaml --corpus data/toy/corpus.jsonl \\
        --qa data/toy/qa.jsonl --mock-llm
    python main.py report --out-dir runs/latest
    python main.py query "Who proposed BM25?" --out-dir runs/latest --mock-llm
"""

import argparse
import logging
import sys
from pathlib import Path

if sys.stdout and hasattr(sys.stdout, "reconfigure"):
    sys.stdout.reconfigure(encoding="utf-8", errors="replace")
if sys.stderr and hasattr(sys.stderr, "reconfigure"):
    sys.stderr.reconfigure(encoding="utf-8", errors="replace")

import config
from src.colors import cyan, green, yellow
from src.errors import ConfigError, RagOptError

logger = logging.getLogger("ragopt")

INGEST_SUFFIXES = {".txt", ".md"}


def _configure_logging(verbose: bool) -> None:
    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.INFO,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
        datefmt="%H:%M:%S",
    )
    # Keep third-party HTTP chatter out of INFO output
    logging.getLogger("urllib3").setLevel(logging.WARNING)


def _banner(title: str, detail: str | None = None) -> None:
    print()
    print(cyan("=" * 70))
    print(cyan(f"  {title}"))
    if detail:
        print(f"  {detail}")
    print(cyan("=" * 70))
    print()


def _client(args: argparse.Namespace):
    from src.llm_client import build_client
    if args.mock_llm:
        return build_client(mock=True)
    return build_client(mock=False, cache_path=config.CACHE_PATH)


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def _ingest_files(source: Path) -> list[Path]:
    if source.is_file():
        return [source]
    if not source.is_dir():
        raise ConfigError(f"input {source} does not exist")
    return sorted(p for p in source.rglob("*") if p.is_file() and p.suffix.lower() in INGEST_SUFFIXES)


def _doc_id(path: Path, source: Path, taken: set[str]) -> str:
    """File path relative to the ingest root, without suffix (`a/notes`).

    The suffix stays when `notes.txt` and `notes.md` share a directory.
    """
    if not source.is_dir():
        return path.stem
    relative = path.relative_to(source)
    doc_id = relative.with_suffix("").as_posix()
    return relative.as_posix() if doc_id in taken else doc_id


def cmd_ingest(args: argparse.Namespace) -> int:
    """Chunk every .txt / .md file under the input into one corpus file."""
    from src.corpus import PassageStore, chunk_document, save_corpus

    if args.chunk_size <= 0 or args.overlap < 0 or args.overlap >= args.chunk_size:
        raise ConfigError(
            f"--overlap must be in [0, --chunk-size); got overlap={args.overlap} chunk_size={args.chunk_size}"
        )
    out = Path(args.corpus)
    source = Path(args.input)
    files = _ingest_files(source)
    if not files:
        print(yellow(f"  Warning: no .txt or .md files found in {args.input}"))

    passages = []
    doc_ids: set[str] = set()
    errors = 0
    for path in files:
        try:
            text = path.read_text(encoding="utf-8")
        except (OSError, UnicodeDecodeError) as exc:
            print(f"  ERROR: cannot read {path}: {exc}")
            errors += 1
            continue
        if not text.strip():
            print(yellow(f"  Warning: {path} is empty, skipped"))
            continue
        doc_id = _doc_id(path, source, doc_ids)
        doc_ids.add(doc_id)
        chunks = chunk_document(
            doc_id, text,
            chunk_size=args.chunk_size, overlap=args.overlap, tokenizer=args.tokenizer,
            metadata={"source": str(path)},
        )
        logger.debug("%s: %d passages", path, len(chunks))
        passages.extend(chunks)

    save_corpus(PassageStore(passages), out)
    print(f"  Wrote {len(passages)} passages from {len(files) - errors} documents to {out}")
    return 1 if errors else 0


def cmd_optimize(args: argparse.Namespace) -> int:
    from src.corpus import load_corpus, load_qa
    from src.errors import NodeFailure
    from src.optimizer import run_optimization
    from src.pipeline_config import load_pipeline_config
    from src.report import format_report

    cfg = load_pipeline_config(args.config)
    store = load_corpus(args.corpus)
    qa = load_qa(args.qa)
    out_dir = Path(args.out_dir)

    _banner(
        "RAG PIPELINE OPTIMIZER - Greedy Node Sweep",
        f"Corpus: {len(store)} passages | QA: {len(qa)} queries | "
        f"Candidates: {sum(len(n.candidates) for n in cfg.nodes)} | LLM: {'mock' if args.mock_llm else 'live'}",
    )

    try:
        summary = run_optimization(
            store, qa, cfg, _client(args),
            out_dir=out_dir, workers=args.workers, seed=args.seed, resume=not args.no_resume,
        )
    except NodeFailure as exc:
        print(f"ERROR: {exc}")
        print(f"  Partial artifacts written to {out_dir}")
        return 1

    print(format_report(out_dir))
    print()
    print(green(f"  Best pipeline written to {out_dir / 'best_pipeline.yaml'}"))
    print(f"  Total time: {summary.total_seconds:.1f}s")
    return 0


def cmd_report(args: argparse.Namespace) -> int:
    from src.report import format_report

    print(format_report(args.out_dir))
    return 0


def cmd_query(args: argparse.Namespace) -> int:
    from src.corpus import load_corpus
    from src.optimizer import PipelineContext, run_pipeline
    from src.pipeline_config import load_pipeline_config
    from src.report import format_answer

    pipeline_path = Path(args.pipeline) if args.pipeline else Path(args.out_dir) / "best_pipeline.yaml"
    if not pipeline_path.exists():
        raise RagOptError(f"no pipeline config at {pipeline_path}; run optimize first or pass --pipeline")
    pipeline = load_pipeline_config(pipeline_path)
    store = load_corpus(args.corpus)
    index_dir = Path(args.out_dir) / "indexes" if args.out_dir else None
    ctx = PipelineContext(store, _client(args), pipeline.llm, judge=pipeline.judge, index_dir=index_dir)
    answer = run_pipeline(pipeline, args.question, ctx)
    print(format_answer(args.question, answer))
    return 0


# ---------------------------------------------------------------------------
# Argument parsing
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--mock-llm", action="store_true",
                        help="Use deterministic offline stand-ins for every model endpoint")
    common.add_argument("--verbose", "-v", action="store_true", help="Debug logging")
    common.add_argument("--out-dir", default=str(config.OUTPUT_DIR),
                        help=f"Run artifact directory (default: {config.OUTPUT_DIR})")

    parser = argparse.ArgumentParser(
        description="Greedy RAG pipeline optimizer",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="""
Examples:
  python main.py ingest papers/ --corpus data/corpus.jsonl
  python main.py optimize --config configs/full_grid.yaml --corpus data/corpus.jsonl --qa data/qa.jsonl
  python main.py optimize --config configs/smoke.yaml --corpus data/toy/corpus.jsonl \\
      --qa data/toy/qa.jsonl --mock-llm --out-dir runs/smoke
  python main.py report --out-dir runs/smoke
  python main.py query "What does prev-next augmentation add?" --corpus data/toy/corpus.jsonl \\
      --out-dir runs/smoke --mock-llm
        """,
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", parents=[common], help="Chunk documents into a passage corpus")
    p.add_argument("input", help="Directory of .txt/.md files, or a single file")
    p.add_argument("--corpus", required=True, help="Output corpus JSONL path")
    p.add_argument("--chunk-size", type=int, default=config.CHUNK_SIZE,
                   help=f"Tokens per passage (default: {config.CHUNK_SIZE})")
    p.add_argument("--overlap", type=int, default=config.CHUNK_OVERLAP,
                   help=f"Tokens shared by consecutive passages (default: {config.CHUNK_OVERLAP})")
    p.add_argument("--tokenizer", default=config.CHUNK_TOKENIZER,
                   help=f"'whitespace' or a Hugging Face tokenizer name (default: {config.CHUNK_TOKENIZER})")
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("optimize", parents=[common], help="Run the greedy node sweep")
    p.add_argument("--config", required=True, help="Pipeline config YAML")
    p.add_argument("--corpus", required=True, help="Corpus JSONL")
    p.add_argument("--qa", required=True, help="QA JSONL")
    p.add_argument("--workers", type=int, default=config.WORKERS,
                   help=f"Concurrent per-query evaluations (default: {config.WORKERS})")
    p.add_argument("--seed", type=int, default=None,
                   help="Shuffle tie-break order with this seed (default: declaration order)")
    p.add_argument("--no-resume", action="store_true", help="Re-evaluate nodes with matching artifacts")
    p.set_defaults(func=cmd_optimize)

    p = sub.add_parser("report", parents=[common], help="Print the tables of a finished run")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("query", parents=[common], help="Answer one question with the winning pipeline")
    p.add_argument("question")
    p.add_argument("--corpus", required=True, help="Corpus JSONL")
    p.add_argument("--pipeline", default=None,
                   help="Pipeline YAML (default: <out-dir>/best_pipeline.yaml)")
    p.set_defaults(func=cmd_query)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    _configure_logging(args.verbose)

    if getattr(args, "workers", 1) < 1:
        parser.error("--workers must be >= 1")

    # Override config if args provided
    config.OUTPUT_DIR = Path(args.out_dir)
    if args.command == "optimize":
        config.WORKERS = args.workers
    if args.command == "ingest":
        config.CHUNK_SIZE, config.CHUNK_OVERLAP = args.chunk_size, args.overlap
        config.CHUNK_TOKENIZER = args.tokenizer

    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"ERROR: {exc}")
        return 2
    except RagOptError as exc:
        print(f"ERROR: {exc}")
        return 1


if __name__ == "__main__":
    sys.exit(main())
