"""Console rendering of optimization runs and single-query answers.

Reads the artifacts an ``optimize`` run leaves on disk (``summary.json`` and
``<node>/summary.csv``) and prints one table per node, the winner starred.
"""

from __future__ import annotations

import json
import logging
from pathlib import Path

import pandas as pd
from tabulate import tabulate

from src.colors import bold, colorize_candidate, colorize_failures, cyan, yellow
from src.errors import RagOptError
from src.pipeline_config import NODE_ORDER

logger = logging.getLogger(__name__)

WINNER_MARK = "*"

# Columns of summary.csv that are not metric means.
_FIXED_COLUMNS = {
    "module", "module_name", "params", "value", "mean_elapsed_seconds",
    "queries", "failed_queries", "disqualified", "reason", "selected",
}


def load_node_tables(run_dir: Path | str) -> dict[str, pd.DataFrame]:
    """Per-node candidate tables of a run, in sweep order."""
    run_dir = Path(run_dir)
    tables = {}
    for node_name in NODE_ORDER:
        path = run_dir / node_name / "summary.csv"
        if path.exists():
            tables[node_name] = pd.read_csv(path)
    return tables


def load_run(run_dir: Path | str) -> tuple[dict, dict[str, pd.DataFrame]]:
    run_dir = Path(run_dir)
    if not run_dir.is_dir():
        raise RagOptError(f"run directory {run_dir} does not exist")
    tables = load_node_tables(run_dir)
    summary_path = run_dir / "summary.json"
    if not tables and not summary_path.exists():
        raise RagOptError(f"no optimization artifacts in {run_dir}")
    summary = json.loads(summary_path.read_text(encoding="utf-8")) if summary_path.exists() else {}
    return summary, tables


def _fmt(value, digits: int = 4) -> str:
    if value is None or (isinstance(value, float) and pd.isna(value)):
        return "-"
    if isinstance(value, float):
        return f"{value:.{digits}f}"
    return str(value)


def format_node_table(node_name: str, df: pd.DataFrame) -> str:
    """One candidate per row; the winner starred."""
    metric_cols = [c for c in df.columns if c not in _FIXED_COLUMNS]
    rows = []
    for _, row in df.iterrows():
        selected = bool(row["selected"])
        disqualified = bool(row["disqualified"])
        cells = [
            WINNER_MARK if selected else "",
            colorize_candidate(str(row["module"]), selected, disqualified),
        ]
        cells += [_fmt(row[c]) for c in metric_cols]
        cells += [
            _fmt(row["value"]),
            _fmt(row["mean_elapsed_seconds"], 6),
            colorize_failures(int(row["failed_queries"]), int(row.get("queries", 0) or 0)),
        ]
        rows.append(cells)

    lines = [
        cyan("=" * 70),
        cyan(f"  {node_name.upper().replace('_', ' ')}"),
        cyan("=" * 70),
        "",
        tabulate(
            rows,
            headers=["", "Module", *metric_cols, "Value", "Time (s)", "Failed"],
            tablefmt="simple",
            numalign="right",
        ),
    ]
    notes = df[df["reason"].notna() & (df["reason"].astype(str) != "")]
    for _, row in notes.iterrows():
        lines.append(yellow(f"  {row['module']}: {row['reason']}"))
    return "\n".join(lines)


def format_report(run_dir: Path | str) -> str:
    summary, tables = load_run(run_dir)
    sections = [format_node_table(node_name, df) for node_name, df in tables.items()]

    if summary:
        lines = ["", cyan("=" * 70), cyan("  BEST PIPELINE"), cyan("=" * 70), ""]
        for node in summary.get("nodes", []):
            tag = "" if node["evaluated"] else "  (default, not evaluated)"
            lines.append(f"  {node['node_name']:<20} {bold(node['label'])}{tag}")
        if summary.get("final_metrics"):
            lines.append("")
            lines.append("  Final metrics: " + ", ".join(
                f"{k}={_fmt(v)}" for k, v in summary["final_metrics"].items()
            ))
        if summary.get("status") == "failed":
            lines.append("")
            lines.append(yellow(f"  Run stopped at node '{summary.get('failed_node')}'"))
        sections.append("\n".join(lines))
    return "\n\n".join(sections)


def format_answer(question: str, answer) -> str:
    """``answer`` is a ``PipelineAnswer``."""
    lines = [
        cyan("=" * 70),
        cyan("  QUERY"),
        cyan("=" * 70),
        f"\n  Question: {question}",
        f"  Passages: {', '.join(answer.passage_ids) if answer.passage_ids else '-'}",
    ]
    if answer.empty_context:
        lines.append(yellow("  Warning: no passages retrieved; answer generated from an empty context"))
    lines.append(f"\n{answer.answer}")
    return "\n".join(lines)
