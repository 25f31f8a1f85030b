"""Static result displays: one SVG chart per suite and a markdown summary."""

from __future__ import annotations

import csv
from collections import defaultdict
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .errors import MissingFileError  # noqa: E402

METRIC_LABELS = {"acc": "ACC", "bca": "BCA", "weighted_f1": "Weighted F1"}
SUITE_TITLES = {
    "cv": "Cross-patient validation",
    "loss_type": "Distillation strategy",
    "ensemble": "Ensemble strategy",
    "block_pattern": "Block pattern",
    "temperature": "Distillation temperature",
    "branches": "Number of branches",
}
# fixed salt and no timestamp keep SVG output byte-stable
SVG_RC = {"svg.hashsalt": "mbmd-report", "svg.fonttype": "path"}


def read_aggregates(results_dir: str | Path) -> dict[str, list[dict]]:
    """Rows of every ``aggregate*.csv`` under ``results_dir``, grouped by suite."""
    results_dir = Path(results_dir)
    paths = sorted(results_dir.glob("aggregate*.csv")) if results_dir.is_dir() else []
    if not paths:
        raise MissingFileError(f"no aggregate*.csv files in {results_dir}")
    suites: dict[str, list[dict]] = defaultdict(list)
    for path in paths:
        with open(path, newline="") as fh:
            for row in csv.DictReader(fh):
                suites[row["suite"]].append(row)
    return dict(suites)


def chart_figure(suite: str, rows: list[dict]):
    """Line chart over T for the temperature suite, grouped bars otherwise."""
    variants = [r["variant"] for r in rows]
    fig, ax = plt.subplots(figsize=(6.4, 3.6))
    if suite == "temperature":
        xs = [float(v.split("=")[-1]) for v in variants]
        for m, label in METRIC_LABELS.items():
            ax.errorbar(xs, [float(r[f"{m}_mean"]) for r in rows], yerr=[float(r[f"{m}_std"]) for r in rows], marker="o", capsize=3, label=label)
        ax.set_xlabel("T")
        ax.set_xticks(xs)
    else:
        width = 0.8 / len(METRIC_LABELS)
        for i, (m, label) in enumerate(METRIC_LABELS.items()):
            pos = [j + (i - 1) * width for j in range(len(rows))]
            ax.bar(pos, [float(r[f"{m}_mean"]) for r in rows], width, yerr=[float(r[f"{m}_std"]) for r in rows], capsize=2, label=label)
        ax.set_xticks(range(len(rows)))
        ax.set_xticklabels(variants, rotation=20, ha="right", fontsize=8)
    ax.set_ylim(0, 1.05)
    ax.set_ylabel("score")
    ax.set_title(SUITE_TITLES.get(suite, suite))
    ax.legend(fontsize=8, loc="lower right")
    fig.tight_layout()
    return fig


def _chart(suite: str, rows: list[dict], path: Path) -> None:
    with plt.rc_context(SVG_RC):
        fig = chart_figure(suite, rows)
        fig.savefig(path, format="svg", metadata={"Date": None})
        plt.close(fig)


def markdown_table(suites: dict[str, list[dict]]) -> str:
    lines = ["# Results", ""]
    for suite, rows in suites.items():
        lines += [f"## {SUITE_TITLES.get(suite, suite)}", "", "| Variant | n | ACC | BCA | Weighted F1 |", "|---|---|---|---|---|"]
        for r in rows:
            cells = [f"{float(r[f'{m}_mean']):.4f} ± {float(r[f'{m}_std']):.4f}" for m in METRIC_LABELS]
            lines.append(f"| {r['variant']} | {r['n']} | " + " | ".join(cells) + " |")
        lines.append("")
    return "\n".join(lines)


def build_report(results_dir: str | Path, out_dir: str | Path | None = None) -> list[Path]:
    """Write ``<suite>.svg`` per suite and ``report.md``; returns the written paths."""
    suites = read_aggregates(results_dir)
    out_dir = Path(out_dir or results_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for suite, rows in suites.items():
        path = out_dir / f"{suite}.svg"
        _chart(suite, rows, path)
        written.append(path)
    md = out_dir / "report.md"
    md.write_text(markdown_table(suites))
    written.append(md)
    return written
