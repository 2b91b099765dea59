"""Delimited summaries and matplotlib figures for merge/eval results.

Figures are written with stripped metadata and a fixed dpi so re-running a
pipeline over identical inputs reproduces identical bytes.
"""

from __future__ import annotations

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt

from .metrics import EvalReport, RetentionSummary

_SAVEFIG_KW = dict(dpi=110, metadata={"Software": None})


def write_retention_csv(summary: RetentionSummary, path) -> Path:
    path = Path(path)
    with open(path, "w", encoding="utf-8", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(
            [
                "row",
                "input_graph_count",
                "nodes_before",
                "nodes_after",
                "edges_before",
                "edges_after",
                "entity_retention_pct",
                "edge_retention_pct",
            ]
        )
        for index, row in enumerate(summary.rows):
            writer.writerow(
                [
                    index,
                    row["input_graph_count"],
                    row["nodes_before"],
                    row["nodes_after"],
                    row["edges_before"],
                    row["edges_after"],
                    f"{row['entity_retention_pct']:.3f}",
                    f"{row['edge_retention_pct']:.3f}",
                ]
            )
        writer.writerow([])
        writer.writerow(["mean", "", "", "", "", "", f"{summary.entity_mean:.3f}", f"{summary.edge_mean:.3f}"])
    return path


def render_retention_figure(summary: RetentionSummary, path) -> Path:
    """Histogram pair of entity/edge retention percentages."""
    path = Path(path)
    entity = [row["entity_retention_pct"] for row in summary.rows]
    edge = [row["edge_retention_pct"] for row in summary.rows]
    fig, axes = plt.subplots(1, 2, figsize=(9, 3.4))
    for ax, values, title, mean in (
        (axes[0], entity, "Entity retention", summary.entity_mean),
        (axes[1], edge, "Edge retention", summary.edge_mean),
    ):
        ax.hist(values, bins=min(20, max(5, len(values))), range=(0, 100),
                color="#4878a8", edgecolor="white")
        ax.axvline(mean, color="#c44e52", linestyle="--", linewidth=1.2,
                   label=f"pooled mean {mean:.3f}%")
        ax.set_title(title)
        ax.set_xlabel("retention (%)")
        ax.set_ylabel("techniques")
        ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, **_SAVEFIG_KW)
    plt.close(fig)
    return path


def write_eval_csv(report: EvalReport, path) -> Path:
    path = Path(path)
    with open(path, "w", encoding="utf-8", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(["scope", "tp", "fp", "fn", "precision", "recall", "f1"])
        writer.writerow(
            ["node", report.node_tp, report.node_fp, report.node_fn,
             f"{report.node_precision:.3f}", f"{report.node_recall:.3f}",
             f"{report.node_f1:.3f}"]
        )
        writer.writerow(
            ["edge", report.edge_tp, report.edge_fp, report.edge_fn,
             f"{report.edge_precision:.3f}", f"{report.edge_recall:.3f}",
             f"{report.edge_f1:.3f}"]
        )
        for kind, (fp, fn) in sorted(report.type_confusion.items()):
            writer.writerow([f"type:{kind}", "", fp, fn, "", "", ""])
    return path


def render_eval_figure(report: EvalReport, path) -> Path:
    """Grouped bars of precision/recall/F1 for nodes and edges."""
    path = Path(path)
    labels = ["precision", "recall", "f1"]
    node_vals = [report.node_precision, report.node_recall, report.node_f1]
    edge_vals = [report.edge_precision, report.edge_recall, report.edge_f1]
    x = range(len(labels))
    width = 0.38
    fig, ax = plt.subplots(figsize=(5.4, 3.4))
    ax.bar([i - width / 2 for i in x], node_vals, width, label="nodes", color="#4878a8")
    ax.bar([i + width / 2 for i in x], edge_vals, width, label="edges", color="#6aa36a")
    ax.set_xticks(list(x))
    ax.set_xticklabels(labels)
    ax.set_ylim(0, 1.05)
    for i, v in enumerate(node_vals):
        ax.text(i - width / 2, v + 0.02, f"{v:.3f}", ha="center", fontsize=8)
    for i, v in enumerate(edge_vals):
        ax.text(i + width / 2, v + 0.02, f"{v:.3f}", ha="center", fontsize=8)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, **_SAVEFIG_KW)
    plt.close(fig)
    return path
