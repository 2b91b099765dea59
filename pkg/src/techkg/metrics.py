"""Evaluation harness: graph-vs-truth precision/recall and retention stats.

Node matching is greedy maximum-similarity within each kind with
deterministic, order-independent tie-breaking, so swapping the generated and
truth graphs exactly swaps false positives and false negatives.  Generalized
labels (wildcard segments) match concrete ones through pattern semantics.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from decimal import Decimal, ROUND_HALF_UP

from .errors import EmptyInput
from .merge import MergeReport, retention_pct
from .model import TechniqueGraph, labels_compatible, normalize_label
from .align import pair_similarity


def _precision(tp: int, fp: int) -> float:
    return tp / (tp + fp) if (tp + fp) else 1.0


def _recall(tp: int, fn: int) -> float:
    return tp / (tp + fn) if (tp + fn) else 1.0


def _f1(precision: float, recall: float) -> float:
    return 2 * precision * recall / (precision + recall) if (precision + recall) else 0.0


@dataclass
class EvalReport:
    node_tp: int
    node_fp: int
    node_fn: int
    edge_tp: int
    edge_fp: int
    edge_fn: int
    type_confusion: dict[str, tuple[int, int]] = field(default_factory=dict)

    @property
    def node_precision(self) -> float:
        return _precision(self.node_tp, self.node_fp)

    @property
    def node_recall(self) -> float:
        return _recall(self.node_tp, self.node_fn)

    @property
    def node_f1(self) -> float:
        return _f1(self.node_precision, self.node_recall)

    @property
    def edge_precision(self) -> float:
        return _precision(self.edge_tp, self.edge_fp)

    @property
    def edge_recall(self) -> float:
        return _recall(self.edge_tp, self.edge_fn)

    @property
    def edge_f1(self) -> float:
        return _f1(self.edge_precision, self.edge_recall)

    def to_dict(self) -> dict:
        return {
            "node": {
                "tp": self.node_tp,
                "fp": self.node_fp,
                "fn": self.node_fn,
                "precision": self.node_precision,
                "recall": self.node_recall,
                "f1": self.node_f1,
            },
            "edge": {
                "tp": self.edge_tp,
                "fp": self.edge_fp,
                "fn": self.edge_fn,
                "precision": self.edge_precision,
                "recall": self.edge_recall,
                "f1": self.edge_f1,
            },
            "type_confusion": {
                kind: {"fp": fp, "fn": fn}
                for kind, (fp, fn) in sorted(self.type_confusion.items())
            },
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"


def _node_match(a, b) -> bool:
    if a.kind is not b.kind:
        return False
    return any(
        labels_compatible(la, lb) for la in a.all_labels() for lb in b.all_labels()
    )


def compare_graphs(generated: TechniqueGraph, truth: TechniqueGraph) -> EvalReport:
    """Count node and edge hits of a generated graph against ground truth.

    A node matches on equal kind plus an equal-normalized or
    pattern-compatible label; an edge matches when both endpoints matched
    and the relation sets intersect.
    """
    candidates = []
    for gid in sorted(generated.nodes):
        g_node = generated.nodes[gid]
        for tid in sorted(truth.nodes):
            t_node = truth.nodes[tid]
            if not _node_match(g_node, t_node):
                continue
            labels = sorted((normalize_label(g_node.label), normalize_label(t_node.label)))
            similarity = pair_similarity(g_node, t_node)
            candidates.append((-similarity, labels[0], labels[1], gid, tid))

    mapping: dict[int, int] = {}
    used_truth: set[int] = set()
    for _neg, _l0, _l1, gid, tid in sorted(candidates):
        if gid in mapping or tid in used_truth:
            continue
        mapping[gid] = tid
        used_truth.add(tid)

    node_tp = len(mapping)
    gen_unmatched = [n for nid, n in generated.nodes.items() if nid not in mapping]
    truth_unmatched = [n for nid, n in truth.nodes.items() if nid not in used_truth]

    confusion: dict[str, list[int]] = {}
    for node in gen_unmatched:
        confusion.setdefault(node.kind.value, [0, 0])[0] += 1
    for node in truth_unmatched:
        confusion.setdefault(node.kind.value, [0, 0])[1] += 1

    edge_tp = 0
    matched_truth_edges = set()
    for (src, dst), edge in generated.edges.items():
        t_src, t_dst = mapping.get(src), mapping.get(dst)
        if t_src is None or t_dst is None:
            continue
        t_edge = truth.edges.get((t_src, t_dst))
        if t_edge is not None and edge.relations & t_edge.relations:
            edge_tp += 1
            matched_truth_edges.add((t_src, t_dst))

    return EvalReport(
        node_tp=node_tp,
        node_fp=len(gen_unmatched),
        node_fn=len(truth_unmatched),
        edge_tp=edge_tp,
        edge_fp=len(generated.edges) - edge_tp,
        edge_fn=len(truth.edges) - len(matched_truth_edges),
        type_confusion={k: (fp, fn) for k, (fp, fn) in confusion.items()},
    )


# -- retention ----------------------------------------------------------------


@dataclass
class RetentionSummary:
    rows: list[dict]
    entity_mean: float
    edge_mean: float
    entity_min: float
    entity_max: float
    edge_min: float
    edge_max: float
    entity_row_mean: float
    edge_row_mean: float

    def to_dict(self) -> dict:
        return {
            "rows": self.rows,
            "entity": {
                "mean": self.entity_mean,
                "row_mean": self.entity_row_mean,
                "min": self.entity_min,
                "max": self.entity_max,
            },
            "edge": {
                "mean": self.edge_mean,
                "row_mean": self.edge_row_mean,
                "min": self.edge_min,
                "max": self.edge_max,
            },
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"


def _round3(value: Decimal) -> float:
    return float(value.quantize(Decimal("0.001"), rounding=ROUND_HALF_UP))


def retention_stats(reports: list[MergeReport]) -> RetentionSummary:
    """Distribution summary over merge reports.

    ``mean`` pools counts first (total after / total before), which is how
    the per-technique averages aggregate; ``row_mean`` is the plain average
    of the per-row percentages.  All values rounded half-up to 3 decimals.
    """
    if not reports:
        raise EmptyInput("retention_stats needs at least one merge report")
    rows = []
    for report in reports:
        rows.append(
            {
                "input_graph_count": report.input_graph_count,
                "nodes_before": report.nodes_before,
                "nodes_after": report.nodes_after,
                "edges_before": report.edges_before,
                "edges_after": report.edges_after,
                "entity_retention_pct": report.entity_retention_pct,
                "edge_retention_pct": report.edge_retention_pct,
            }
        )
    entity_pcts = [r.entity_retention_pct for r in reports]
    edge_pcts = [r.edge_retention_pct for r in reports]
    return RetentionSummary(
        rows=rows,
        entity_mean=retention_pct(
            sum(r.nodes_after for r in reports), sum(r.nodes_before for r in reports)
        ),
        edge_mean=retention_pct(
            sum(r.edges_after for r in reports), sum(r.edges_before for r in reports)
        ),
        entity_min=min(entity_pcts),
        entity_max=max(entity_pcts),
        edge_min=min(edge_pcts),
        edge_max=max(edge_pcts),
        entity_row_mean=_round3(
            sum(Decimal(str(p)) for p in entity_pcts) / len(entity_pcts)
        ),
        edge_row_mean=_round3(
            sum(Decimal(str(p)) for p in edge_pcts) / len(edge_pcts)
        ),
    )
