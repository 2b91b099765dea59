"""Aggregate same-source technique graphs and unify them across sources.

Same-source aggregation folds all procedure graphs of one technique into a
single representation: attackers unify, same-level nodes merge (processes by
name, everything else by kind), content-identical nodes merge across layers,
leaf objects cluster by common path prefix, and labels generalize into
wildcard patterns.  Cross-source construction then walks the CTI graph in
BFS order and merges each node into the log-derived base graph when a
similar node of the same kind exists, otherwise grafting it under its
parent.  No label is ever lost: absorbed labels land in extra_labels.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from decimal import Decimal, ROUND_HALF_UP

from .errors import (
    MissingAttacker,
    RoleError,
    SchemaError,
    SourceMismatch,
    TechniqueMismatch,
)
from .model import (
    EdgeRelation,
    NodeKind,
    TechniqueGraph,
    UNREACHABLE,
    canonical_mapping,
    compute_levels,
    normalize_label,
    split_segments,
    validate,
)

#: Default rewrite rules: user-profile segments, deep registry tails under a
#: hive, and long hex / tmp-prefixed scratch file stems (extension kept).
DEFAULT_GENERALIZATION_RULES: list[tuple[str, str]] = [
    (r"(?i)^([a-z]:\\+users\\+)[^\\]+", r"\g<1>.*"),
    (
        r"(?i)^((?:hkey_[a-z_]+|hklm|hkcu|hkcr|hku)\\+[^\\]+)\\+[^\\]+(?:\\+[^\\]+)+$",
        r"\g<1>\\.*",
    ),
    (r"(?i)^(.*[\\/])?[0-9a-f]{8,}(\.[a-z0-9]{1,6})?$", r"\g<1>.*\g<2>"),
    (r"(?i)^(.*[\\/])?tmp[a-z0-9]{4,}(\.[a-z0-9]{1,6})?$", r"\g<1>.*\g<2>"),
]


@dataclass
class MergeConfig:
    prefix_cluster_threshold: float = 0.6
    similarity_threshold: float = 0.6
    generalization_rules: list[tuple[str, str]] = field(
        default_factory=lambda: list(DEFAULT_GENERALIZATION_RULES)
    )

    def __post_init__(self):
        for name in ("prefix_cluster_threshold", "similarity_threshold"):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise SchemaError(f"{name} must lie in [0,1], got {value}")

    def compiled_rules(self) -> list[tuple[re.Pattern, str]]:
        return [(re.compile(p), r) for p, r in self.generalization_rules]

    def to_json(self) -> str:
        return json.dumps(
            {
                "prefix_cluster_threshold": self.prefix_cluster_threshold,
                "similarity_threshold": self.similarity_threshold,
                "generalization_rules": [
                    {"pattern": p, "replacement": r}
                    for p, r in self.generalization_rules
                ],
            },
            indent=2,
            sort_keys=True,
        )

    @classmethod
    def from_json(cls, text: str) -> "MergeConfig":
        try:
            payload = json.loads(text)
        except json.JSONDecodeError as exc:
            raise SchemaError(f"invalid merge config JSON: {exc}")
        kwargs = {}
        if "prefix_cluster_threshold" in payload:
            kwargs["prefix_cluster_threshold"] = payload["prefix_cluster_threshold"]
        if "similarity_threshold" in payload:
            kwargs["similarity_threshold"] = payload["similarity_threshold"]
        if "generalization_rules" in payload:
            kwargs["generalization_rules"] = [
                (rule["pattern"], rule["replacement"])
                for rule in payload["generalization_rules"]
            ]
        return cls(**kwargs)


@dataclass
class MergeReport:
    input_graph_count: int
    nodes_before: int
    nodes_after: int
    edges_before: int
    edges_after: int
    entity_retention_pct: float
    edge_retention_pct: float
    merged_node_log: list[tuple[int, list[str]]] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "input_graph_count": self.input_graph_count,
            "nodes_before": self.nodes_before,
            "nodes_after": self.nodes_after,
            "edges_before": self.edges_before,
            "edges_after": self.edges_after,
            "entity_retention_pct": self.entity_retention_pct,
            "edge_retention_pct": self.edge_retention_pct,
            "merged_node_log": [
                {"survivor": nid, "absorbed": labels}
                for nid, labels in self.merged_node_log
            ],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, payload: dict) -> "MergeReport":
        try:
            return cls(
                input_graph_count=payload["input_graph_count"],
                nodes_before=payload["nodes_before"],
                nodes_after=payload["nodes_after"],
                edges_before=payload["edges_before"],
                edges_after=payload["edges_after"],
                entity_retention_pct=payload["entity_retention_pct"],
                edge_retention_pct=payload["edge_retention_pct"],
                merged_node_log=[
                    (item["survivor"], list(item["absorbed"]))
                    for item in payload.get("merged_node_log", [])
                ],
            )
        except KeyError as exc:
            raise SchemaError(f"merge report missing field {exc.args[0]!r}")


def retention_pct(after: int, before: int) -> float:
    """after/before as a percentage, rounded half-up to 3 decimals."""
    if before == 0:
        return 100.0
    pct = Decimal(after * 100) / Decimal(before)
    return float(pct.quantize(Decimal("0.001"), rounding=ROUND_HALF_UP))


# -- label machinery ---------------------------------------------------------


def generalize_label(label: str, rules=None) -> str:
    """Rewrite one label through the ordered rule list (first match wins per
    path segment); idempotent because no rule matches its own output."""
    if rules is None:
        rules = DEFAULT_GENERALIZATION_RULES
    for pattern, replacement in rules:
        if isinstance(pattern, str):
            pattern = re.compile(pattern)
        label = pattern.sub(replacement, label, count=1)
    return label


def _shared_prefix_len(a: list[str], b: list[str]) -> int:
    n = 0
    for x, y in zip(a, b):
        if x != y:
            break
        n += 1
    return n


def _prefix_ratio(a: list[str], b: list[str]) -> float:
    longest = max(len(a), len(b))
    if longest == 0:
        return 0.0
    return _shared_prefix_len(a, b) / longest


def common_prefix_cluster(
    labels: list[str], threshold: float
) -> list[tuple[str, list[str]]]:
    """Greedy prefix clustering; returns (representative, members) per
    cluster, singletons included, in first-seen order.

    A label joins the first cluster whose seed shares a path-segment prefix
    of at least ``threshold`` of the longer segment count; the representative
    is the members' common prefix (in the first member's original casing)
    with a trailing wildcard.
    """
    clusters: list[dict] = []
    for label in labels:
        segments = split_segments(normalize_label(label))
        for cluster in clusters:
            if _prefix_ratio(segments, cluster["seed"]) >= threshold > 0:
                cluster["members"].append(label)
                cluster["segment_lists"].append(segments)
                break
        else:
            clusters.append(
                {"seed": segments, "members": [label], "segment_lists": [segments]}
            )

    out = []
    for cluster in clusters:
        members = cluster["members"]
        if len(members) == 1:
            out.append((members[0], members))
            continue
        prefix = cluster["segment_lists"][0]
        for other in cluster["segment_lists"][1:]:
            prefix = prefix[: _shared_prefix_len(prefix, other)]
        original = split_segments(members[0])[: len(prefix)]
        sep = "/" if "/" in members[0] and "\\" not in members[0] else "\\"
        representative = sep.join(original + [".*"])
        out.append((representative, members))
    return out


def _tokens(label: str) -> frozenset[str]:
    return frozenset(t for t in re.split(r"[\\/\s]+", normalize_label(label)) if t)


def node_similarity(a, b) -> float:
    """Content similarity in [0,1] between two nodes of the same kind.

    Best score over every label pair: exact normalized match 1.0, one being
    a path suffix of the other 0.8, token-set Jaccard otherwise.
    """
    if a.kind is not b.kind:
        return 0.0
    best = 0.0
    for la in a.all_labels():
        na = normalize_label(la)
        sa = split_segments(na)
        ta = _tokens(la)
        for lb in b.all_labels():
            nb = normalize_label(lb)
            if na == nb:
                return 1.0
            sb = split_segments(nb)
            short, long = (sa, sb) if len(sa) <= len(sb) else (sb, sa)
            if short and len(short) < len(long) and long[-len(short):] == short:
                best = max(best, 0.8)
                continue
            tb = _tokens(lb)
            union = ta | tb
            if union:
                best = max(best, len(ta & tb) / len(union))
    return best


# -- shared merge machinery ---------------------------------------------------

_FALLBACK_ATTACH = {
    NodeKind.PROCESS: EdgeRelation.PROCESS_START,
    NodeKind.THREAD: EdgeRelation.THREAD_START,
    NodeKind.FILE: EdgeRelation.FILE_CREATE,
    NodeKind.REGISTRY: EdgeRelation.REGISTRY_CREATE,
    NodeKind.NETWORK: EdgeRelation.NET_SEND,
    NodeKind.IMAGE: EdgeRelation.IMAGE_LOAD,
}


class _Merger:
    """Mutable working graph that tracks which labels each survivor absorbed."""

    def __init__(self, graph: TechniqueGraph):
        self.graph = graph
        self.absorbed: dict[int, list[str]] = {}

    def merge_pair(self, survivor_id: int, victim_id: int) -> None:
        graph = self.graph
        survivor = graph.nodes[survivor_id]
        victim = graph.nodes.pop(victim_id)

        self.absorbed.setdefault(survivor_id, []).append(victim.label)
        self.absorbed[survivor_id].extend(self.absorbed.pop(victim_id, []))
        if victim.label != survivor.label:
            survivor.extra_labels.add(victim.label)
        survivor.extra_labels |= victim.extra_labels
        survivor.extra_labels.discard(survivor.label)
        survivor.provenance |= victim.provenance
        survivor.generalized = survivor.generalized or victim.generalized
        survivor.common = survivor.common or victim.common

        for (src, dst) in [k for k in graph.edges if victim_id in k]:
            edge = graph.edges.pop((src, dst))
            new_src = survivor_id if src == victim_id else src
            new_dst = survivor_id if dst == victim_id else dst
            if new_src == new_dst:
                continue  # merging endpoints of an edge: self-loop dropped
            graph.add_edge(
                new_src,
                new_dst,
                edge.relations,
                timestamps=edge.timestamps,
                provenance=edge.provenance,
            )

    def merge_group(self, ids: list[int]) -> int:
        """Merge a deterministic group; smallest-labeled node survives."""
        ordered = sorted(
            ids,
            key=lambda nid: (
                normalize_label(self.graph.nodes[nid].label),
                self.graph.nodes[nid].label,
                nid,
            ),
        )
        survivor = ordered[0]
        for victim in ordered[1:]:
            self.merge_pair(survivor, victim)
        return survivor

    def generalize(self, rules) -> None:
        for nid in sorted(self.graph.nodes):
            node = self.graph.nodes[nid]
            if node.kind is NodeKind.ATTACKER:
                continue
            new_label = generalize_label(node.label, rules)
            if new_label != node.label:
                node.extra_labels.add(node.label)
                node.label = new_label
                node.extra_labels.discard(new_label)
                node.generalized = True

    def connect_strays(self) -> None:
        """Attach any component the attacker cannot reach (possible when an
        input CTI graph carried isolated entities)."""
        attacker = self.graph.attacker()
        if attacker is None:
            raise MissingAttacker("merged graph lost its Attacker node")
        levels = compute_levels(self.graph)
        stranded = {nid for nid, lv in levels.items() if lv == UNREACHABLE}
        while stranded:
            with_in_edge = {dst for (_s, dst) in self.graph.edges}
            roots = sorted(
                (nid for nid in stranded if nid not in with_in_edge),
                key=lambda nid: self.graph.nodes[nid].content_key(),
            )
            root = roots[0] if roots else sorted(
                stranded, key=lambda nid: self.graph.nodes[nid].content_key()
            )[0]
            node = self.graph.nodes[root]
            self.graph.add_edge(
                attacker.id,
                root,
                _FALLBACK_ATTACH[node.kind],
                provenance=set(node.provenance),
            )
            levels = compute_levels(self.graph)
            stranded = {nid for nid, lv in levels.items() if lv == UNREACHABLE}

    def finish(self, out_kind: str) -> tuple[TechniqueGraph, dict[int, list[str]]]:
        """Canonicalize ids and translate the absorbed-label log to them."""
        self.graph.source_kind = out_kind
        mapping = canonical_mapping(self.graph)
        final = self.graph.relabel(mapping)
        log = {
            mapping[nid]: sorted(labels)
            for nid, labels in self.absorbed.items()
            if labels
        }
        return final, log


def _check_same_source_inputs(graphs: list[TechniqueGraph]) -> None:
    if not graphs:
        raise SourceMismatch("merge requires at least one input graph")
    technique = graphs[0].technique_id
    kinds = {g.source_kind for g in graphs}
    for graph in graphs:
        if graph.technique_id != technique:
            raise TechniqueMismatch(
                f"cannot merge {graph.technique_id} into {technique}"
            )
    log_side = kinds <= {"log", "static", "merged-log"}
    cti_side = kinds <= {"cti", "merged-cti"}
    if not (log_side or cti_side):
        raise SourceMismatch(f"inputs mix source kinds: {sorted(kinds)}")
    for graph in graphs:
        problems = validate(graph)
        if problems:
            raise SchemaError(
                f"input graph ({graph.source_kind}) fails validation: {problems[0]}"
            )


def merge_same_source(
    graphs: list[TechniqueGraph], cfg: MergeConfig | None = None
) -> tuple[TechniqueGraph, MergeReport]:
    """Fold all same-source graphs of one technique into one graph.

    Steps, in order: unify attackers, merge per-level (processes by equal
    name, other kinds wholesale), merge content-identical nodes across
    layers, cluster leaf objects by common prefix, generalize labels, and
    re-merge any nodes the rewriting made identical.  Edges incident to a
    merged node are re-pointed to the survivor with relation sets unioned.
    """
    cfg = cfg or MergeConfig()
    _check_same_source_inputs(graphs)
    rules = cfg.compiled_rules()

    nodes_before = sum(len(g.nodes) for g in graphs)
    edges_before = sum(len(g.edges) for g in graphs)
    out_kind = (
        "merged-log"
        if graphs[0].source_kind in ("log", "static", "merged-log")
        else "merged-cti"
    )

    # Disjoint union under fresh ids.
    union = TechniqueGraph(technique_id=graphs[0].technique_id, source_kind=out_kind)
    offset = 0
    for graph in graphs:
        mapping = {nid: nid + offset for nid in graph.nodes}
        shifted = graph.relabel(mapping)
        union.nodes.update(shifted.nodes)
        union.edges.update(shifted.edges)
        offset += (max(graph.nodes) + 1) if graph.nodes else 0

    merger = _Merger(union)

    # Step 1: one attacker.
    attackers = sorted(
        nid for nid, n in union.nodes.items() if n.kind is NodeKind.ATTACKER
    )
    if not attackers:
        raise MissingAttacker("no input graph carries an Attacker node")
    for victim in attackers[1:]:
        merger.merge_pair(attackers[0], victim)

    # Steps 2-6, iterated to a fixpoint: each merge can shorten paths and so
    # re-level nodes, exposing new same-level pairs; repeating until nothing
    # changes is what makes the whole operation idempotent.
    for _round in range(32):
        snapshot = _content_snapshot(union)
        _level_merge(merger)
        _merge_identical(merger)
        _cluster_leaves(merger, cfg.prefix_cluster_threshold)
        merger.generalize(rules)
        _merge_identical(merger)
        if _content_snapshot(union) == snapshot:
            break

    merger.connect_strays()
    final, absorbed = merger.finish(out_kind)

    report = MergeReport(
        input_graph_count=len(graphs),
        nodes_before=nodes_before,
        nodes_after=len(final.nodes),
        edges_before=edges_before,
        edges_after=len(final.edges),
        entity_retention_pct=retention_pct(len(final.nodes), nodes_before),
        edge_retention_pct=retention_pct(len(final.edges), edges_before),
        merged_node_log=sorted(absorbed.items()),
    )
    return final, report


def _content_snapshot(graph: TechniqueGraph) -> tuple:
    return (
        tuple(sorted(node.content_key() for node in graph.nodes.values())),
        len(graph.edges),
    )


def _level_merge(merger: _Merger) -> None:
    """Merge nodes within one level: processes by equal name, the remaining
    kinds wholesale, folding absorbed labels into extra_labels."""
    graph = merger.graph
    levels = compute_levels(graph)
    groups: dict[tuple, list[int]] = {}
    for nid in sorted(graph.nodes):
        node = graph.nodes[nid]
        if node.kind is NodeKind.ATTACKER:
            continue
        if node.kind is NodeKind.PROCESS:
            key = (levels[nid], node.kind.value, normalize_label(node.label))
        else:
            key = (levels[nid], node.kind.value, "")
        groups.setdefault(key, []).append(nid)
    for key in sorted(groups, key=str):
        if len(groups[key]) > 1:
            merger.merge_group(groups[key])


def _merge_identical(merger: _Merger) -> None:
    groups: dict[tuple, list[int]] = {}
    for nid in sorted(merger.graph.nodes):
        node = merger.graph.nodes[nid]
        if node.kind is NodeKind.ATTACKER:
            continue
        groups.setdefault(node.content_key(), []).append(nid)
    for key in sorted(groups, key=str):
        if len(groups[key]) > 1:
            merger.merge_group(groups[key])


_CLUSTER_KINDS = (NodeKind.FILE, NodeKind.REGISTRY, NodeKind.IMAGE)


def _cluster_leaves(merger: _Merger, threshold: float) -> None:
    graph = merger.graph
    has_out = {src for (src, _dst) in graph.edges}
    for kind in _CLUSTER_KINDS:
        leaves = sorted(
            (
                nid
                for nid, node in graph.nodes.items()
                if node.kind is kind and nid not in has_out
            ),
            key=lambda nid: (normalize_label(graph.nodes[nid].label), nid),
        )
        if len(leaves) < 2:
            continue
        labels = [graph.nodes[nid].label for nid in leaves]
        for representative, members in common_prefix_cluster(labels, threshold):
            if len(members) < 2:
                continue
            # duplicate labels across distinct leaves: recover ids positionally
            member_ids = []
            used = set()
            for m in members:
                for pos, lab in enumerate(labels):
                    if lab == m and leaves[pos] not in used:
                        member_ids.append(leaves[pos])
                        used.add(leaves[pos])
                        break
            survivor_id = merger.merge_group(member_ids)
            survivor = graph.nodes[survivor_id]
            if survivor.label != representative:
                survivor.extra_labels.add(survivor.label)
                survivor.label = representative
                survivor.extra_labels.discard(representative)
            survivor.generalized = True


# -- cross-source construction ------------------------------------------------


def bfs_order(graph: TechniqueGraph) -> list[int]:
    """Deterministic breadth-first node order from the Attacker node."""
    attacker = graph.attacker()
    if attacker is None:
        raise MissingAttacker(f"graph {graph.technique_id} has no Attacker node")
    adj = graph.undirected_adjacency()

    def rank(nid: int):
        return (graph.nodes[nid].content_key(), nid)

    order = [attacker.id]
    seen = {attacker.id}
    frontier = [attacker.id]
    while frontier:
        nxt = []
        for nid in frontier:
            for peer in sorted(adj[nid], key=rank):
                if peer not in seen:
                    seen.add(peer)
                    order.append(peer)
                    nxt.append(peer)
        frontier = nxt
    order.extend(sorted((n for n in graph.nodes if n not in seen), key=rank))
    return order


def merge_cross_source(
    base: TechniqueGraph,
    additional: TechniqueGraph,
    cfg: MergeConfig | None = None,
) -> tuple[TechniqueGraph, MergeReport]:
    """Merge a CTI-derived graph into the log/static-derived base graph.

    Additional nodes are visited in BFS order; each merges into the highest-
    similarity unconsumed base node of the same kind at or above the
    similarity threshold (ties to the earlier BFS index), otherwise it is
    inserted and its edges reconnect it to its already-placed parent.
    """
    cfg = cfg or MergeConfig()
    if base.technique_id != additional.technique_id:
        raise TechniqueMismatch(
            f"base {base.technique_id} vs additional {additional.technique_id}"
        )
    log_kinds = {"log", "static", "merged-log"}
    cti_kinds = {"cti", "merged-cti"}
    if base.source_kind in cti_kinds and additional.source_kind in log_kinds:
        raise RoleError("base/additional graphs are swapped")
    if base.source_kind not in log_kinds or additional.source_kind not in cti_kinds:
        raise RoleError(
            f"base must be log-derived and additional CTI-derived, got "
            f"{base.source_kind!r}/{additional.source_kind!r}"
        )
    for graph in (base, additional):
        problems = validate(graph)
        if problems:
            raise SchemaError(
                f"input graph ({graph.source_kind}) fails validation: {problems[0]}"
            )

    nodes_before = len(base.nodes) + len(additional.nodes)
    edges_before = len(base.edges) + len(additional.edges)

    working = base.copy()
    working.procedure_id = None
    merger = _Merger(working)

    base_order = bfs_order(working)
    base_rank = {nid: idx for idx, nid in enumerate(base_order)}
    open_base = set(base_order)
    mapping: dict[int, int] = {}

    for add_id in bfs_order(additional):
        add_node = additional.nodes[add_id]
        if add_node.kind is NodeKind.ATTACKER:
            anchor = working.attacker()
            anchor.provenance |= add_node.provenance
            mapping[add_id] = anchor.id
            open_base.discard(anchor.id)
            continue
        best = None
        for bid in open_base:
            candidate = working.nodes[bid]
            if candidate.kind is not add_node.kind:
                continue
            score = node_similarity(add_node, candidate)
            if score < cfg.similarity_threshold:
                continue
            key = (-score, base_rank[bid])
            if best is None or key < best[0]:
                best = (key, bid)
        if best is not None:
            bid = best[1]
            survivor = working.nodes[bid]
            merger.absorbed.setdefault(bid, []).append(add_node.label)
            if add_node.label != survivor.label:
                survivor.extra_labels.add(add_node.label)
            survivor.extra_labels |= add_node.extra_labels
            survivor.extra_labels.discard(survivor.label)
            survivor.provenance |= add_node.provenance
            survivor.generalized = survivor.generalized or add_node.generalized
            mapping[add_id] = bid
            open_base.discard(bid)
        else:
            clone = working.add_node(
                add_node.kind,
                add_node.label,
                extra_labels=set(add_node.extra_labels),
                provenance=set(add_node.provenance),
                generalized=add_node.generalized,
                common=add_node.common,
            )
            mapping[add_id] = clone.id

    for (src, dst), edge in sorted(additional.edges.items()):
        new_src, new_dst = mapping[src], mapping[dst]
        if new_src == new_dst:
            continue
        working.add_edge(
            new_src,
            new_dst,
            edge.relations,
            timestamps=edge.timestamps,
            provenance=edge.provenance,
        )

    # Dedup + generalize; node fusion is deliberately not re-run here so the
    # result can never shrink below the larger input.
    merger.generalize(cfg.compiled_rules())
    merger.connect_strays()
    final, absorbed = merger.finish("unified")

    report = MergeReport(
        input_graph_count=2,
        nodes_before=nodes_before,
        nodes_after=len(final.nodes),
        edges_before=edges_before,
        edges_after=len(final.edges),
        entity_retention_pct=retention_pct(len(final.nodes), nodes_before),
        edge_retention_pct=retention_pct(len(final.edges), edges_before),
        merged_node_log=sorted(absorbed.items()),
    )
    return final, report
