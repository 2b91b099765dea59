"""Core data model for attack-technique knowledge graphs.

A technique graph is a small provenance-style graph rooted at a synthetic
Attacker node: nodes are system entities (processes, files, registry keys,
network endpoints, loaded images), edges are the audited or reported actions
between them.  Every other module builds, merges, or compares these graphs.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field
from enum import Enum

from .errors import MissingAttacker


class NodeKind(str, Enum):
    ATTACKER = "Attacker"
    PROCESS = "Process"
    THREAD = "Thread"
    FILE = "File"
    REGISTRY = "Registry"
    NETWORK = "Network"
    IMAGE = "Image"


class EdgeRelation(str, Enum):
    """Closed vocabulary of audited event relations.

    CTI-derived edges may additionally carry free-text verb labels; those are
    plain strings outside this enumeration and are only legal on edges whose
    provenance includes a ``cti:`` tag.
    """

    PROCESS_START = "ProcessStart"
    PROCESS_DCSTART = "ProcessDCStart"
    THREAD_START = "ThreadStart"
    THREAD_DCSTART = "ThreadDCStart"
    FILE_CREATE = "FileCreate"
    FILE_READ = "FileRead"
    FILE_WRITE = "FileWrite"
    FILE_RENAME = "FileRename"
    REGISTRY_QUERY = "RegistryQuery"
    REGISTRY_CREATE = "RegistryCreate"
    REGISTRY_SET_VALUE = "RegistrySetValue"
    NET_RECEIVE = "NetReceive"
    NET_SEND = "NetSend"
    IMAGE_LOAD = "ImageLoad"
    IMAGE_DCSTART = "ImageDCStart"


TABLE_RELATIONS = frozenset(r.value for r in EdgeRelation)

ATTACKER_LABEL = "attacker"

SOURCE_KINDS = frozenset(
    {"log", "static", "cti", "merged-log", "merged-cti", "unified"}
)
MERGED_SOURCE_KINDS = frozenset({"merged-log", "merged-cti", "unified"})

TECHNIQUE_ID_RE = re.compile(r"^T[0-9]{4}(\.[0-9]{3})?$")

PROVENANCE_TAG_RE = re.compile(r"^(log|static|cti):.+$")

#: Level value assigned to nodes unreachable from the Attacker.
UNREACHABLE = math.inf

_SEPARATOR_RUN_RE = re.compile(r"([\\/])\1+")


def normalize_label(label: str) -> str:
    """Case-fold a label and collapse path-separator noise.

    Used whenever two labels are compared (whitelists, merging, similarity);
    stored labels stay verbatim.
    """
    s = _SEPARATOR_RUN_RE.sub(r"\1", label.strip().lower())
    return s.rstrip("\\/") or s


def split_segments(label: str) -> list[str]:
    """Split a normalized label on path separators, dropping empties."""
    return [seg for seg in re.split(r"[\\/]+", label) if seg]


def is_pattern(label: str) -> bool:
    return ".*" in label


def pattern_to_regex(label: str) -> re.Pattern:
    """Compile a generalized label into a matcher over normalized labels.

    Each ``.*`` placeholder matches one or more characters, so a wildcard
    path segment spans one or more concrete segments and a wildcard file
    stem matches any stem.
    """
    parts = normalize_label(label).split(".*")
    return re.compile("^" + ".+".join(re.escape(p) for p in parts) + "$")


def label_matches_pattern(pattern: str, concrete: str) -> bool:
    return bool(pattern_to_regex(pattern).match(normalize_label(concrete)))


def labels_compatible(a: str, b: str) -> bool:
    """True when the labels are equal after normalization, or one is a
    generalized pattern matching the other."""
    na, nb = normalize_label(a), normalize_label(b)
    if na == nb:
        return True
    if is_pattern(a) and label_matches_pattern(a, b):
        return True
    if is_pattern(b) and label_matches_pattern(b, a):
        return True
    return False


@dataclass
class KnowledgeNode:
    id: int
    kind: NodeKind
    label: str
    extra_labels: set[str] = field(default_factory=set)
    provenance: set[str] = field(default_factory=set)
    generalized: bool = False
    common: bool = False

    def all_labels(self) -> set[str]:
        return {self.label} | self.extra_labels

    def content_key(self) -> tuple:
        """Identity of the node modulo its id (used for cross-layer merging
        and canonical ordering)."""
        return (
            self.kind.value,
            normalize_label(self.label),
            tuple(sorted(normalize_label(x) for x in self.extra_labels)),
        )

    def copy(self) -> "KnowledgeNode":
        return KnowledgeNode(
            id=self.id,
            kind=self.kind,
            label=self.label,
            extra_labels=set(self.extra_labels),
            provenance=set(self.provenance),
            generalized=self.generalized,
            common=self.common,
        )


@dataclass
class KnowledgeEdge:
    src: int
    dst: int
    relations: set[str] = field(default_factory=set)
    timestamps: list[int] = field(default_factory=list)
    provenance: set[str] = field(default_factory=set)

    def copy(self) -> "KnowledgeEdge":
        return KnowledgeEdge(
            src=self.src,
            dst=self.dst,
            relations=set(self.relations),
            timestamps=list(self.timestamps),
            provenance=set(self.provenance),
        )


@dataclass
class TechniqueGraph:
    """One attack technique as a provenance-tagged graph.

    Nodes are keyed by integer id; at most one edge record exists per
    (src, dst) pair, with all observed relations unioned into its set.
    """

    technique_id: str
    source_kind: str
    procedure_id: str | None = None
    nodes: dict[int, KnowledgeNode] = field(default_factory=dict)
    edges: dict[tuple[int, int], KnowledgeEdge] = field(default_factory=dict)

    # -- construction -----------------------------------------------------

    def next_id(self) -> int:
        return max(self.nodes) + 1 if self.nodes else 0

    def add_node(
        self,
        kind: NodeKind,
        label: str,
        *,
        node_id: int | None = None,
        extra_labels: set[str] | None = None,
        provenance: set[str] | None = None,
        generalized: bool = False,
        common: bool = False,
    ) -> KnowledgeNode:
        nid = self.next_id() if node_id is None else node_id
        if nid in self.nodes:
            raise ValueError(f"node id {nid} already exists in the graph")
        node = KnowledgeNode(
            id=nid,
            kind=kind,
            label=label,
            extra_labels=set(extra_labels or ()),
            provenance=set(provenance or ()),
            generalized=generalized,
            common=common,
        )
        node.extra_labels.discard(node.label)
        self.nodes[nid] = node
        return node

    def add_edge(
        self,
        src: int,
        dst: int,
        relations,
        *,
        timestamps=None,
        provenance=None,
    ) -> KnowledgeEdge:
        """Add or extend the edge record for (src, dst).

        Self-loops are silently dropped (forbidden by the model); repeated
        calls union relations/provenance and append timestamps.
        """
        if src == dst:
            return self.edges.get((src, dst))  # type: ignore[return-value]
        rels = {relations} if isinstance(relations, str) else set(relations)
        rels = {r.value if isinstance(r, EdgeRelation) else str(r) for r in rels}
        edge = self.edges.get((src, dst))
        if edge is None:
            edge = KnowledgeEdge(src=src, dst=dst)
            self.edges[(src, dst)] = edge
        edge.relations |= rels
        if timestamps:
            edge.timestamps = sorted(set(edge.timestamps) | set(timestamps))
        if provenance:
            edge.provenance |= set(provenance)
        return edge

    # -- queries ----------------------------------------------------------

    def attacker(self) -> KnowledgeNode | None:
        for node in self.nodes.values():
            if node.kind is NodeKind.ATTACKER:
                return node
        return None

    def undirected_adjacency(self) -> dict[int, set[int]]:
        adj: dict[int, set[int]] = {nid: set() for nid in self.nodes}
        for (src, dst) in self.edges:
            if src in adj and dst in adj:
                adj[src].add(dst)
                adj[dst].add(src)
        return adj

    def out_degree(self, nid: int) -> int:
        return sum(1 for (s, _d) in self.edges if s == nid)

    def copy(self) -> "TechniqueGraph":
        return TechniqueGraph(
            technique_id=self.technique_id,
            source_kind=self.source_kind,
            procedure_id=self.procedure_id,
            nodes={nid: n.copy() for nid, n in self.nodes.items()},
            edges={key: e.copy() for key, e in self.edges.items()},
        )

    def relabel(self, mapping: dict[int, int]) -> "TechniqueGraph":
        """Return a copy with node ids rewritten through ``mapping``."""
        out = TechniqueGraph(
            technique_id=self.technique_id,
            source_kind=self.source_kind,
            procedure_id=self.procedure_id,
        )
        for nid, node in self.nodes.items():
            clone = node.copy()
            clone.id = mapping[nid]
            out.nodes[clone.id] = clone
        for (src, dst), edge in self.edges.items():
            clone = edge.copy()
            clone.src, clone.dst = mapping[src], mapping[dst]
            out.edges[(clone.src, clone.dst)] = clone
        return out


def compute_levels(graph: TechniqueGraph) -> dict[int, float]:
    """Shortest undirected hop count from the Attacker node.

    The Attacker sits at level 0, directly connected nodes at level 1, and
    so on; nodes with no path to the Attacker get the UNREACHABLE sentinel.
    """
    attacker = graph.attacker()
    if attacker is None:
        raise MissingAttacker(
            f"graph {graph.technique_id} has no Attacker node"
        )
    adj = graph.undirected_adjacency()
    levels: dict[int, float] = {nid: UNREACHABLE for nid in graph.nodes}
    levels[attacker.id] = 0
    frontier = [attacker.id]
    depth = 0
    while frontier:
        depth += 1
        nxt = []
        for nid in frontier:
            for peer in adj[nid]:
                if levels[peer] == UNREACHABLE:
                    levels[peer] = depth
                    nxt.append(peer)
        frontier = nxt
    return levels


def validate(graph: TechniqueGraph) -> list[str]:
    """Check every structural invariant; returns human-readable violations.

    An empty list means the graph is safe to feed into merge, alignment,
    and serialization entry points.
    """
    problems: list[str] = []
    if not TECHNIQUE_ID_RE.match(graph.technique_id or ""):
        problems.append(f"technique_id {graph.technique_id!r} is malformed")
    if graph.source_kind not in SOURCE_KINDS:
        problems.append(f"source_kind {graph.source_kind!r} unknown")

    attackers = [n for n in graph.nodes.values() if n.kind is NodeKind.ATTACKER]
    if len(attackers) > 1:
        problems.append(f"{len(attackers)} Attacker nodes (at most one allowed)")

    for nid, node in graph.nodes.items():
        if nid != node.id:
            problems.append(f"node {nid}: stored under mismatched key {node.id}")
        if node.id < 0:
            problems.append(f"node {node.id}: negative id")
        if node.kind is NodeKind.ATTACKER:
            if node.label != ATTACKER_LABEL:
                problems.append(
                    f"node {node.id}: attacker label must be "
                    f"{ATTACKER_LABEL!r}, got {node.label!r}"
                )
        elif not node.label:
            problems.append(f"node {node.id}: empty label")
        if node.label in node.extra_labels:
            problems.append(f"node {node.id}: extra_labels contains the label itself")
        for tag in node.provenance:
            if not PROVENANCE_TAG_RE.match(tag):
                problems.append(f"node {node.id}: malformed provenance tag {tag!r}")

    seen_pairs = set()
    for key, edge in graph.edges.items():
        pair = (edge.src, edge.dst)
        if key != pair:
            problems.append(f"edge {key}: stored under mismatched key")
        if pair in seen_pairs:
            problems.append(f"edge {pair[0]}->{pair[1]}: duplicate (src,dst) record")
        seen_pairs.add(pair)
        if edge.src == edge.dst:
            problems.append(f"edge {edge.src}->{edge.dst}: self-loop forbidden")
        for endpoint in (edge.src, edge.dst):
            if endpoint not in graph.nodes:
                problems.append(f"edge {edge.src}->{edge.dst}: unknown node {endpoint}")
        if not edge.relations:
            problems.append(f"edge {edge.src}->{edge.dst}: empty relation set")
        free_text = [r for r in edge.relations if r not in TABLE_RELATIONS]
        if free_text and not any(t.startswith("cti:") for t in edge.provenance):
            problems.append(
                f"edge {edge.src}->{edge.dst}: free-text relations "
                f"{sorted(free_text)} require cti provenance"
            )

    # Merged graphs must hang together from the attacker.
    if graph.source_kind in MERGED_SOURCE_KINDS and not problems:
        if not attackers:
            problems.append("merged graph has no Attacker node")
        else:
            levels = compute_levels(graph)
            stranded = sorted(n for n, lv in levels.items() if lv == UNREACHABLE)
            if stranded:
                problems.append(
                    f"nodes {stranded} unreachable from the Attacker node"
                )
    return problems


# -- canonical form and equality -------------------------------------------


def _canonical_order(graph: TechniqueGraph) -> list[int]:
    """Deterministic node ordering: Attacker first, then by content.

    Ties between content-identical nodes (two processes with the same image,
    say) are broken by each node's sorted incident-edge fingerprint so that
    structurally identical graphs canonicalize identically.
    """
    fingerprints: dict[int, list] = {nid: [] for nid in graph.nodes}
    for edge in graph.edges.values():
        rels = tuple(sorted(edge.relations))
        src_key = graph.nodes[edge.src].content_key()
        dst_key = graph.nodes[edge.dst].content_key()
        fingerprints[edge.src].append(("out", rels, dst_key))
        fingerprints[edge.dst].append(("in", rels, src_key))

    def sort_key(nid: int):
        node = graph.nodes[nid]
        return (
            node.kind is not NodeKind.ATTACKER,
            node.content_key(),
            node.label,
            tuple(sorted(node.extra_labels)),
            tuple(sorted(fingerprints[nid])),
            tuple(sorted(node.provenance)),
            nid,
        )

    return sorted(graph.nodes, key=sort_key)


def canonical_mapping(graph: TechniqueGraph) -> dict[int, int]:
    """old node id -> canonical node id (Attacker gets id 0)."""
    return {old: new for new, old in enumerate(_canonical_order(graph))}


def canonical_form(graph: TechniqueGraph) -> TechniqueGraph:
    """Relabel node ids into canonical order (Attacker gets id 0).

    Node ids are serialization artifacts; two graphs are considered equal
    when their canonical forms carry identical content.
    """
    return graph.relabel(canonical_mapping(graph))


def _comparable(graph: TechniqueGraph) -> tuple:
    g = canonical_form(graph)
    nodes = tuple(
        (
            nid,
            node.kind.value,
            node.label,
            tuple(sorted(node.extra_labels)),
            tuple(sorted(node.provenance)),
            node.generalized,
            node.common,
        )
        for nid, node in sorted(g.nodes.items())
    )
    edges = tuple(
        (
            key,
            tuple(sorted(edge.relations)),
            tuple(edge.timestamps),
            tuple(sorted(edge.provenance)),
        )
        for key, edge in sorted(g.edges.items())
    )
    return (g.technique_id, nodes, edges)


def canonically_equal(a: TechniqueGraph, b: TechniqueGraph) -> bool:
    """Structural equality modulo node-id relabeling.

    source_kind and procedure_id are processing-stage markers, not content,
    and do not participate.
    """
    return _comparable(a) == _comparable(b)
