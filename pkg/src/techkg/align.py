"""Match technique graphs against a provenance graph to detect techniques
and assemble attack chains.

Alignment is greedy seeded expansion: anchor on the most similar process
pair, then grow along edges whose endpoints agree in kind and label
similarity and whose relation sets intersect.  Exact subgraph isomorphism is
deliberately out of scope; on small instances the greedy match is checked
against an exhaustive oracle in the test suite.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .errors import SchemaError
from .model import (
    KnowledgeNode,
    NodeKind,
    TABLE_RELATIONS,
    TechniqueGraph,
    labels_compatible,
    validate,
)
from .merge import node_similarity


@dataclass
class AlignConfig:
    node_weight: float = 0.5
    edge_weight: float = 0.5
    similarity_threshold: float = 0.6
    detection_threshold: float = 0.7

    def __post_init__(self):
        if abs(self.node_weight + self.edge_weight - 1.0) > 1e-9:
            raise SchemaError("node_weight and edge_weight must sum to 1")


@dataclass
class AlignmentResult:
    technique_id: str
    score: float
    node_map: dict[int, int] = field(default_factory=dict)
    matched_edges: int = 0
    window: tuple[int, int] | None = None

    def to_dict(self) -> dict:
        return {
            "technique_id": self.technique_id,
            "score": self.score,
            "node_map": {str(k): v for k, v in sorted(self.node_map.items())},
            "matched_edges": self.matched_edges,
            "window": list(self.window) if self.window else None,
        }


def pair_similarity(a: KnowledgeNode, b: KnowledgeNode) -> float:
    """node_similarity extended with pattern semantics: a generalized label
    (wildcard segments) that matches the other side scores 1.0."""
    if a.kind is not b.kind:
        return 0.0
    for la in a.all_labels():
        for lb in b.all_labels():
            if labels_compatible(la, lb):
                return 1.0
    return node_similarity(a, b)


def relations_match(tech_relations: set[str], prov_relations: set[str]) -> bool:
    """Free-text CTI verbs act as wildcards; tabled relations must intersect."""
    if tech_relations & prov_relations:
        return True
    return any(r not in TABLE_RELATIONS for r in tech_relations)


def _rank(node: KnowledgeNode):
    return (node.content_key(), node.id)


def align_technique(
    tech: TechniqueGraph,
    prov: TechniqueGraph,
    cfg: AlignConfig | None = None,
    *,
    checked: bool = False,
) -> AlignmentResult:
    """Greedy seeded alignment of one technique graph into a provenance
    graph; score 0 when nothing matches, exactly 1.0 on self-alignment."""
    cfg = cfg or AlignConfig()
    if not checked:
        for graph, role in ((tech, "technique"), (prov, "provenance")):
            problems = validate(graph)
            if problems:
                raise SchemaError(f"{role} graph fails validation: {problems[0]}")
    node_map: dict[int, int] = {}
    used_prov: set[int] = set()

    tech_attacker = tech.attacker()
    prov_attacker = prov.attacker()
    if tech_attacker is not None and prov_attacker is not None:
        node_map[tech_attacker.id] = prov_attacker.id
        used_prov.add(prov_attacker.id)

    tech_out: dict[int, list] = {nid: [] for nid in tech.nodes}
    tech_in: dict[int, list] = {nid: [] for nid in tech.nodes}
    for (src, dst), edge in tech.edges.items():
        tech_out[src].append((dst, edge))
        tech_in[dst].append((src, edge))
    prov_out: dict[int, list] = {nid: [] for nid in prov.nodes}
    prov_in: dict[int, list] = {nid: [] for nid in prov.nodes}
    for (src, dst), edge in prov.edges.items():
        prov_out[src].append((dst, edge))
        prov_in[dst].append((src, edge))

    def neighbor_rank(item):
        return _rank(tech.nodes[item[0]])

    def expand(frontier: list[int]) -> None:
        while frontier:
            tid = frontier.pop(0)
            pid = node_map[tid]
            steps = [
                (dst, edge, prov_out[pid])
                for dst, edge in sorted(tech_out[tid], key=neighbor_rank)
            ] + [
                (src, edge, prov_in[pid])
                for src, edge in sorted(tech_in[tid], key=neighbor_rank)
            ]
            for t_next, t_edge, p_candidates in steps:
                if t_next in node_map:
                    continue
                t_node = tech.nodes[t_next]
                best = None
                for p_next, p_edge in p_candidates:
                    if p_next in used_prov:
                        continue
                    p_node = prov.nodes[p_next]
                    if p_node.kind is not t_node.kind:
                        continue
                    if not relations_match(t_edge.relations, p_edge.relations):
                        continue
                    score = pair_similarity(t_node, p_node)
                    if score < cfg.similarity_threshold:
                        continue
                    key = (-score, _rank(p_node))
                    if best is None or key < best[0]:
                        best = (key, p_next)
                if best is not None:
                    node_map[t_next] = best[1]
                    used_prov.add(best[1])
                    frontier.append(t_next)

    if node_map:
        expand(sorted(node_map))

    # Seed on the most similar unmatched process pairs, expanding after each.
    while True:
        best_seed = None
        for tid in sorted(tech.nodes):
            t_node = tech.nodes[tid]
            if tid in node_map or t_node.kind is not NodeKind.PROCESS:
                continue
            for pid in sorted(prov.nodes):
                if pid in used_prov:
                    continue
                p_node = prov.nodes[pid]
                if p_node.kind is not NodeKind.PROCESS:
                    continue
                score = pair_similarity(t_node, p_node)
                if score < cfg.similarity_threshold:
                    continue
                key = (-score, _rank(t_node), _rank(p_node))
                if best_seed is None or key < best_seed[0]:
                    best_seed = (key, tid, pid)
        if best_seed is None:
            break
        _key, tid, pid = best_seed
        node_map[tid] = pid
        used_prov.add(pid)
        expand([tid])

    # Isolated technique nodes can still claim an exact twin.
    for tid in sorted(tech.nodes):
        if tid in node_map:
            continue
        t_node = tech.nodes[tid]
        for pid in sorted(prov.nodes):
            if pid in used_prov:
                continue
            p_node = prov.nodes[pid]
            if p_node.kind is t_node.kind and pair_similarity(t_node, p_node) >= 1.0:
                node_map[tid] = pid
                used_prov.add(pid)
                break

    matched_edges = 0
    timestamps: list[int] = []
    for (src, dst), edge in tech.edges.items():
        p_src, p_dst = node_map.get(src), node_map.get(dst)
        if p_src is None or p_dst is None:
            continue
        p_edge = prov.edges.get((p_src, p_dst))
        if p_edge is not None and relations_match(edge.relations, p_edge.relations):
            matched_edges += 1
            timestamps.extend(p_edge.timestamps)

    node_fraction = len(node_map) / len(tech.nodes) if tech.nodes else 0.0
    edge_fraction = matched_edges / len(tech.edges) if tech.edges else 1.0
    score = cfg.node_weight * node_fraction + cfg.edge_weight * edge_fraction
    window = (min(timestamps), max(timestamps)) if timestamps else None
    return AlignmentResult(
        technique_id=tech.technique_id,
        score=score,
        node_map=node_map,
        matched_edges=matched_edges,
        window=window,
    )


def detect_techniques(
    prov: TechniqueGraph,
    kb: list[TechniqueGraph],
    threshold: float = 0.7,
    cfg: AlignConfig | None = None,
) -> list[AlignmentResult]:
    """Align every knowledge-base graph and keep those scoring at or above
    the threshold, best first."""
    problems = validate(prov)
    if problems:
        raise SchemaError(f"provenance graph fails validation: {problems[0]}")
    for tech in kb:
        problems = validate(tech)
        if problems:
            raise SchemaError(
                f"knowledge-base graph {tech.technique_id} fails validation: "
                f"{problems[0]}"
            )
    results = [align_technique(tech, prov, cfg, checked=True) for tech in kb]
    hits = [r for r in results if r.score >= threshold]
    hits.sort(key=lambda r: (-r.score, r.technique_id))
    return hits


@dataclass
class ChainStep:
    technique_id: str
    window: tuple[int, int] | None
    shared_with_previous: list[int] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "technique_id": self.technique_id,
            "window": list(self.window) if self.window else None,
            "shared_with_previous": self.shared_with_previous,
        }


def build_attack_chain(
    detections: list[AlignmentResult], prov: TechniqueGraph
) -> list[ChainStep]:
    """Order detections by time and link consecutive ones through shared
    provenance nodes (the synthetic Attacker anchor does not count)."""
    prov_attacker = prov.attacker()
    skip = {prov_attacker.id} if prov_attacker else set()
    ordered = sorted(
        detections,
        key=lambda d: (
            d.window is None,
            d.window[0] if d.window else 0,
            d.technique_id,
        ),
    )
    chain: list[ChainStep] = []
    previous: set[int] = set()
    for detection in ordered:
        current = set(detection.node_map.values()) - skip
        shared = sorted(current & previous) if chain else []
        chain.append(
            ChainStep(
                technique_id=detection.technique_id,
                window=detection.window,
                shared_with_previous=shared,
            )
        )
        previous = current
    return chain
