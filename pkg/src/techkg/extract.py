"""Build one technique graph from one captured audit-log run.

The stages mirror how a capture is reduced: slice the execution window,
follow the process-creation chain from the initial pid, keep only dependency
event types, drop whitelisted benign objects, then aggregate repeated
operations into single nodes and edges.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field

from .errors import NoAttackEvents, SchemaError, UnknownPid
from .events import AuditEvent, RunMeta, window
from .model import (
    EdgeRelation,
    KnowledgeNode,
    NodeKind,
    TechniqueGraph,
    normalize_label,
    split_segments,
)

#: Utility processes kept in the graph but flagged, not removed: they appear
#: in nearly every capture and removing them would break chain topology.
DEFAULT_COMMON_PROCESSES = frozenset(
    {"hostname.exe", "whoami.exe", "conhost.exe"}
)

_CREATION_EVENTS = frozenset(
    {("Process", "Start"), ("Process", "DCStart"), ("Thread", "Start"), ("Thread", "DCStart")}
)

#: Object node kind implied by each event type.
OBJECT_KIND = {
    "Process": NodeKind.PROCESS,
    "Thread": NodeKind.PROCESS,
    "File": NodeKind.FILE,
    "Registry": NodeKind.REGISTRY,
    "Internet": NodeKind.NETWORK,
    "Image": NodeKind.IMAGE,
}

#: Fallback relation per event type when a non-tabled (but not hard-dropped)
#: event is re-admitted by static-analysis supplementation: write-flavored
#: names map to the mutating relation, everything else to the observing one.
_WRITE_HINT = re.compile(r"(?i)write|set|create|send|rename|delete")


def fallback_relation(event: AuditEvent) -> str:
    if event.is_kept_type():
        return event.relation()
    mutating = bool(_WRITE_HINT.search(event.event_name))
    table = {
        "Process": EdgeRelation.PROCESS_START,
        "Thread": EdgeRelation.THREAD_START,
        "File": EdgeRelation.FILE_WRITE if mutating else EdgeRelation.FILE_READ,
        "Registry": (
            EdgeRelation.REGISTRY_SET_VALUE if mutating else EdgeRelation.REGISTRY_QUERY
        ),
        "Internet": EdgeRelation.NET_SEND if mutating else EdgeRelation.NET_RECEIVE,
        "Image": EdgeRelation.IMAGE_LOAD,
    }
    return table[event.event_type].value


@dataclass
class ExtractConfig:
    window_slack_ns: int = 100_000_000  # collector timestamps jitter ~100ms
    common_processes: frozenset = DEFAULT_COMMON_PROCESSES
    collapse_min: int = 3  # smallest same-type sibling group worth collapsing


@dataclass
class ProcessChain:
    pids: set[int] = field(default_factory=set)
    nodes: dict[int, KnowledgeNode] = field(default_factory=dict)


@dataclass
class Whitelist:
    """Benign object labels per node kind, matched after normalization."""

    by_kind: dict[NodeKind, set[str]] = field(default_factory=dict)

    def add(self, kind: NodeKind, label: str) -> None:
        self.by_kind.setdefault(kind, set()).add(normalize_label(label))

    def contains(self, kind: NodeKind, label: str) -> bool:
        return normalize_label(label) in self.by_kind.get(kind, ())

    def __len__(self) -> int:
        return sum(len(v) for v in self.by_kind.values())

    def to_json(self) -> str:
        payload = {
            kind.value: sorted(labels) for kind, labels in self.by_kind.items() if labels
        }
        return json.dumps(payload, indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "Whitelist":
        try:
            payload = json.loads(text)
        except json.JSONDecodeError as exc:
            raise SchemaError(f"invalid whitelist JSON: {exc}")
        if not isinstance(payload, dict):
            raise SchemaError("whitelist JSON must be an object")
        wl = cls()
        valid = {k.value: k for k in NodeKind}
        for kind_name, labels in payload.items():
            if kind_name not in valid:
                raise SchemaError(f"whitelist has unknown kind {kind_name!r}")
            for label in labels:
                wl.add(valid[kind_name], label)
        return wl


def build_process_chain(events: list[AuditEvent], initial_pid: int) -> ProcessChain:
    """Follow process/thread creation from the initial pid.

    Every pid transitively started by a chain member joins the chain.  A
    thread started inside a *different* process pulls that process in as a
    Thread-kind node; same-process threads fold into their owner.
    """
    chain = ProcessChain()
    chain.pids.add(initial_pid)
    seen_initial = False
    next_id = 1  # id 0 stays reserved for the Attacker node

    def ensure_node(pid: int, kind: NodeKind, label: str):
        nonlocal next_id
        if pid not in chain.nodes and label:
            chain.nodes[pid] = KnowledgeNode(id=next_id, kind=kind, label=label)
            next_id += 1

    for event in events:
        if event.pid == initial_pid or event.object_pid == initial_pid:
            seen_initial = True
        if event.pid == initial_pid and initial_pid not in chain.nodes:
            ensure_node(initial_pid, NodeKind.PROCESS, event.subject_image)
        if (event.event_type, event.event_name) not in _CREATION_EVENTS:
            continue
        if event.pid not in chain.pids or event.object_pid is None:
            continue
        new_pid = event.object_pid
        if event.event_type == "Thread" and new_pid == event.pid:
            continue  # same-process thread, merged into the parent
        if new_pid == initial_pid:
            ensure_node(initial_pid, NodeKind.PROCESS, event.object)
            continue
        chain.pids.add(new_pid)
        kind = NodeKind.PROCESS if event.event_type == "Process" else NodeKind.THREAD
        ensure_node(new_pid, kind, event.object)

    if not seen_initial:
        raise UnknownPid(f"initial pid {initial_pid} never appears in the event stream")
    return chain


def select_events(events: list[AuditEvent], chain: ProcessChain) -> list[AuditEvent]:
    """Keep dependency events issued by chain processes.

    Drops every (type, name) pair outside the kept table (ProcessEnd,
    RegistryOpen, FileioCreate, ...), events from non-chain pids, empty
    objects, and same-process thread startups.
    """
    selected = []
    for event in events:
        if event.pid not in chain.pids:
            continue
        if not event.is_kept_type():
            continue
        if not event.object:
            continue
        if event.event_type == "Thread" and event.object_pid == event.pid:
            continue
        selected.append(event)
    return selected


def build_whitelist(benign_events: list[AuditEvent]) -> Whitelist:
    """Collect every object label observed in an attack-free capture."""
    wl = Whitelist()
    for event in benign_events:
        if event.object:
            wl.add(OBJECT_KIND[event.event_type], event.object)
    return wl


def filter_objects(events: list[AuditEvent], whitelist: Whitelist) -> list[AuditEvent]:
    return [
        e
        for e in events
        if not whitelist.contains(OBJECT_KIND[e.event_type], e.object)
    ]


def _file_extension(label: str) -> str:
    base = split_segments(normalize_label(label))
    if not base:
        return ""
    _stem, dot, ext = base[-1].rpartition(".")
    return f".{ext}" if dot else ""


def _separator(label: str) -> str:
    return "/" if "/" in label and "\\" not in label else "\\"


def _common_segment_prefix(labels: list[str]) -> list[str]:
    """Shared leading path segments (compared case-folded, returned in the
    first label's original casing)."""
    split = [split_segments(normalize_label(x)) for x in labels]
    length = 0
    for parts in zip(*split):
        if all(p == parts[0] for p in parts):
            length += 1
        else:
            break
    return split_segments(labels[0])[:length]


def aggregate_edges(graph: TechniqueGraph, cfg: ExtractConfig | None = None) -> TechniqueGraph:
    """Collapse repeated same-type file accesses into one summarized node.

    Sibling File leaves that share a parent, an extension, and a relation
    set (recursively read documents, dropped temp batches, ...) become a
    single node whose extra_labels record every collapsed path.  Operations
    on one object are already unioned into its single edge record.
    """
    cfg = cfg or ExtractConfig()
    out = graph.copy()

    in_edges: dict[int, list] = {}
    out_degree: dict[int, int] = {}
    for (src, dst), edge in out.edges.items():
        in_edges.setdefault(dst, []).append(edge)
        out_degree[src] = out_degree.get(src, 0) + 1

    clusters: dict[tuple, list[int]] = {}
    for nid, node in out.nodes.items():
        if node.kind is not NodeKind.FILE or out_degree.get(nid, 0):
            continue
        incoming = in_edges.get(nid, [])
        if len(incoming) != 1:
            continue
        edge = incoming[0]
        key = (edge.src, _file_extension(node.label), tuple(sorted(edge.relations)))
        clusters.setdefault(key, []).append(nid)

    for (src, ext, relations), members in sorted(clusters.items()):
        if len(members) < cfg.collapse_min:
            continue
        members = sorted(members, key=lambda nid: normalize_label(out.nodes[nid].label))
        survivor = out.nodes[members[0]]
        labels = []
        provenance = set()
        timestamps: set[int] = set()
        for nid in members:
            node = out.nodes[nid]
            labels.append(node.label)
            labels.extend(sorted(node.extra_labels))
            provenance |= node.provenance
            edge = out.edges.pop((src, nid))
            timestamps |= set(edge.timestamps)
            if nid != survivor.id:
                del out.nodes[nid]
        sep = _separator(labels[0])
        prefix = _common_segment_prefix(labels)
        survivor.label = sep.join(prefix + [f".*{ext}"])
        survivor.extra_labels = set(labels) - {survivor.label}
        survivor.provenance = provenance
        survivor.generalized = True
        out.add_edge(
            src,
            survivor.id,
            set(relations),
            timestamps=sorted(timestamps),
            provenance=provenance,
        )
    return out


def _build_graph(
    kept: list[AuditEvent],
    chain: ProcessChain,
    meta: RunMeta,
    cfg: ExtractConfig,
) -> TechniqueGraph:
    tag = f"log:{meta.procedure_id}"
    graph = TechniqueGraph(
        technique_id=meta.technique_id,
        source_kind="log",
        procedure_id=meta.procedure_id,
    )
    graph.add_node(NodeKind.ATTACKER, "attacker", node_id=0, provenance={tag})

    def is_common(label: str) -> bool:
        base = split_segments(normalize_label(label))
        return bool(base) and base[-1] in cfg.common_processes

    placed: dict[int, int] = {}  # chain pid -> graph node id

    def place_chain_node(pid: int) -> int:
        if pid in placed:
            return placed[pid]
        spec = chain.nodes[pid]
        node = graph.add_node(
            spec.kind,
            spec.label,
            provenance={tag},
            common=is_common(spec.label),
        )
        placed[pid] = node.id
        return node.id

    object_ids: dict[tuple[NodeKind, str], int] = {}

    for event in kept:
        if event.pid not in chain.nodes:
            continue  # chain pid observed but its image never resolved
        src = place_chain_node(event.pid)
        if (
            (event.event_type, event.event_name) in _CREATION_EVENTS
            and event.object_pid is not None
            and event.object_pid in chain.nodes
        ):
            dst = place_chain_node(event.object_pid)
        else:
            key = (OBJECT_KIND[event.event_type], normalize_label(event.object))
            if key in object_ids:
                dst = object_ids[key]
            else:
                node = graph.add_node(
                    key[0],
                    event.object,
                    provenance={tag},
                    common=key[0] is NodeKind.PROCESS and is_common(event.object),
                )
                object_ids[key] = node.id
                dst = node.id
        graph.add_edge(
            src,
            dst,
            event.relation(),
            timestamps=[event.ts],
            provenance={tag},
        )

    if meta.initial_pid in chain.nodes:
        initial = place_chain_node(meta.initial_pid)
        graph.add_edge(0, initial, EdgeRelation.PROCESS_START, provenance={tag})
    return graph


def extract_technique_graph(
    events: list[AuditEvent],
    run_meta: RunMeta,
    whitelist: Whitelist,
    cfg: ExtractConfig | None = None,
) -> TechniqueGraph:
    """Run the full log-reduction pipeline for one captured run."""
    cfg = cfg or ExtractConfig()
    windowed = window(
        events,
        run_meta.t_start - cfg.window_slack_ns,
        run_meta.t_end + cfg.window_slack_ns,
    )
    if not windowed:
        raise NoAttackEvents(
            f"no events inside the execution window of {run_meta.procedure_id}"
        )
    chain = build_process_chain(windowed, run_meta.initial_pid)
    selected = select_events(windowed, chain)
    kept = filter_objects(selected, whitelist)
    if not kept:
        raise NoAttackEvents(
            f"no attack events survive filtering for {run_meta.procedure_id}"
        )
    graph = _build_graph(kept, chain, run_meta, cfg)
    return aggregate_edges(graph, cfg)


def build_provenance_graph(
    events: list[AuditEvent],
    technique_id: str = "T0000",
    cfg: ExtractConfig | None = None,
) -> TechniqueGraph:
    """Whole-stream provenance graph used as the detection search space.

    No chain or whitelist filtering: every dependency event becomes an edge.
    An Attacker node is attached to each root process (one whose creation
    was not observed) so technique graphs can anchor their attacker.
    """
    cfg = cfg or ExtractConfig()
    graph = TechniqueGraph(technique_id=technique_id, source_kind="log")
    graph.add_node(NodeKind.ATTACKER, "attacker", node_id=0)

    pid_nodes: dict[int, int] = {}
    object_ids: dict[tuple[NodeKind, str], int] = {}
    created = set()

    def place_pid(pid: int, label: str) -> int:
        if pid not in pid_nodes:
            node = graph.add_node(NodeKind.PROCESS, label)
            pid_nodes[pid] = node.id
        return pid_nodes[pid]

    for event in events:
        if not event.is_kept_type() or not event.object:
            continue
        src = place_pid(event.pid, event.subject_image)
        if (
            (event.event_type, event.event_name) in _CREATION_EVENTS
            and event.object_pid is not None
        ):
            dst = place_pid(event.object_pid, event.object)
            created.add(event.object_pid)
        else:
            key = (OBJECT_KIND[event.event_type], normalize_label(event.object))
            if key not in object_ids:
                node = graph.add_node(key[0], event.object)
                object_ids[key] = node.id
            dst = object_ids[key]
        graph.add_edge(src, dst, event.relation(), timestamps=[event.ts])

    for pid in sorted(pid_nodes):
        if pid not in created:
            graph.add_edge(0, pid_nodes[pid], EdgeRelation.PROCESS_START)
    return graph
