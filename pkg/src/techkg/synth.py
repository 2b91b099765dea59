"""Deterministic generator of labeled audit-log runs, scripts, and report
fixtures.

Every run is reproducible from its seed: the generator uses splitmix64 (a
tiny, well-documented PRNG) rather than a platform RNG so fixtures can be
regenerated bit-identically anywhere.  Benign and attack vocabularies are
disjoint by construction, which makes whitelist behavior exactly analyzable:
after filtering, precisely the injected events survive.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

from .errors import SchemaError
from .events import AuditEvent, RunMeta, write_events
from .extract import Whitelist, build_whitelist
from .model import EdgeRelation, NodeKind, TechniqueGraph
from .serialize import export_gml

_MASK = (1 << 64) - 1


class SplitMix64:
    """splitmix64: state advances by 0x9E3779B97F4A7C15, output is the
    xor-shift/multiply finalizer of the new state."""

    def __init__(self, seed: int):
        self.state = seed & _MASK

    def next_u64(self) -> int:
        self.state = (self.state + 0x9E3779B97F4A7C15) & _MASK
        z = self.state
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK
        return z ^ (z >> 31)

    def randint(self, lo: int, hi: int) -> int:
        return lo + self.next_u64() % (hi - lo + 1)

    def random(self) -> float:
        return self.next_u64() / 2**64

    def choice(self, seq):
        return seq[self.next_u64() % len(seq)]

    def weighted(self, pairs):
        total = sum(w for _item, w in pairs)
        pick = self.random() * total
        acc = 0.0
        for item, weight in pairs:
            acc += weight
            if pick < acc:
                return item
        return pairs[-1][0]

    def hexstr(self, n: int = 8) -> str:
        return "".join("0123456789abcdef"[self.next_u64() % 16] for _ in range(n))


#: relation -> (event_type, event_name), the inverse of event ingestion
RELATION_EVENTS = {
    EdgeRelation.PROCESS_START.value: ("Process", "Start"),
    EdgeRelation.PROCESS_DCSTART.value: ("Process", "DCStart"),
    EdgeRelation.THREAD_START.value: ("Thread", "Start"),
    EdgeRelation.THREAD_DCSTART.value: ("Thread", "DCStart"),
    EdgeRelation.FILE_CREATE.value: ("File", "Create"),
    EdgeRelation.FILE_READ.value: ("File", "Read"),
    EdgeRelation.FILE_WRITE.value: ("File", "Write"),
    EdgeRelation.FILE_RENAME.value: ("File", "Rename"),
    EdgeRelation.REGISTRY_QUERY.value: ("Registry", "Query"),
    EdgeRelation.REGISTRY_CREATE.value: ("Registry", "Create"),
    EdgeRelation.REGISTRY_SET_VALUE.value: ("Registry", "SetValue"),
    EdgeRelation.NET_RECEIVE.value: ("Internet", "Receive"),
    EdgeRelation.NET_SEND.value: ("Internet", "Send"),
    EdgeRelation.IMAGE_LOAD.value: ("Image", "Load"),
    EdgeRelation.IMAGE_DCSTART.value: ("Image", "DCStart"),
}


@dataclass
class NodeSpec:
    kind: NodeKind
    label: str  # may contain {rand} (8 hex chars) and {run} placeholders


@dataclass
class EdgeSpec:
    relation: str
    src: int
    dst: int
    offset_ns: int = 0


@dataclass
class TechniqueTemplate:
    technique_id: str
    name: str
    nodes: list[NodeSpec]
    edges: list[EdgeSpec]

    def __post_init__(self):
        if not self.nodes or self.nodes[0].kind is not NodeKind.PROCESS:
            raise SchemaError(f"template {self.name}: node 0 must be a Process")
        for edge in self.edges:
            for endpoint in (edge.src, edge.dst):
                if not 0 <= endpoint < len(self.nodes):
                    raise SchemaError(f"template {self.name}: edge endpoint {endpoint} out of range")
            if self.nodes[edge.src].kind not in (NodeKind.PROCESS, NodeKind.THREAD):
                raise SchemaError(f"template {self.name}: edge source must be process-like")

    def to_json(self) -> str:
        return json.dumps(
            {
                "technique_id": self.technique_id,
                "name": self.name,
                "nodes": [{"kind": n.kind.value, "label": n.label} for n in self.nodes],
                "edges": [
                    {
                        "relation": e.relation,
                        "src": e.src,
                        "dst": e.dst,
                        "offset_ns": e.offset_ns,
                    }
                    for e in self.edges
                ],
            },
            indent=2,
            sort_keys=True,
        )

    @classmethod
    def from_json(cls, text: str) -> "TechniqueTemplate":
        try:
            payload = json.loads(text)
            return cls(
                technique_id=payload["technique_id"],
                name=payload["name"],
                nodes=[
                    NodeSpec(kind=NodeKind(n["kind"]), label=n["label"])
                    for n in payload["nodes"]
                ],
                edges=[
                    EdgeSpec(
                        relation=e["relation"],
                        src=e["src"],
                        dst=e["dst"],
                        offset_ns=e.get("offset_ns", 0),
                    )
                    for e in payload["edges"]
                ],
            )
        except (json.JSONDecodeError, KeyError, ValueError) as exc:
            raise SchemaError(f"invalid technique template: {exc}")


@dataclass
class NoiseProfile:
    events_per_second: float = 1000.0
    mix: dict[str, float] = field(
        default_factory=lambda: {
            "Process": 0.08,
            "Thread": 0.07,
            "File": 0.30,
            "Registry": 0.35,
            "Internet": 0.05,
            "Image": 0.15,
        }
    )
    benign_process_count: int = 12
    benign_object_count: int = 40  # per event type
    chain_noise_ratio: float = 0.3  # co-temporal noise issued by chain pids

    def __post_init__(self):
        total = sum(self.mix.values())
        if abs(total - 1.0) > 1e-9:
            raise SchemaError(f"noise mix ratios must sum to 1, got {total}")

    def to_json(self) -> str:
        return json.dumps(
            {
                "events_per_second": self.events_per_second,
                "mix": self.mix,
                "benign_process_count": self.benign_process_count,
                "benign_object_count": self.benign_object_count,
                "chain_noise_ratio": self.chain_noise_ratio,
            },
            indent=2,
            sort_keys=True,
        )

    @classmethod
    def from_json(cls, text: str) -> "NoiseProfile":
        try:
            payload = json.loads(text)
        except json.JSONDecodeError as exc:
            raise SchemaError(f"invalid noise profile JSON: {exc}")
        return cls(**payload)


#: event-name mix per type: kept dependency names plus the lifecycle/handle
#: names the extractor must drop (RegistryOpen, FileioCreate, ...)
_NOISE_NAMES = {
    "Process": [("Start", 2), ("End", 3)],
    "Thread": [("Start", 2), ("End", 3)],
    "File": [("Create", 2), ("Read", 4), ("Write", 2), ("ioCreate", 4)],
    "Registry": [("Query", 3), ("Open", 4), ("Close", 4), ("SetValue", 1)],
    "Internet": [("Receive", 2), ("Send", 2)],
    "Image": [("Load", 3), ("DCStart", 1)],
}

_BENIGN_IMAGES = [
    "C:\\Windows\\System32\\svchost.exe",
    "C:\\Windows\\explorer.exe",
    "C:\\Windows\\System32\\services.exe",
    "C:\\Windows\\System32\\lsm.exe",
    "C:\\Windows\\System32\\taskhostw.exe",
    "C:\\Program Files\\Common\\updater.exe",
    "C:\\Windows\\System32\\searchindexer.exe",
    "C:\\Windows\\System32\\spoolsv.exe",
    "C:\\Windows\\System32\\wininit.exe",
    "C:\\Windows\\System32\\dwm.exe",
    "C:\\Windows\\System32\\ctfmon.exe",
    "C:\\Windows\\System32\\sihost.exe",
]


def _benign_vocab(profile: NoiseProfile) -> dict[str, list[str]]:
    count = profile.benign_object_count
    return {
        "Process": _BENIGN_IMAGES[: profile.benign_process_count],
        "Thread": _BENIGN_IMAGES[: profile.benign_process_count],
        "File": [f"C:\\Windows\\System32\\config\\benign_{i:03}.dat" for i in range(count)],
        "Registry": [
            f"HKLM\\Software\\BenignVendor\\Component{i:03}\\State" for i in range(count)
        ],
        "Internet": [f"10.1.{i // 250}.{i % 250 + 1}:443" for i in range(count)],
        "Image": [f"C:\\Windows\\System32\\benignlib_{i:03}.dll" for i in range(count)],
    }


@dataclass
class GeneratedRun:
    events: list[AuditEvent]
    benign_events: list[AuditEvent]
    meta: RunMeta
    truth: TechniqueGraph
    whitelist: Whitelist
    node_labels: list[str]  # template node index -> instantiated label
    pids: dict[int, int]  # template node index -> pid (process-like nodes)


_BASE_NS = 1_700_000_000_000_000_000


def _truth_graph(
    template: TechniqueTemplate,
    labels: list[str],
    meta: RunMeta,
    timestamps: list[int],
) -> TechniqueGraph:
    tag = f"log:{meta.procedure_id}"
    graph = TechniqueGraph(
        technique_id=template.technique_id,
        source_kind="log",
        procedure_id=meta.procedure_id,
    )
    graph.add_node(NodeKind.ATTACKER, "attacker", node_id=0, provenance={tag})
    for index, spec in enumerate(template.nodes):
        graph.add_node(spec.kind, labels[index], node_id=index + 1, provenance={tag})
    for edge, ts in zip(template.edges, timestamps):
        graph.add_edge(
            edge.src + 1,
            edge.dst + 1,
            edge.relation,
            timestamps=[ts],
            provenance={tag},
        )
    graph.add_edge(0, 1, EdgeRelation.PROCESS_START, provenance={tag})
    return graph


def generate_run(
    template: TechniqueTemplate,
    noise: NoiseProfile,
    seed: int,
    *,
    noise_events: int = 5000,
    benign_events: int = 400,
    leak_node_indexes: tuple[int, ...] = (),
) -> GeneratedRun:
    """Generate one labeled attack capture plus its benign whitelist capture.

    Deterministic for a fixed seed.  The injected events realize the
    template exactly inside [t_start, t_end]; ``leak_node_indexes`` forces
    those template objects into the benign capture too (so the whitelist
    wrongly covers them - the static-analysis recovery fixture).
    """
    rng = SplitMix64(seed)
    run_tag = rng.hexstr(8)
    procedure_id = f"{template.technique_id}-{template.name}-{run_tag}"

    labels = []
    for spec in template.nodes:
        label = spec.label.replace("{rand}", rng.hexstr(8)).replace("{run}", run_tag)
        labels.append(label)

    pids: dict[int, int] = {}
    next_pid = rng.randint(3000, 6000)
    for index, spec in enumerate(template.nodes):
        if spec.kind in (NodeKind.PROCESS, NodeKind.THREAD):
            pids[index] = next_pid
            next_pid += rng.randint(1, 7)

    vocab = _benign_vocab(noise)
    benign_pids = [100 + 13 * i for i in range(noise.benign_process_count)]
    mix_pairs = sorted(noise.mix.items())

    def noise_event(ts: int, in_window: bool) -> AuditEvent:
        event_type = rng.weighted(mix_pairs)
        event_name = rng.weighted(_NOISE_NAMES[event_type])
        is_start = event_name in ("Start", "DCStart")
        chain_subject = (
            in_window
            and not (event_type == "Process" and is_start)
            and rng.random() < noise.chain_noise_ratio
        )
        if chain_subject:
            src_index = rng.choice(sorted(pids))
            pid, image = pids[src_index], labels[src_index]
        else:
            slot = rng.next_u64() % len(benign_pids)
            pid, image = benign_pids[slot], _BENIGN_IMAGES[slot % len(_BENIGN_IMAGES)]
        obj = rng.choice(vocab[event_type])
        object_pid = None
        if event_type == "Process" and is_start:
            # benign parent and child only; noise must never extend the chain
            slot = rng.next_u64() % len(benign_pids)
            obj = _BENIGN_IMAGES[slot % len(_BENIGN_IMAGES)]
            object_pid = benign_pids[slot]
        if event_type == "Thread" and is_start:
            object_pid = pid  # same-process thread, folded away by selection
            obj = image
        return AuditEvent(
            ts=ts,
            event_type=event_type,
            event_name=event_name,
            pid=pid,
            subject_image=image,
            object=obj,
            ppid=None,
            tid=rng.randint(1, 64) if event_type == "Thread" else None,
            object_pid=object_pid,
        )

    # Benign capture: every vocabulary object once (full whitelist coverage),
    # then random benign traffic, all strictly before the attack capture.
    benign_stream: list[AuditEvent] = []
    benign_t = _BASE_NS - 10_000_000_000
    coverage = []
    for event_type in sorted(vocab):
        for obj in vocab[event_type]:
            coverage.append((event_type, obj))
    for index, (event_type, obj) in enumerate(coverage):
        names = [n for n, _w in _NOISE_NAMES[event_type]]
        slot = index % len(benign_pids)
        benign_stream.append(
            AuditEvent(
                ts=benign_t,
                event_type=event_type,
                event_name=names[index % len(names)],
                pid=benign_pids[slot],
                subject_image=_BENIGN_IMAGES[slot % len(_BENIGN_IMAGES)],
                object=obj,
                object_pid=benign_pids[(slot + 1) % len(benign_pids)]
                if event_type == "Process"
                else (benign_pids[slot] if event_type == "Thread" else None),
            )
        )
        benign_t += 1_000_000
    for index in sorted(leak_node_indexes):
        spec = template.nodes[index]
        benign_stream.append(
            AuditEvent(
                ts=benign_t,
                event_type={
                    NodeKind.FILE: "File",
                    NodeKind.REGISTRY: "Registry",
                    NodeKind.NETWORK: "Internet",
                    NodeKind.IMAGE: "Image",
                    NodeKind.PROCESS: "Process",
                    NodeKind.THREAD: "Thread",
                }[spec.kind],
                event_name={
                    NodeKind.FILE: "Read",
                    NodeKind.REGISTRY: "Query",
                    NodeKind.NETWORK: "Receive",
                    NodeKind.IMAGE: "Load",
                    NodeKind.PROCESS: "Start",
                    NodeKind.THREAD: "Start",
                }[spec.kind],
                pid=benign_pids[0],
                subject_image=_BENIGN_IMAGES[0],
                object=labels[index],
                object_pid=benign_pids[1] if spec.kind is NodeKind.PROCESS else None,
            )
        )
        benign_t += 1_000_000
    while len(benign_stream) < benign_events:
        benign_stream.append(noise_event(benign_t, in_window=False))
        benign_t += rng.randint(200_000, 2_000_000)

    # Attack capture: noise across the whole capture, template events inside
    # the execution window.
    step_ns = max(1, int(1e9 / noise.events_per_second))
    attack_span = max((e.offset_ns for e in template.edges), default=0) + 1_000_000
    total_span = max(noise_events * step_ns, attack_span * 2)
    t0 = _BASE_NS
    t_start = t0 + (total_span - attack_span) // 2
    t_end = t_start + attack_span

    injected: list[AuditEvent] = []
    injected_ts: list[int] = []
    for edge in template.edges:
        ts = t_start + edge.offset_ns
        event_type, event_name = RELATION_EVENTS[edge.relation]
        dst_kind = template.nodes[edge.dst].kind
        injected_ts.append(ts)
        injected.append(
            AuditEvent(
                ts=ts,
                event_type=event_type,
                event_name=event_name,
                pid=pids[edge.src],
                subject_image=labels[edge.src],
                object=labels[edge.dst],
                ppid=None,
                tid=rng.randint(1, 64) if event_type == "Thread" else None,
                object_pid=pids.get(edge.dst)
                if dst_kind in (NodeKind.PROCESS, NodeKind.THREAD)
                else None,
            )
        )

    noise_stream = []
    ts = t0
    for _ in range(noise_events):
        in_window = t_start <= ts <= t_end
        noise_stream.append(noise_event(ts, in_window))
        ts += rng.randint(max(1, step_ns // 2), step_ns + step_ns // 2)

    events = sorted(noise_stream + injected, key=lambda e: e.ts)

    meta = RunMeta(
        technique_id=template.technique_id,
        procedure_id=procedure_id,
        initial_pid=pids[0],
        t_start=t_start,
        t_end=t_end,
    )
    truth = _truth_graph(template, labels, meta, injected_ts)
    whitelist = build_whitelist(benign_stream)
    return GeneratedRun(
        events=events,
        benign_events=benign_stream,
        meta=meta,
        truth=truth,
        whitelist=whitelist,
        node_labels=labels,
        pids=pids,
    )


def write_run(run: GeneratedRun, out_dir) -> dict[str, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {
        "events": out / "events.jsonl",
        "benign": out / "benign.jsonl",
        "meta": out / "meta.json",
        "truth": out / "truth.gml",
        "whitelist": out / "whitelist.json",
    }
    write_events(run.events, paths["events"])
    write_events(run.benign_events, paths["benign"])
    paths["meta"].write_text(run.meta.to_json() + "\n", encoding="utf-8")
    paths["truth"].write_text(export_gml(run.truth), encoding="utf-8")
    paths["whitelist"].write_text(run.whitelist.to_json(), encoding="utf-8")
    return paths


def make_script_source(template: TechniqueTemplate, labels: list[str]) -> str:
    """A supported-subset script whose harvested candidates cover the
    template's file/registry objects and spawned processes."""
    lines = ["# generated attack script"]
    targets = []
    for index, spec in enumerate(template.nodes):
        if spec.kind in (NodeKind.FILE, NodeKind.REGISTRY):
            lines.append(f"$target{index} = '{labels[index]}'")
            targets.append(index)
    for index, spec in enumerate(template.nodes):
        if spec.kind is NodeKind.PROCESS and index > 0:
            base = labels[index].replace("/", "\\").split("\\")[-1]
            if targets:
                lines.append(f'{base} "$target{targets[0]}"')
            else:
                lines.append(base)
    return "\n".join(lines) + "\n"


# -- builtin templates ---------------------------------------------------------


def _t(kind: NodeKind, label: str) -> NodeSpec:
    return NodeSpec(kind=kind, label=label)


BUILTIN_TEMPLATES: dict[str, TechniqueTemplate] = {}


def _register(template: TechniqueTemplate) -> TechniqueTemplate:
    BUILTIN_TEMPLATES[template.name] = template
    return template


# Persistence via a Run key: shell spawns a registry writer that sets the
# key; the shell drops the referenced script and the writer pulls in a dll.
_register(
    TechniqueTemplate(
        technique_id="T1547.001",
        name="registry-run-key",
        nodes=[
            _t(NodeKind.PROCESS, "C:\\Windows\\System32\\cmd.exe"),
            _t(NodeKind.PROCESS, "C:\\Windows\\System32\\reg.exe"),
            _t(NodeKind.REGISTRY, "HKCU\\Software\\Microsoft\\Windows\\CurrentVersion\\Run\\Updater"),
            _t(NodeKind.FILE, "C:\\Users\\victim\\AppData\\Roaming\\startup_{rand}.vbs"),
            _t(NodeKind.IMAGE, "C:\\Windows\\System32\\advapi32.dll"),
        ],
        edges=[
            EdgeSpec(EdgeRelation.FILE_CREATE.value, 0, 3, 1_000),
            EdgeSpec(EdgeRelation.PROCESS_START.value, 0, 1, 5_000),
            EdgeSpec(EdgeRelation.IMAGE_LOAD.value, 1, 4, 7_000),
            EdgeSpec(EdgeRelation.REGISTRY_SET_VALUE.value, 1, 2, 9_000),
        ],
    )
)

# Credential dump: powershell drives rundll32/comsvcs to write a dump file
# after checking an LSA key.
_register(
    TechniqueTemplate(
        technique_id="T1003.001",
        name="lsass-dump",
        nodes=[
            _t(NodeKind.PROCESS, "C:\\Windows\\System32\\WindowsPowerShell\\v1.0\\powershell.exe"),
            _t(NodeKind.PROCESS, "C:\\Windows\\System32\\rundll32.exe"),
            _t(NodeKind.REGISTRY, "HKLM\\SYSTEM\\CurrentControlSet\\Control\\Lsa\\RunAsPPL"),
            _t(NodeKind.IMAGE, "C:\\Windows\\System32\\comsvcs.dll"),
            _t(NodeKind.FILE, "C:\\Windows\\Temp\\lsass_{rand}.dmp"),
        ],
        edges=[
            EdgeSpec(EdgeRelation.REGISTRY_QUERY.value, 0, 2, 1_000),
            EdgeSpec(EdgeRelation.PROCESS_START.value, 0, 1, 4_000),
            EdgeSpec(EdgeRelation.IMAGE_LOAD.value, 1, 3, 6_000),
            EdgeSpec(EdgeRelation.FILE_CREATE.value, 1, 4, 9_000),
        ],
    )
)

# Ingress tool transfer: cmd runs bitsadmin, which talks to a remote host
# and drops a payload that is then started.
_register(
    TechniqueTemplate(
        technique_id="T1105",
        name="bits-download",
        nodes=[
            _t(NodeKind.PROCESS, "C:\\Windows\\System32\\cmd.exe"),
            _t(NodeKind.PROCESS, "C:\\Windows\\System32\\bitsadmin.exe"),
            _t(NodeKind.NETWORK, "203.0.113.77:443"),
            _t(NodeKind.FILE, "C:\\Users\\victim\\Downloads\\update_{run}.exe"),
            _t(NodeKind.PROCESS, "C:\\Users\\victim\\Downloads\\update_{run}.exe"),
        ],
        edges=[
            EdgeSpec(EdgeRelation.PROCESS_START.value, 0, 1, 1_000),
            EdgeSpec(EdgeRelation.NET_SEND.value, 1, 2, 3_000),
            EdgeSpec(EdgeRelation.NET_RECEIVE.value, 1, 2, 5_000),
            EdgeSpec(EdgeRelation.FILE_CREATE.value, 1, 3, 7_000),
            EdgeSpec(EdgeRelation.PROCESS_START.value, 0, 4, 9_000),
        ],
    )
)

# Defense evasion: wevtutil clears logs after a service query.
_register(
    TechniqueTemplate(
        technique_id="T1562.001",
        name="disable-eventlog",
        nodes=[
            _t(NodeKind.PROCESS, "C:\\Windows\\System32\\cmd.exe"),
            _t(NodeKind.PROCESS, "C:\\Windows\\System32\\sc.exe"),
            _t(NodeKind.REGISTRY, "HKLM\\SYSTEM\\CurrentControlSet\\Services\\EventLog\\Start"),
            _t(NodeKind.FILE, "C:\\Windows\\System32\\winevt\\Logs\\Security.evtx"),
        ],
        edges=[
            EdgeSpec(EdgeRelation.PROCESS_START.value, 0, 1, 1_000),
            EdgeSpec(EdgeRelation.REGISTRY_SET_VALUE.value, 1, 2, 3_000),
            EdgeSpec(EdgeRelation.FILE_WRITE.value, 0, 3, 6_000),
        ],
    )
)

# Boot logon script: batch file written to temp, referenced from the
# UserInitMprLogonScript value.
_register(
    TechniqueTemplate(
        technique_id="T1037.001",
        name="logon-script",
        nodes=[
            _t(NodeKind.PROCESS, "C:\\Windows\\System32\\WindowsPowerShell\\v1.0\\powershell.exe"),
            _t(NodeKind.FILE, "C:\\Users\\victim\\AppData\\Local\\Temp\\art_{rand}.cmd"),
            _t(NodeKind.PROCESS, "C:\\Windows\\System32\\reg.exe"),
            _t(NodeKind.REGISTRY, "HKCU\\Environment\\UserInitMprLogonScript"),
        ],
        edges=[
            EdgeSpec(EdgeRelation.FILE_CREATE.value, 0, 1, 1_000),
            EdgeSpec(EdgeRelation.PROCESS_START.value, 0, 2, 4_000),
            EdgeSpec(EdgeRelation.REGISTRY_SET_VALUE.value, 2, 3, 7_000),
        ],
    )
)


def get_template(name: str) -> TechniqueTemplate:
    if name not in BUILTIN_TEMPLATES:
        raise SchemaError(
            f"unknown template {name!r}; builtin: {sorted(BUILTIN_TEMPLATES)}"
        )
    return BUILTIN_TEMPLATES[name]
