"""Shared fixture builders: small graphs, the retention family, CTI fixtures,
and seeded random graphs for property batteries."""

from __future__ import annotations

import json
import random

import pytest

from techkg.model import EdgeRelation, NodeKind, TechniqueGraph
from techkg.merge import MergeReport, retention_pct

PS_EXE = "C:\\Windows\\System32\\WindowsPowerShell\\v1.0\\powershell.exe"
PROCDUMP_EXE = "C:\\Tools\\procdump.exe"
RUNDLL_EXE = "C:\\Windows\\System32\\rundll32.exe"


def quick_graph(technique="T1547.001", source="log", proc="proc-0"):
    """Attacker -> cmd.exe -> {reg.exe -> run key}, cmd.exe -> script file."""
    tag = {f"log:{proc}"}
    g = TechniqueGraph(technique, source, procedure_id=proc)
    g.add_node(NodeKind.ATTACKER, "attacker", node_id=0, provenance=tag)
    cmd = g.add_node(NodeKind.PROCESS, "C:\\Windows\\System32\\cmd.exe", provenance=tag)
    reg = g.add_node(NodeKind.PROCESS, "C:\\Windows\\System32\\reg.exe", provenance=tag)
    key = g.add_node(
        NodeKind.REGISTRY,
        "HKCU\\Software\\Microsoft\\Windows\\CurrentVersion\\Run\\Updater",
        provenance=tag,
    )
    script = g.add_node(
        NodeKind.FILE, "C:\\Users\\victim\\AppData\\Roaming\\start.vbs", provenance=tag
    )
    g.add_edge(0, cmd.id, EdgeRelation.PROCESS_START, provenance=tag)
    g.add_edge(cmd.id, reg.id, EdgeRelation.PROCESS_START, provenance=tag)
    g.add_edge(reg.id, key.id, EdgeRelation.REGISTRY_SET_VALUE, provenance=tag)
    g.add_edge(cmd.id, script.id, EdgeRelation.FILE_CREATE, provenance=tag)
    return g


def retention_family():
    """Eleven T1003.001-style procedure graphs totaling 59 nodes / 49 edges
    that aggregate to exactly 7 nodes / 7 edges."""
    shapes = [
        # (procdump?, rundll32?, level-2 files, registries, level-3 files, diamond?)
        (True, False, 2, 1, 0, True),
        (True, False, 1, 1, 0, False),
        (True, False, 1, 1, 0, False),
        (False, True, 1, 1, 2, False),
        (False, True, 1, 1, 1, False),
        (False, True, 1, 1, 1, False),
        (False, True, 1, 1, 1, False),
        (False, False, 2, 1, 0, False),
        (False, False, 2, 1, 0, False),
        (False, False, 2, 1, 0, False),
        (False, False, 1, 0, 0, False),
    ]
    graphs = []
    serial = 0
    for g_idx, (pd, rd, n_files, n_regs, n_deep, diamond) in enumerate(shapes):
        tag = {f"log:proc-{g_idx}"}
        g = TechniqueGraph("T1003.001", "log", procedure_id=f"proc-{g_idx}")
        g.add_node(NodeKind.ATTACKER, "attacker", node_id=0, provenance=tag)
        ps = g.add_node(NodeKind.PROCESS, PS_EXE, provenance=tag)
        g.add_edge(0, ps.id, EdgeRelation.PROCESS_START, provenance=tag)
        pd_node = rd_node = None
        if pd:
            pd_node = g.add_node(NodeKind.PROCESS, PROCDUMP_EXE, provenance=tag)
            g.add_edge(0, pd_node.id, EdgeRelation.PROCESS_START, provenance=tag)
        if rd:
            rd_node = g.add_node(NodeKind.PROCESS, RUNDLL_EXE, provenance=tag)
            g.add_edge(ps.id, rd_node.id, EdgeRelation.PROCESS_START, provenance=tag)
        for i in range(n_files):
            serial += 1
            f = g.add_node(
                NodeKind.FILE, f"C:\\dumps\\cred{serial:03}.dmp", provenance=tag
            )
            g.add_edge(ps.id, f.id, EdgeRelation.FILE_CREATE, provenance=tag)
            if diamond and i == 0:
                g.add_edge(pd_node.id, f.id, EdgeRelation.FILE_WRITE, provenance=tag)
        for _ in range(n_regs):
            serial += 1
            r = g.add_node(
                NodeKind.REGISTRY,
                f"HKLM\\SYSTEM\\CurrentControlSet\\Control\\Lsa\\Key{serial:03}",
                provenance=tag,
            )
            g.add_edge(ps.id, r.id, EdgeRelation.REGISTRY_QUERY, provenance=tag)
        for _ in range(n_deep):
            serial += 1
            f = g.add_node(
                NodeKind.FILE, f"D:\\staging\\out{serial:03}.bin", provenance=tag
            )
            g.add_edge(rd_node.id, f.id, EdgeRelation.FILE_CREATE, provenance=tag)
        graphs.append(g)
    return graphs


#: (technique, procedures, entity before/after, edge before/after) mirroring
#: the published same-source aggregation table for the log column.
TABLE5_LOG_ROWS = [
    ("T1003.001", 11, 59, 7, 49, 7),
    ("T1018", 13, 195, 24, 421, 24),
    ("T1021.002", 4, 39, 12, 37, 15),
    ("T1040", 4, 41, 12, 39, 12),
    ("T1036.003", 8, 88, 29, 95, 39),
    ("T1059.001", 19, 73, 11, 56, 14),
    ("T1548.002", 20, 155, 43, 143, 56),
    ("T1546.002", 1, 15, 8, 18, 7),
    ("T1090.003", 2, 44, 17, 51, 22),
    ("T1615", 5, 28, 12, 27, 16),
]


def table5_reports() -> list[MergeReport]:
    reports = []
    for _tid, procs, nb, na, eb, ea in TABLE5_LOG_ROWS:
        reports.append(
            MergeReport(
                input_graph_count=procs,
                nodes_before=nb,
                nodes_after=na,
                edges_before=eb,
                edges_after=ea,
                entity_retention_pct=retention_pct(na, nb),
                edge_retention_pct=retention_pct(ea, eb),
            )
        )
    return reports


# -- CTI fixtures --------------------------------------------------------------

CTI_FIXTURES = [
    {
        "doc": {
            "report_id": "rep-boxcaon",
            "technique_id": "T1547.001",
            "source_name": "vendor-blog",
            "text": (
                "The BoxCaon backdoor gains persistence by having reg.exe set the "
                "HKCU\\Software\\Microsoft\\Windows\\CurrentVersion\\Run\\Updater "
                "value so its dropper executes at every logon."
            ),
        },
        "response": {
            "entities": [
                {"name": "reg.exe", "kind": "Process", "iocs": []},
                {
                    "name": "HKCU\\Software\\Microsoft\\Windows\\CurrentVersion\\Run\\Updater",
                    "kind": "Registry",
                    "iocs": [],
                },
            ],
            "relations": [
                {
                    "src_name": "reg.exe",
                    "verb": "sets",
                    "dst_name": "HKCU\\Software\\Microsoft\\Windows\\CurrentVersion\\Run\\Updater",
                }
            ],
        },
    },
    {
        "doc": {
            "report_id": "rep-dropper",
            "technique_id": "T1547.001",
            "source_name": "ir-note",
            "text": (
                "During the intrusion cmd.exe wrote the loader "
                "C:\\Users\\victim\\AppData\\Roaming\\start.vbs and launched reg.exe "
                "to create a Run key under "
                "HKCU\\Software\\Microsoft\\Windows\\CurrentVersion\\Run."
            ),
        },
        "response": {
            "entities": [
                {"name": "cmd.exe", "kind": "Process", "iocs": []},
                {"name": "reg.exe", "kind": "Process", "iocs": []},
                {
                    "name": "C:\\Users\\victim\\AppData\\Roaming\\start.vbs",
                    "kind": "File",
                    "iocs": [],
                },
                {
                    "name": "HKCU\\Software\\Microsoft\\Windows\\CurrentVersion\\Run",
                    "kind": "Registry",
                    "iocs": [],
                },
            ],
            "relations": [
                {
                    "src_name": "cmd.exe",
                    "verb": "writes",
                    "dst_name": "C:\\Users\\victim\\AppData\\Roaming\\start.vbs",
                },
                {"src_name": "cmd.exe", "verb": "launches", "dst_name": "reg.exe"},
                {
                    "src_name": "reg.exe",
                    "verb": "creates",
                    "dst_name": "HKCU\\Software\\Microsoft\\Windows\\CurrentVersion\\Run",
                },
            ],
        },
    },
]


def seed_cti_fixtures(store_dir, reports_dir=None):
    """Populate a fixture store (and optionally a reports directory) with the
    canned report/response pairs; returns the ReportDocs."""
    from techkg.cti import FixtureClient, ReportDoc, build_prompt

    client = FixtureClient(store_dir)
    docs = []
    for fixture in CTI_FIXTURES:
        doc = ReportDoc(**fixture["doc"])
        client.put(build_prompt(doc), json.dumps(fixture["response"]))
        docs.append(doc)
        if reports_dir is not None:
            reports_dir.mkdir(parents=True, exist_ok=True)
            path = reports_dir / f"{doc.report_id}.json"
            path.write_text(json.dumps(fixture["doc"], indent=2), encoding="utf-8")
    return docs


# -- random graphs for property batteries ---------------------------------------

_KIND_POOL = [
    (NodeKind.PROCESS, ["C:\\sys\\alpha.exe", "C:\\sys\\beta.exe", "C:\\tools\\gamma.exe", "delta.exe"]),
    (NodeKind.FILE, ["C:\\data\\a.doc", "C:\\data\\b.doc", "D:\\drop\\c.bin", "E:\\tmp\\d.txt"]),
    (NodeKind.REGISTRY, ["HKLM\\Soft\\K1", "HKCU\\Env\\K2", "HKLM\\Soft\\Deep\\Key\\Path\\K3"]),
    (NodeKind.NETWORK, ["10.0.0.1:80", "evil.example.com", "198.51.100.9:443"]),
    (NodeKind.IMAGE, ["C:\\win\\lib1.dll", "C:\\win\\lib2.dll"]),
    (NodeKind.THREAD, ["C:\\sys\\host.exe"]),
]

_ATTACH = {
    NodeKind.PROCESS: EdgeRelation.PROCESS_START,
    NodeKind.THREAD: EdgeRelation.THREAD_START,
    NodeKind.FILE: EdgeRelation.FILE_CREATE,
    NodeKind.REGISTRY: EdgeRelation.REGISTRY_SET_VALUE,
    NodeKind.NETWORK: EdgeRelation.NET_SEND,
    NodeKind.IMAGE: EdgeRelation.IMAGE_LOAD,
}


def random_graph(
    rng: random.Random,
    technique="T1003.001",
    source="log",
    max_nodes=12,
    tag=None,
) -> TechniqueGraph:
    """Connected attacker-rooted graph with valid provenance and relations."""
    tag = tag or f"{'cti' if source in ('cti', 'merged-cti') else 'log'}:r{rng.randrange(10**6)}"
    g = TechniqueGraph(technique, source)
    g.add_node(NodeKind.ATTACKER, "attacker", node_id=0, provenance={tag})
    count = rng.randint(1, max_nodes - 1)
    for _ in range(count):
        kind, labels = rng.choice(_KIND_POOL)
        label = rng.choice(labels)
        node = g.add_node(kind, label, provenance={tag})
        parent = rng.choice([nid for nid in g.nodes if nid != node.id])
        relation = _ATTACH[kind].value
        if source in ("cti", "merged-cti") and rng.random() < 0.3:
            g.add_edge(parent, node.id, {relation, "uses"}, provenance={tag})
        else:
            g.add_edge(parent, node.id, relation, provenance={tag})
    # a few extra non-tree edges
    ids = list(g.nodes)
    for _ in range(rng.randint(0, 3)):
        src, dst = rng.choice(ids), rng.choice(ids)
        if src != dst and g.nodes[dst].kind is not NodeKind.ATTACKER:
            g.add_edge(src, dst, _ATTACH[g.nodes[dst].kind].value, provenance={tag})
    return g


@pytest.fixture
def rng():
    return random.Random(20240817)


# -- acceptance criterion reporting ---------------------------------------------

ACCEPTANCE_RESULTS: list[tuple[int, str, str, float]] = []


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for num, name, status, elapsed in sorted(ACCEPTANCE_RESULTS):
        terminalreporter.write_line(
            f"criterion {num:02d} {name}: {status} ({elapsed:.2f}s)"
        )
