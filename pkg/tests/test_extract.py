import pytest

from techkg.errors import NoAttackEvents, UnknownPid
from techkg.events import AuditEvent
from techkg.extract import (
    ExtractConfig,
    Whitelist,
    aggregate_edges,
    build_process_chain,
    build_provenance_graph,
    build_whitelist,
    extract_technique_graph,
    filter_objects,
    select_events,
)
from techkg.metrics import compare_graphs
from techkg.model import EdgeRelation, NodeKind, TechniqueGraph
from techkg.serialize import export_gml
from techkg.model import canonical_form, canonically_equal, validate
from techkg import synth


def ev(ts, etype, name, pid, image, obj, **kw):
    return AuditEvent(ts, etype, name, pid, image, obj, **kw)


def start(ts, pid, image, child_pid, child_image):
    return ev(ts, "Process", "Start", pid, image, child_image, object_pid=child_pid)


def test_chain_single_start():
    events = [start(1, 100, "C:\\p0.exe", 101, "C:\\p1.exe")]
    chain = build_process_chain(events, 100)
    assert chain.pids == {100, 101}


def test_chain_no_creations():
    events = [ev(1, "File", "Read", 100, "C:\\p0.exe", "C:\\f")]
    chain = build_process_chain(events, 100)
    assert chain.pids == {100}


def test_chain_fork_tree():
    # P0 spawns P1; P1 spawns P2 and P3 (hand-traced: all four join)
    events = [
        start(1, 100, "C:\\p0.exe", 101, "C:\\p1.exe"),
        start(2, 101, "C:\\p1.exe", 102, "C:\\p2.exe"),
        start(3, 101, "C:\\p1.exe", 103, "C:\\p3.exe"),
        start(4, 999, "C:\\noise.exe", 998, "C:\\other.exe"),
    ]
    chain = build_process_chain(events, 100)
    assert chain.pids == {100, 101, 102, 103}


def test_chain_cross_process_thread_creates_thread_node():
    events = [
        ev(1, "File", "Read", 100, "C:\\p0.exe", "C:\\f"),
        ev(2, "Thread", "Start", 100, "C:\\p0.exe", "C:\\victim.exe", object_pid=200, tid=7),
    ]
    chain = build_process_chain(events, 100)
    assert 200 in chain.pids
    assert chain.nodes[200].kind is NodeKind.THREAD


def test_chain_unknown_initial_pid():
    events = [start(1, 100, "C:\\p0.exe", 101, "C:\\p1.exe")]
    with pytest.raises(UnknownPid):
        build_process_chain(events, 555)


def test_select_drops_registry_open():
    chain = build_process_chain([ev(1, "File", "Read", 1, "p", "f")], 1)
    kept = select_events([ev(2, "Registry", "Open", 1, "p", "HKLM\\X")], chain)
    assert kept == []


def test_select_keeps_file_rename_by_chain_pid():
    chain = build_process_chain([ev(1, "File", "Read", 1, "p", "f")], 1)
    event = ev(2, "File", "Rename", 1, "p", "C:\\a.doc")
    assert select_events([event], chain) == [event]


def test_select_drops_non_chain_pid():
    chain = build_process_chain([ev(1, "File", "Read", 1, "p", "f")], 1)
    assert select_events([ev(2, "File", "Write", 9, "q", "C:\\a")], chain) == []


def test_select_drops_same_process_thread_start():
    chain = build_process_chain([ev(1, "File", "Read", 1, "p", "f")], 1)
    same = ev(2, "Thread", "Start", 1, "p", "p", object_pid=1, tid=3)
    assert select_events([same], chain) == []


def test_whitelist_contains_normalized_registry_key():
    wl = build_whitelist([ev(1, "Registry", "Query", 1, "p", "HKLM\\Soft\\\\Key\\")])
    assert wl.contains(NodeKind.REGISTRY, "hklm\\soft\\key")
    assert len(wl) == 1


def test_whitelist_empty_capture():
    assert len(build_whitelist([])) == 0


def test_whitelist_size_matches_generator_vocabulary():
    run = synth.generate_run(
        synth.get_template("registry-run-key"), synth.NoiseProfile(), 21,
        noise_events=300,
    )
    distinct = {(e.event_type, e.object.lower()) for e in run.benign_events}
    # Process and Thread objects share the Process kind, so count merged kinds
    by_kind = {}
    for etype, obj in distinct:
        kind = "Process" if etype in ("Process", "Thread") else etype
        by_kind.setdefault(kind, set()).add(obj)
    assert len(run.whitelist) == sum(len(v) for v in by_kind.values())


def test_filter_objects_drops_whitelisted_keeps_novel():
    wl = build_whitelist([ev(1, "File", "Read", 1, "p", "C:\\benign.txt")])
    benign = ev(2, "File", "Read", 1, "p", "C:\\BENIGN.TXT")
    novel = ev(3, "File", "Read", 1, "p", "C:\\evil.txt")
    assert filter_objects([benign, novel], wl) == [novel]


def test_filter_objects_synth_run_keeps_exactly_injected():
    run = synth.generate_run(
        synth.get_template("registry-run-key"), synth.NoiseProfile(), 31,
        noise_events=2000,
    )
    from techkg.events import window

    sliced = window(run.events, run.meta.t_start, run.meta.t_end)
    chain = build_process_chain(sliced, run.meta.initial_pid)
    survivors = filter_objects(select_events(sliced, chain), run.whitelist)
    assert len(survivors) == len(synth.get_template("registry-run-key").edges)


def test_aggregate_merges_read_then_write_into_one_edge():
    g = TechniqueGraph("T1005", "log")
    g.add_node(NodeKind.ATTACKER, "attacker", node_id=0)
    p = g.add_node(NodeKind.PROCESS, "C:\\p.exe")
    f = g.add_node(NodeKind.FILE, "C:\\data.txt")
    g.add_edge(0, p.id, EdgeRelation.PROCESS_START)
    g.add_edge(p.id, f.id, EdgeRelation.FILE_READ, timestamps=[1])
    g.add_edge(p.id, f.id, EdgeRelation.FILE_WRITE, timestamps=[2])
    out = aggregate_edges(g)
    assert out.edges[(p.id, f.id)].relations == {"FileRead", "FileWrite"}
    assert len(out.edges) == 2


def test_aggregate_minimal_graph_is_fixpoint():
    g = aggregate_edges(TechniqueGraph("T1005", "log"))
    from conftest import quick_graph

    fixture = quick_graph()
    assert canonically_equal(aggregate_edges(fixture), fixture)
    assert g.nodes == {}


def test_aggregate_collapses_fifty_doc_reads():
    g = TechniqueGraph("T1005", "log")
    g.add_node(NodeKind.ATTACKER, "attacker", node_id=0)
    p = g.add_node(NodeKind.PROCESS, "C:\\p.exe")
    g.add_edge(0, p.id, EdgeRelation.PROCESS_START)
    for i in range(50):
        f = g.add_node(NodeKind.FILE, f"C:\\docs\\report_{i:02}.doc")
        g.add_edge(p.id, f.id, EdgeRelation.FILE_READ, timestamps=[i])
    out = aggregate_edges(g)
    files = [n for n in out.nodes.values() if n.kind is NodeKind.FILE]
    assert len(files) == 1
    assert len(files[0].extra_labels) == 50
    assert files[0].label == "C:\\docs\\.*.doc"
    assert files[0].generalized
    edge = out.edges[(p.id, files[0].id)]
    assert edge.relations == {"FileRead"}
    assert len(edge.timestamps) == 50


def test_aggregate_leaves_small_groups_alone():
    g = TechniqueGraph("T1005", "log")
    g.add_node(NodeKind.ATTACKER, "attacker", node_id=0)
    p = g.add_node(NodeKind.PROCESS, "C:\\p.exe")
    g.add_edge(0, p.id, EdgeRelation.PROCESS_START)
    for i in range(2):
        f = g.add_node(NodeKind.FILE, f"C:\\docs\\r{i}.doc")
        g.add_edge(p.id, f.id, EdgeRelation.FILE_READ)
    out = aggregate_edges(g)
    assert sum(1 for n in out.nodes.values() if n.kind is NodeKind.FILE) == 2


def test_extract_registry_run_key_matches_generator_truth():
    run = synth.generate_run(
        synth.get_template("registry-run-key"), synth.NoiseProfile(), 42,
        noise_events=3000,
    )
    graph = extract_technique_graph(run.events, run.meta, run.whitelist)
    assert len(graph.nodes) == 6 and len(graph.edges) == 5
    assert validate(graph) == []
    assert canonically_equal(graph, run.truth)
    report = compare_graphs(graph, run.truth)
    assert report.node_precision == report.node_recall == 1.0
    assert report.edge_precision == report.edge_recall == 1.0


def test_extract_no_events_in_window():
    run = synth.generate_run(
        synth.get_template("registry-run-key"), synth.NoiseProfile(), 5,
        noise_events=200,
    )
    meta = run.meta
    meta.t_start = run.events[-1].ts + 10**12
    meta.t_end = meta.t_start + 10**9
    with pytest.raises(NoAttackEvents):
        extract_technique_graph(run.events, meta, run.whitelist)


def test_extract_benign_only_window_raises():
    run = synth.generate_run(
        synth.get_template("registry-run-key"), synth.NoiseProfile(), 6,
        noise_events=500,
    )
    # replay only benign traffic inside the attack window
    benign_only = [e for e in run.events if e.pid not in run.pids.values()]
    # keep timestamps ordered; reuse the attack window but with the initial
    # pid present once so chain analysis succeeds and filtering drops all
    probe = AuditEvent(
        run.meta.t_start, "Registry", "Open", run.meta.initial_pid,
        run.node_labels[0], "HKLM\\Software\\BenignVendor\\Component000\\State",
    )
    stream = sorted(benign_only + [probe], key=lambda e: e.ts)
    with pytest.raises(NoAttackEvents):
        extract_technique_graph(stream, run.meta, run.whitelist)


def test_extract_deterministic_gml_bytes():
    outputs = set()
    for _ in range(2):
        run = synth.generate_run(
            synth.get_template("lsass-dump"), synth.NoiseProfile(), 77,
            noise_events=1500,
        )
        graph = extract_technique_graph(run.events, run.meta, run.whitelist)
        outputs.add(export_gml(canonical_form(graph)))
    assert len(outputs) == 1


def test_window_slack_admits_jittered_collector_timestamps():
    from techkg.events import RunMeta

    t0 = 1_000_000_000_000
    events = [
        # 200ms before the window: outside even with slack
        ev(t0 - 200_000_000, "File", "Create", 100, "C:\\w\\cmd.exe", "C:\\early.bin"),
        # 50ms before the window: inside the default 100ms slack
        ev(t0 - 50_000_000, "File", "Create", 100, "C:\\w\\cmd.exe", "C:\\jitter.bin"),
        ev(t0 + 1, "Registry", "SetValue", 100, "C:\\w\\cmd.exe", "HKCU\\Env\\Run"),
    ]
    meta = RunMeta("T1547.001", "p1", initial_pid=100, t_start=t0, t_end=t0 + 10)
    graph = extract_technique_graph(events, meta, Whitelist())
    labels = {n.label for n in graph.nodes.values()}
    assert "C:\\jitter.bin" in labels
    assert "C:\\early.bin" not in labels
    tight = extract_technique_graph(
        events, meta, Whitelist(), ExtractConfig(window_slack_ns=0)
    )
    labels = {n.label for n in tight.nodes.values()}
    assert "C:\\jitter.bin" not in labels


def test_extract_flags_common_utility_processes():
    events = [
        start(1, 100, "C:\\w\\cmd.exe", 101, "C:\\w\\hostname.exe"),
        ev(2, "File", "Read", 101, "C:\\w\\hostname.exe", "C:\\etc\\hosts"),
    ]
    meta_events = events
    from techkg.events import RunMeta

    meta = RunMeta("T1059", "p1", initial_pid=100, t_start=1, t_end=2)
    graph = extract_technique_graph(meta_events, meta, Whitelist())
    flagged = [n for n in graph.nodes.values() if n.common]
    assert [n.label for n in flagged] == ["C:\\w\\hostname.exe"]


def test_every_non_attacker_node_is_event_witnessed():
    run = synth.generate_run(
        synth.get_template("bits-download"), synth.NoiseProfile(), 50,
        noise_events=2000,
    )
    graph = extract_technique_graph(run.events, run.meta, run.whitelist)
    objects = set()
    for e in run.events:
        objects.add(e.object.lower())
        objects.add(e.subject_image.lower())
    for node in graph.nodes.values():
        if node.kind is NodeKind.ATTACKER:
            continue
        assert node.label.lower() in objects


def test_no_banned_relations_in_output():
    banned = {"ProcessEnd", "ThreadEnd", "FileioCreate", "RegistryOpen", "RegistryClose"}
    run = synth.generate_run(
        synth.get_template("disable-eventlog"), synth.NoiseProfile(), 60,
        noise_events=5000,
    )
    graph = extract_technique_graph(run.events, run.meta, run.whitelist)
    for edge in graph.edges.values():
        assert not (edge.relations & banned)


def test_provenance_graph_covers_stream_and_roots_attacker():
    run = synth.generate_run(
        synth.get_template("registry-run-key"), synth.NoiseProfile(), 70,
        noise_events=300,
    )
    prov = build_provenance_graph(run.events)
    assert validate(prov) == []
    assert prov.attacker() is not None
    labels = {n.label for n in prov.nodes.values()}
    assert set(run.node_labels) <= labels
