"""Acceptance gate: every criterion runs at its stated tolerance and reports
one pass/fail line (see the acceptance-criteria block at the end of the
pytest run)."""

import json
import os
import random
import socket
import subprocess
import sys
import time
from contextlib import contextmanager
from pathlib import Path

import pytest

from techkg.align import align_technique, detect_techniques
from techkg.cli import run_pipeline
from techkg.cti import FixtureClient, extraction_to_graph, parse_report
from techkg.events import read_events, write_events
from techkg.extract import build_provenance_graph, extract_technique_graph
from techkg.merge import (
    MergeConfig,
    generalize_label,
    merge_cross_source,
    merge_same_source,
)
from techkg.metrics import compare_graphs, retention_stats
from techkg.model import (
    NodeKind,
    TechniqueGraph,
    canonically_equal,
    validate,
)
from techkg.serialize import export_gml, import_gml
from techkg import synth

import conftest
from conftest import (
    quick_graph,
    random_graph,
    retention_family,
    seed_cti_fixtures,
    table5_reports,
)
from test_merge import (
    LABEL_CORPUS,
    cross_source_fixture_pairs,
    merge_matching,
    oracle_matching,
)


@contextmanager
def criterion(num: int, name: str, budget_s: float | None = None):
    start = time.perf_counter()
    status = "FAIL"
    try:
        yield
        status = "PASS"
    finally:
        elapsed = time.perf_counter() - start
        conftest.ACCEPTANCE_RESULTS.append((num, name, status, elapsed))
        if status == "PASS" and budget_s is not None and elapsed >= budget_s:
            conftest.ACCEPTANCE_RESULTS[-1] = (num, name, "FAIL (over budget)", elapsed)
            raise AssertionError(
                f"criterion {num} exceeded its {budget_s}s runtime budget "
                f"({elapsed:.2f}s)"
            )


def test_criterion_01_retention_arithmetic():
    with criterion(1, "retention-arithmetic", budget_s=1.0):
        graphs = retention_family()
        assert sum(len(g.nodes) for g in graphs) == 59
        assert sum(len(g.edges) for g in graphs) == 49
        _merged, report = merge_same_source(graphs)
        assert (report.nodes_after, report.edges_after) == (7, 7)
        assert report.entity_retention_pct == 11.864
        assert report.edge_retention_pct == 14.286
        summary = retention_stats(table5_reports())
        assert summary.entity_mean == 23.745
        assert summary.edge_mean == 22.650


BANNED = {"ProcessEnd", "ThreadEnd", "FileioCreate", "RegistryOpen", "RegistryClose"}


def _wide_template() -> synth.TechniqueTemplate:
    """registry-run-key with second-scale offsets so the execution window
    spans a large share of the noise stream."""
    base = synth.get_template("registry-run-key")
    return synth.TechniqueTemplate(
        technique_id=base.technique_id,
        name="registry-run-key-wide",
        nodes=list(base.nodes),
        edges=[
            synth.EdgeSpec(e.relation, e.src, e.dst, (i + 1) * 2_000_000_000)
            for i, e in enumerate(base.edges)
        ],
    )


def test_criterion_02_event_filtering_100k():
    with criterion(2, "event-filtering-100k", budget_s=10.0):
        run = synth.generate_run(
            _wide_template(), synth.NoiseProfile(), 1002, noise_events=100_000
        )
        assert len(run.events) >= 100_000
        extracted = extract_technique_graph(run.events, run.meta, run.whitelist)
        merged, _ = merge_same_source([extracted])
        prov = build_provenance_graph(run.events)
        for graph in (extracted, merged, prov):
            for edge in graph.edges.values():
                assert not (edge.relations & BANNED), sorted(edge.relations)


def test_criterion_03_extraction_fidelity():
    with criterion(3, "extraction-fidelity", budget_s=60.0):
        template_names = sorted(synth.BUILTIN_TEMPLATES)
        runs = 0
        for seed in range(1, 21):
            template = synth.get_template(template_names[seed % len(template_names)])
            run = synth.generate_run(
                template, synth.NoiseProfile(), seed, noise_events=5000
            )
            graph = extract_technique_graph(run.events, run.meta, run.whitelist)
            report = compare_graphs(graph, run.truth)
            assert report.node_precision >= 0.95, (template.name, seed)
            assert report.node_recall >= 0.95, (template.name, seed)
            assert report.edge_precision >= 0.95, (template.name, seed)
            assert report.edge_recall >= 0.95, (template.name, seed)
            runs += 1
        assert runs == 20


def test_criterion_04_merge_property_battery():
    with criterion(4, "merge-properties-1000", budget_s=30.0):
        rng = random.Random(0xACCE55)
        for case in range(1000):
            count = rng.randint(1, 3)
            logs = [
                random_graph(rng, technique="T1059.001", source="log")
                for _ in range(count)
            ]
            merged, report = merge_same_source(logs)
            assert report.nodes_after <= report.nodes_before
            assert report.edges_after <= report.edges_before
            assert validate(merged) == [], case
            again, _ = merge_same_source([merged])
            assert canonically_equal(merged, again), case

            surviving = set()
            for node in merged.nodes.values():
                surviving.add(node.label)
                surviving |= node.extra_labels
            for g in logs:
                for node in g.nodes.values():
                    assert node.label in surviving, case

            if case % 2 == 0:
                additional = random_graph(rng, technique="T1059.001", source="cti")
                unified, _ = merge_cross_source(merged, additional)
                assert validate(unified) == [], case
                low = max(len(merged.nodes), len(additional.nodes))
                high = len(merged.nodes) + len(additional.nodes) - 1
                assert low <= len(unified.nodes) <= high, case
                surviving = set()
                for node in unified.nodes.values():
                    surviving.add(node.label)
                    surviving |= node.extra_labels
                for g in (merged, additional):
                    for node in g.nodes.values():
                        assert node.label in surviving, case


def test_criterion_05_cross_source_oracle_equivalence():
    with criterion(5, "cross-source-oracle", budget_s=60.0):
        cfg = MergeConfig(generalization_rules=[])
        pairs = cross_source_fixture_pairs()
        assert pairs
        for base, additional in pairs:
            assert len(base.nodes) <= 8 and len(additional.nodes) <= 8
            got, unified = merge_matching(base, additional, cfg)
            expected = oracle_matching(base, additional, cfg.similarity_threshold)
            assert got == expected, (got, expected)
            assert validate(unified) == []


def test_criterion_06_generalization():
    with criterion(6, "generalization", budget_s=5.0):
        assert (
            generalize_label("C:\\Users\\Alice\\AppData\\Local")
            == "C:\\Users\\.*\\AppData\\Local"
        )
        assert len(LABEL_CORPUS) == 200
        for label in LABEL_CORPUS:
            once = generalize_label(label)
            assert generalize_label(once) == once


def _cti_pipeline_bytes(store: Path) -> bytes:
    client = FixtureClient(store)
    chunks = []
    graphs = []
    for fixture in conftest.CTI_FIXTURES:
        from techkg.cti import ReportDoc

        doc = ReportDoc(**fixture["doc"])
        extraction = parse_report(doc, client)
        graph = extraction_to_graph(extraction, doc.technique_id, doc.report_id)
        graphs.append(graph)
        chunks.append(export_gml(graph).encode())
    merged, _ = merge_same_source(graphs)
    chunks.append(export_gml(merged).encode())
    return b"".join(chunks)


class _SentinelSocket:
    def __init__(self, *a, **k):
        raise AssertionError("network access attempted in fixture mode")


def test_criterion_07_cti_determinism(tmp_path, monkeypatch):
    with criterion(7, "cti-determinism", budget_s=30.0):
        store = tmp_path / "store"
        reports = tmp_path / "reports"
        seed_cti_fixtures(store, reports)

        # three consecutive in-process runs, with a sentinel proving the
        # fixture path never opens a socket
        monkeypatch.setattr(socket, "socket", _SentinelSocket)
        outputs = {_cti_pipeline_bytes(store) for _ in range(3)}
        monkeypatch.undo()
        assert len(outputs) == 1

        # across process restarts (and different hash seeds)
        digests = []
        for hash_seed in ("0", "1", "2"):
            out_dir = tmp_path / f"out-{hash_seed}"
            env = dict(os.environ, PYTHONHASHSEED=hash_seed)
            proc = subprocess.run(
                [
                    sys.executable, "-m", "techkg.cli", "parse-cti",
                    "--reports", str(reports), "--store", str(store),
                    "--out-dir", str(out_dir),
                    "--merged", str(out_dir / "merged.gml"),
                    "--report", str(out_dir / "merge-report.json"),
                ],
                env=env,
                capture_output=True,
                text=True,
            )
            assert proc.returncode == 0, proc.stderr
            blob = b"".join(
                path.read_bytes() for path in sorted(out_dir.glob("*"))
            )
            digests.append(blob)
        assert digests[0] == digests[1] == digests[2]


SMALL_NOISE = synth.NoiseProfile(benign_process_count=4, benign_object_count=5)


def test_criterion_08_alignment_and_detection():
    with criterion(8, "alignment-detection", budget_s=120.0):
        # self-alignment is exactly 1.0 for every fixture technique graph
        fixture_graphs = [quick_graph()]
        for name in sorted(synth.BUILTIN_TEMPLATES):
            run = synth.generate_run(
                synth.get_template(name), SMALL_NOISE, 404, noise_events=40
            )
            fixture_graphs.append(run.truth)
        merged, _ = merge_same_source(retention_family())
        fixture_graphs.append(merged)
        for graph in fixture_graphs:
            assert align_technique(graph, graph).score == 1.0

        # embedded-technique detection: true technique first in >= 95/100
        template_names = sorted(synth.BUILTIN_TEMPLATES)
        kb = [
            synth.generate_run(synth.get_template(n), SMALL_NOISE, 2024,
                               noise_events=40).truth
            for n in template_names
        ]
        hits = 0
        for trial in range(100):
            name = template_names[trial % len(template_names)]
            run = synth.generate_run(
                synth.get_template(name), SMALL_NOISE, 10_000 + trial,
                noise_events=60,
            )
            prov = build_provenance_graph(run.events)
            results = detect_techniques(prov, kb, threshold=0.0)
            if results and results[0].technique_id == run.meta.technique_id:
                hits += 1
        assert hits >= 95, f"only {hits}/100 trials ranked the technique first"


def test_criterion_09_round_trip_and_eval_identity():
    with criterion(9, "round-trip-eval", budget_s=30.0):
        fixtures = [quick_graph(), *retention_family()]
        for name in sorted(synth.BUILTIN_TEMPLATES):
            run = synth.generate_run(
                synth.get_template(name), SMALL_NOISE, 808, noise_events=40
            )
            fixtures.append(run.truth)
        merged, _ = merge_same_source(retention_family())
        fixtures.append(merged)
        for graph in fixtures:
            assert import_gml(export_gml(graph)) == graph

        rng = random.Random(909)
        for _ in range(100):
            g = random_graph(rng)
            assert import_gml(export_gml(g)) == g
            report = compare_graphs(g, g.copy())
            assert report.node_precision == report.node_recall == 1.0
            assert report.edge_precision == report.edge_recall == 1.0
            assert report.node_f1 == report.edge_f1 == 1.0


def test_criterion_10_throughput_1m_events(tmp_path):
    run = synth.generate_run(
        _wide_template(),
        synth.NoiseProfile(events_per_second=30_000),
        1,
        noise_events=1_000_000,
    )
    paths = synth.write_run(run, tmp_path / "big")
    store = tmp_path / "store"
    reports = tmp_path / "reports"
    seed_cti_fixtures(store, reports)
    config = {
        "version": 1,
        "runs": [{"events": str(paths["events"]), "meta": str(paths["meta"])}],
        "whitelist": str(paths["whitelist"]),
        "reports_dir": str(reports),
        "client": {"mode": "fixture", "store": str(store)},
        "out_dir": str(tmp_path / "out"),
    }
    with criterion(10, "throughput-1m-events", budget_s=60.0):
        manifest = run_pipeline(config, workers=1)
        assert manifest["errors"] == []
        listed = {a["path"] for a in manifest["artifacts"]}
        assert "T1547.001/unified.gml" in listed
