"""Command-line pipeline: per-stage subcommands plus an end-to-end mode.

Every stage reads and writes files, so each step is independently runnable
and testable.  Logs go to stderr with a stage prefix; the machine-readable
contract is the output files and, for `pipeline`, the artifact manifest.
"""

from __future__ import annotations

import argparse
import concurrent.futures
import hashlib
import json
import logging
import os
import sys
from pathlib import Path

from . import align as align_mod
from . import cti as cti_mod
from . import extract as extract_mod
from . import merge as merge_mod
from . import metrics as metrics_mod
from . import report as report_mod
from . import script_ast as ast_mod
from . import synth as synth_mod
from .errors import ConfigError, TechKgError
from .events import read_events, read_run_meta, window
from .serialize import export_gml, import_gml

log = logging.getLogger("techkg")


def _read_graph(path):
    return import_gml(Path(path).read_text(encoding="utf-8"))


def _write_text(path, text: str) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text, encoding="utf-8", newline="\n")
    return path


def _merge_config(path) -> merge_mod.MergeConfig:
    if not path:
        return merge_mod.MergeConfig()
    return merge_mod.MergeConfig.from_json(Path(path).read_text(encoding="utf-8"))


def _sha256(path: Path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as handle:
        for block in iter(lambda: handle.read(65536), b""):
            digest.update(block)
    return digest.hexdigest()


# -- stage commands -----------------------------------------------------------


def cmd_extract_log(args) -> int:
    stage = logging.getLogger("extract-log")
    events = read_events(args.events)
    meta = read_run_meta(args.meta)
    whitelist = extract_mod.Whitelist.from_json(
        Path(args.whitelist).read_text(encoding="utf-8")
    )
    cfg = extract_mod.ExtractConfig(window_slack_ns=args.slack_ms * 1_000_000)
    graph = extract_mod.extract_technique_graph(events, meta, whitelist, cfg)
    _write_text(args.out, export_gml(graph))
    stage.info(
        "%s: %d nodes, %d edges -> %s",
        meta.procedure_id, len(graph.nodes), len(graph.edges), args.out,
    )
    return 0


def cmd_extract_static(args) -> int:
    stage = logging.getLogger("extract-static")
    if bool(args.script) == bool(args.ast):
        raise ConfigError("provide exactly one of --script or --ast")
    if args.script:
        source = Path(args.script).read_text(encoding="utf-8")
        tree = ast_mod.parse_script(source)
        script_id = Path(args.script).name
    else:
        tree = ast_mod.load_ast(Path(args.ast).read_text(encoding="utf-8"))
        script_id = Path(args.ast).name
    candidates = ast_mod.classify_candidates(ast_mod.collect_static_nodes(tree))
    graph = _read_graph(args.graph)
    events = read_events(args.events)
    if args.meta:
        meta = read_run_meta(args.meta)
        slack = args.slack_ms * 1_000_000
        events = window(events, meta.t_start - slack, meta.t_end + slack)
    supplemented = ast_mod.supplement_graph(graph, candidates, events, script_id)
    _write_text(args.out, export_gml(supplemented))
    stage.info(
        "%d candidates, %d -> %d nodes -> %s",
        len(candidates), len(graph.nodes), len(supplemented.nodes), args.out,
    )
    return 0


def _make_client(mode: str, store, client_config) -> cti_mod.ModelClient:
    if mode == "fixture":
        if not store:
            raise ConfigError("fixture mode requires --store")
        return cti_mod.FixtureClient(store)
    if mode == "live":
        if not client_config:
            raise ConfigError("live mode requires --client-config")
        payload = json.loads(Path(client_config).read_text(encoding="utf-8"))
        for key in ("endpoint", "model", "credential_env"):
            if key not in payload:
                raise ConfigError(f"live client config missing {key!r}")
        return cti_mod.LiveClient(
            endpoint=payload["endpoint"],
            model=payload["model"],
            credential_env=payload["credential_env"],
            max_attempts=payload.get("max_attempts", 3),
            timeout_s=payload.get("timeout_s", 60.0),
            min_interval_s=payload.get("min_interval_s", 0.0),
        )
    raise ConfigError(f"unknown client mode {mode!r}")


def cmd_parse_cti(args) -> int:
    stage = logging.getLogger("parse-cti")
    client = _make_client(args.mode, args.store, args.client_config)
    out_dir = Path(args.out_dir)
    graphs = []
    for doc in cti_mod.iter_reports(args.reports):
        extraction = cti_mod.parse_report(doc, client)
        graph = cti_mod.extraction_to_graph(extraction, doc.technique_id, doc.report_id)
        _write_text(out_dir / f"{doc.report_id}.gml", export_gml(graph))
        _write_text(
            out_dir / f"{doc.report_id}.extraction.json",
            json.dumps(
                {
                    "report_id": doc.report_id,
                    "technique_id": doc.technique_id,
                    "template_version": extraction.template_version,
                    "entities": [
                        {"name": e.name, "kind": e.kind.value, "iocs": e.iocs}
                        for e in extraction.entities
                    ],
                    "relations": [
                        {"src_name": r.src_name, "verb": r.verb, "dst_name": r.dst_name}
                        for r in extraction.relations
                    ],
                    "raw_model_output": extraction.raw_model_output,
                },
                indent=2,
                sort_keys=True,
            )
            + "\n",
        )
        graphs.append(graph)
        stage.info("%s: %d entities", doc.report_id, len(extraction.entities))
    if args.merged:
        if not graphs:
            raise ConfigError("no reports parsed; cannot write --merged graph")
        merged, rep = merge_mod.merge_same_source(graphs, _merge_config(args.config))
        _write_text(args.merged, export_gml(merged))
        if args.report:
            _write_text(args.report, rep.to_json())
    return 0


def cmd_merge_source(args) -> int:
    stage = logging.getLogger("merge-source")
    graphs = [_read_graph(p) for p in args.inputs]
    merged, rep = merge_mod.merge_same_source(graphs, _merge_config(args.config))
    _write_text(args.out, export_gml(merged))
    _write_text(args.report, rep.to_json())
    stage.info(
        "%d graphs -> %d nodes (%.3f%% entities)",
        rep.input_graph_count, rep.nodes_after, rep.entity_retention_pct,
    )
    return 0


def cmd_merge_cross(args) -> int:
    stage = logging.getLogger("merge-cross")
    base = _read_graph(args.base)
    additional = _read_graph(args.additional)
    unified, rep = merge_mod.merge_cross_source(
        base, additional, _merge_config(args.config)
    )
    _write_text(args.out, export_gml(unified))
    _write_text(args.report, rep.to_json())
    stage.info("unified graph: %d nodes, %d edges", rep.nodes_after, rep.edges_after)
    return 0


def cmd_detect(args) -> int:
    stage = logging.getLogger("detect")
    prov = _read_graph(args.prov)
    kb = [_read_graph(p) for p in sorted(Path(args.kb).glob("*.gml"))]
    detections = align_mod.detect_techniques(prov, kb, args.threshold)
    payload = {"detections": [d.to_dict() for d in detections]}
    if args.chain:
        chain = align_mod.build_attack_chain(detections, prov)
        payload["chain"] = [step.to_dict() for step in chain]
        _write_text(
            args.chain,
            json.dumps({"chain": payload["chain"]}, indent=2, sort_keys=True) + "\n",
        )
    _write_text(args.out, json.dumps(payload, indent=2, sort_keys=True) + "\n")
    stage.info("%d/%d techniques above threshold", len(detections), len(kb))
    return 0


def cmd_eval(args) -> int:
    stage = logging.getLogger("eval")
    generated = _read_graph(args.generated)
    truth = _read_graph(args.truth)
    report = metrics_mod.compare_graphs(generated, truth)
    _write_text(args.out, report.to_json())
    if args.csv:
        report_mod.write_eval_csv(report, args.csv)
    if args.figure:
        report_mod.render_eval_figure(report, args.figure)
    stage.info(
        "node P/R %.3f/%.3f edge P/R %.3f/%.3f",
        report.node_precision, report.node_recall,
        report.edge_precision, report.edge_recall,
    )
    return 0


def cmd_eval_retention(args) -> int:
    stage = logging.getLogger("eval-retention")
    reports = []
    for path in args.reports:
        payload = json.loads(Path(path).read_text(encoding="utf-8"))
        reports.append(merge_mod.MergeReport.from_dict(payload))
    summary = metrics_mod.retention_stats(reports)
    _write_text(args.out, summary.to_json())
    if args.csv:
        report_mod.write_retention_csv(summary, args.csv)
    if args.figure:
        report_mod.render_retention_figure(summary, args.figure)
    stage.info(
        "entity mean %.3f%%, edge mean %.3f%%", summary.entity_mean, summary.edge_mean
    )
    return 0


def cmd_gen_fixtures(args) -> int:
    stage = logging.getLogger("gen-fixtures")
    template_arg = args.template
    if Path(template_arg).is_file():
        template = synth_mod.TechniqueTemplate.from_json(
            Path(template_arg).read_text(encoding="utf-8")
        )
    else:
        template = synth_mod.get_template(template_arg)
    noise = (
        synth_mod.NoiseProfile.from_json(Path(args.noise).read_text(encoding="utf-8"))
        if args.noise
        else synth_mod.NoiseProfile()
    )
    run = synth_mod.generate_run(
        template,
        noise,
        args.seed,
        noise_events=args.noise_events,
        benign_events=args.benign_events,
    )
    paths = synth_mod.write_run(run, args.out_dir)
    script = synth_mod.make_script_source(template, run.node_labels)
    _write_text(Path(args.out_dir) / "script.ps1", script)
    stage.info(
        "%s seed=%d: %d events -> %s",
        template.name, args.seed, len(run.events), args.out_dir,
    )
    for name, path in sorted(paths.items()):
        stage.info("  %s: %s", name, path)
    return 0


# -- end-to-end pipeline -------------------------------------------------------


def _load_pipeline_config(path) -> dict:
    try:
        payload = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read pipeline config: {exc}")
    if payload.get("version") != 1:
        raise ConfigError("pipeline config must declare \"version\": 1")
    for key in ("runs", "whitelist", "out_dir"):
        if key not in payload:
            raise ConfigError(f"pipeline config missing {key!r}")
    if not payload["runs"]:
        raise ConfigError("pipeline config lists no runs")
    for run in payload["runs"]:
        for key in ("events", "meta"):
            if key not in run:
                raise ConfigError(f"pipeline run entry missing {key!r}")
    if not Path(payload["whitelist"]).is_file():
        raise ConfigError(f"whitelist file {payload['whitelist']!r} does not exist")
    client = payload.get("client", {"mode": "fixture", "store": None})
    mode = client.get("mode")
    if payload.get("reports_dir"):
        if mode == "fixture" and not client.get("store"):
            raise ConfigError("fixture client requires a 'store' path")
        if mode == "live":
            for key in ("endpoint", "model", "credential_env"):
                if not client.get(key):
                    raise ConfigError(f"live client requires {key!r}")
        if mode not in ("fixture", "live"):
            raise ConfigError(f"unknown client mode {mode!r}")
    return payload


def _technique_job(payload: dict) -> dict:
    """Run one technique end to end; returns artifact/err/warning lists.

    Top-level function so a process pool can pickle it.
    """
    technique_id = payload["technique_id"]
    out_dir = Path(payload["out_dir"])
    tech_dir = out_dir / technique_id
    artifacts: list[str] = []
    errors: list[str] = []
    warnings: list[str] = []
    merge_reports: list[dict] = []
    cfg = merge_mod.MergeConfig.from_json(json.dumps(payload["merge"]))
    whitelist = extract_mod.Whitelist.from_json(
        Path(payload["whitelist"]).read_text(encoding="utf-8")
    )

    def emit(rel: Path, text: str) -> None:
        _write_text(out_dir / rel, text)
        artifacts.append(str(rel))

    log_graphs = []
    for run in payload["runs"]:
        try:
            events = read_events(run["events"])
            meta = read_run_meta(run["meta"])
            graph = extract_mod.extract_technique_graph(events, meta, whitelist)
            if run.get("script") or run.get("ast"):
                if run.get("script"):
                    tree = ast_mod.parse_script(
                        Path(run["script"]).read_text(encoding="utf-8")
                    )
                    script_id = Path(run["script"]).name
                else:
                    tree = ast_mod.load_ast(Path(run["ast"]).read_text(encoding="utf-8"))
                    script_id = Path(run["ast"]).name
                candidates = ast_mod.classify_candidates(
                    ast_mod.collect_static_nodes(tree)
                )
                slack = extract_mod.ExtractConfig().window_slack_ns
                windowed = window(events, meta.t_start - slack, meta.t_end + slack)
                graph = ast_mod.supplement_graph(graph, candidates, windowed, script_id)
            emit(
                Path(technique_id) / "logs" / f"{meta.procedure_id}.gml",
                export_gml(graph),
            )
            log_graphs.append(graph)
        except TechKgError as exc:
            errors.append(f"{technique_id}: extract {run['events']}: {exc}")

    def failed(message: str) -> dict:
        errors.append(message)
        return {
            "technique_id": technique_id,
            "artifacts": artifacts,
            "errors": errors,
            "warnings": warnings,
            "merge_reports": merge_reports,
        }

    if not log_graphs:
        return failed(f"{technique_id}: no log graphs extracted")

    try:
        base, log_report = merge_mod.merge_same_source(log_graphs, cfg)
    except TechKgError as exc:
        return failed(f"{technique_id}: same-source log merge: {exc}")
    emit(Path(technique_id) / "merged-log.gml", export_gml(base))
    emit(Path(technique_id) / "merged-log.report.json", log_report.to_json())
    merge_reports.append(log_report.to_dict())

    cti_graphs = []
    client = None
    if payload["reports"]:
        client_cfg = payload["client"]
        if client_cfg["mode"] == "fixture":
            client = cti_mod.FixtureClient(client_cfg["store"])
        else:
            client = cti_mod.LiveClient(
                endpoint=client_cfg["endpoint"],
                model=client_cfg["model"],
                credential_env=client_cfg["credential_env"],
            )
    for doc_payload in payload["reports"]:
        doc = cti_mod.ReportDoc(**doc_payload)
        try:
            extraction = cti_mod.parse_report(doc, client)
            graph = cti_mod.extraction_to_graph(
                extraction, doc.technique_id, doc.report_id
            )
            emit(Path(technique_id) / "cti" / f"{doc.report_id}.gml", export_gml(graph))
            cti_graphs.append(graph)
        except TechKgError as exc:
            errors.append(f"{technique_id}: report {doc.report_id}: {exc}")

    if cti_graphs:
        try:
            merged_cti, cti_report = merge_mod.merge_same_source(cti_graphs, cfg)
            emit(Path(technique_id) / "merged-cti.gml", export_gml(merged_cti))
            emit(Path(technique_id) / "merged-cti.report.json", cti_report.to_json())
            merge_reports.append(cti_report.to_dict())
            unified, cross_report = merge_mod.merge_cross_source(base, merged_cti, cfg)
            emit(Path(technique_id) / "unified.report.json", cross_report.to_json())
        except TechKgError as exc:
            return failed(f"{technique_id}: cross-source construction: {exc}")
    else:
        warnings.append(
            f"{technique_id}: no CTI graphs; base graph promoted to unified"
        )
        unified = base.copy()
        unified.source_kind = "unified"
        unified.procedure_id = None
    emit(Path(technique_id) / "unified.gml", export_gml(unified))

    return {
        "technique_id": technique_id,
        "artifacts": artifacts,
        "errors": errors,
        "warnings": warnings,
        "merge_reports": merge_reports,
    }


def run_pipeline(config: dict, workers: int | None = None) -> dict:
    """Execute the full pipeline; returns the manifest (also written to
    out_dir/manifest.json)."""
    stage = logging.getLogger("pipeline")
    out_dir = Path(config["out_dir"])
    out_dir.mkdir(parents=True, exist_ok=True)

    by_technique: dict[str, list[dict]] = {}
    for run in config["runs"]:
        meta = read_run_meta(run["meta"])
        by_technique.setdefault(meta.technique_id, []).append(run)

    reports_by_technique: dict[str, list[dict]] = {}
    if config.get("reports_dir"):
        for doc in cti_mod.iter_reports(config["reports_dir"]):
            reports_by_technique.setdefault(doc.technique_id, []).append(
                {
                    "report_id": doc.report_id,
                    "technique_id": doc.technique_id,
                    "text": doc.text,
                    "source_name": doc.source_name,
                }
            )

    merge_cfg = merge_mod.MergeConfig.from_json(
        json.dumps(config.get("merge", {}))
    )
    jobs = []
    for technique_id in sorted(by_technique):
        jobs.append(
            {
                "technique_id": technique_id,
                "runs": by_technique[technique_id],
                "reports": reports_by_technique.get(technique_id, []),
                "whitelist": config["whitelist"],
                "out_dir": str(out_dir),
                "merge": json.loads(merge_cfg.to_json()),
                "client": config.get("client", {"mode": "fixture", "store": None}),
            }
        )

    workers = workers or os.cpu_count() or 1
    if workers > 1 and len(jobs) > 1:
        with concurrent.futures.ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_technique_job, jobs))
    else:
        results = [_technique_job(job) for job in jobs]

    artifacts: list[str] = []
    errors: list[str] = []
    warnings: list[str] = []
    merge_reports = []
    for result in results:
        artifacts.extend(result["artifacts"])
        errors.extend(result["errors"])
        warnings.extend(result["warnings"])
        merge_reports.extend(
            merge_mod.MergeReport.from_dict(r) for r in result["merge_reports"]
        )
        stage.info(
            "%s: %d artifacts, %d errors",
            result["technique_id"], len(result["artifacts"]), len(result["errors"]),
        )

    if merge_reports and config.get("figures", True):
        summary = metrics_mod.retention_stats(merge_reports)
        report_mod.write_retention_csv(summary, out_dir / "retention.csv")
        artifacts.append("retention.csv")
        report_mod.render_retention_figure(summary, out_dir / "retention.png")
        artifacts.append("retention.png")
        _write_text(out_dir / "retention.json", summary.to_json())
        artifacts.append("retention.json")

    manifest = {
        "version": 1,
        "artifacts": [
            {"path": rel, "sha256": _sha256(out_dir / rel)}
            for rel in sorted(artifacts)
        ],
        "errors": sorted(errors),
        "warnings": sorted(warnings),
    }
    _write_text(
        out_dir / "manifest.json",
        json.dumps(manifest, indent=2, sort_keys=True) + "\n",
    )
    return manifest


def cmd_pipeline(args) -> int:
    config = _load_pipeline_config(args.config)
    manifest = run_pipeline(config, workers=args.workers)
    for warning in manifest["warnings"]:
        logging.getLogger("pipeline").warning("%s", warning)
    for error in manifest["errors"]:
        logging.getLogger("pipeline").error("%s", error)
    return 1 if manifest["errors"] else 0


# -- entry point ---------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="techkg",
        description="Attack-technique knowledge graphs from logs, scripts, and CTI reports",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("extract-log", help="build a technique graph from one audit run")
    p.add_argument("--events", required=True)
    p.add_argument("--meta", required=True)
    p.add_argument("--whitelist", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--slack-ms", type=int, default=100)
    p.set_defaults(func=cmd_extract_log)

    p = sub.add_parser("extract-static", help="supplement a graph with script candidates")
    p.add_argument("--script")
    p.add_argument("--ast")
    p.add_argument("--graph", required=True)
    p.add_argument("--events", required=True)
    p.add_argument("--meta")
    p.add_argument("--slack-ms", type=int, default=100)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_extract_static)

    p = sub.add_parser("parse-cti", help="turn CTI reports into technique graphs")
    p.add_argument("--reports", required=True)
    p.add_argument("--mode", choices=("fixture", "live"), default="fixture")
    p.add_argument("--store", help="fixture store directory (prompt-hash -> response)")
    p.add_argument("--client-config", help="live client JSON (endpoint, model, credential_env)")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--merged", help="write the same-source merged CTI graph here")
    p.add_argument("--report", help="merge report JSON (with --merged)")
    p.add_argument("--config", help="merge config JSON")
    p.set_defaults(func=cmd_parse_cti)

    p = sub.add_parser("merge-source", help="aggregate same-source graphs of one technique")
    p.add_argument("--in", dest="inputs", nargs="+", required=True)
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.add_argument("--report", required=True)
    p.set_defaults(func=cmd_merge_source)

    p = sub.add_parser("merge-cross", help="merge a CTI graph into the log-derived base")
    p.add_argument("--base", required=True)
    p.add_argument("--additional", required=True)
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.add_argument("--report", required=True)
    p.set_defaults(func=cmd_merge_cross)

    p = sub.add_parser("detect", help="align a knowledge base against a provenance graph")
    p.add_argument("--prov", required=True)
    p.add_argument("--kb", required=True, help="directory of technique GML files")
    p.add_argument("--threshold", type=float, default=0.7)
    p.add_argument("--out", required=True)
    p.add_argument("--chain", help="also write the time-ordered attack chain JSON")
    p.set_defaults(func=cmd_detect)

    p = sub.add_parser("eval", help="precision/recall of a graph against ground truth")
    p.add_argument("--generated", required=True)
    p.add_argument("--truth", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--csv")
    p.add_argument("--figure")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("eval-retention", help="summarize merge retention reports")
    p.add_argument("--reports", nargs="+", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--csv")
    p.add_argument("--figure")
    p.set_defaults(func=cmd_eval_retention)

    p = sub.add_parser("gen-fixtures", help="generate a labeled synthetic run")
    p.add_argument("--template", required=True, help="builtin name or template JSON path")
    p.add_argument("--noise", help="noise profile JSON path (default profile if omitted)")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--noise-events", type=int, default=5000)
    p.add_argument("--benign-events", type=int, default=400)
    p.set_defaults(func=cmd_gen_fixtures)

    p = sub.add_parser("pipeline", help="run every stage from a config file")
    p.add_argument("--config", required=True)
    p.add_argument("--workers", type=int, default=None,
                   help="worker processes (default: cpu count)")
    p.set_defaults(func=cmd_pipeline)

    return parser


def main(argv=None) -> int:
    logging.basicConfig(
        stream=sys.stderr, level=logging.INFO, format="[%(name)s] %(message)s"
    )
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except TechKgError as exc:
        log.error("%s", exc)
        return 2


if __name__ == "__main__":
    sys.exit(main())
