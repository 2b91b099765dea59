"""Graph file formats: GML (primary), JSON (interop), DOT (visualization).

The GML dialect is plain key/value GML with repeated keys for multi-valued
attributes.  Export writes the Attacker node (id 0) first, sorts every set,
and escapes backslashes and double quotes, so identical graphs always yield
byte-identical files and export/import round-trips losslessly.
"""

from __future__ import annotations

import json
from typing import Iterator

from .errors import ParseError, SchemaError
from .model import (
    KnowledgeEdge,
    KnowledgeNode,
    NodeKind,
    SOURCE_KINDS,
    TechniqueGraph,
)

_KIND_VALUES = {k.value for k in NodeKind}


def _escape(value: str) -> str:
    # newlines would break the line-oriented format, so they escape too
    return (
        value.replace("\\", "\\\\")
        .replace('"', '\\"')
        .replace("\n", "\\n")
        .replace("\r", "\\r")
    )


_UNESCAPES = {"n": "\n", "r": "\r"}


def _unescape(value: str, line_no: int) -> str:
    out = []
    i = 0
    while i < len(value):
        ch = value[i]
        if ch == "\\":
            if i + 1 >= len(value):
                raise ParseError("dangling escape in string", line=line_no)
            nxt = value[i + 1]
            out.append(_UNESCAPES.get(nxt, nxt))
            i += 2
        else:
            out.append(ch)
            i += 1
    return "".join(out)


def _node_lines(node: KnowledgeNode) -> Iterator[str]:
    yield "  node ["
    yield f"    id {node.id}"
    yield f'    kind "{node.kind.value}"'
    yield f'    label "{_escape(node.label)}"'
    yield f"    generalized {int(node.generalized)}"
    yield f"    common {int(node.common)}"
    for extra in sorted(node.extra_labels):
        yield f'    extra_label "{_escape(extra)}"'
    for tag in sorted(node.provenance):
        yield f'    provenance "{_escape(tag)}"'
    yield "  ]"


def _edge_lines(edge: KnowledgeEdge) -> Iterator[str]:
    yield "  edge ["
    yield f"    source {edge.src}"
    yield f"    target {edge.dst}"
    yield f'    relations "{_escape(",".join(sorted(edge.relations)))}"'
    for ts in edge.timestamps:
        yield f"    timestamp {ts}"
    for tag in sorted(edge.provenance):
        yield f'    provenance "{_escape(tag)}"'
    yield "  ]"


def export_gml(graph: TechniqueGraph) -> str:
    """Render a graph as GML text (UTF-8, LF line endings)."""
    lines = ["graph ["]
    lines.append("  directed 1")
    lines.append(f'  technique_id "{_escape(graph.technique_id)}"')
    if graph.procedure_id is not None:
        lines.append(f'  procedure_id "{_escape(graph.procedure_id)}"')
    lines.append(f'  source_kind "{_escape(graph.source_kind)}"')
    attacker = graph.attacker()
    order = sorted(
        graph.nodes.values(),
        key=lambda n: (attacker is not None and n.id != attacker.id, n.id),
    )
    for node in order:
        lines.extend(_node_lines(node))
    for key in sorted(graph.edges):
        lines.extend(_edge_lines(graph.edges[key]))
    lines.append("]")
    return "\n".join(lines) + "\n"


def _tokenize(text: str) -> Iterator[tuple[int, str, object]]:
    """Yield (line_no, key, value) records; value is int, str, or the
    markers '[' / ']'."""
    for line_no, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if line == "]":
            yield line_no, "]", "]"
            continue
        parts = line.split(None, 1)
        if len(parts) != 2:
            raise ParseError(f"expected 'key value', got {line!r}", line=line_no)
        key, rest = parts
        rest = rest.strip()
        if rest == "[":
            yield line_no, key, "["
        elif rest.startswith('"'):
            body = rest[1:]
            # walk escapes to find the unescaped closing quote
            out = []
            i = 0
            closed = False
            while i < len(body):
                ch = body[i]
                if ch == "\\" and i + 1 < len(body):
                    out.append(body[i : i + 2])
                    i += 2
                    continue
                if ch == '"':
                    closed = True
                    if body[i + 1 :].strip():
                        raise ParseError("trailing junk after string", line=line_no)
                    break
                out.append(ch)
                i += 1
            if not closed:
                raise ParseError("unterminated string", line=line_no)
            yield line_no, key, _unescape("".join(out), line_no)
        else:
            try:
                yield line_no, key, int(rest)
            except ValueError:
                raise ParseError(f"unquoted non-integer value {rest!r}", line=line_no)


def _parse_block(tokens, opener_line: int) -> dict:
    """Collect a [ ... ] block into key -> list of values."""
    fields: dict[str, list] = {}
    for line_no, key, value in tokens:
        if key == "]":
            return fields
        if value == "[":
            fields.setdefault(key, []).append(_parse_block(tokens, line_no))
        else:
            fields.setdefault(key, []).append((line_no, value))
    raise ParseError("unterminated block", line=opener_line)


def _single(fields: dict, key: str, *, required=True, default=None):
    values = fields.get(key)
    if not values:
        if required:
            raise ParseError(f"missing required key {key!r}")
        return default
    line_no, value = values[-1]
    return value


def import_gml(text: str) -> TechniqueGraph:
    """Parse GML written by export_gml back into a TechniqueGraph."""
    tokens = _tokenize(text)
    top = None
    for line_no, key, value in tokens:
        if key == "graph" and value == "[":
            top = _parse_block(tokens, line_no)
            break
        raise ParseError(f"expected 'graph [', got {key!r}", line=line_no)
    if top is None:
        raise ParseError("no graph block found", line=1)

    technique_id = _single(top, "technique_id")
    source_kind = _single(top, "source_kind")
    procedure_id = _single(top, "procedure_id", required=False)
    if source_kind not in SOURCE_KINDS:
        raise SchemaError(f"unknown source_kind {source_kind!r}")
    graph = TechniqueGraph(
        technique_id=technique_id,
        source_kind=source_kind,
        procedure_id=procedure_id,
    )

    for block in top.get("node", []):
        nid = _single(block, "id")
        if not isinstance(nid, int):
            raise SchemaError(f"node id {nid!r} is not an integer")
        kind_name = _single(block, "kind")
        if kind_name not in _KIND_VALUES:
            raise SchemaError(f"unknown node kind {kind_name!r}")
        if nid in graph.nodes:
            raise SchemaError(f"duplicate node id {nid}")
        graph.nodes[nid] = KnowledgeNode(
            id=nid,
            kind=NodeKind(kind_name),
            label=_single(block, "label"),
            extra_labels={v for _ln, v in block.get("extra_label", [])},
            provenance={v for _ln, v in block.get("provenance", [])},
            generalized=bool(_single(block, "generalized", required=False, default=0)),
            common=bool(_single(block, "common", required=False, default=0)),
        )

    for block in top.get("edge", []):
        src = _single(block, "source")
        dst = _single(block, "target")
        relations = _single(block, "relations")
        edge = KnowledgeEdge(
            src=src,
            dst=dst,
            relations={r for r in relations.split(",") if r},
            timestamps=[v for _ln, v in block.get("timestamp", [])],
            provenance={v for _ln, v in block.get("provenance", [])},
        )
        if (src, dst) in graph.edges:
            raise SchemaError(f"duplicate edge record {src}->{dst}")
        graph.edges[(src, dst)] = edge

    return graph


# -- JSON mirror -------------------------------------------------------------


def graph_to_dict(graph: TechniqueGraph) -> dict:
    attacker = graph.attacker()
    order = sorted(
        graph.nodes.values(),
        key=lambda n: (attacker is not None and n.id != attacker.id, n.id),
    )
    return {
        "technique_id": graph.technique_id,
        "procedure_id": graph.procedure_id,
        "source_kind": graph.source_kind,
        "nodes": [
            {
                "id": n.id,
                "kind": n.kind.value,
                "label": n.label,
                "extra_labels": sorted(n.extra_labels),
                "provenance": sorted(n.provenance),
                "generalized": n.generalized,
                "common": n.common,
            }
            for n in order
        ],
        "edges": [
            {
                "src": e.src,
                "dst": e.dst,
                "relations": sorted(e.relations),
                "timestamps": list(e.timestamps),
                "provenance": sorted(e.provenance),
            }
            for _key, e in sorted(graph.edges.items())
        ],
    }


def export_json(graph: TechniqueGraph) -> str:
    return json.dumps(graph_to_dict(graph), indent=2, sort_keys=True) + "\n"


def graph_from_dict(payload: dict) -> TechniqueGraph:
    try:
        graph = TechniqueGraph(
            technique_id=payload["technique_id"],
            source_kind=payload["source_kind"],
            procedure_id=payload.get("procedure_id"),
        )
        for n in payload["nodes"]:
            if n["kind"] not in _KIND_VALUES:
                raise SchemaError(f"unknown node kind {n['kind']!r}")
            graph.nodes[n["id"]] = KnowledgeNode(
                id=n["id"],
                kind=NodeKind(n["kind"]),
                label=n["label"],
                extra_labels=set(n.get("extra_labels", ())),
                provenance=set(n.get("provenance", ())),
                generalized=bool(n.get("generalized", False)),
                common=bool(n.get("common", False)),
            )
        for e in payload["edges"]:
            graph.edges[(e["src"], e["dst"])] = KnowledgeEdge(
                src=e["src"],
                dst=e["dst"],
                relations=set(e["relations"]),
                timestamps=list(e.get("timestamps", ())),
                provenance=set(e.get("provenance", ())),
            )
    except KeyError as exc:
        raise SchemaError(f"graph JSON missing field {exc.args[0]!r}") from exc
    return graph


def import_json(text: str) -> TechniqueGraph:
    try:
        payload = json.loads(text)
    except json.JSONDecodeError as exc:
        raise SchemaError(f"invalid graph JSON: {exc}") from exc
    return graph_from_dict(payload)


# -- DOT (lossy, for quick looks) --------------------------------------------

_DOT_SHAPES = {
    NodeKind.ATTACKER: "doublecircle",
    NodeKind.PROCESS: "box",
    NodeKind.THREAD: "box",
    NodeKind.FILE: "ellipse",
    NodeKind.REGISTRY: "hexagon",
    NodeKind.NETWORK: "diamond",
    NodeKind.IMAGE: "component",
}


def export_dot(graph: TechniqueGraph) -> str:
    lines = [f'digraph "{_escape(graph.technique_id)}" {{']
    for nid in sorted(graph.nodes):
        node = graph.nodes[nid]
        label = _escape(f"{node.label}\n({node.kind.value})")
        lines.append(f'  n{nid} [label="{label}" shape={_DOT_SHAPES[node.kind]}];')
    for (src, dst), edge in sorted(graph.edges.items()):
        label = _escape(",".join(sorted(edge.relations)))
        lines.append(f'  n{src} -> n{dst} [label="{label}"];')
    lines.append("}")
    return "\n".join(lines) + "\n"
