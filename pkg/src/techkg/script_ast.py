"""Harvest entity candidates from attack-script ASTs.

Two ingestion paths feed the same tree shape: a parser for a minimal
PowerShell-like subset (assignments, commands, pipelines, quoted strings)
and a JSON loader for trees exported from a real parser.  Harvested string
candidates select previously filtered events back into the dynamic graph;
static analysis never invents topology on its own.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field

from .errors import DepthError, ParseError, SchemaError
from .events import AuditEvent, HARD_DROPPED_NAMES
from .extract import OBJECT_KIND, fallback_relation
from .model import (
    NodeKind,
    TechniqueGraph,
    normalize_label,
    split_segments,
)

KNOWN_KINDS = frozenset(
    {
        "ScriptBlock",
        "Pipeline",
        "Command",
        "StringConstantExpression",
        "VariableExpression",
        "ExpandableStringExpression",
        "AssignmentStatement",
    }
)

_LEAF_KINDS = frozenset(
    {"StringConstantExpression", "VariableExpression", "ExpandableStringExpression"}
)

MAX_AST_DEPTH = 10_000

_VAR_REF = re.compile(r"\$(?:env:)?[A-Za-z_][A-Za-z0-9_]*")


@dataclass
class AstNode:
    kind: str
    text: str = ""
    children: list["AstNode"] = field(default_factory=list)

    def is_known(self) -> bool:
        return self.kind in KNOWN_KINDS

    def walk(self):
        """Preorder document-order traversal."""
        stack = [self]
        while stack:
            node = stack.pop()
            yield node
            stack.extend(reversed(node.children))


@dataclass
class StaticNodeSet:
    constants: set[str] = field(default_factory=set)
    variable_map: dict[str, str] = field(default_factory=dict)
    expanded: set[str] = field(default_factory=set)
    commands: list[str] = field(default_factory=list)
    unresolved: set[str] = field(default_factory=set)


# -- JSON ingestion ----------------------------------------------------------


def load_ast(document) -> AstNode:
    """Validate a {kind, text, children} JSON tree into an AstNode.

    Unknown kinds are preserved verbatim and treated as opaque containers.
    """
    if isinstance(document, str):
        try:
            document = json.loads(document)
        except json.JSONDecodeError as exc:
            raise SchemaError(f"invalid AST JSON: {exc}")

    def shell(obj, depth) -> AstNode:
        if depth > MAX_AST_DEPTH:
            raise DepthError(f"AST nesting exceeds {MAX_AST_DEPTH}")
        if not isinstance(obj, dict):
            raise SchemaError("AST node must be an object")
        if "kind" not in obj:
            raise SchemaError("AST node missing 'kind'")
        kind = str(obj["kind"])
        text = obj.get("text")
        children = obj.get("children", [])
        if not isinstance(children, list):
            raise SchemaError("AST 'children' must be a list")
        if text is None:
            if kind in _LEAF_KINDS and not children:
                raise SchemaError(f"leaf {kind} node requires text")
            text = ""
        return AstNode(kind=kind, text=str(text))

    # explicit stack: trees may nest deeper than Python's recursion limit
    root = shell(document, 0)
    stack = [(document.get("children", []), root, 1)]
    while stack:
        raw_children, parent, depth = stack.pop()
        for raw in raw_children:
            node = shell(raw, depth)
            parent.children.append(node)
            grandchildren = raw.get("children", [])
            if grandchildren:
                stack.append((grandchildren, node, depth + 1))
    return root


# -- subset-grammar parser ---------------------------------------------------


def _reject_backtick(line: str, line_no: int) -> None:
    in_single = False
    for col, ch in enumerate(line, start=1):
        if ch == "'":
            in_single = not in_single
        elif ch == "`" and not in_single:
            raise ParseError(
                "backtick continuation/escape is outside the supported subset",
                line=line_no,
                column=col,
            )


def _tokenize_command(segment: str, line_no: int) -> list[AstNode]:
    tokens: list[AstNode] = []
    i = 0
    n = len(segment)
    while i < n:
        ch = segment[i]
        if ch.isspace():
            i += 1
            continue
        if ch == "'":
            end = segment.find("'", i + 1)
            if end < 0:
                raise ParseError("unterminated single-quoted string", line=line_no, column=i + 1)
            tokens.append(AstNode("StringConstantExpression", segment[i + 1 : end]))
            i = end + 1
        elif ch == '"':
            end = segment.find('"', i + 1)
            if end < 0:
                raise ParseError("unterminated double-quoted string", line=line_no, column=i + 1)
            body = segment[i + 1 : end]
            kind = (
                "ExpandableStringExpression"
                if _VAR_REF.search(body)
                else "StringConstantExpression"
            )
            tokens.append(AstNode(kind, body))
            i = end + 1
        else:
            j = i
            while j < n and not segment[j].isspace() and segment[j] not in "'\"|":
                j += 1
            word = segment[i:j]
            if word.startswith("$"):
                tokens.append(AstNode("VariableExpression", word[1:]))
            else:
                tokens.append(AstNode("StringConstantExpression", word))
            i = j
    return tokens


def _split_pipeline(line: str, line_no: int) -> list[str]:
    segments = []
    current = []
    quote = None
    for ch in line:
        if quote:
            current.append(ch)
            if ch == quote:
                quote = None
        elif ch in "'\"":
            quote = ch
            current.append(ch)
        elif ch == "|":
            segments.append("".join(current))
            current = []
        else:
            current.append(ch)
    if quote:
        raise ParseError("unterminated string in pipeline", line=line_no)
    segments.append("".join(current))
    return segments


_ASSIGNMENT_RE = re.compile(r"^\s*\$([A-Za-z_][A-Za-z0-9_]*)\s*=\s*(.+?)\s*$")


def parse_script(source: str) -> AstNode:
    """Parse the supported script subset into an AST.

    Supported statements: ``$name = <string or variable>`` assignments and
    ``word arg ...`` command lines, optionally piped with ``|``.  Anything
    else (backticks, control flow, sub-expressions) raises ParseError.
    """
    root = AstNode("ScriptBlock", "")
    for line_no, raw in enumerate(source.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        _reject_backtick(line, line_no)

        match = _ASSIGNMENT_RE.match(line)
        if match:
            name, rhs = match.groups()
            value_tokens = _tokenize_command(rhs, line_no)
            if len(value_tokens) != 1:
                raise ParseError(
                    "assignment right-hand side must be a single value",
                    line=line_no,
                )
            root.children.append(
                AstNode(
                    "AssignmentStatement",
                    line,
                    [AstNode("VariableExpression", name), value_tokens[0]],
                )
            )
            continue

        pipeline = AstNode("Pipeline", line)
        for segment in _split_pipeline(line, line_no):
            tokens = _tokenize_command(segment, line_no)
            if not tokens:
                raise ParseError("empty pipeline segment", line=line_no)
            pipeline.children.append(AstNode("Command", segment.strip(), tokens))
        root.children.append(pipeline)
    return root


# -- candidate harvesting ----------------------------------------------------


def _substitute(text: str, variables: dict[str, str]) -> tuple[str, bool]:
    """Replace $refs from the variable map; flag any that stay unresolved."""
    fully = True

    def repl(match: re.Match) -> str:
        nonlocal fully
        name = match.group(0)[1:]
        if name in variables:
            return variables[name]
        fully = False
        return match.group(0)

    return _VAR_REF.sub(repl, text), fully


def collect_static_nodes(ast: AstNode) -> StaticNodeSet:
    """Harvest constants, variable bindings, expanded strings, and commands.

    Variable resolution is flow-insensitive: the document-order last write
    wins, and every expandable string is simulated against that final map.
    Strings with unresolvable references are kept intact and flagged.
    """
    result = StaticNodeSet()
    expandables: list[str] = []

    for node in ast.walk():
        if node.kind == "StringConstantExpression":
            result.constants.add(node.text)
        elif node.kind == "ExpandableStringExpression":
            expandables.append(node.text)
        elif node.kind == "AssignmentStatement" and len(node.children) >= 2:
            target, value = node.children[0], node.children[1]
            if target.kind != "VariableExpression":
                continue
            if value.kind == "VariableExpression":
                result.variable_map[target.text] = f"${value.text}"
            else:
                result.variable_map[target.text] = value.text
        elif node.kind == "Command":
            for child in node.children:
                if child.kind == "StringConstantExpression":
                    result.commands.append(child.text)
                    break

    # Bindings may reference earlier bindings; settle the map first.
    for _ in range(10):
        changed = False
        for name, value in result.variable_map.items():
            new_value, _ok = _substitute(value, result.variable_map)
            if new_value != value:
                result.variable_map[name] = new_value
                changed = True
        if not changed:
            break

    for text in expandables:
        expanded, ok = _substitute(text, result.variable_map)
        result.expanded.add(expanded)
        if not ok:
            result.unresolved.add(expanded)
    return result


_REGISTRY_PREFIX = re.compile(r"(?i)^(HKEY_[A-Z_]+|HKLM|HKCU|HKCR|HKU)([\\:]|$)")
_URL_RE = re.compile(r"(?i)^[a-z][a-z0-9+.-]*://\S+$")
_IPV4_RE = re.compile(
    r"^(?:(?:25[0-5]|2[0-4]\d|1?\d?\d)\.){3}(?:25[0-5]|2[0-4]\d|1?\d?\d)(?::\d+)?$"
)
_PROCESS_NAME_RE = re.compile(r"^\w[\w.-]*\.(exe|dll|ps1|vbs|bat|cmd)$", re.IGNORECASE)

FILE_EXTENSIONS = frozenset(
    {
        "exe", "dll", "ps1", "vbs", "bat", "cmd", "js", "hta", "lnk",
        "doc", "docx", "xls", "xlsx", "pdf", "txt", "log", "tmp", "dat",
        "zip", "rar", "7z", "ini", "sys", "bin", "db", "msi", "scr",
    }
)


def _has_known_extension(label: str) -> bool:
    _stem, dot, ext = label.rpartition(".")
    return bool(dot) and ext.lower() in FILE_EXTENSIONS


def classify_candidates(node_set: StaticNodeSet) -> list[tuple[NodeKind, str]]:
    """Classify harvested strings into entity candidates; junk is dropped."""
    commands = {c for c in node_set.commands}
    pool = sorted(node_set.constants | node_set.expanded, key=lambda s: (normalize_label(s), s))
    out: list[tuple[NodeKind, str]] = []
    for label in pool:
        if not label.strip():
            continue
        if _REGISTRY_PREFIX.match(label):
            out.append((NodeKind.REGISTRY, label))
        elif _URL_RE.match(label) or _IPV4_RE.match(label):
            out.append((NodeKind.NETWORK, label))
        elif _PROCESS_NAME_RE.match(label) or label in commands:
            out.append((NodeKind.PROCESS, label))
        elif re.search(r"[\\/]", label) or _has_known_extension(label):
            out.append((NodeKind.FILE, label))
    return out


def _suffix_match(a: str, b: str) -> bool:
    """Normalized equality, or one label is a path suffix of the other with
    at least two shared path components."""
    na, nb = normalize_label(a), normalize_label(b)
    if na == nb:
        return True
    sa, sb = split_segments(na), split_segments(nb)
    short, long = (sa, sb) if len(sa) <= len(sb) else (sb, sa)
    return len(short) >= 2 and long[-len(short):] == short


def supplement_graph(
    tech_graph: TechniqueGraph,
    candidates: list[tuple[NodeKind, str]],
    all_events: list[AuditEvent],
    script_id: str = "script",
) -> TechniqueGraph:
    """Re-admit filtered events whose objects match static candidates.

    Only events witnessed in the capture can come back: a candidate selects
    an event if their labels match (suffix-aware), the event's subject is
    already a process node in the graph, and the event is not one of the
    hard-dropped lifecycle names.  Monotone and idempotent.
    """
    out = tech_graph.copy()
    tag = f"static:{script_id}"

    subject_ids = {
        normalize_label(node.label): nid
        for nid, node in sorted(out.nodes.items(), reverse=True)
        if node.kind in (NodeKind.PROCESS, NodeKind.THREAD)
    }
    object_ids = {
        (node.kind, normalize_label(node.label)): nid
        for nid, node in sorted(out.nodes.items(), reverse=True)
        if node.kind is not NodeKind.ATTACKER
    }

    for kind, label in candidates:
        for event in all_events:
            if not event.object:
                continue
            if event.qualified_name() in HARD_DROPPED_NAMES:
                continue
            if OBJECT_KIND[event.event_type] is not kind:
                continue
            if not _suffix_match(label, event.object):
                continue
            src = subject_ids.get(normalize_label(event.subject_image))
            if src is None:
                continue
            key = (kind, normalize_label(event.object))
            dst = object_ids.get(key)
            if dst is None:
                node = out.add_node(kind, event.object, provenance={tag})
                object_ids[key] = node.id
                dst = node.id
            else:
                out.nodes[dst].provenance.add(tag)
            if src == dst:
                continue
            out.add_edge(
                src,
                dst,
                fallback_relation(event),
                timestamps=[event.ts],
                provenance={tag},
            )
    return out
