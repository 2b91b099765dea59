"""Turn CTI report text into per-report technique graphs.

A text-model client extracts entities/relations as strict JSON (one repair
round-trip allowed), regex IOC extraction adds the fine-grained indicators,
and the result becomes an attacker-rooted graph.  The fixture client replays
responses from a keyed local store, so the whole path is deterministic and
network-free for testing.
"""

from __future__ import annotations

import hashlib
import json
import re
import string
import time
import urllib.error
import urllib.request
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Iterator

from .errors import (
    ConfigError,
    DanglingRelation,
    EmptyExtraction,
    ModelUnavailable,
    PromptError,
    SchemaError,
    SchemaViolation,
)
from .model import (
    EdgeRelation,
    NodeKind,
    TECHNIQUE_ID_RE,
    TechniqueGraph,
)

PROMPT_TEMPLATE_VERSION = "v1"


def _load_template(version: str) -> string.Template:
    name = f"extraction_prompt_{version}.txt"
    text = resources.files("techkg").joinpath("templates", name).read_text("utf-8")
    return string.Template(text)


@dataclass
class ReportDoc:
    report_id: str
    technique_id: str
    text: str
    source_name: str = ""


@dataclass
class CtiEntity:
    name: str
    kind: NodeKind
    iocs: list[str] = field(default_factory=list)


@dataclass
class CtiRelation:
    src_name: str
    verb: str
    dst_name: str


@dataclass
class CtiExtraction:
    entities: list[CtiEntity]
    relations: list[CtiRelation]
    raw_model_output: str
    template_version: str = PROMPT_TEMPLATE_VERSION


# -- model clients -----------------------------------------------------------


class ModelClient:
    """Contract: complete(prompt) -> response text.

    Implementations own retries, timeouts, and rate limiting.
    """

    def complete(self, prompt: str) -> str:  # pragma: no cover - interface
        raise NotImplementedError


def prompt_key(prompt: str) -> str:
    return hashlib.sha256(prompt.encode("utf-8")).hexdigest()


class FixtureClient(ModelClient):
    """Deterministic client replaying responses from prompt-hash files.

    Never performs I/O beyond reading the store directory; the optional
    transport argument exists purely so tests can plant a sentinel and
    prove it is never invoked.
    """

    def __init__(self, store_dir, transport=None):
        self.store_dir = Path(store_dir)
        self._transport = transport

    def path_for(self, prompt: str) -> Path:
        return self.store_dir / f"{prompt_key(prompt)}.txt"

    def put(self, prompt: str, response: str) -> Path:
        self.store_dir.mkdir(parents=True, exist_ok=True)
        path = self.path_for(prompt)
        path.write_text(response, encoding="utf-8")
        return path

    def complete(self, prompt: str) -> str:
        path = self.path_for(prompt)
        if not path.is_file():
            raise ModelUnavailable(
                f"fixture store {self.store_dir} has no response for "
                f"prompt {prompt_key(prompt)[:12]}..."
            )
        return path.read_text(encoding="utf-8")


def _urllib_transport(url: str, payload: dict, headers: dict, timeout: float) -> str:
    request = urllib.request.Request(
        url,
        data=json.dumps(payload).encode("utf-8"),
        headers=headers,
        method="POST",
    )
    with urllib.request.urlopen(request, timeout=timeout) as response:
        return response.read().decode("utf-8")


class LiveClient(ModelClient):
    """Chat-completions client; credential comes from the environment only."""

    def __init__(
        self,
        endpoint: str,
        model: str,
        credential_env: str,
        *,
        max_attempts: int = 3,
        timeout_s: float = 60.0,
        min_interval_s: float = 0.0,
        transport=None,
    ):
        import os

        self.endpoint = endpoint
        self.model = model
        self.max_attempts = max_attempts
        self.timeout_s = timeout_s
        self.min_interval_s = min_interval_s
        self._transport = transport or _urllib_transport
        self._last_request = 0.0
        credential = os.environ.get(credential_env, "")
        if not credential:
            raise ConfigError(
                f"environment variable {credential_env!r} is empty; "
                "live client requires a credential"
            )
        self._credential = credential

    def complete(self, prompt: str) -> str:
        payload = {
            "model": self.model,
            "messages": [{"role": "user", "content": prompt}],
            "temperature": 0,
        }
        headers = {
            "Content-Type": "application/json",
            "Authorization": f"Bearer {self._credential}",
        }
        last_error = None
        for _attempt in range(self.max_attempts):
            wait = self.min_interval_s - (time.monotonic() - self._last_request)
            if wait > 0:
                time.sleep(wait)
            self._last_request = time.monotonic()
            try:
                body = self._transport(self.endpoint, payload, headers, self.timeout_s)
                parsed = json.loads(body)
                return parsed["choices"][0]["message"]["content"]
            except (urllib.error.URLError, OSError, KeyError, IndexError,
                    json.JSONDecodeError) as exc:
                last_error = exc
        raise ModelUnavailable(f"model transport failed: {last_error}")


# -- prompt and schema -------------------------------------------------------


def build_prompt(report: ReportDoc, version: str = PROMPT_TEMPLATE_VERSION) -> str:
    """Deterministic prompt: same report and template always give the same
    bytes."""
    if not report.text.strip():
        raise PromptError(f"report {report.report_id} has empty text")
    template = _load_template(version)
    return template.substitute(
        technique_id=report.technique_id,
        report_id=report.report_id,
        source_name=report.source_name or "unknown source",
        text=report.text.strip(),
    )


KIND_SYNONYMS = {
    "process": NodeKind.PROCESS,
    "executable": NodeKind.PROCESS,
    "program": NodeKind.PROCESS,
    "binary": NodeKind.PROCESS,
    "application": NodeKind.PROCESS,
    "command": NodeKind.PROCESS,
    "tool": NodeKind.PROCESS,
    "service": NodeKind.PROCESS,
    "thread": NodeKind.THREAD,
    "file": NodeKind.FILE,
    "document": NodeKind.FILE,
    "payload": NodeKind.FILE,
    "script": NodeKind.FILE,
    "archive": NodeKind.FILE,
    "registry": NodeKind.REGISTRY,
    "registry key": NodeKind.REGISTRY,
    "registry value": NodeKind.REGISTRY,
    "key": NodeKind.REGISTRY,
    "network": NodeKind.NETWORK,
    "ip": NodeKind.NETWORK,
    "ip address": NodeKind.NETWORK,
    "domain": NodeKind.NETWORK,
    "url": NodeKind.NETWORK,
    "server": NodeKind.NETWORK,
    "address": NodeKind.NETWORK,
    "c2": NodeKind.NETWORK,
    "image": NodeKind.IMAGE,
    "dll": NodeKind.IMAGE,
    "library": NodeKind.IMAGE,
    "module": NodeKind.IMAGE,
    "driver": NodeKind.IMAGE,
}
KIND_SYNONYMS.update({k.value.lower(): k for k in NodeKind if k is not NodeKind.ATTACKER})


def resolve_kind(name: str) -> NodeKind | None:
    return KIND_SYNONYMS.get(str(name).strip().lower())


def _validate_payload(raw: str) -> tuple[CtiExtraction | None, list[str]]:
    problems: list[str] = []
    try:
        payload = json.loads(raw)
    except json.JSONDecodeError as exc:
        return None, [f"response is not valid JSON: {exc.msg}"]
    if not isinstance(payload, dict):
        return None, ["response must be a JSON object"]
    if not isinstance(payload.get("entities"), list):
        problems.append("'entities' must be a list")
    if not isinstance(payload.get("relations", []), list):
        problems.append("'relations' must be a list")
    if problems:
        return None, problems

    entities: list[CtiEntity] = []
    by_name: dict[str, CtiEntity] = {}
    for idx, item in enumerate(payload["entities"]):
        if not isinstance(item, dict) or not str(item.get("name", "")).strip():
            problems.append(f"entity #{idx} needs a non-empty 'name'")
            continue
        name = str(item["name"]).strip()
        kind = resolve_kind(item.get("kind", ""))
        if kind is None:
            problems.append(
                f"entity {name!r} has unrecognized kind {item.get('kind')!r}"
            )
            continue
        iocs = item.get("iocs", [])
        if not isinstance(iocs, list):
            problems.append(f"entity {name!r}: 'iocs' must be a list")
            iocs = []
        existing = by_name.get(name)
        if existing is not None:
            if existing.kind is not kind:
                problems.append(f"entity {name!r} listed twice with different kinds")
            for ioc in iocs:
                if str(ioc) not in existing.iocs:
                    existing.iocs.append(str(ioc))
            continue
        entity = CtiEntity(name=name, kind=kind, iocs=[str(x) for x in iocs])
        by_name[name] = entity
        entities.append(entity)

    relations: list[CtiRelation] = []
    for idx, item in enumerate(payload.get("relations", [])):
        if not isinstance(item, dict):
            problems.append(f"relation #{idx} must be an object")
            continue
        src = str(item.get("src_name", "")).strip()
        dst = str(item.get("dst_name", "")).strip()
        verb = str(item.get("verb", "")).strip()
        if not (src and dst and verb):
            problems.append(f"relation #{idx} needs src_name, verb, dst_name")
            continue
        missing = [n for n in (src, dst) if n not in by_name]
        if missing:
            problems.append(f"relation #{idx} names unknown entities {missing}")
            continue
        relations.append(CtiRelation(src_name=src, verb=verb, dst_name=dst))

    if problems:
        return None, problems
    return CtiExtraction(entities=entities, relations=relations, raw_model_output=raw), []


# -- IOC extraction ----------------------------------------------------------

# (kind hint, compiled pattern); hint None means the match can only enrich an
# existing entity, never become one (nothing in the node vocabulary fits).
IOC_PATTERNS: list[tuple[NodeKind | None, re.Pattern]] = [
    (NodeKind.FILE, re.compile(r"\b[A-Za-z]:\\(?:[^\s\"'<>|,;:*?]+\\)*[^\s\"'<>|,;:*?]+")),
    (NodeKind.FILE, re.compile(r"\\\\[\w.-]+\\[^\s\"'<>|,;:*?]+")),
    (
        NodeKind.REGISTRY,
        re.compile(r"\b(?:HKEY_[A-Z_]+|HKLM|HKCU|HKCR|HKU)\\[^\s\"'<>|,;]*[\w*]"),
    ),
    (NodeKind.NETWORK, re.compile(r"\bhttps?://[^\s\"'<>]+", re.IGNORECASE)),
    (
        NodeKind.NETWORK,
        re.compile(r"\b(?:(?:25[0-5]|2[0-4]\d|1?\d?\d)\.){3}(?:25[0-5]|2[0-4]\d|1?\d?\d)\b"),
    ),
    (
        NodeKind.NETWORK,
        re.compile(
            r"\b(?:[a-z0-9](?:[a-z0-9-]*[a-z0-9])?\.)+"
            r"(?:com|net|org|io|info|biz|ru|cn|de|fr|uk|co|top|xyz|onion|gov|edu)\b",
            re.IGNORECASE,
        ),
    ),
    (NodeKind.FILE, re.compile(r"\b[a-fA-F0-9]{64}\b")),
    (NodeKind.FILE, re.compile(r"\b[a-fA-F0-9]{40}\b")),
    (NodeKind.FILE, re.compile(r"\b[a-fA-F0-9]{32}\b")),
    (None, re.compile(r"\bCVE-\d{4}-\d{4,7}\b", re.IGNORECASE)),
]


def extract_iocs(text: str) -> list[tuple[NodeKind | None, str]]:
    """Regex sweep for fine-grained indicators, deduplicated in document
    order.  Every returned string appears verbatim in the input."""
    hits: list[tuple[int, NodeKind | None, str]] = []
    claimed: list[tuple[int, int]] = []
    for hint, pattern in IOC_PATTERNS:
        for match in pattern.finditer(text):
            span = match.span()
            # hashes nested inside an already-captured path/url are noise
            if any(span[0] >= s and span[1] <= e for s, e in claimed):
                continue
            claimed.append(span)
            hits.append((span[0], hint, match.group(0)))
    seen = set()
    out = []
    for pos, hint, value in sorted(hits, key=lambda h: (h[0], h[2])):
        if value not in seen:
            seen.add(value)
            out.append((hint, value))
    return out


# -- report -> extraction -> graph -------------------------------------------


def _merge_iocs(extraction: CtiExtraction, text: str) -> None:
    for hint, value in extract_iocs(text):
        low = value.lower()
        target = None
        for entity in extraction.entities:
            name = entity.name.lower()
            if low in name or name in low:
                target = entity
                break
        if target is not None:
            if value not in target.iocs:
                target.iocs.append(value)
        elif hint is not None:
            extraction.entities.append(CtiEntity(name=value, kind=hint, iocs=[value]))


def parse_report(report: ReportDoc, client: ModelClient) -> CtiExtraction:
    """Prompt the model, validate its JSON (one repair round-trip), and fold
    regex IOCs into the entity list."""
    prompt = build_prompt(report)
    response = client.complete(prompt)
    extraction, problems = _validate_payload(response)
    if extraction is None:
        repair = (
            prompt
            + "\n\nYour previous response was invalid:\n"
            + "\n".join(f"- {p}" for p in problems)
            + "\nRespond again with only the corrected JSON object.\n"
        )
        response = client.complete(repair)
        extraction, problems = _validate_payload(response)
        if extraction is None:
            raise SchemaViolation(
                f"report {report.report_id}: model output failed validation "
                f"after repair: {problems}",
                problems,
            )
    if not extraction.entities:
        raise EmptyExtraction(f"report {report.report_id}: zero entities extracted")
    _merge_iocs(extraction, report.text)
    return extraction


#: keyword -> relation, chosen by the target entity's kind
_VERB_TABLE: dict[NodeKind, list[tuple[str, EdgeRelation]]] = {
    NodeKind.FILE: [
        ("rename", EdgeRelation.FILE_RENAME),
        ("write", EdgeRelation.FILE_CREATE),
        ("drop", EdgeRelation.FILE_CREATE),
        ("creat", EdgeRelation.FILE_CREATE),
        ("download", EdgeRelation.FILE_CREATE),
        ("save", EdgeRelation.FILE_CREATE),
        ("modif", EdgeRelation.FILE_WRITE),
        ("overwrit", EdgeRelation.FILE_WRITE),
        ("encrypt", EdgeRelation.FILE_WRITE),
        ("read", EdgeRelation.FILE_READ),
        ("open", EdgeRelation.FILE_READ),
        ("access", EdgeRelation.FILE_READ),
        ("collect", EdgeRelation.FILE_READ),
        ("steal", EdgeRelation.FILE_READ),
    ],
    NodeKind.REGISTRY: [
        ("creat", EdgeRelation.REGISTRY_CREATE),
        ("add", EdgeRelation.REGISTRY_CREATE),
        ("set", EdgeRelation.REGISTRY_SET_VALUE),
        ("modif", EdgeRelation.REGISTRY_SET_VALUE),
        ("writ", EdgeRelation.REGISTRY_SET_VALUE),
        ("chang", EdgeRelation.REGISTRY_SET_VALUE),
        ("quer", EdgeRelation.REGISTRY_QUERY),
        ("read", EdgeRelation.REGISTRY_QUERY),
        ("check", EdgeRelation.REGISTRY_QUERY),
        ("enumerat", EdgeRelation.REGISTRY_QUERY),
    ],
    NodeKind.PROCESS: [
        ("execut", EdgeRelation.PROCESS_START),
        ("launch", EdgeRelation.PROCESS_START),
        ("start", EdgeRelation.PROCESS_START),
        ("spawn", EdgeRelation.PROCESS_START),
        ("run", EdgeRelation.PROCESS_START),
        ("invok", EdgeRelation.PROCESS_START),
        ("creat", EdgeRelation.PROCESS_START),
        ("use", EdgeRelation.PROCESS_START),
        ("inject", EdgeRelation.THREAD_START),
    ],
    NodeKind.THREAD: [
        ("inject", EdgeRelation.THREAD_START),
        ("creat", EdgeRelation.THREAD_START),
        ("start", EdgeRelation.THREAD_START),
    ],
    NodeKind.NETWORK: [
        ("connect", EdgeRelation.NET_SEND),
        ("send", EdgeRelation.NET_SEND),
        ("beacon", EdgeRelation.NET_SEND),
        ("exfiltrat", EdgeRelation.NET_SEND),
        ("upload", EdgeRelation.NET_SEND),
        ("post", EdgeRelation.NET_SEND),
        ("communicat", EdgeRelation.NET_SEND),
        ("receiv", EdgeRelation.NET_RECEIVE),
        ("download", EdgeRelation.NET_RECEIVE),
    ],
    NodeKind.IMAGE: [
        ("load", EdgeRelation.IMAGE_LOAD),
        ("inject", EdgeRelation.IMAGE_LOAD),
        ("sideload", EdgeRelation.IMAGE_LOAD),
    ],
}


def map_verb(verb: str, dst_kind: NodeKind) -> EdgeRelation | None:
    low = verb.lower()
    for keyword, relation in _VERB_TABLE.get(dst_kind, ()):
        if keyword in low:
            return relation
    return None


def extraction_to_graph(
    extraction: CtiExtraction, technique_id: str, report_id: str
) -> TechniqueGraph:
    """One node per entity, one edge per relation (actor -> target), with an
    Attacker prepended over every process nothing else starts."""
    tag = f"cti:{report_id}"
    graph = TechniqueGraph(technique_id=technique_id, source_kind="cti")
    graph.add_node(NodeKind.ATTACKER, "attacker", node_id=0, provenance={tag})

    ids: dict[str, int] = {}
    for entity in extraction.entities:
        extra = {ioc for ioc in entity.iocs if ioc != entity.name}
        node = graph.add_node(
            entity.kind, entity.name, extra_labels=extra, provenance={tag}
        )
        ids[entity.name] = node.id

    for relation in extraction.relations:
        if relation.src_name not in ids or relation.dst_name not in ids:
            raise DanglingRelation(
                f"relation {relation.src_name!r} -> {relation.dst_name!r} "
                "names an unlisted entity"
            )
        src, dst = ids[relation.src_name], ids[relation.dst_name]
        relations = {relation.verb}
        mapped = map_verb(relation.verb, graph.nodes[dst].kind)
        if mapped is not None:
            relations.add(mapped.value)
        graph.add_edge(src, dst, relations, provenance={tag})

    rooted = {dst for (_src, dst) in graph.edges}
    for entity in extraction.entities:
        nid = ids[entity.name]
        if graph.nodes[nid].kind is NodeKind.PROCESS and nid not in rooted:
            graph.add_edge(0, nid, EdgeRelation.PROCESS_START, provenance={tag})
    return graph


# -- report corpus -----------------------------------------------------------


def iter_reports(directory) -> Iterator[ReportDoc]:
    """Stream report JSON files one at a time (the corpus can be large)."""
    root = Path(directory)
    for path in sorted(root.glob("*.json")):
        try:
            payload = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise SchemaError(f"invalid report JSON: {exc}", path=path)
        if not isinstance(payload, dict):
            raise SchemaError("report JSON must be an object", path=path)
        for field_name in ("report_id", "technique_id", "text"):
            if field_name not in payload:
                raise SchemaError(f"report missing field {field_name!r}", path=path)
        if not TECHNIQUE_ID_RE.match(payload["technique_id"]):
            raise SchemaError(
                f"malformed technique_id {payload['technique_id']!r}", path=path
            )
        if not str(payload["text"]).strip():
            raise SchemaError("report text is empty", path=path)
        yield ReportDoc(
            report_id=str(payload["report_id"]),
            technique_id=payload["technique_id"],
            text=str(payload["text"]),
            source_name=str(payload.get("source_name", "")),
        )


def load_reports(directory) -> list[ReportDoc]:
    return list(iter_reports(directory))
