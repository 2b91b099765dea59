"""Normalized audit-event file format (JSON Lines) and windowing.

One JSON object per line, field names exactly matching AuditEvent.  The
format stands in for a kernel event collector: timestamps are nanoseconds
since epoch and must be non-decreasing within a file, since downstream chain
analysis depends on causal order.
"""

from __future__ import annotations

import bisect
import json
from dataclasses import dataclass
from pathlib import Path

from .errors import OrderError, SchemaError

EVENT_TYPES = frozenset(
    {"Process", "Thread", "File", "Registry", "Internet", "Image"}
)

#: (event_type, event_name) pairs that form provenance edges; everything
#: else is lifecycle/handle noise and never becomes an edge.
KEPT_EVENT_NAMES: dict[str, frozenset[str]] = {
    "Process": frozenset({"Start", "DCStart"}),
    "Thread": frozenset({"Start", "DCStart"}),
    "File": frozenset({"Create", "Read", "Write", "Rename"}),
    "Registry": frozenset({"Query", "Create", "SetValue"}),
    "Internet": frozenset({"Receive", "Send"}),
    "Image": frozenset({"Load", "DCStart"}),
}

#: Event names that are dropped outright and may never be re-admitted,
#: even by static-analysis supplementation.
HARD_DROPPED_NAMES = frozenset(
    {"ProcessEnd", "ThreadEnd", "FileioCreate", "RegistryOpen", "RegistryClose"}
)


@dataclass(slots=True)
class AuditEvent:
    ts: int
    event_type: str
    event_name: str
    pid: int
    subject_image: str
    object: str
    ppid: int | None = None
    tid: int | None = None
    object_pid: int | None = None

    def qualified_name(self) -> str:
        """'ProcessStart'-style name used for drop-list checks."""
        return f"{self.event_type}{self.event_name}"

    def relation(self) -> str:
        """Edge-relation name for this event (Internet events map to Net*)."""
        prefix = "Net" if self.event_type == "Internet" else self.event_type
        return f"{prefix}{self.event_name}"

    def is_kept_type(self) -> bool:
        kept = KEPT_EVENT_NAMES.get(self.event_type)
        return kept is not None and self.event_name in kept

    def to_json(self) -> str:
        record = {
            "ts": self.ts,
            "event_type": self.event_type,
            "event_name": self.event_name,
            "pid": self.pid,
            "subject_image": self.subject_image,
            "object": self.object,
        }
        if self.ppid is not None:
            record["ppid"] = self.ppid
        if self.tid is not None:
            record["tid"] = self.tid
        if self.object_pid is not None:
            record["object_pid"] = self.object_pid
        return json.dumps(record, sort_keys=True)


@dataclass(slots=True)
class RunMeta:
    technique_id: str
    procedure_id: str
    initial_pid: int
    t_start: int
    t_end: int

    def __post_init__(self):
        if self.t_start > self.t_end:
            raise SchemaError("run meta: t_start exceeds t_end")
        if self.initial_pid <= 0:
            raise SchemaError("run meta: initial_pid must be positive")

    def to_json(self) -> str:
        return json.dumps(
            {
                "technique_id": self.technique_id,
                "procedure_id": self.procedure_id,
                "initial_pid": self.initial_pid,
                "t_start": self.t_start,
                "t_end": self.t_end,
            },
            sort_keys=True,
        )


_REQUIRED = ("ts", "event_type", "event_name", "pid", "subject_image", "object")
_INT_FIELDS = ("ts", "pid")
_OPT_INT_FIELDS = ("ppid", "tid", "object_pid")


def _event_from_record(record: dict, line_no: int, path) -> AuditEvent:
    for name in _REQUIRED:
        if name not in record:
            raise SchemaError(f"missing field {name!r}", line=line_no, path=path)
    for name in _INT_FIELDS:
        if not isinstance(record[name], int):
            raise SchemaError(f"field {name!r} must be an integer", line=line_no, path=path)
    for name in _OPT_INT_FIELDS:
        if name in record and not isinstance(record[name], int):
            raise SchemaError(f"field {name!r} must be an integer", line=line_no, path=path)
    if record["event_type"] not in EVENT_TYPES:
        raise SchemaError(
            f"unknown event_type {record['event_type']!r}", line=line_no, path=path
        )
    if record["ts"] < 0:
        raise SchemaError("ts must be non-negative", line=line_no, path=path)
    if (
        record["event_type"] == "Process"
        and record["event_name"] in ("Start", "DCStart")
        and "object_pid" not in record
    ):
        raise SchemaError(
            "Process Start/DCStart events must carry object_pid",
            line=line_no,
            path=path,
        )
    return AuditEvent(
        ts=record["ts"],
        event_type=record["event_type"],
        event_name=str(record["event_name"]),
        pid=record["pid"],
        subject_image=str(record["subject_image"]),
        object=str(record["object"]),
        ppid=record.get("ppid"),
        tid=record.get("tid"),
        object_pid=record.get("object_pid"),
    )


def read_events(path) -> list[AuditEvent]:
    """Read and validate a JSONL event file, preserving order.

    Raises SchemaError (with the offending line number) on malformed records
    and OrderError if a timestamp regresses.
    """
    events: list[AuditEvent] = []
    last_ts = -1
    with open(path, "r", encoding="utf-8") as handle:
        for line_no, line in enumerate(handle, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise SchemaError(f"invalid JSON: {exc.msg}", line=line_no, path=path)
            if not isinstance(record, dict):
                raise SchemaError("event line is not an object", line=line_no, path=path)
            event = _event_from_record(record, line_no, path)
            if event.ts < last_ts:
                raise OrderError(
                    f"{path}:{line_no}: timestamp {event.ts} regresses below {last_ts}"
                )
            last_ts = event.ts
            events.append(event)
    return events


def write_events(events, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as handle:
        for event in events:
            handle.write(event.to_json())
            handle.write("\n")


def read_run_meta(path) -> RunMeta:
    try:
        record = json.loads(Path(path).read_text(encoding="utf-8"))
        return RunMeta(
            technique_id=record["technique_id"],
            procedure_id=record["procedure_id"],
            initial_pid=record["initial_pid"],
            t_start=record["t_start"],
            t_end=record["t_end"],
        )
    except json.JSONDecodeError as exc:
        raise SchemaError(f"invalid run meta JSON: {exc}", path=path)
    except KeyError as exc:
        raise SchemaError(f"run meta missing field {exc.args[0]!r}", path=path)


def window(events: list[AuditEvent], t_start: int, t_end: int) -> list[AuditEvent]:
    """Contiguous slice of time-ordered events with t_start <= ts <= t_end."""
    if t_end < t_start:
        return []
    timestamps = [e.ts for e in events]
    lo = bisect.bisect_left(timestamps, t_start)
    hi = bisect.bisect_right(timestamps, t_end)
    return events[lo:hi]
