"""Event log model and XES / CSV ingestion.

Logs are parsed into immutable :class:`EventLog` objects. Events inside each
trace are sorted by timestamp (stable, so ties keep file order) and every
repair or dropped record is reported in ``EventLog.issues``.
"""

from __future__ import annotations

import csv
import gzip
import io
import math
import os
import xml.etree.ElementTree as ET
from dataclasses import dataclass, field
from datetime import datetime, timezone
from types import MappingProxyType
from typing import IO, Any, Iterable, Mapping, Sequence

from dateutil import parser as dtparser

__all__ = [
    "Event",
    "Trace",
    "EventLog",
    "LabelScheme",
    "LogParseError",
    "LogConfigError",
    "ValidationReport",
    "parse_xes",
    "parse_csv",
    "read_log",
    "write_csv",
    "write_xes",
    "validate_log",
    "parse_timestamp",
]

XES_TIMESTAMP = "time:timestamp"
XES_NAME = "concept:name"
CASE_PREFIX = "case:"


class LogParseError(ValueError):
    """Malformed input document. ``line``/``column`` locate the failure when known."""

    def __init__(self, message: str, line: int | None = None, column: int | None = None):
        self.line = line
        self.column = column
        where = f" (line {line}, column {column})" if line is not None else ""
        super().__init__(message + where)


class LogConfigError(ValueError):
    pass


def _freeze(mapping: Mapping[str, Any] | None) -> Mapping[str, Any]:
    return MappingProxyType(dict(mapping or {}))


@dataclass(frozen=True)
class Event:
    activity_label: str
    timestamp: datetime
    attributes: Mapping[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        if not self.activity_label:
            raise ValueError("activity_label must be non-empty")
        if self.timestamp is None:
            raise ValueError("timestamp is required")
        object.__setattr__(self, "attributes", _freeze(self.attributes))

    def __eq__(self, other):
        if not isinstance(other, Event):
            return NotImplemented
        return (self.activity_label == other.activity_label
                and self.timestamp == other.timestamp
                and dict(self.attributes) == dict(other.attributes))

    def __hash__(self):
        return hash((self.activity_label, self.timestamp))


@dataclass(frozen=True)
class Trace:
    case_id: str
    events: tuple[Event, ...]
    case_attributes: Mapping[str, Any] = field(default_factory=dict)
    # adjacent timestamp descents in file order, repaired by sorting
    order_repairs: int = field(default=0, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "events", tuple(self.events))
        object.__setattr__(self, "case_attributes", _freeze(self.case_attributes))

    def __eq__(self, other):
        if not isinstance(other, Trace):
            return NotImplemented
        return (self.case_id == other.case_id and self.events == other.events
                and dict(self.case_attributes) == dict(other.case_attributes))

    def __hash__(self):
        return hash((self.case_id, len(self.events)))

    def __len__(self):
        return len(self.events)

    @property
    def activities(self) -> list[str]:
        return [e.activity_label for e in self.events]


@dataclass(frozen=True)
class EventLog:
    traces: tuple[Trace, ...]
    source_meta: Mapping[str, Any] = field(default_factory=dict, compare=False)
    issues: tuple[str, ...] = field(default=(), compare=False)

    def __post_init__(self):
        object.__setattr__(self, "traces", tuple(self.traces))
        object.__setattr__(self, "source_meta", _freeze(self.source_meta))
        object.__setattr__(self, "issues", tuple(self.issues))

    def __len__(self):
        return len(self.traces)

    def __iter__(self):
        return iter(self.traces)

    @property
    def n_events(self) -> int:
        return sum(len(t) for t in self.traces)

    def case_ids(self) -> list[str]:
        return [t.case_id for t in self.traces]

    def subset(self, case_ids: Iterable[str]) -> "EventLog":
        keep = set(case_ids)
        return EventLog(tuple(t for t in self.traces if t.case_id in keep),
                        self.source_meta, self.issues)


@dataclass(frozen=True)
class LabelScheme:
    """How an event's activity label is composed from its attributes.

    With ``keys=("concept:name", "lifecycle:transition")`` an event with status
    ``Accepted`` and sub-status ``In Progress`` gets the label
    ``Accepted-In.Progress``. Keys missing on an event are skipped.
    """

    keys: tuple[str, ...] = (XES_NAME,)
    separator: str = "-"
    space_replacement: str | None = "."

    def compose(self, attributes: Mapping[str, Any]) -> str | None:
        parts = []
        for key in self.keys:
            value = attributes.get(key)
            if value is None or value == "":
                continue
            text = str(value)
            if self.space_replacement is not None:
                text = text.replace(" ", self.space_replacement)
            parts.append(text)
        if not parts:
            return None
        return self.separator.join(parts)


def parse_timestamp(text: str) -> datetime:
    """ISO-8601 to an aware UTC datetime; naive stamps are taken as UTC."""
    ts = dtparser.isoparse(text.strip())
    if ts.tzinfo is None:
        ts = ts.replace(tzinfo=timezone.utc)
    return ts.astimezone(timezone.utc)


def _sort_events(events: list[Event]) -> tuple[list[Event], int]:
    descents = sum(1 for a, b in zip(events, events[1:]) if b.timestamp < a.timestamp)
    return sorted(events, key=lambda e: e.timestamp), descents


# --------------------------------------------------------------------- XES

def _local(tag: str) -> str:
    return tag.rsplit("}", 1)[-1]


def _xes_value(elem: ET.Element) -> Any:
    kind = _local(elem.tag)
    raw = elem.get("value")
    if kind in ("string", "id"):
        return raw
    if raw is None:
        raise ValueError(f"<{kind}> attribute {elem.get('key')!r} has no value")
    if kind == "date":
        return parse_timestamp(raw)
    if kind == "int":
        return int(raw)
    if kind == "float":
        return float(raw)
    if kind == "boolean":
        return raw.strip().lower() == "true"
    return raw


_XES_TYPES = {"string", "date", "int", "float", "boolean", "id"}


def _xes_attributes(elem: ET.Element) -> dict[str, Any]:
    out = {}
    for child in elem:
        kind = _local(child.tag)
        if kind in _XES_TYPES and child.get("key") is not None:
            out[child.get("key")] = _xes_value(child)
    return out


def parse_xes(source: bytes | IO[bytes], label_scheme: LabelScheme | None = None,
              timestamp_key: str = XES_TIMESTAMP, case_key: str = XES_NAME,
              name: str = "<stream>") -> EventLog:
    """Parse an XES document.

    Events without a timestamp or without any label key are dropped and
    reported; a trace left without events is dropped and reported too.
    Duplicate case ids keep the first occurrence.
    """
    scheme = label_scheme or LabelScheme()
    data = source if isinstance(source, (bytes, bytearray)) else source.read()
    try:
        root = ET.fromstring(data)
    except ET.ParseError as exc:
        line, col = exc.position
        raise LogParseError(f"malformed XES in {name}: {exc.msg if hasattr(exc, 'msg') else exc}",
                            line, col) from None
    if _local(root.tag) != "log":
        raise LogParseError(f"root element is <{_local(root.tag)}>, expected <log>")

    traces, issues, seen = [], [], set()
    for t_index, t_elem in enumerate(el for el in root if _local(el.tag) == "trace"):
        case_attrs = _xes_attributes(t_elem)
        case_id = case_attrs.pop(case_key, None)
        case_id = str(case_id) if case_id is not None else f"trace_{t_index}"
        events = []
        for e_index, e_elem in enumerate(el for el in t_elem if _local(el.tag) == "event"):
            try:
                attrs = _xes_attributes(e_elem)
            except (ValueError, OverflowError) as exc:
                issues.append(f"case {case_id}: event {e_index} unreadable ({exc}), dropped")
                continue
            ts = attrs.pop(timestamp_key, None)
            label = scheme.compose(attrs)
            if not isinstance(ts, datetime) or label is None:
                what = "timestamp" if not isinstance(ts, datetime) else "activity"
                issues.append(f"case {case_id}: event {e_index} missing {what}, dropped")
                continue
            events.append(Event(label, ts, attrs))
        if not events:
            issues.append(f"case {case_id}: no valid events, trace dropped")
            continue
        if case_id in seen:
            issues.append(f"case {case_id}: duplicate case id, trace dropped")
            continue
        seen.add(case_id)
        events, descents = _sort_events(events)
        if descents:
            issues.append(f"case {case_id}: {descents} out-of-order event(s) re-sorted")
        traces.append(Trace(case_id, events, case_attrs, descents))
    meta = {"name": name, "format": "xes", "label_keys": list(scheme.keys)}
    return EventLog(traces, meta, issues)


# --------------------------------------------------------------------- CSV

def _infer(text: str) -> Any:
    """Type inference for CSV cells; must stay idempotent with ``_render``."""
    if text == "":
        return None
    low = text.lower()
    if low in ("true", "false"):
        return low == "true"
    try:
        return int(text)
    except ValueError:
        pass
    try:
        value = float(text)
        if math.isfinite(value):
            return value
    except ValueError:
        pass
    return text


def _render(value: Any) -> str:
    if value is None:
        return ""
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, datetime):
        return value.isoformat()
    if isinstance(value, float):
        return repr(value)
    return str(value)


def parse_csv(source: str | bytes | IO, column_map: Mapping[str, Any],
              label_scheme: LabelScheme | None = None, name: str = "<stream>") -> EventLog:
    """Parse a comma separated log with a header row.

    ``column_map`` binds the roles ``case``, ``activity`` and ``timestamp`` to
    column names. ``activity`` may be a list of columns, which are joined by
    the label scheme's separator. Columns prefixed ``case:`` (other than the
    case column) become case attributes; all remaining non-role columns are
    event attributes. Rows with unparseable timestamps are skipped and counted.
    """
    missing_roles = {"case", "activity", "timestamp"} - set(column_map)
    if missing_roles:
        raise LogConfigError(f"column_map lacks role(s): {sorted(missing_roles)}")
    if isinstance(source, (bytes, bytearray)):
        text = source.decode("utf-8-sig")
    elif isinstance(source, str):
        text = source
    else:
        raw = source.read()
        text = raw.decode("utf-8-sig") if isinstance(raw, bytes) else raw
    reader = csv.DictReader(io.StringIO(text, newline=""))
    header = reader.fieldnames or []

    activity_cols = column_map["activity"]
    if isinstance(activity_cols, str):
        activity_cols = [activity_cols]
    case_col, ts_col = column_map["case"], column_map["timestamp"]
    needed = [case_col, ts_col, *activity_cols]
    absent = [c for c in needed if c not in header]
    if absent and header:
        raise LogConfigError(f"mapped column(s) not in header: {absent}")
    if not header:
        return EventLog((), {"name": name, "format": "csv"}, ("empty log",))

    scheme = label_scheme or LabelScheme(tuple(activity_cols))
    role_cols = {case_col, ts_col}
    grouped: dict[str, list[Event]] = {}
    case_attrs: dict[str, dict[str, Any]] = {}
    issues, skipped = [], 0
    for row_no, row in enumerate(reader, start=2):
        case_id = row.get(case_col)
        if not case_id:
            issues.append(f"row {row_no}: empty case id, skipped")
            skipped += 1
            continue
        try:
            ts = parse_timestamp(row[ts_col])
        except (ValueError, OverflowError, TypeError):
            issues.append(f"row {row_no}: unparseable timestamp {row.get(ts_col)!r}, skipped")
            skipped += 1
            continue
        attrs, cattrs = {}, case_attrs.setdefault(case_id, {})
        for col, cell in row.items():
            if col in role_cols or col is None:
                continue
            value = _infer(cell if cell is not None else "")
            if col.startswith(CASE_PREFIX):
                if value is not None:
                    cattrs.setdefault(col[len(CASE_PREFIX):], value)
            elif value is not None:
                attrs[col] = value
        label = scheme.compose({c: row.get(c) for c in scheme.keys})
        if label is None:
            issues.append(f"row {row_no}: empty activity, skipped")
            skipped += 1
            continue
        grouped.setdefault(case_id, []).append(Event(label, ts, attrs))

    traces = []
    for case_id, events in grouped.items():
        events, descents = _sort_events(events)
        if descents:
            issues.append(f"case {case_id}: {descents} out-of-order event(s) re-sorted")
        traces.append(Trace(case_id, events, case_attrs.get(case_id, {}), descents))
    meta = {"name": name, "format": "csv", "skipped_rows": skipped,
            "column_map": dict(column_map)}
    return EventLog(traces, meta, issues)


def write_csv(log: EventLog, out: IO[str] | None = None,
              case_col: str = "case:concept:name", activity_col: str = "activity",
              timestamp_col: str = XES_TIMESTAMP) -> str:
    """Serialize a log to CSV readable back by :func:`parse_csv`.

    Use ``column_map={"case": case_col, "activity": activity_col,
    "timestamp": timestamp_col}`` with ``LabelScheme((activity_col,),
    space_replacement=None)`` to read it back unchanged.
    """
    event_keys: list[str] = []
    case_keys: list[str] = []
    for trace in log.traces:
        for key in trace.case_attributes:
            if key not in case_keys:
                case_keys.append(key)
        for event in trace.events:
            for key in event.attributes:
                if key not in event_keys:
                    event_keys.append(key)
    header = [case_col, activity_col, timestamp_col,
              *[CASE_PREFIX + k for k in case_keys],
              *[k for k in event_keys if k != activity_col]]
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\r\n")
    writer.writerow(header)
    for trace in log.traces:
        for event in trace.events:
            row = [trace.case_id, event.activity_label, event.timestamp.isoformat()]
            row += [_render(trace.case_attributes.get(k)) for k in case_keys]
            row += [_render(event.attributes.get(k)) for k in event_keys if k != activity_col]
            writer.writerow(row)
    text = buf.getvalue()
    if out is not None:
        out.write(text)
    return text


def read_log(path: str | os.PathLike, fmt: str | None = None,
             label_scheme: LabelScheme | None = None,
             column_map: Mapping[str, Any] | None = None) -> EventLog:
    """Read a log file, choosing the parser by ``fmt`` or by extension (``.gz`` allowed)."""
    path = os.fspath(path)
    base = path[:-3] if path.endswith(".gz") else path
    fmt = (fmt or os.path.splitext(base)[1].lstrip(".")).lower()
    opener = gzip.open if path.endswith(".gz") else open
    with opener(path, "rb") as fh:
        data = fh.read()
    name = os.path.basename(path)
    if fmt == "xes":
        return parse_xes(data, label_scheme, name=name)
    if fmt == "csv":
        if column_map is None:
            raise LogConfigError("CSV input needs a column_map")
        return parse_csv(data, column_map, label_scheme, name=name)
    raise LogConfigError(f"unknown log format {fmt!r}")


@dataclass
class ValidationReport:
    traces: int
    events: int
    attribute_coverage: dict[str, float]
    monotonicity_repairs: int
    unsorted_traces: int
    warnings: list[str]

    def as_dict(self) -> dict[str, Any]:
        return {"traces": self.traces, "events": self.events,
                "attribute_coverage": dict(self.attribute_coverage),
                "monotonicity_repairs": self.monotonicity_repairs,
                "unsorted_traces": self.unsorted_traces,
                "warnings": list(self.warnings)}


def validate_log(log: EventLog) -> ValidationReport:
    """Structural summary of a parsed log. Never raises."""
    n_events = log.n_events
    counts: dict[str, int] = {}
    unsorted = 0
    ids: Sequence[str] = log.case_ids()
    for trace in log.traces:
        for event in trace.events:
            for key in event.attributes:
                counts[key] = counts.get(key, 0) + 1
        if any(b.timestamp < a.timestamp for a, b in zip(trace.events, trace.events[1:])):
            unsorted += 1
    coverage = {k: counts[k] / n_events for k in sorted(counts)} if n_events else {}
    warnings = []
    if not log.traces:
        warnings.append("empty log")
    if len(set(ids)) != len(ids):
        warnings.append("duplicate case ids")
    if unsorted:
        warnings.append(f"{unsorted} trace(s) not sorted by timestamp")
    warnings.extend(log.issues)
    repairs = sum(t.order_repairs for t in log.traces)
    return ValidationReport(len(log.traces), n_events, coverage, repairs, unsorted, warnings)


def _xes_elem(key: str, value: Any) -> str:
    from xml.sax.saxutils import quoteattr

    if isinstance(value, bool):
        kind, text = "boolean", "true" if value else "false"
    elif isinstance(value, int):
        kind, text = "int", str(value)
    elif isinstance(value, float):
        kind, text = "float", repr(value)
    elif isinstance(value, datetime):
        kind, text = "date", value.isoformat()
    else:
        kind, text = "string", str(value)
    return f"<{kind} key={quoteattr(key)} value={quoteattr(text)}/>"


def write_xes(log: EventLog, out: IO[str] | None = None) -> str:
    """Serialize to XES. Activity labels are not written; they are recomputed
    from the event attributes by the label scheme on parsing."""
    lines = ['<?xml version="1.0" encoding="UTF-8"?>',
             '<log xes.version="1.0" xmlns="http://www.xes-standard.org/">']
    for trace in log.traces:
        lines.append("  <trace>")
        lines.append("    " + _xes_elem(XES_NAME, trace.case_id))
        for key, value in trace.case_attributes.items():
            lines.append("    " + _xes_elem(key, value))
        for event in trace.events:
            lines.append("    <event>")
            for key, value in event.attributes.items():
                lines.append("      " + _xes_elem(key, value))
            lines.append("      " + _xes_elem(XES_TIMESTAMP, event.timestamp))
            lines.append("    </event>")
        lines.append("  </trace>")
    lines.append("</log>")
    text = "\n".join(lines) + "\n"
    if out is not None:
        out.write(text)
    return text
