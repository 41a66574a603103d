"""Sysmon event records: schema, JSONL parsing and stream validation."""

from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from types import MappingProxyType
from typing import Iterable, Mapping

from .errors import InvalidLabel, MalformedJson, MissingRequired, UnknownEventId

ABSENT = "absent"
BENIGN = "benign"
RANSOMWARE = "ransomware"
LABELS = (BENIGN, RANSOMWARE)

# Sysmon event codes observed in the lab captures, with their event names.
EVENT_NAMES: dict[int, str] = {
    1: "Process creation",
    2: "A process changed a file creation time",
    3: "Network connection",
    5: "Process terminated",
    7: "Image loaded",
    8: "CreateRemoteThread",
    10: "ProcessAccess",
    11: "FileCreate",
    12: "RegistryEvent (Object create and delete)",
    13: "RegistryEvent (Value set)",
    17: "PipeEvent (Pipe created)",
    22: "DNSEvent (DNS query)",
    23: "FileDelete (file delete archived)",
    25: "ProcessTampering (process image change)",
}
SUPPORTED_CODES = frozenset(EVENT_NAMES)

_RESERVED_KEYS = ("event_id", "timestamp", "label", "family")


@dataclass(frozen=True)
class EventSchema:
    feature_names: tuple[str, ...]
    required: Mapping[int, frozenset[str]] = field(default_factory=dict)

    def __post_init__(self):
        names = tuple(self.feature_names)
        if len(set(names)) != len(names):
            raise ValueError("feature_names contains duplicates")
        for reserved in _RESERVED_KEYS:
            if reserved in names:
                raise ValueError(f"feature name {reserved!r} collides with a record key")
        req = {int(k): frozenset(v) for k, v in dict(self.required).items()}
        for code, feats in req.items():
            unknown = feats.difference(names)
            if unknown:
                raise ValueError(f"required features {sorted(unknown)} for code {code} not in schema")
        object.__setattr__(self, "feature_names", names)
        object.__setattr__(self, "required", MappingProxyType(req))

    @property
    def index(self) -> dict[str, int]:
        return {name: i for i, name in enumerate(self.feature_names)}

    def __len__(self):
        return len(self.feature_names)

    @classmethod
    def from_dict(cls, doc: Mapping) -> "EventSchema":
        return cls(tuple(doc["feature_names"]), {int(k): frozenset(v) for k, v in doc.get("required", {}).items()})

    def to_dict(self) -> dict:
        return {
            "feature_names": list(self.feature_names),
            "required": {str(k): sorted(v) for k, v in sorted(self.required.items())},
        }

    @classmethod
    def load(cls, path: str | Path) -> "EventSchema":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))


def default_schema() -> EventSchema:
    """52-slot schema: the six named features followed by opaque slots f07..f52."""
    text = resources.files("ransomstream").joinpath("data/default_schema.json").read_text(encoding="utf-8")
    return EventSchema.from_dict(json.loads(text))


_INDEX_CACHE: dict[tuple[str, ...], dict[str, int]] = {}


class FieldMap(Mapping):
    """Read-only ordered feature map stored as a values tuple plus a shared key index."""

    __slots__ = ("_names", "_values", "_index")

    def __init__(self, names: tuple[str, ...], values: tuple[str, ...]):
        if len(names) != len(values):
            raise ValueError("names and values differ in length")
        index = _INDEX_CACHE.get(names)
        if index is None:
            index = _INDEX_CACHE.setdefault(names, {n: i for i, n in enumerate(names)})
        self._names = names
        self._values = values
        self._index = index

    def __getitem__(self, name):
        return self._values[self._index[name]]

    def __iter__(self):
        return iter(self._names)

    def __len__(self):
        return len(self._names)

    def values_tuple(self) -> tuple[str, ...]:
        return self._values

    def __repr__(self):
        return f"FieldMap({dict(zip(self._names, self._values))!r})"


@dataclass(frozen=True)
class SysmonEvent:
    event_id: int
    fields: Mapping[str, str]
    timestamp: int = 0
    label: str | None = None
    family: str | None = None

    def __post_init__(self):
        if not isinstance(self.fields, (FieldMap, MappingProxyType)):
            object.__setattr__(self, "fields", MappingProxyType(dict(self.fields)))

    def __getitem__(self, name: str) -> str:
        return self.fields[name]

    def get(self, name: str, default: str = ABSENT) -> str:
        return self.fields.get(name, default)

    @property
    def is_ransomware(self) -> bool:
        return self.label == RANSOMWARE

    def __reduce__(self):
        # mapping views do not pickle
        return (SysmonEvent, (self.event_id, dict(self.fields), self.timestamp, self.label, self.family))


def _as_feature_value(value) -> str:
    if value is None:
        return ABSENT
    if isinstance(value, str):
        return value if value.strip() else ABSENT
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (int, float)):
        return str(value)
    # nested objects are kept as their compact JSON text
    return json.dumps(value, separators=(",", ":"), sort_keys=True)


def event_from_record(record: Mapping, schema: EventSchema) -> SysmonEvent:
    """Normalize an already-decoded JSON object into a SysmonEvent."""
    if not isinstance(record, Mapping):
        raise MalformedJson("event record must be a JSON object")
    code = record.get("event_id")
    if isinstance(code, bool) or not isinstance(code, int):
        if isinstance(code, str) and code.strip().isdigit():
            code = int(code)
        else:
            raise MalformedJson(f"event_id must be an integer, got {code!r}")
    if code not in SUPPORTED_CODES:
        raise UnknownEventId(f"unsupported Sysmon event code {code}")

    ts = record.get("timestamp", 0)
    if isinstance(ts, bool) or not isinstance(ts, int):
        raise MalformedJson(f"timestamp must be integer milliseconds, got {ts!r}")

    label = record.get("label")
    if label is not None and label not in LABELS:
        raise InvalidLabel(f"label must be one of {LABELS}, got {label!r}")
    family = record.get("family")
    if family is not None and not isinstance(family, str):
        raise MalformedJson("family must be a string")

    values = tuple(_as_feature_value(record.get(name)) for name in schema.feature_names)
    fields = FieldMap(schema.feature_names, values)
    missing = [name for name in sorted(schema.required.get(code, ())) if fields[name] == ABSENT]
    if missing:
        raise MissingRequired(f"event {code} lacks required field(s): {', '.join(missing)}")
    return SysmonEvent(code, fields, ts, label, family)


def parse_event(line: str | bytes, schema: EventSchema) -> SysmonEvent:
    """Parse one JSONL line. Raises exactly one EventError subclass on failure."""
    if isinstance(line, bytes):
        try:
            line = line.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise MalformedJson(f"line is not UTF-8: {exc}") from None
    try:
        record = json.loads(line)
    except (json.JSONDecodeError, RecursionError) as exc:
        raise MalformedJson(str(exc)) from None
    return event_from_record(record, schema)


def event_to_record(event: SysmonEvent) -> dict:
    record: dict = {"event_id": event.event_id, "timestamp": event.timestamp}
    if event.label is not None:
        record["label"] = event.label
    if event.family is not None:
        record["family"] = event.family
    record.update(event.fields)
    return record


def serialize_event(event: SysmonEvent, *, drop_absent: bool = False) -> str:
    """One JSONL line (no trailing newline)."""
    record = event_to_record(event)
    if drop_absent:
        record = {k: v for k, v in record.items() if v != ABSENT or k in _RESERVED_KEYS}
    return json.dumps(record, ensure_ascii=False, separators=(",", ":"))


def read_events(path: str | Path, schema: EventSchema) -> list[SysmonEvent]:
    with open(path, encoding="utf-8") as fh:
        return [parse_event(line, schema) for line in fh if line.strip()]


def iter_events(lines: Iterable[str], schema: EventSchema):
    for line in lines:
        if line.strip():
            yield parse_event(line, schema)


@dataclass
class ValidationReport:
    total: int = 0
    per_code: dict[int, int] = field(default_factory=dict)
    per_label: dict[str, int] = field(default_factory=lambda: {BENIGN: 0, RANSOMWARE: 0, "unlabeled": 0})
    per_family: dict[str, int] = field(default_factory=dict)
    missing_rate: dict[str, float] = field(default_factory=dict)

    @property
    def benign_fraction(self) -> float:
        labeled = self.per_label[BENIGN] + self.per_label[RANSOMWARE]
        return self.per_label[BENIGN] / labeled if labeled else 0.0

    def to_dict(self) -> dict:
        return {
            "total": self.total,
            "per_code": {str(k): v for k, v in sorted(self.per_code.items())},
            "per_label": dict(self.per_label),
            "per_family": dict(sorted(self.per_family.items())),
            "missing_rate": dict(self.missing_rate),
            "benign_fraction": self.benign_fraction,
        }


def validate_stream(events: Iterable[SysmonEvent], schema: EventSchema | None = None) -> ValidationReport:
    codes: Counter = Counter()
    labels: Counter = Counter()
    families: Counter = Counter()
    absent: Counter = Counter()
    names = list(schema.feature_names) if schema is not None else None
    total = 0
    for ev in events:
        total += 1
        codes[ev.event_id] += 1
        labels[ev.label if ev.label is not None else "unlabeled"] += 1
        if ev.family is not None:
            families[ev.family] += 1
        if names is None:
            names = list(ev.fields)
        for name in names:
            if ev.get(name) == ABSENT:
                absent[name] += 1
    report = ValidationReport(total=total, per_code=dict(codes), per_family=dict(families))
    for key in report.per_label:
        report.per_label[key] = labels.get(key, 0)
    report.missing_rate = {name: (absent[name] / total if total else 0.0) for name in (names or [])}
    return report
