"""Event-log ingestion and synthetic dataset generation.

A log is a flat table of events. Rows sharing a ``case_id`` form one trace;
the trace is the unit that gets a graph and an outcome label.
"""
from __future__ import annotations

import csv
import logging
import math
import re
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Iterable, Sequence

import numpy as np

logger = logging.getLogger(__name__)

REQUIRED_COLUMNS = ("case_id", "activity", "start_ts", "complete_ts")
NOT_RELEVANT = "NR"


class SchemaError(ValueError):
    pass


class DataError(ValueError):
    pass


@dataclass(frozen=True)
class AttributeSchema:
    """Declaration of one attribute column.

    ``applies_when`` is only meaningful for ``scope="specific"``: a pair
    ``(attribute, values)`` saying the attribute is relevant on events whose
    ``attribute`` takes one of ``values``.
    """

    name: str
    level: str  # node | graph
    kind: str  # categorical | numeric
    scope: str = "universal"  # key | universal | specific
    applies_when: tuple[str, frozenset[str]] | None = None

    def __post_init__(self):
        if self.level not in ("node", "graph"):
            raise SchemaError(f"{self.name}: level must be node or graph, got {self.level!r}")
        if self.kind not in ("categorical", "numeric"):
            raise SchemaError(f"{self.name}: kind must be categorical or numeric, got {self.kind!r}")
        if self.scope not in ("key", "universal", "specific"):
            raise SchemaError(f"{self.name}: unknown scope {self.scope!r}")
        if self.scope == "specific" and self.applies_when is None:
            raise SchemaError(f"{self.name}: specific attribute needs an applicability predicate")
        if self.scope != "specific" and self.applies_when is not None:
            raise SchemaError(f"{self.name}: only specific attributes take applies_when")
        if self.scope == "key" and (self.level != "node" or self.kind != "categorical"):
            raise SchemaError(f"{self.name}: key attribute must be a node-level categorical")
        if self.applies_when is not None and not isinstance(self.applies_when[1], frozenset):
            attr, values = self.applies_when
            object.__setattr__(self, "applies_when", (attr, frozenset(str(v) for v in values)))

    def applies(self, attrs: dict[str, Any], activity: str) -> bool:
        if self.applies_when is None:
            return True
        attr, values = self.applies_when
        value = activity if attr == "activity" else attrs.get(attr)
        return str(value) in values

    def to_dict(self) -> dict:
        d = {"name": self.name, "level": self.level, "kind": self.kind, "scope": self.scope}
        if self.applies_when is not None:
            d["applies_when"] = {"attribute": self.applies_when[0],
                                 "values": sorted(self.applies_when[1])}
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "AttributeSchema":
        aw = d.get("applies_when")
        if aw is not None:
            aw = (aw["attribute"], frozenset(str(v) for v in aw["values"]))
        return cls(d["name"], d["level"], d["kind"], d.get("scope", "universal"), aw)


def validate_schema(schema: Sequence[AttributeSchema]) -> None:
    names = [a.name for a in schema]
    if len(set(names)) != len(names):
        raise SchemaError("duplicate attribute names in schema")
    keys = [a for a in schema if a.scope == "key"]
    if len(keys) != 1:
        raise SchemaError(f"schema needs exactly one key attribute, found {len(keys)}")
    node_names = {a.name for a in schema if a.level == "node" and a.scope != "specific"}
    for a in schema:
        if a.scope == "specific":
            if a.level != "node":
                raise SchemaError(f"{a.name}: specific attributes are node-level")
            if a.applies_when[0] not in node_names:
                raise SchemaError(
                    f"{a.name}: applicability refers to unknown attribute {a.applies_when[0]!r}")


def key_attribute(schema: Sequence[AttributeSchema]) -> AttributeSchema:
    return next(a for a in schema if a.scope == "key")


@dataclass(frozen=True)
class EventRecord:
    case_id: str
    activity: str
    start_ts: int
    complete_ts: int
    attrs: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.activity:
            raise DataError(f"case {self.case_id}: empty activity")
        if self.complete_ts < self.start_ts:
            raise DataError(
                f"case {self.case_id}: event {self.activity!r} completes before it starts")


@dataclass(frozen=True)
class CaseTrace:
    case_id: str
    events: tuple[EventRecord, ...]
    graph_attrs: dict
    label: int

    def __post_init__(self):
        if len(self.events) == 0:
            raise DataError(f"case {self.case_id} has no events")

    def __len__(self):
        return len(self.events)


@dataclass(frozen=True)
class Dataset:
    schema: tuple[AttributeSchema, ...]
    traces: tuple[CaseTrace, ...]
    class_names: tuple[str, ...]
    warnings: tuple[str, ...] = ()

    def __post_init__(self):
        if len(self.class_names) < 2:
            raise DataError("a dataset needs at least 2 classes")
        n = len(self.class_names)
        for t in self.traces:
            if not 0 <= t.label < n:
                raise DataError(f"case {t.case_id}: label {t.label} out of range")

    @property
    def labels(self) -> np.ndarray:
        return np.array([t.label for t in self.traces], dtype=np.int64)

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=len(self.class_names))

    def subset(self, indices: Iterable[int]) -> "Dataset":
        return Dataset(self.schema, tuple(self.traces[i] for i in indices), self.class_names)

    def node_attributes(self) -> list[AttributeSchema]:
        return [a for a in self.schema if a.level == "node" and a.scope != "key"]

    def graph_attributes(self) -> list[AttributeSchema]:
        return [a for a in self.schema if a.level == "graph"]

    def has_durations(self) -> bool:
        return any(e.complete_ts > e.start_ts for t in self.traces for e in t.events)


# -- CSV ---------------------------------------------------------------------

def parse_timestamp(raw: str) -> int:
    """Integer seconds from either an integer string or an ISO-8601 stamp."""
    raw = raw.strip()
    if re.fullmatch(r"[+-]?\d+", raw):
        return int(raw)
    try:
        value = float(raw)
    except ValueError:
        pass
    else:
        if math.isfinite(value) and value == int(value):
            return int(value)
        raise ValueError(f"non-integer seconds {raw!r}")
    ts = datetime.fromisoformat(raw.replace("Z", "+00:00"))
    if ts.tzinfo is None:
        ts = ts.replace(tzinfo=timezone.utc)
    return int(ts.timestamp())


def _coerce(value: str, attr: AttributeSchema):
    if attr.kind == "numeric":
        try:
            return float(value)
        except ValueError:
            return value
    return value


def _natural_key(s: str):
    return [int(p) if p.isdigit() else p for p in re.split(r"(\d+)", s)]


def load_csv(path, schema: Sequence[AttributeSchema], label_column: str = "label") -> Dataset:
    schema = tuple(schema)
    validate_schema(schema)
    key = key_attribute(schema)
    path = Path(path)
    with path.open(newline="") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        wanted = list(REQUIRED_COLUMNS) + [label_column]
        wanted += [a.name for a in schema if a.name not in wanted]
        for col in wanted:
            if col not in header:
                raise SchemaError(f"{path}: missing column {col!r}")
        rows = list(reader)

    node_attrs = [a for a in schema if a.level == "node" and a.scope != "key"]
    graph_attrs = [a for a in schema if a.level == "graph"]
    cases: dict[str, list] = {}
    labels: dict[str, str] = {}
    gattrs: dict[str, dict] = {}
    warnings = []
    for lineno, row in enumerate(rows, start=2):
        cid = row["case_id"]
        try:
            start = parse_timestamp(row["start_ts"])
            complete = parse_timestamp(row["complete_ts"])
        except ValueError as exc:
            raise DataError(f"{path}:{lineno}: unparsable timestamp ({exc})") from None
        activity = row[key.name]
        attrs = {a.name: _coerce(row[a.name], a) for a in node_attrs}
        try:
            event = EventRecord(cid, activity, start, complete, attrs)
        except DataError as exc:
            raise DataError(f"{path}:{lineno}: {exc}") from None
        g = {a.name: _coerce(row[a.name], a) for a in graph_attrs}
        if cid not in cases:
            cases[cid] = []
            labels[cid] = row[label_column]
            gattrs[cid] = g
        else:
            if g != gattrs[cid]:
                msg = f"case {cid}: graph attributes differ at line {lineno}; first row kept"
                logger.warning(msg)
                warnings.append(msg)
            if row[label_column] != labels[cid]:
                msg = f"case {cid}: label differs at line {lineno}; first row kept"
                logger.warning(msg)
                warnings.append(msg)
        cases[cid].append((start, len(cases[cid]), event))

    class_names = tuple(sorted(set(labels.values()), key=_natural_key))
    index = {c: i for i, c in enumerate(class_names)}
    traces = []
    for cid, evs in cases.items():
        evs.sort(key=lambda x: (x[0], x[1]))
        traces.append(CaseTrace(cid, tuple(e for _, _, e in evs), gattrs[cid], index[labels[cid]]))
    return Dataset(schema, tuple(traces), class_names, tuple(warnings))


def _fmt(value) -> str:
    if isinstance(value, float):
        return repr(value)
    return str(value)


def write_csv(dataset: Dataset, path, label_column: str = "label") -> None:
    key = key_attribute(dataset.schema)
    extra = [a.name for a in dataset.schema if a.name not in REQUIRED_COLUMNS and a is not key]
    cols = list(REQUIRED_COLUMNS) + [label_column] + extra
    if key.name not in cols:
        cols.insert(2, key.name)
    graph_names = {a.name for a in dataset.graph_attributes()}
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(cols)
        for t in dataset.traces:
            for e in t.events:
                row = {"case_id": t.case_id, "activity": e.activity, key.name: e.activity,
                       "start_ts": e.start_ts, "complete_ts": e.complete_ts,
                       label_column: dataset.class_names[t.label]}
                for name in extra:
                    row[name] = t.graph_attrs[name] if name in graph_names else e.attrs[name]
                w.writerow([_fmt(row[c]) for c in cols])


# -- synthetic data ------------------------------------------------------------

_OUTCOMES = ("approved", "declined", "cancelled", "withdrawn", "escalated",
             "deferred", "referred", "archived")
_MIDDLE = ("check documents", "review application", "contact customer", "update file",
           "assess risk", "send offer", "validate identity", "request information")


def _outcome_name(k: int) -> str:
    return _OUTCOMES[k] if k < len(_OUTCOMES) else f"outcome{k}"


def synth_balanced(n_per_class: int, n_classes: int, seed: int) -> Dataset:
    """Balanced log whose outcome is readable from the final activity.

    Every event has zero duration, mirroring loan-application logs that only
    record completion times.
    """
    if n_per_class < 1 or n_classes < 2:
        raise ValueError("need n_per_class >= 1 and n_classes >= 2")
    rng = np.random.default_rng(seed)
    schema = (
        AttributeSchema("activity", "node", "categorical", "key"),
        AttributeSchema("resource", "node", "categorical"),
        AttributeSchema("channel", "node", "categorical"),
        AttributeSchema("amount", "graph", "numeric"),
    )
    labels = np.repeat(np.arange(n_classes), n_per_class)
    rng.shuffle(labels)
    traces = []
    for j, y in enumerate(labels):
        length = int(rng.integers(4, 9))
        acts = ["submit application"]
        acts += [_MIDDLE[i] for i in rng.integers(0, len(_MIDDLE), size=length - 2)]
        acts.append(f"close {_outcome_name(int(y))}")
        t = int(rng.integers(1_300_000_000, 1_310_000_000))
        events = []
        cid = f"case{j:05d}"
        for a in acts:
            events.append(EventRecord(cid, a, t, t, {
                "resource": f"r{int(rng.integers(1, 6))}",
                "channel": str(rng.choice(["web", "phone", "branch"])),
            }))
            # occasional simultaneous events
            t += 0 if rng.random() < 0.2 else int(rng.integers(30, 7200))
        traces.append(CaseTrace(cid, tuple(events),
                                {"amount": float(round(rng.uniform(1000, 50000), 2))}, int(y)))
    return Dataset(schema, tuple(traces),
                   tuple(_outcome_name(k) for k in range(n_classes)))


def largest_remainder(total: int, ratios: Sequence[float]) -> list[int]:
    raw = [total * r for r in ratios]
    counts = [int(math.floor(x)) for x in raw]
    order = sorted(range(len(raw)), key=lambda i: (-(raw[i] - counts[i]), i))
    for i in order[: total - sum(counts)]:
        counts[i] += 1
    return counts


# Class supports of the imbalanced evaluation split (92:174:5:21:32:104),
# normalised so the majority and minority shares are 40.74% and 1.12%.
PATIENTS_LIKE_RATIOS = (0.2150, 0.4074, 0.0112, 0.0491, 0.0748, 0.2425)

_DEPARTMENTS = ("reception", "ward", "lab", "imaging")


def _patient_trace(rng, cid: str, y: int, mimic: bool):
    """One hospital-visit trace for outcome ``y``.

    Classes differ through activity motifs, a critical test result, patient
    age and stay length; all traces end with the same activity. ``mimic``
    draws a class-5 trace from the class-1 profile so the two overlap.
    """
    profile = 1 if mimic else y
    acts = [("register patient", "reception"), ("triage assessment", "reception")]
    if profile == 0:
        acts += [("blood test", "lab"), ("consult doctor", "ward")]
    elif profile in (1, 5):
        acts += [("consult doctor", "ward"), ("admit ward", "ward"), ("blood test", "lab")]
        acts += [("ward round", "ward")] * int(rng.integers(1, 3))
    elif profile == 2:
        acts += [("consult doctor", "ward"), ("ct scan", "imaging"), ("transfer patient", "ward")]
    elif profile == 3:
        acts += [("blood test", "lab"), ("admit ward", "ward"), ("intensive care", "ward"),
                 ("blood test", "lab")]
    elif profile == 4:
        acts += [("ct scan", "imaging"), ("consult surgeon", "ward"), ("perform surgery", "ward"),
                 ("ward round", "ward")]
    if rng.random() < 0.3:
        acts.insert(2, ("x ray", "imaging"))
    acts.append(("discharge patient", "reception"))

    t = int(rng.integers(1_600_000_000, 1_610_000_000))
    events = []
    for a, dept in acts:
        if a == "perform surgery":
            dur = int(rng.integers(3600, 4 * 3600))
        elif a in ("register patient", "triage assessment"):
            dur = int(rng.integers(30, 290))
        else:
            dur = int(rng.integers(5 * 60, 90 * 60))
        attrs = {"department": dept,
                 "heart_rate": float(round(rng.normal(115 if profile == 3 else 80, 8), 1)),
                 "temperature": float(round(rng.normal(37.0, 0.5), 2)),
                 "cost": float(round(rng.uniform(20, 400) * (3 if a == "perform surgery" else 1), 2))}
        if dept in ("lab", "imaging"):
            if profile == 3:
                attrs["test_result"] = "critical"
            else:
                attrs["test_result"] = str(rng.choice(["normal", "abnormal"], p=[0.7, 0.3]))
        else:
            attrs["test_result"] = NOT_RELEVANT
        events.append(EventRecord(cid, a, t, t + dur, attrs))
        t += 0 if rng.random() < 0.1 else dur + int(rng.integers(0, 3600))

    if profile == 5:
        age = rng.uniform(72, 95)
    elif profile == 1:
        age = rng.uniform(25, 65)
    else:
        age = rng.uniform(18, 90)
    gattrs = {"age": float(round(age, 1)),
              "bmi": float(round(rng.normal(26, 4), 1)),
              "prior_visits": float(rng.poisson(4 if profile == 5 else 1)),
              "insurance": str(rng.choice(["public", "private", "none"]))}
    return CaseTrace(cid, tuple(events), gattrs, y)


def synth_imbalanced(total: int, ratios: Sequence[float] = PATIENTS_LIKE_RATIOS,
                     seed: int = 0) -> Dataset:
    """Imbalanced hospital-style log with node and graph attributes of every kind.

    Supports 2 to 6 classes; class ``k`` uses the ``k``-th visit profile.
    """
    ratios = [float(r) for r in ratios]
    if not 2 <= len(ratios) <= 6:
        raise ValueError("synth_imbalanced supports 2 to 6 classes")
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"ratios must sum to 1, got {sum(ratios)!r}")
    if any(r <= 0 for r in ratios):
        raise ValueError("every class ratio must be positive")
    counts = largest_remainder(total, ratios)
    if any(c == 0 for c in counts):
        raise ValueError(f"total {total} too small: some class gets no traces ({counts})")

    rng = np.random.default_rng(seed)
    schema = (
        AttributeSchema("activity", "node", "categorical", "key"),
        AttributeSchema("department", "node", "categorical"),
        AttributeSchema("heart_rate", "node", "numeric"),
        AttributeSchema("temperature", "node", "numeric"),
        AttributeSchema("cost", "node", "numeric"),
        AttributeSchema("test_result", "node", "categorical", "specific",
                        ("department", frozenset({"lab", "imaging"}))),
        AttributeSchema("age", "graph", "numeric"),
        AttributeSchema("bmi", "graph", "numeric"),
        AttributeSchema("prior_visits", "graph", "numeric"),
        AttributeSchema("insurance", "graph", "categorical"),
    )
    labels = np.repeat(np.arange(len(counts)), counts)
    rng.shuffle(labels)
    traces = []
    for j, y in enumerate(labels):
        mimic = y == 5 and rng.random() < 0.15
        traces.append(_patient_trace(rng, f"patient{j:05d}", int(y), mimic))
    return Dataset(schema, tuple(traces), tuple(f"class{k}" for k in range(len(counts))))
