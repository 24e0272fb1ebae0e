"""Attribute encoding for node and graph vectors.

Node vectors are laid out as ``[activity | specific | universal]``: the
activity block is a verb one-hot followed by a description one-hot, then one
block per specific attribute, then one block per universal attribute (with
event duration appended last when the training data has any).
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .eventlog import AttributeSchema, CaseTrace, DataError, EventRecord, key_attribute

SENTINEL = -1.0
DURATION = "duration"


class FitError(ValueError):
    pass


def decompose_activity(label: str) -> tuple[str, str]:
    """Split an activity label into a lowercased (verb, description) pair.

    >>> decompose_activity("A_SUBMITTED loan app")
    ('a_submitted', 'loan app')
    """
    parts = label.strip().lower().split(None, 1)
    if not parts:
        raise ValueError("empty activity label")
    return parts[0], parts[1] if len(parts) > 1 else ""


def duration(event: EventRecord) -> int:
    d = event.complete_ts - event.start_ts
    if d < 0:
        raise DataError(f"case {event.case_id}: negative duration for {event.activity!r}")
    return int(d)


def _as_float(value) -> float | None:
    try:
        v = float(value)
    except (TypeError, ValueError):
        return None
    return v if np.isfinite(v) else None


def _lower_median(values: Sequence[float]) -> float:
    s = sorted(values)
    return float(s[(len(s) - 1) // 2])


def _minmax(x: float, lo: float, hi: float) -> float:
    if hi == lo:
        return 0.5
    return float(min(1.0, max(0.0, (x - lo) / (hi - lo))))


@dataclass(frozen=True)
class Slot:
    name: str
    offset: int
    width: int


@dataclass
class EncoderState:
    vocab: dict[str, list[str]]
    ranges: dict[str, tuple[float, float]]
    medians: dict[str, float]
    verbs: list[str]
    descriptions: list[str]
    activities: list[str]
    node_layout: list[Slot]
    graph_layout: list[Slot]
    schema: list[AttributeSchema] = field(default_factory=list)

    @property
    def node_dim(self) -> int:
        return sum(s.width for s in self.node_layout)

    @property
    def graph_dim(self) -> int:
        return sum(s.width for s in self.graph_layout)

    @property
    def activity_width(self) -> int:
        """Width of the verb+description block at the front of node vectors."""
        return len(self.verbs) + len(self.descriptions)

    @property
    def uses_duration(self) -> bool:
        return any(s.name == DURATION for s in self.node_layout)

    def activity_id(self, activity: str) -> int:
        """Index into the joint activity vocabulary; 0 is reserved for unseen."""
        key = " ".join(decompose_activity(activity)).strip()
        try:
            return self.activities.index(key) + 1
        except ValueError:
            return 0

    def to_json(self) -> str:
        doc = {
            "schema": [a.to_dict() for a in self.schema],
            "vocab": self.vocab,
            "ranges": {k: list(v) for k, v in self.ranges.items()},
            "medians": self.medians,
            "verbs": self.verbs,
            "descriptions": self.descriptions,
            "activities": self.activities,
            "node_layout": [[s.name, s.offset, s.width] for s in self.node_layout],
            "graph_layout": [[s.name, s.offset, s.width] for s in self.graph_layout],
        }
        return json.dumps(doc, indent=1, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "EncoderState":
        d = json.loads(text)
        return cls(
            vocab=d["vocab"],
            ranges={k: (v[0], v[1]) for k, v in d["ranges"].items()},
            medians=d["medians"],
            verbs=d["verbs"],
            descriptions=d["descriptions"],
            activities=d["activities"],
            node_layout=[Slot(*s) for s in d["node_layout"]],
            graph_layout=[Slot(*s) for s in d["graph_layout"]],
            schema=[AttributeSchema.from_dict(a) for a in d["schema"]],
        )


@dataclass(frozen=True)
class EncodedNode:
    vector: np.ndarray
    mask: np.ndarray


def _dedup(values) -> list[str]:
    return list(dict.fromkeys(str(v) for v in values))


def fit(train: Sequence[CaseTrace], schema: Sequence[AttributeSchema]) -> EncoderState:
    if not train:
        raise FitError("cannot fit encoders on an empty training split")
    schema = list(schema)
    key = key_attribute(schema)
    events = [e for t in train for e in t.events]

    pairs = [decompose_activity(e.activity) for e in events]
    verbs = _dedup(v for v, _ in pairs)
    descriptions = _dedup(d for _, d in pairs)
    activities = _dedup(f"{v} {d}".strip() for v, d in pairs)

    vocab: dict[str, list[str]] = {}
    ranges: dict[str, tuple[float, float]] = {}
    medians: dict[str, float] = {}

    def fit_attr(attr: AttributeSchema, raw_values):
        if attr.kind == "categorical":
            vocab[attr.name] = _dedup(raw_values)
            return 1
        nums = []
        for v in raw_values:
            x = _as_float(v)
            if x is None:
                raise FitError(f"attribute {attr.name!r}: non-numeric training value {v!r}")
            nums.append(x)
        if nums:
            ranges[attr.name] = (min(nums), max(nums))
            medians[attr.name] = _lower_median(nums)
        else:
            ranges[attr.name] = (0.0, 0.0)
            medians[attr.name] = 0.0
        return 1

    node_attrs = [a for a in schema if a.level == "node" and a is not key]
    specific = [a for a in node_attrs if a.scope == "specific"]
    universal = [a for a in node_attrs if a.scope == "universal"]
    for a in specific:
        fit_attr(a, [e.attrs[a.name] for e in events if a.applies(e.attrs, e.activity)])
    for a in universal:
        fit_attr(a, [e.attrs[a.name] for e in events])
    graph_attrs = [a for a in schema if a.level == "graph"]
    for a in graph_attrs:
        fit_attr(a, [t.graph_attrs[a.name] for t in train])

    durations = [duration(e) for e in events]
    use_duration = max(durations) > 0
    if use_duration:
        ranges[DURATION] = (float(min(durations)), float(max(durations)))

    def width(a):
        return len(vocab[a.name]) if a.kind == "categorical" else 1

    node_layout, off = [], 0
    for name, w in [("activity.verb", len(verbs)), ("activity.description", len(descriptions))]:
        node_layout.append(Slot(name, off, w))
        off += w
    for a in specific + universal:
        node_layout.append(Slot(a.name, off, width(a)))
        off += width(a)
    if use_duration:
        node_layout.append(Slot(DURATION, off, 1))
    graph_layout, off = [], 0
    for a in graph_attrs:
        graph_layout.append(Slot(a.name, off, width(a)))
        off += width(a)
    return EncoderState(vocab, ranges, medians, verbs, descriptions, activities,
                        node_layout, graph_layout, schema)


def _one_hot(vocab: list[str], value) -> np.ndarray:
    out = np.zeros(len(vocab))
    try:
        out[vocab.index(str(value))] = 1.0
    except ValueError:
        pass  # unseen category: all-zero block
    return out


def encode_node(event: EventRecord, state: EncoderState) -> EncodedNode:
    by_name = {a.name: a for a in state.schema}
    vec = np.zeros(state.node_dim)
    mask = np.ones(state.node_dim, dtype=bool)
    verb, desc = decompose_activity(event.activity)
    for slot in state.node_layout:
        sl = slice(slot.offset, slot.offset + slot.width)
        if slot.name == "activity.verb":
            vec[sl] = _one_hot(state.verbs, verb)
        elif slot.name == "activity.description":
            vec[sl] = _one_hot(state.descriptions, desc)
        elif slot.name == DURATION:
            vec[sl] = _minmax(duration(event), *state.ranges[DURATION])
        else:
            attr = by_name[slot.name]
            applicable = attr.applies(event.attrs, event.activity)
            raw = event.attrs.get(slot.name)
            if attr.kind == "categorical":
                if applicable:
                    vec[sl] = _one_hot(state.vocab[slot.name], raw)
                else:
                    vec[sl] = SENTINEL
                    mask[sl] = False
            else:
                x = _as_float(raw) if applicable else None
                if x is None:
                    x = state.medians[slot.name]
                vec[sl] = _minmax(x, *state.ranges[slot.name])
    return EncodedNode(vec, mask)


def encode_graph_attrs(trace: CaseTrace, state: EncoderState) -> np.ndarray:
    by_name = {a.name: a for a in state.schema}
    vec = np.zeros(state.graph_dim)
    for slot in state.graph_layout:
        attr = by_name[slot.name]
        raw = trace.graph_attrs.get(slot.name)
        sl = slice(slot.offset, slot.offset + slot.width)
        if attr.kind == "categorical":
            vec[sl] = _one_hot(state.vocab[slot.name], raw)
        else:
            x = _as_float(raw)
            if x is None:
                x = state.medians[slot.name]
            vec[sl] = _minmax(x, *state.ranges[slot.name])
    return vec
