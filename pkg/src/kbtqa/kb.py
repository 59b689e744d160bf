"""Knowledge-base triples, label lookup and per-table one-hop sub-graphs."""

from __future__ import annotations

import json
import logging
from collections import defaultdict
from dataclasses import dataclass, field
from typing import IO, Iterable, Iterator, Mapping, Union

logger = logging.getLogger(__name__)

DEFAULT_EXCLUDED_DATATYPES = frozenset({"globe-coordinate", "url"})


class KBIngestError(ValueError):
    """Raised when a kb.jsonl record cannot be ingested."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


@dataclass(frozen=True, order=True)
class EntityTail:
    id: str

    def __post_init__(self):
        if not self.id:
            raise ValueError("entity id must be non-empty")


@dataclass(frozen=True, order=True)
class LiteralTail:
    datatype: str
    text: str

    def __post_init__(self):
        if not self.text:
            raise ValueError("literal text must be non-empty")


TripleTail = Union[EntityTail, LiteralTail]


@dataclass(frozen=True)
class Triple:
    head: str
    property: str
    tail: TripleTail

    def __post_init__(self):
        if not self.head or not self.property:
            raise ValueError("head and property ids must be non-empty")

    @property
    def kind(self) -> str:
        return "relational" if isinstance(self.tail, EntityTail) else "attribute"

    @property
    def key(self) -> str:
        """Canonical string key; also the deterministic tie-break order."""
        if isinstance(self.tail, EntityTail):
            tail = f"E:{self.tail.id}"
        else:
            tail = f"V:{self.tail.datatype}:{self.tail.text}"
        return f"{self.head}|{self.property}|{tail}"

    def ids(self) -> tuple[str, ...]:
        if isinstance(self.tail, EntityTail):
            return (self.head, self.property, self.tail.id)
        return (self.head, self.property)


@dataclass(frozen=True)
class SubGraph:
    triples: frozenset[Triple]
    labels: Mapping[str, str] = field(default_factory=dict)

    def __post_init__(self):
        for tr in self.triples:
            for i in tr.ids():
                if i not in self.labels:
                    raise ValueError(f"no label for id {i!r}")

    def __len__(self) -> int:
        return len(self.triples)

    def __iter__(self) -> Iterator[Triple]:
        return iter(self.sorted())

    def sorted(self) -> list[Triple]:
        return sorted(self.triples, key=lambda t: t.key)

    def union(self, other: "SubGraph") -> "SubGraph":
        return SubGraph(self.triples | other.triples, {**self.labels, **other.labels})


# -- kb.jsonl records --------------------------------------------------------


def triple_from_record(rec: Mapping) -> tuple[Triple, dict[str, str]]:
    """Parse one kb.jsonl record into a triple and the labels it declares."""
    try:
        head, prop, tail = rec["head"], rec["property"], rec["tail"]
        labels = {head: rec["head_label"], prop: rec["property_label"]}
        kind = tail["kind"]
        if kind == "entity":
            tail_obj: TripleTail = EntityTail(tail["id"])
            labels[tail["id"]] = tail["label"]
        elif kind == "value":
            tail_obj = LiteralTail(tail["datatype"], tail["text"])
        else:
            raise ValueError(f"unknown tail kind {kind!r}")
        for k, v in labels.items():
            if not isinstance(k, str) or not isinstance(v, str):
                raise ValueError("ids and labels must be strings")
        return Triple(head, prop, tail_obj), labels
    except (KeyError, TypeError) as e:
        raise ValueError(f"malformed record: missing or invalid field {e}") from None


def triple_to_record(tr: Triple, labels: Mapping[str, str]) -> dict:
    if isinstance(tr.tail, EntityTail):
        tail = {"kind": "entity", "id": tr.tail.id, "label": labels[tr.tail.id]}
    else:
        tail = {"kind": "value", "datatype": tr.tail.datatype, "text": tr.tail.text}
    return {
        "head": tr.head,
        "head_label": labels[tr.head],
        "property": tr.property,
        "property_label": labels[tr.property],
        "tail": tail,
    }


class SubGraphStore:
    """Immutable head-indexed triple store built by :func:`ingest_kb`."""

    def __init__(self, triples: Iterable[Triple], labels: Mapping[str, str]):
        by_head: dict[str, set[Triple]] = defaultdict(set)
        for tr in triples:
            by_head[tr.head].add(tr)
        self._by_head = {h: frozenset(ts) for h, ts in by_head.items()}
        self.labels: Mapping[str, str] = dict(labels)

    def __len__(self) -> int:
        return sum(len(ts) for ts in self._by_head.values())

    def triples(self) -> list[Triple]:
        return sorted((t for ts in self._by_head.values() for t in ts), key=lambda t: t.key)

    def heads(self) -> set[str]:
        return set(self._by_head)

    def headed_by(self, entity: str) -> frozenset[Triple]:
        return self._by_head.get(entity, frozenset())


def ingest_kb(lines: Iterable[str]) -> SubGraphStore:
    triples: set[Triple] = set()
    labels: dict[str, str] = {}
    for lineno, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
            if not isinstance(rec, dict):
                raise ValueError("record is not a JSON object")
            tr, rec_labels = triple_from_record(rec)
        except ValueError as e:
            raise KBIngestError(str(e), lineno) from None
        for i, lab in rec_labels.items():
            prev = labels.setdefault(i, lab)
            if prev != lab:
                raise KBIngestError(f"conflicting labels for {i!r}: {prev!r} vs {lab!r}", lineno)
        triples.add(tr)
    return SubGraphStore(triples, labels)


def load_kb(path) -> SubGraphStore:
    with open(path, encoding="utf-8") as f:
        return ingest_kb(f)


def dump_kb(triples: Iterable[Triple], labels: Mapping[str, str], out: IO[str]) -> int:
    n = 0
    for tr in sorted(triples, key=lambda t: t.key):
        out.write(json.dumps(triple_to_record(tr, labels), ensure_ascii=False) + "\n")
        n += 1
    return n


def _labels_for(triples: Iterable[Triple], labels: Mapping[str, str]) -> dict[str, str]:
    return {i: labels[i] for tr in triples for i in tr.ids()}


def one_hop_subgraph(store: SubGraphStore, entities: Iterable[str]) -> SubGraph:
    """All stored triples headed by one of ``entities``."""
    entities = set(entities)
    if not entities:
        raise ValueError("entities must be non-empty")
    found: set[Triple] = set()
    missing = 0
    for e in entities:
        ts = store.headed_by(e)
        if not ts:
            missing += 1
        found |= ts
    if missing:
        logger.warning("%d of %d entities have no triples", missing, len(entities))
    return SubGraph(frozenset(found), _labels_for(found, store.labels))


def filter_attributes(g: SubGraph, excluded_datatypes: Iterable[str] = DEFAULT_EXCLUDED_DATATYPES) -> SubGraph:
    excluded = set(excluded_datatypes)
    kept = frozenset(
        t for t in g.triples
        if not (isinstance(t.tail, LiteralTail) and t.tail.datatype in excluded)
    )
    return SubGraph(kept, _labels_for(kept, g.labels))
