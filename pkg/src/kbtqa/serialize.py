"""Flatten triples and tables into the text consumed by scorers and reasoners.

Formats::

    [HEAD] Kanye West [REL] record label [TAIL] GOOD Music
    col : Album | Artist row 1 : The College Dropout | Kanye West row 2 : ...

No escaping and no truncation happen here.
"""

from __future__ import annotations

from typing import Mapping, Sequence

from .kb import EntityTail, Triple
from .table import Table


class LabelError(KeyError):
    def __init__(self, id_: str):
        self.id = id_
        super().__init__(f"no label for id {id_!r}")

    def __str__(self):
        return self.args[0]


def _label(labels: Mapping[str, str], id_: str) -> str:
    try:
        return labels[id_]
    except KeyError:
        raise LabelError(id_) from None


def serialize_triple(tr: Triple, labels: Mapping[str, str]) -> str:
    head = _label(labels, tr.head)
    rel = _label(labels, tr.property)
    tail = _label(labels, tr.tail.id) if isinstance(tr.tail, EntityTail) else tr.tail.text
    return f"[HEAD] {head} [REL] {rel} [TAIL] {tail}"


def serialize_table(t: Table) -> str:
    parts = ["col : " + " | ".join(t.headers)]
    for i, row in enumerate(t.rows, start=1):
        parts.append(f"row {i} : " + " | ".join(c.text for c in row))
    return " ".join(parts)


def build_retrieval_context(sub: Table, tr: Triple, labels: Mapping[str, str]) -> str:
    """Context-tower input: sub-table followed by the triple."""
    return serialize_table(sub) + " " + serialize_triple(tr, labels)


def build_reasoner_input(q: str, t: Table, triples: Sequence[Triple], labels: Mapping[str, str]) -> str:
    """Reasoner input for a question over its table, with triples kept in the given (score) order."""
    parts = [q, serialize_table(t)]
    parts.extend(serialize_triple(tr, labels) for tr in triples)
    return " ".join(parts)
