"""Entity-linked tables, triple-related sub-tables and gold evidence."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Iterable, Mapping

from .kb import Triple, triple_from_record, triple_to_record

ANSWER_SOURCES = ("in_kb", "in_table", "calculated")


@dataclass(frozen=True)
class Cell:
    text: str
    links: tuple[str, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "links", tuple(self.links))
        if len(set(self.links)) != len(self.links):
            raise ValueError(f"duplicate links in cell {self.text!r}")


@dataclass(frozen=True)
class Table:
    id: str
    headers: tuple[str, ...]
    rows: tuple[tuple[Cell, ...], ...]

    def __post_init__(self):
        object.__setattr__(self, "headers", tuple(self.headers))
        object.__setattr__(self, "rows", tuple(tuple(r) for r in self.rows))
        width = len(self.headers)
        for i, row in enumerate(self.rows):
            if len(row) != width:
                raise ValueError(f"table {self.id}: row {i} has {len(row)} cells, expected {width}")

    @property
    def n_rows(self) -> int:
        return len(self.rows)

    @property
    def n_cols(self) -> int:
        return len(self.headers)

    def cells(self) -> Iterable[Cell]:
        for row in self.rows:
            yield from row

    @classmethod
    def from_record(cls, rec: Mapping) -> "Table":
        rows = [[Cell(c["text"], tuple(c.get("links", ()))) for c in row] for row in rec["rows"]]
        table = cls(rec["id"], tuple(rec["headers"]), tuple(tuple(r) for r in rows))
        if table.n_rows < 1:
            raise ValueError(f"table {table.id} has no rows")
        return table

    def to_record(self) -> dict:
        return {
            "id": self.id,
            "headers": list(self.headers),
            "rows": [[{"text": c.text, "links": list(c.links)} for c in row] for row in self.rows],
        }


@dataclass(frozen=True)
class GoldEvidence:
    row: int
    col: int
    triple: Triple


@dataclass(frozen=True)
class Question:
    id: str
    table_id: str
    question: str
    answer: str
    answer_source: str
    gold_evidence: tuple[GoldEvidence, ...] = ()
    # labels declared by the evidence records, needed to serialize gold triples
    labels: Mapping[str, str] = field(default_factory=dict, compare=False, hash=False, repr=False)

    def gold_triples(self) -> list[Triple]:
        """Distinct evidence triples in first-seen order."""
        seen: dict[Triple, None] = {}
        for ev in self.gold_evidence:
            seen.setdefault(ev.triple)
        return list(seen)

    @classmethod
    def from_record(cls, rec: Mapping) -> "Question":
        evidence = []
        labels: dict[str, str] = {}
        for ev in rec.get("gold_evidence", []):
            tr, lab = triple_from_record(ev["triple"])
            labels.update(lab)
            evidence.append(GoldEvidence(int(ev["row"]), int(ev["col"]), tr))
        return cls(
            id=rec["id"],
            table_id=rec["table_id"],
            question=rec["question"],
            answer=rec["answer"],
            answer_source=rec["answer_source"],
            gold_evidence=tuple(evidence),
            labels=labels,
        )

    def to_record(self, labels: Mapping[str, str] | None = None) -> dict:
        labels = {**self.labels, **(labels or {})}
        return {
            "id": self.id,
            "table_id": self.table_id,
            "question": self.question,
            "answer": self.answer,
            "answer_source": self.answer_source,
            "gold_evidence": [
                {"row": ev.row, "col": ev.col, "triple": triple_to_record(ev.triple, labels)}
                for ev in self.gold_evidence
            ],
        }


def _read_jsonl(path):
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            if line.strip():
                try:
                    yield json.loads(line)
                except json.JSONDecodeError as e:
                    raise ValueError(f"{path}: line {lineno}: {e.msg}") from None


def load_tables(path) -> dict[str, Table]:
    tables = {}
    for rec in _read_jsonl(path):
        t = Table.from_record(rec)
        tables[t.id] = t
    return tables


def load_questions(path) -> list[Question]:
    return [Question.from_record(rec) for rec in _read_jsonl(path)]


def linked_entities(t: Table) -> set[str]:
    return {e for cell in t.cells() for e in cell.links}


def triple_related_subtable(t: Table, triple: Triple, fallback: str = "empty") -> Table:
    """Rows of ``t`` with a cell linked to the triple's head, in original order.

    When nothing matches, ``fallback="empty"`` yields the headers with zero
    data rows and ``fallback="full"`` yields ``t`` itself.
    """
    head = triple.head
    rows = tuple(row for row in t.rows if any(head in c.links for c in row))
    if not rows and fallback == "full":
        return t
    return Table(t.id, t.headers, rows)
