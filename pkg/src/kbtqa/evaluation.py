"""Retrieval Recall@k, answer EM/F1 and answer-source classification."""

from __future__ import annotations

import re
import string
from collections import Counter
from dataclasses import dataclass, field
from typing import Hashable, Iterable, Mapping, Sequence

from .kb import EntityTail, SubGraph
from .table import Table

DEFAULT_KS = (1, 5, 20, 100)

_ARTICLES = re.compile(r"\b(a|an|the)\b")
_PUNCT = set(string.punctuation)


def recall_at_k(
    retrieved: Sequence[Sequence[Hashable]],
    gold: Sequence[Iterable[Hashable]],
    k: int,
) -> float:
    """Mean over instances of the fraction of (distinct) gold items in the top ``k``."""
    if len(retrieved) != len(gold):
        raise ValueError("retrieved and gold are not aligned")
    if not gold:
        raise ValueError("no instances")
    total = 0.0
    for ranked, g in zip(retrieved, gold):
        g = set(g)
        if not g:
            raise ValueError("instance with empty gold evidence")
        total += len(g & set(ranked[:k])) / len(g)
    return total / len(gold)


@dataclass
class RetrievalEvalResult:
    per_k: dict[int, float]
    instance_count: int

    def to_json(self) -> dict:
        return {"recall": {str(k): v for k, v in sorted(self.per_k.items())}, "n": self.instance_count}


def evaluate_retrieval(retrieved, gold, ks: Iterable[int] = DEFAULT_KS) -> RetrievalEvalResult:
    return RetrievalEvalResult({k: recall_at_k(retrieved, gold, k) for k in ks}, len(gold))


def normalize_answer(s: str) -> str:
    s = s.lower()
    s = "".join(ch for ch in s if ch not in _PUNCT)
    s = _ARTICLES.sub(" ", s)
    return " ".join(s.split())


def exact_match(pred: str, gold: str) -> int:
    return int(normalize_answer(pred) == normalize_answer(gold))


def f1(pred: str, gold: str) -> float:
    p, g = normalize_answer(pred).split(), normalize_answer(gold).split()
    if not p and not g:
        return 1.0
    if not p or not g:
        return 0.0
    common = sum((Counter(p) & Counter(g)).values())
    if common == 0:
        return 0.0
    precision, recall = common / len(p), common / len(g)
    return 2 * precision * recall / (precision + recall)


def classify_answer_source(answer: str, t: Table, g: SubGraph, labels: Mapping[str, str] | None = None) -> str:
    """Trace an answer back to a cell (in_table), a KB label/literal (in_kb), else calculated."""
    labels = g.labels if labels is None else labels
    norm = normalize_answer(answer)
    if any(normalize_answer(c.text) == norm for c in t.cells()):
        return "in_table"
    for tr in g.triples:
        candidates = [labels.get(tr.head, "")]
        if isinstance(tr.tail, EntityTail):
            candidates.append(labels.get(tr.tail.id, ""))
        else:
            candidates.append(tr.tail.text)
        if any(normalize_answer(c) == norm for c in candidates):
            return "in_kb"
    return "calculated"


@dataclass
class QAEvalResult:
    em: float
    f1: float
    n: int
    per_source: dict[str, dict[str, float]] = field(default_factory=dict)

    def to_json(self) -> dict:
        return {"em": self.em, "f1": self.f1, "per_source": self.per_source, "n": self.n}


def evaluate_qa(
    predictions: Mapping[str, str],
    references: Mapping[str, str],
    sources: Mapping[str, str] | None = None,
) -> QAEvalResult:
    """EM and F1 as percentages over ``references``; missing predictions count as ''."""
    if not references:
        raise ValueError("no references")
    ems, f1s = {}, {}
    for qid, gold in references.items():
        pred = predictions.get(qid, "")
        ems[qid] = exact_match(pred, gold)
        f1s[qid] = f1(pred, gold)
    n = len(references)
    result = QAEvalResult(100.0 * sum(ems.values()) / n, 100.0 * sum(f1s.values()) / n, n)
    if sources:
        groups: dict[str, list[str]] = {}
        for qid in references:
            groups.setdefault(sources.get(qid, "unknown"), []).append(qid)
        for src, ids in sorted(groups.items()):
            result.per_source[src] = {
                "em": 100.0 * sum(ems[i] for i in ids) / len(ids),
                "f1": 100.0 * sum(f1s[i] for i in ids) / len(ids),
                "n": len(ids),
            }
    return result
