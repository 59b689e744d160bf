"""Retrieval training data, question filtering, annotation validation and splits."""

from __future__ import annotations

import hashlib
import json
import logging
import random
from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

import numpy as np

from .evaluation import normalize_answer
from .kb import EntityTail, SubGraph, Triple
from .retrieve import EmbeddingProvider, dot_scores, embed_many
from .serialize import serialize_triple
from .table import ANSWER_SOURCES, Question, Table
from .text import tokenize

logger = logging.getLogger(__name__)

DEFAULT_NEGATIVES = {"knn": 25, "random": 50}
ISSUE_RULES = ("invalid_answer_source", "missing_gold_evidence", "invalid_evidence")


@dataclass(frozen=True)
class RetrievalInstance:
    question_id: str
    question: str
    table_id: str
    positives: tuple[Triple, ...]
    negatives: tuple[Triple, ...]

    def __post_init__(self):
        if not self.positives:
            raise ValueError("instance needs at least one positive")
        if set(self.positives) & set(self.negatives):
            raise ValueError("positives and negatives overlap")

    def to_record(self, strategy: str, n: int, seed: int | None) -> dict:
        return {
            "question_id": self.question_id,
            "question": self.question,
            "table_id": self.table_id,
            "positives": [t.key for t in self.positives],
            "negatives": [t.key for t in self.negatives],
            "strategy": strategy,
            "n": n,
            "seed": seed,
        }


@dataclass(frozen=True)
class ValidationIssue:
    question_id: str
    rule: str
    detail: str

    def __post_init__(self):
        if self.rule not in ISSUE_RULES:
            raise ValueError(f"unknown rule {self.rule!r}")


# -- negative sampling -------------------------------------------------------


def _non_positives(g: SubGraph, positives: Iterable[Triple]) -> list[Triple]:
    pos = set(positives)
    return [t for t in g.sorted() if t not in pos]


def knn_tie_key(t: Triple) -> bytes:
    """Tie order for kNN sampling: digest of the triple key.

    Plain key order would fill tied slots with triples sharing one head
    entity; a digest spreads them across the sub-graph deterministically.
    """
    return hashlib.sha256(t.key.encode("utf-8")).digest()


def knn_negative_sample(
    q: str,
    g: SubGraph,
    positives: Iterable[Triple],
    n: int,
    provider: EmbeddingProvider,
    labels: Mapping[str, str] | None = None,
) -> list[Triple]:
    """The ``n`` non-positive triples whose serialized text embeds closest to ``q``.

    Ordered by dot-product similarity descending, ties by :func:`knn_tie_key`.
    """
    if not len(g):
        raise ValueError("empty sub-graph")
    labels = g.labels if labels is None else labels
    pool = sorted(_non_positives(g, positives), key=knn_tie_key)
    if n <= 0 or not pool:
        return []
    qv = np.asarray(provider.embed_query(q), dtype=np.float64)
    vecs = embed_many(provider, [serialize_triple(t, labels) for t in pool], "context")
    sims = dot_scores(vecs, qv)
    # stable sort keeps the digest tie order
    order = np.argsort(-sims, kind="stable")[:n]
    return [pool[i] for i in order]


def random_negative_sample(g: SubGraph, positives: Iterable[Triple], n: int, seed: int) -> list[Triple]:
    pool = _non_positives(g, positives)
    return random.Random(seed).sample(pool, min(max(n, 0), len(pool)))


def _instance_seed(seed: int, question_id: str) -> int:
    digest = hashlib.sha256(f"{seed}:{question_id}".encode()).digest()
    return int.from_bytes(digest[:8], "little")


def build_retrieval_dataset(
    questions: Sequence[Question],
    tables: Mapping[str, Table],
    subgraphs: Mapping[str, SubGraph],
    strategy: str = "knn",
    n: int | None = None,
    provider: EmbeddingProvider | None = None,
    seed: int | None = None,
) -> tuple[list[RetrievalInstance], list[ValidationIssue]]:
    """One instance per usable question, in question-id order."""
    if strategy not in DEFAULT_NEGATIVES:
        raise ValueError(f"unknown strategy {strategy!r}")
    if strategy == "knn" and provider is None:
        raise ValueError("knn strategy needs an embedding provider")
    n = DEFAULT_NEGATIVES[strategy] if n is None else n
    seed = 0 if seed is None else seed
    instances, issues = [], []
    for q in sorted(questions, key=lambda q: q.id):
        g = subgraphs.get(q.table_id)
        positives = q.gold_triples()
        if not positives:
            issues.append(ValidationIssue(q.id, "missing_gold_evidence", "no gold evidence"))
            continue
        missing = [t.key for t in positives if g is None or t not in g.triples]
        if missing:
            issues.append(ValidationIssue(q.id, "invalid_evidence", f"not in sub-graph: {missing}"))
            continue
        if strategy == "knn":
            negs = knn_negative_sample(q.question, g, positives, n, provider)
        else:
            negs = random_negative_sample(g, positives, n, _instance_seed(seed, q.id))
        instances.append(RetrievalInstance(q.id, q.question, q.table_id, tuple(positives), tuple(negs)))
    return instances, issues


def dataset_digest(instances: Iterable[RetrievalInstance]) -> str:
    h = hashlib.sha256()
    for inst in instances:
        rec = [inst.question_id, [t.key for t in inst.positives], [t.key for t in inst.negatives]]
        h.update(json.dumps(rec).encode())
    return h.hexdigest()


# -- question filtering ------------------------------------------------------


def _lcs_length(a: Sequence[str], b: Sequence[str]) -> int:
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b, start=1):
            cur.append(prev[j - 1] + 1 if x == y else max(prev[j], cur[j - 1]))
        prev = cur
    return prev[-1]


def lcs_similarity(question: str, passage: str) -> float:
    """Word-level LCS length between question and passage over question length."""
    q = tokenize(question)
    if not q:
        raise ValueError("empty question")
    return _lcs_length(q, tokenize(passage)) / len(q)


def filter_questions(questions: Sequence, passages: Mapping[str, str], threshold: float = 0.7):
    """Split into (kept, dropped); dropped questions copy their passage too closely.

    ``questions`` are objects with ``id`` and ``question`` attributes and
    ``passages`` maps question id to the paired passage.
    """
    if not 0.0 <= threshold <= 1.0:
        raise ValueError("threshold must be in [0, 1]")
    kept, dropped = [], []
    for q in questions:
        passage = passages.get(q.id)
        if passage is None:
            logger.warning("no passage for question %s; keeping it", q.id)
            kept.append(q)
        elif lcs_similarity(q.question, passage) >= threshold:
            dropped.append(q)
        else:
            kept.append(q)
    return kept, dropped


def answer_in_kb_not_table(answer: str, t: Table, g: SubGraph, min_containment: float = 1.0) -> bool:
    """Fuzzy KB-only check for candidate questions.

    True when some KB label or literal contains at least ``min_containment``
    of the answer's normalized tokens while no table cell matches the
    normalized answer exactly. The default of 1.0 requires all answer tokens.
    """
    norm = normalize_answer(answer)
    if any(normalize_answer(c.text) == norm for c in t.cells()):
        return False
    tokens = set(norm.split())
    if not tokens:
        return False
    for text in _kb_texts(g):
        have = set(normalize_answer(text).split())
        if len(tokens & have) / len(tokens) >= min_containment:
            return True
    return False


def _kb_texts(g: SubGraph) -> Iterable[str]:
    for tr in g.triples:
        yield g.labels[tr.head]
        yield g.labels[tr.tail.id] if isinstance(tr.tail, EntityTail) else tr.tail.text


# -- annotation validation ---------------------------------------------------


def _traces_to(q: Question, t: Table, g: SubGraph | None) -> bool:
    norm = normalize_answer(q.answer)
    if q.answer_source == "calculated":
        return True
    if q.answer_source == "in_table":
        return any(normalize_answer(c.text) == norm for c in t.cells())
    return g is not None and any(normalize_answer(x) == norm for x in _kb_texts(g))


def validate_annotations(
    questions: Sequence[Question],
    tables: Mapping[str, Table],
    subgraphs: Mapping[str, SubGraph],
) -> list[ValidationIssue]:
    issues: list[ValidationIssue] = []
    for q in sorted(questions, key=lambda q: q.id):
        t = tables.get(q.table_id)
        g = subgraphs.get(q.table_id)
        if t is None:
            issues.append(ValidationIssue(q.id, "invalid_evidence", f"unknown table {q.table_id!r}"))
            continue
        if q.answer_source not in ANSWER_SOURCES:
            issues.append(ValidationIssue(q.id, "invalid_answer_source", f"unknown source {q.answer_source!r}"))
        elif not _traces_to(q, t, g):
            issues.append(
                ValidationIssue(q.id, "invalid_answer_source", f"answer {q.answer!r} not found as {q.answer_source}")
            )
        if not q.gold_evidence:
            issues.append(ValidationIssue(q.id, "missing_gold_evidence", "no gold evidence"))
        for ev in q.gold_evidence:
            if not (0 <= ev.row < t.n_rows and 0 <= ev.col < t.n_cols):
                issues.append(
                    ValidationIssue(q.id, "invalid_evidence", f"cell ({ev.row}, {ev.col}) out of range")
                )
                continue
            if g is None or ev.triple not in g.triples:
                issues.append(
                    ValidationIssue(q.id, "invalid_evidence", f"triple {ev.triple.key} not in sub-graph")
                )
                continue
            if ev.triple.head not in t.rows[ev.row][ev.col].links:
                logger.warning(
                    "question %s: cell (%d, %d) does not link head of %s", q.id, ev.row, ev.col, ev.triple.key
                )
    return issues


# -- splitting ---------------------------------------------------------------


def split_dataset(items: Sequence, ratios=(0.8, 0.1, 0.1), seed: int = 0):
    """Shuffle and split into (train, dev, test); rounding remainder goes to train."""
    if len(ratios) != 3 or abs(sum(ratios) - 1.0) > 1e-9 or min(ratios) < 0:
        raise ValueError("ratios must be three non-negative numbers summing to 1")
    shuffled = list(items)
    random.Random(seed).shuffle(shuffled)
    n = len(shuffled)
    n_dev = int(n * ratios[1] + 1e-9)
    n_test = int(n * ratios[2] + 1e-9)
    n_train = n - n_dev - n_test
    return (
        shuffled[:n_train],
        shuffled[n_train:n_train + n_dev],
        shuffled[n_train + n_dev:],
    )
