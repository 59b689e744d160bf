"""Generated corpora for desk-scale retrieval experiments.

Two generators:

* :func:`make_lossy_corpus` -- large per-table sub-graphs where question
  words overlap the gold triples; paired with a small hashing dimension it
  gives a deliberately weak first stage.
* :func:`make_separable_corpus` -- questions share "noise" words with hard
  negatives and a single "signal" word with the positive, so raw hashing
  ranks hard negatives first while a learned reweighting separates them.
"""

from __future__ import annotations

import hashlib
import random
from dataclasses import dataclass, field

from .kb import LiteralTail, SubGraph, Triple
from .retrieve import _token_hash
from .serialize import serialize_triple
from .table import Cell, GoldEvidence, Question, Table


@dataclass
class Corpus:
    tables: dict[str, Table]
    subgraphs: dict[str, SubGraph]
    questions: list[Question]
    labels: dict[str, str] = field(default_factory=dict)


def _table(tid: str, rng: random.Random, n_rows: int, fill: list[str]) -> tuple[Table, list[str]]:
    ents, rows = [], []
    for r in range(n_rows):
        eid = f"{tid}_e{r}"
        ents.append(eid)
        rows.append((Cell(f"{eid} {rng.choice(fill)}", (eid,)), Cell(rng.choice(fill), ())))
    return Table(tid, ("name", "note"), tuple(rows)), ents


def make_lossy_corpus(
    n_questions: int = 200,
    n_triples: int = 500,
    n_gold: int = 2,
    seed: int = 0,
    vocab_size: int = 2000,
) -> Corpus:
    rng = random.Random(seed)
    vocab = [f"w{i}" for i in range(vocab_size)]
    fill = [f"f{i}" for i in range(50)]
    tables, subgraphs, questions, all_labels = {}, {}, [], {}
    for qi in range(n_questions):
        tid = f"t{qi}"
        table, ents = _table(tid, rng, 4, fill)
        labels = {e: e for e in ents}
        triples = []
        for j in range(n_triples):
            pid = f"{tid}_p{j}"
            labels[pid] = " ".join(rng.sample(vocab, 2))
            tail = LiteralTail("string", " ".join(rng.sample(vocab, 3)))
            triples.append(Triple(rng.choice(ents), pid, tail))
        gold = rng.sample(triples, n_gold)
        words = []
        for g in gold:
            words += rng.sample(labels[g.property].split(), 1) + rng.sample(g.tail.text.split(), 2)
        words += rng.sample(vocab, 2)
        rng.shuffle(words)
        evidence = tuple(
            GoldEvidence(ents.index(g.head), 0, g) for g in gold
        )
        tables[tid] = table
        subgraphs[tid] = SubGraph(frozenset(triples), labels)
        all_labels.update(labels)
        questions.append(Question(f"q{qi}", tid, " ".join(words), "", "in_kb", evidence, labels))
    return Corpus(tables, subgraphs, questions, all_labels)


def collision_free_vocab(groups: dict[str, int], dim: int) -> dict[str, list[str]]:
    """Word lists, one per prefix, whose hashing buckets are pairwise distinct at ``dim``."""
    if sum(groups.values()) > dim:
        raise ValueError("more words than hash buckets")
    used: set[int] = set()
    out: dict[str, list[str]] = {}
    for prefix, n in groups.items():
        words, i = [], 0
        while len(words) < n:
            w = f"{prefix}{i}"
            i += 1
            b = _token_hash(w) % dim
            if b not in used:
                used.add(b)
                words.append(w)
        out[prefix] = words
    return out


def make_separable_corpus(
    n_questions: int = 250,
    n_triples: int = 120,
    n_hard: int = 8,
    seed: int = 0,
    n_signal: int = 40,
    n_noise: int = 40,
    n_fill: int = 60,
    dim: int = 256,
    easy_signal_rate: float = 0.0,
    n_question_noise: int = 2,
) -> Corpus:
    """Questions of one signal word and ``n_question_noise`` noise words.

    The positive triple carries the signal word. ``n_hard`` negatives carry
    at least two of the noise words (one when the question has only two) and
    the rest are filler. Words are chosen so no two share a hashing bucket
    at ``dim``.
    """
    rng = random.Random(seed)
    vocab = collision_free_vocab({"sig": n_signal, "noise": n_noise, "fill": n_fill}, dim)
    signal, noise, fill = vocab["sig"], vocab["noise"], vocab["fill"]
    tables, subgraphs, questions, all_labels = {}, {}, [], {}
    for qi in range(n_questions):
        tid = f"s{qi}"
        ents = [f"{tid}_e{r}" for r in range(3)]
        labels = {e: rng.choice(fill) for e in ents}
        table = Table(tid, ("name",), tuple((Cell(labels[e], (e,)),) for e in ents))
        sx = rng.choice(signal)
        qnoise = rng.sample(noise, n_question_noise)
        lo = 1 if n_question_noise <= 2 else 2
        triples = []

        def add(prop_words: list[str]) -> Triple:
            pid = f"{tid}_p{len(triples)}"
            labels[pid] = " ".join(prop_words)
            tr = Triple(rng.choice(ents), pid, LiteralTail("string", rng.choice(fill)))
            triples.append(tr)
            return tr

        pos = add([sx])
        for _ in range(n_hard):
            add(rng.sample(qnoise, rng.randint(lo, n_question_noise)))
        others = [s for s in signal if s != sx]
        while len(triples) < n_triples:
            words = [rng.choice(fill)]
            if rng.random() < easy_signal_rate:
                words.append(rng.choice(others))
            add(words)
        qwords = qnoise + [sx]
        rng.shuffle(qwords)
        tables[tid] = table
        subgraphs[tid] = SubGraph(frozenset(triples), labels)
        all_labels.update(labels)
        ev = (GoldEvidence(ents.index(pos.head), 0, pos),)
        questions.append(Question(f"q{qi}", tid, " ".join(qwords), "", "in_kb", ev, labels))
    return Corpus(tables, subgraphs, questions, all_labels)


def _unit(text: str) -> float:
    h = hashlib.blake2b(text.encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(h, "little") / 2**64


class OracleLeaningScorer:
    """Pair scorer that knows the gold triples, with deterministic noise.

    Gold pairs score in [0.6, 1.0), everything else in [0, 0.6).
    """

    concurrent_safe = True

    def __init__(self, corpus: Corpus):
        self.gold = {
            (q.question, serialize_triple(t, corpus.labels)) for q in corpus.questions for t in q.gold_triples()
        }

    def score(self, question: str, table_text: str, triple_text: str) -> float:
        u = _unit(question + "\x00" + triple_text)
        if (question, triple_text) in self.gold:
            return 0.6 + 0.4 * u
        return 0.6 * u
