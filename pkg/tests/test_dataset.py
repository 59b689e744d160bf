import hashlib
import json
import math
from collections import Counter
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from kbtqa.dataset import (
    _lcs_length,
    answer_in_kb_not_table,
    build_retrieval_dataset,
    dataset_digest,
    filter_questions,
    knn_negative_sample,
    lcs_similarity,
    random_negative_sample,
    split_dataset,
    validate_annotations,
)
from kbtqa.kb import SubGraph
from kbtqa.serialize import serialize_triple
from kbtqa.table import load_questions

HYGIENE = Path(__file__).parent / "fixtures" / "hygiene"


def brute_knn(q, pool, n, provider, labels):
    qv = provider.embed_query(q)
    scored = []
    for t in pool:
        v = provider.embed_context(serialize_triple(t, labels))
        sim = math.fsum(a * b for a, b in zip(v.tolist(), qv.tolist()))
        scored.append((-sim, hashlib.sha256(t.key.encode()).digest(), t))
    return [t for _, _, t in sorted(scored)[:n]]


def test_knn_matches_brute_force(subgraph, full_subgraph, embedder, questions):
    for g in (subgraph, full_subgraph):
        for q in questions:
            pos = set(q.gold_triples())
            pool = [t for t in g.sorted() if t not in pos]
            for n in (0, 1, 3, len(pool), len(pool) + 5):
                got = knn_negative_sample(q.question, g, pos, n, embedder)
                assert got == brute_knn(q.question, pool, n, embedder, g.labels)


def test_random_negatives(subgraph, questions):
    pos = set(questions[0].gold_triples())
    a = random_negative_sample(subgraph, pos, 3, seed=11)
    assert a == random_negative_sample(subgraph, pos, 3, seed=11)
    assert not set(a) & pos
    everything = random_negative_sample(subgraph, pos, 100, seed=0)
    assert set(everything) == subgraph.triples - pos


def test_random_negatives_uniform(subgraph):
    pool = subgraph.sorted()
    trials, n = 10_000, 2
    counts = Counter()
    for s in range(trials):
        counts.update(random_negative_sample(subgraph, [], n, seed=s))
    p = n / len(pool)
    sigma = (trials * p * (1 - p)) ** 0.5
    assert all(abs(counts[t] - trials * p) <= 3 * sigma for t in pool)


def test_build_dataset_knn(questions, table, subgraph, embedder):
    insts, issues = build_retrieval_dataset(questions, {"albums": table}, {"albums": subgraph}, "knn", 25, embedder)
    assert len(insts) + len(issues) == len(questions)
    for inst in insts:
        assert not set(inst.positives) & set(inst.negatives)
        assert set(inst.negatives) <= subgraph.triples - set(inst.positives)
        # fewer non-positives than requested: all are used
        assert len(inst.negatives) == len(subgraph) - len(inst.positives)
    assert [i.question_id for i in insts] == sorted(i.question_id for i in insts)


def test_build_dataset_flags_unusable(questions, table, subgraph, embedder):
    # drop the triple that q06's evidence points at
    pruned = SubGraph(frozenset(t for t in subgraph.triples if t.property != "P1082"), subgraph.labels)
    insts, issues = build_retrieval_dataset(questions, {"albums": table}, {"albums": pruned}, "random", 5, seed=1)
    assert [(i.question_id, i.rule) for i in issues] == [("q06", "invalid_evidence")]
    assert len(insts) == len(questions) - 1


def test_build_dataset_random_digest_stable(questions, table, subgraph):
    def run(seed):
        insts, _ = build_retrieval_dataset(questions, {"albums": table}, {"albums": subgraph}, "random", 3, seed=seed)
        return dataset_digest(insts)

    assert run(5) == run(5)
    assert run(5) != run(6)


def test_build_dataset_requires_provider_for_knn(questions, table, subgraph):
    with pytest.raises(ValueError):
        build_retrieval_dataset(questions, {"albums": table}, {"albums": subgraph}, "knn", 3)
    with pytest.raises(ValueError):
        build_retrieval_dataset(questions, {"albums": table}, {"albums": subgraph}, "hard", 3)


def test_instance_record(questions, table, subgraph):
    insts, _ = build_retrieval_dataset(questions[:1], {"albums": table}, {"albums": subgraph}, "random", 2, seed=3)
    rec = insts[0].to_record("random", 2, 3)
    assert rec["strategy"] == "random" and rec["seed"] == 3 and len(rec["negatives"]) == 2
    json.dumps(rec)


def _dp_lcs(a, b):
    # textbook full-table DP, independent of the rolling-row implementation
    table = [[0] * (len(b) + 1) for _ in range(len(a) + 1)]
    for i in range(1, len(a) + 1):
        for j in range(1, len(b) + 1):
            if a[i - 1] == b[j - 1]:
                table[i][j] = table[i - 1][j - 1] + 1
            else:
                table[i][j] = max(table[i - 1][j], table[i][j - 1])
    return table[-1][-1]


def test_lcs_examples():
    assert lcs_similarity("when was it released", "when was it released") == 1.0
    assert lcs_similarity("alpha beta", "gamma delta") == 0.0
    q = "one two three four five six seven eight nine ten"
    assert lcs_similarity(q, "one x two three y four five six seven") == 0.7
    with pytest.raises(ValueError):
        lcs_similarity("", "x")


def test_lcs_fixture_hand_counts():
    for line in (HYGIENE / "passages.jsonl").read_text().splitlines():
        r = json.loads(line)
        assert lcs_similarity(r["question"], r["passage"]) == r["lcs_words"] / r["question_words"]


words = st.lists(st.sampled_from("a b c d e".split()), max_size=12)


@given(words, words)
def test_lcs_matches_dp(a, b):
    assert _lcs_length(a, b) == _dp_lcs(a, b)


@given(words.filter(bool), words, st.sampled_from("a b c d e".split()))
def test_lcs_monotone_on_append(q, p, w):
    qs, ps = " ".join(q), " ".join(p)
    assert lcs_similarity(qs, ps + " " + w) >= lcs_similarity(qs, ps)
    assert lcs_similarity(qs, qs) == 1.0


class _Q:
    def __init__(self, id, question):
        self.id, self.question = id, question


def _passage_fixture():
    recs = [json.loads(x) for x in (HYGIENE / "passages.jsonl").read_text().splitlines()]
    return [_Q(r["id"], r["question"]) for r in recs], {r["id"]: r["passage"] for r in recs}


def test_filter_questions_thresholds():
    qs, passages = _passage_fixture()
    kept, dropped = filter_questions(qs, passages, 0.7)
    assert [q.id for q in dropped] == ["p01", "p02", "p06", "p07"]
    assert [q.id for q in kept] == ["p03", "p04", "p05"]
    _, dropped = filter_questions(qs, passages, 1.0)
    assert [q.id for q in dropped] == ["p02", "p06"]
    _, dropped = filter_questions(qs, passages, 0.0)
    assert len(dropped) == len(qs)
    with pytest.raises(ValueError):
        filter_questions(qs, passages, 1.5)


def test_answer_in_kb_not_table(table, subgraph):
    assert answer_in_kb_not_table("Atlanta", table, subgraph)
    assert not answer_in_kb_not_table("Kanye West", table, subgraph)
    assert not answer_in_kb_not_table("Paris", table, subgraph)
    assert answer_in_kb_not_table("GOOD Records", table, subgraph, min_containment=0.5)


def test_validate_clean_fixture(questions, table, subgraph):
    assert validate_annotations(questions, {"albums": table}, {"albums": subgraph}) == []


def test_validate_corrupted_fixture(table, subgraph):
    qs = load_questions(HYGIENE / "corrupted_questions.jsonl")
    expected = json.loads((HYGIENE / "expected_issues.json").read_text())
    issues = validate_annotations(qs, {"albums": table}, {"albums": subgraph})
    got = {}
    for i in issues:
        got.setdefault(i.question_id, []).append(i.rule)
    assert got == expected


def test_validate_unknown_table(questions):
    issues = validate_annotations(questions[:1], {}, {})
    assert [i.rule for i in issues] == ["invalid_evidence"]


def test_split_sizes():
    assert [len(x) for x in split_dataset(range(10))] == [8, 1, 1]
    assert [len(x) for x in split_dataset(range(9421))] == [7537, 942, 942]
    assert split_dataset(range(50), seed=4) == split_dataset(range(50), seed=4)
    with pytest.raises(ValueError):
        split_dataset(range(5), (0.5, 0.5, 0.5))


@given(st.integers(0, 300), st.integers(0, 10**6))
def test_split_partitions(n, seed):
    parts = split_dataset(range(n), seed=seed)
    flat = [x for p in parts for x in p]
    assert sorted(flat) == list(range(n))
