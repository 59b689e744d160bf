import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from kbtqa.kb import EntityTail, LiteralTail, SubGraph, Triple
from kbtqa.retrieve import (
    HashingEmbedder,
    IndexBuildError,
    IndexFormatError,
    RetrieverConfig,
    TokenOverlapScorer,
    TripleIndex,
    UnknownTableError,
    bi_encoder_retrieve,
    build_index,
    cross_encoder_rank,
    multistage_retrieve,
    random_retrieve,
    rank,
    string_match_retrieve,
)
from kbtqa.serialize import build_retrieval_context, serialize_triple
from kbtqa.table import triple_related_subtable
from kbtqa.text import tokenize


def exact_dot(u, v):
    # correctly rounded sum of the exact float products, computed without numpy
    return math.fsum(a * b for a, b in zip(u.tolist(), v.tolist()))


def _scan(q, idx, provider, k):
    qv = provider.embed_query(q)
    scored = [(exact_dot(v, qv), tr.key, tr) for tr, v in zip(idx.triples, idx.vectors)]
    scored.sort(key=lambda x: (-x[0], x[1]))
    return [(tr, s) for s, _, tr in scored[:k]]


def test_hashing_embedder_basics():
    e = HashingEmbedder(64)
    assert np.allclose(e.embed_query(""), 0)
    v = e.embed_query("Kanye West album")
    assert np.isclose(np.linalg.norm(v), 1.0)
    assert np.array_equal(v, e.embed_context("kanye  WEST, album"))
    assert e.fingerprint == "hashing-v1:dim=64"
    with pytest.raises(ValueError):
        HashingEmbedder(4)


def test_bi_encoder_matches_scan(index, embedder, questions):
    for q in questions:
        for k in (1, 5, len(index)):
            got = bi_encoder_retrieve(q.question, index, embedder, k)
            want = _scan(q.question, index, embedder, k)
            assert [(s.triple, s.score) for s in got] == want


def test_bi_encoder_k_larger_than_graph(index, embedder):
    assert len(bi_encoder_retrieve("x", index, embedder, 10_000)) == len(index)
    with pytest.raises(ValueError):
        bi_encoder_retrieve("x", index, embedder, 0)


def test_all_ties_use_key_order(index):
    class Zero:
        dim, fingerprint = 4, "zero"

        def embed_query(self, text):
            return np.zeros(index.vectors.shape[1])

    got = bi_encoder_retrieve("anything", index, Zero(), len(index))
    assert [s.triple.key for s in got] == sorted(t.key for t in index.triples)


def test_build_index_entries_are_contexts(index, full_subgraph, table, embedder):
    assert len(index) == len(full_subgraph)
    for tr, v in zip(index.triples, index.vectors):
        text = build_retrieval_context(triple_related_subtable(table, tr), tr, full_subgraph.labels)
        assert np.array_equal(v, embedder.embed_context(text))


def test_build_index_failure_names_triple(full_subgraph, table):
    class Boom:
        dim, fingerprint = 8, "boom"

        def embed_context(self, text):
            if "GOOD Music" in text:
                raise RuntimeError("endpoint down")
            return np.ones(8)

    with pytest.raises(IndexBuildError) as e:
        build_index(full_subgraph, table, Boom())
    assert e.value.triple.tail == EntityTail("Q_GM")


def test_build_index_empty(table, embedder):
    with pytest.raises(ValueError):
        build_index(SubGraph(frozenset(), {}), table, embedder)


def test_index_round_trip_bit_exact(index, tmp_path, embedder):
    p = tmp_path / "albums.index.jsonl"
    index.save(p)
    again = TripleIndex.load(p, embedder.fingerprint)
    assert again.triples == index.triples
    assert again.vectors.tobytes() == index.vectors.tobytes()
    assert dict(again.labels).items() >= {k: index.labels[k] for t in index.triples for k in t.ids()}.items()
    with pytest.raises(IndexFormatError):
        TripleIndex.load(p, "hashing-v1:dim=32")


def test_cross_encoder_bounded_and_sorted(table, subgraph, labels, questions):
    out = cross_encoder_rank(questions[0].question, table, subgraph.sorted(), TokenOverlapScorer(), labels)
    scores = [s.score for s in out]
    assert all(0.0 <= s <= 1.0 for s in scores)
    assert scores == sorted(scores, reverse=True)
    with pytest.raises(ValueError):
        cross_encoder_rank("q", table, [], TokenOverlapScorer(), labels)


def test_stage_collapse(table, index, embedder, labels, questions):
    scorer = TokenOverlapScorer()
    for q in questions:
        for k in (1, 5, len(index)):
            cfg = RetrieverConfig(first_stage_n=max(k, len(index)), top_k=k)
            ms = multistage_retrieve(q.question, table, index, embedder, scorer, cfg)
            ce = cross_encoder_rank(q.question, table, index.triples, scorer, labels, k)
            assert ms == ce


def test_multistage_report(table, index, embedder):
    report = {}
    out = multistage_retrieve("record label", table, index, embedder, TokenOverlapScorer(), RetrieverConfig(5, 2), report)
    assert len(out) == 2 and report["candidates"] == 5
    assert set(report["latency_ms"]) == {"first_stage", "rerank"}


def test_retriever_config_validation():
    with pytest.raises(ValueError):
        RetrieverConfig(first_stage_n=10, top_k=20)
    with pytest.raises(ValueError):
        RetrieverConfig(top_k=0)


def test_string_match_scores(subgraph, labels):
    out = string_match_retrieve("which record label signed him", subgraph, labels, 3)
    assert out[0].score == 2.0
    for s in string_match_retrieve("publication date of Roc", subgraph, labels, len(subgraph)):
        tail = labels[s.triple.tail.id] if isinstance(s.triple.tail, EntityTail) else s.triple.tail.text
        words = set(tokenize(labels[s.triple.property])) | set(tokenize(tail))
        assert s.score == len(words & set(tokenize("publication date of Roc")))


def test_random_retrieve(subgraph):
    a = random_retrieve(subgraph, 3, seed=7)
    assert a == random_retrieve(subgraph, 3, seed=7)
    assert len({s.triple for s in a}) == 3
    assert len(random_retrieve(subgraph, 100, seed=1)) == len(subgraph)


def test_random_inclusion_probability(subgraph):
    # each triple is in the top-k with probability k/|G|
    n, k, trials = len(subgraph), 3, 10_000
    counts = dict.fromkeys(subgraph.triples, 0)
    for s in range(trials):
        for r in random_retrieve(subgraph, k, seed=s):
            counts[r.triple] += 1
    p = k / n
    sigma = (trials * p * (1 - p)) ** 0.5
    for c in counts.values():
        assert abs(c - trials * p) <= 3 * sigma


def test_engine_methods(engine, questions):
    q = questions[0]
    for m in ("multistage", "bi-encoder", "cross-encoder", "string-match", "random"):
        out = engine.retrieve(q.question, "albums", k=3, method=m)
        assert len(out) == 3
        assert all(s.stage for s in out)
    assert engine.retrieve(q.question, "albums", k=0) == []
    with pytest.raises(UnknownTableError):
        engine.retrieve(q.question, "nope")
    with pytest.raises(ValueError):
        engine.retrieve(q.question, "albums", method="bm25")


def test_scored_triple_json(engine, labels):
    s = engine.retrieve("record label", "albums", k=1)[0]
    j = s.to_json(labels)
    assert set(j) == {"key", "text", "score", "stage"}
    assert j["text"] == serialize_triple(s.triple, labels)


def test_token_overlap_scorer():
    sc = TokenOverlapScorer()
    assert sc.score("", "t", "x") == 0.0
    assert sc.score("a b", "", "a b") == 1.0
    assert sc.score("a b", "a b", "") == 0.5


@settings(max_examples=100)
@given(st.lists(st.floats(-5, 5, allow_nan=False), min_size=1, max_size=30), st.integers(1, 40))
def test_rank_contract(scores, k):
    triples = [Triple(f"Q{i % 3}", f"P{i}", LiteralTail("string", str(i))) for i in range(len(scores))]
    out = rank(triples, scores, k, "x")
    assert len(out) == min(k, len(scores))
    pairs = [(-s.score, s.triple.key) for s in out]
    assert pairs == sorted(pairs)
    # the top-k are the k best overall
    all_pairs = sorted((-s, t.key) for s, t in zip(scores, triples))
    assert pairs == all_pairs[: len(out)]


class _Const:
    def score(self, question, table_text, triple_text):
        return 0.5


def test_cross_encoder_constant_scorer(table, subgraph, labels):
    cands = list(reversed(subgraph.sorted()))
    out = cross_encoder_rank("q", table, cands, _Const(), labels)
    assert [s.triple.key for s in out] == sorted(t.key for t in cands)


def test_cross_encoder_oracle_scorer_puts_gold_first(table, subgraph, labels, questions):
    for q in questions:
        gold = {serialize_triple(t, labels) for t in q.gold_triples() if t in subgraph.triples}

        class Oracle:
            def score(self, question, table_text, triple_text):
                return 1.0 if triple_text in gold else 0.0

        out = cross_encoder_rank(q.question, table, subgraph.sorted(), Oracle(), labels)
        assert {serialize_triple(s.triple, labels) for s in out[: len(gold)]} == gold


def test_multistage_subset_of_first_stage(table, index, embedder, questions):
    cfg = RetrieverConfig(first_stage_n=4, top_k=2)
    for q in questions:
        first = {s.triple for s in bi_encoder_retrieve(q.question, index, embedder, 4)}
        out = multistage_retrieve(q.question, table, index, embedder, TokenOverlapScorer(), cfg)
        assert {s.triple for s in out} <= first


def test_multistage_top1_is_best_rerank(table, index, embedder, labels, questions):
    q = questions[0].question
    out = multistage_retrieve(q, table, index, embedder, TokenOverlapScorer(), RetrieverConfig(len(index), 1))
    assert out == cross_encoder_rank(q, table, index.triples, TokenOverlapScorer(), labels)[:1]


def test_string_match_no_overlap_and_date(subgraph, labels):
    out = string_match_retrieve("zzz qqq", subgraph, labels, 4)
    assert [s.score for s in out] == [0.0] * 4
    assert [s.triple.key for s in out] == sorted(t.key for t in subgraph.triples)[:4]
    pub = Triple("Q_TCD", "P577", LiteralTail("time", "February 10, 2004"))
    hit = {s.triple: s.score for s in string_match_retrieve("release date of the studio album", subgraph, labels, 100)}
    assert hit[pub] >= 1


def test_hashing_similarity_on_fixture(embedder):
    a = embedder.embed_context("The College Dropout Kanye West Chicago")
    b = embedder.embed_context("The College Dropout Kanye West")
    c = embedder.embed_context("Kingdom Come Roc-A-Fella Records")
    assert a @ b > a @ c
