"""Desk-scale retrieval experiments on the generated corpora.

Each function returns a plain dict of measurements so that both the
``scripts/`` entry points and the acceptance tests can consume it.
"""

from __future__ import annotations

import time
from dataclasses import asdict, dataclass

from .dataset import build_retrieval_dataset, split_dataset
from .evaluation import recall_at_k
from .retrieve import (
    EmbeddingProvider,
    HashingEmbedder,
    RetrieverConfig,
    bi_encoder_retrieve,
    build_index,
    multistage_retrieve,
)
from .synthetic import Corpus, OracleLeaningScorer, make_lossy_corpus, make_separable_corpus
from .train import LinearEmbedder, TrainConfig, train_bi_encoder


def dev_recall(corpus: Corpus, questions, provider: EmbeddingProvider, k: int = 5) -> float:
    retrieved, gold = [], []
    for q in questions:
        idx = build_index(corpus.subgraphs[q.table_id], corpus.tables[q.table_id], provider)
        retrieved.append([s.triple for s in bi_encoder_retrieve(q.question, idx, provider, k)])
        gold.append(q.gold_triples())
    return recall_at_k(retrieved, gold, k)


def multistage_benefit(
    seed: int = 0,
    n_questions: int = 200,
    n_triples: int = 500,
    hash_dim: int = 16,
    first_stage_n: int = 200,
    top_k: int = 20,
) -> dict:
    """Bi-encoder alone vs bi-encoder plus re-ranking with a lossy first stage.

    The hashing dimension is kept tiny so the first stage confuses many
    triples; the pair scorer knows the gold triples up to noise.
    """
    t0 = time.perf_counter()
    corpus = make_lossy_corpus(n_questions, n_triples, seed=seed)
    provider = HashingEmbedder(hash_dim)
    scorer = OracleLeaningScorer(corpus)
    cfg = RetrieverConfig(first_stage_n, top_k, hash_dim)
    bi, ms, gold = [], [], []
    for q in corpus.questions:
        t = corpus.tables[q.table_id]
        idx = build_index(corpus.subgraphs[q.table_id], t, provider)
        bi.append([s.triple for s in bi_encoder_retrieve(q.question, idx, provider, top_k)])
        ms.append([s.triple for s in multistage_retrieve(q.question, t, idx, provider, scorer, cfg)])
        gold.append(q.gold_triples())
    out = {"questions": len(gold), "triples_per_table": n_triples}
    for k in (5, 20):
        out[f"bi_r{k}"] = recall_at_k(bi, gold, k)
        out[f"multistage_r{k}"] = recall_at_k(ms, gold, k)
        better = sum(recall_at_k([m], [g], k) > recall_at_k([b], [g], k) for m, b, g in zip(ms, bi, gold))
        out[f"strictly_better_r{k}"] = better / len(gold)
    out["seconds"] = time.perf_counter() - t0
    return out


@dataclass
class SeparableSetup:
    n_questions: int = 400
    n_triples: int = 120
    n_hard: int = 8
    n_question_noise: int = 3
    corpus_seed: int = 0
    split_seed: int = 0
    dev_fraction: float = 0.2
    strategy: str = "knn"
    n_negatives: int = 25
    sample_seed: int = 1
    epochs: int = 20
    batch_size: int = 16
    learning_rate: float = 1.0
    train_seed: int = 1
    dim: int = 256


def _separable_data(s: SeparableSetup):
    corpus = make_separable_corpus(
        n_questions=s.n_questions,
        n_triples=s.n_triples,
        n_hard=s.n_hard,
        seed=s.corpus_seed,
        n_question_noise=s.n_question_noise,
        dim=s.dim,
    )
    train_q, dev_q, _ = split_dataset(corpus.questions, (1 - s.dev_fraction, s.dev_fraction, 0.0), s.split_seed)
    return corpus, train_q, dev_q


def train_on_separable(s: SeparableSetup | None = None, corpus_split=None) -> tuple[LinearEmbedder, dict]:
    s = s or SeparableSetup()
    corpus, train_q, dev_q = corpus_split or _separable_data(s)
    base = HashingEmbedder(s.dim)
    instances, _ = build_retrieval_dataset(
        train_q, corpus.tables, corpus.subgraphs, s.strategy, s.n_negatives, base, s.sample_seed
    )
    cfg = TrainConfig(s.epochs, s.batch_size, s.learning_rate, s.train_seed, s.dim)
    model = train_bi_encoder(instances, corpus.tables, corpus.labels, cfg)
    return model, {
        "setup": asdict(s),
        "initial_train_loss": model.train_log[0]["train_loss"],
        "final_train_loss": model.train_log[-1]["train_loss"],
        "dev_r5": dev_recall(corpus, dev_q, model, 5),
    }


def trained_vs_untrained(s: SeparableSetup | None = None) -> dict:
    s = s or SeparableSetup()
    t0 = time.perf_counter()
    data = _separable_data(s)
    corpus, _, dev_q = data
    untrained = dev_recall(corpus, dev_q, HashingEmbedder(s.dim), 5)
    model, report = train_on_separable(s, data)
    report["untrained_dev_r5"] = untrained
    report["fingerprint"] = model.fingerprint
    report["seconds"] = time.perf_counter() - t0
    return report


def knn_vs_random(seeds=range(5), n_triples: int = 500, learning_rate: float = 0.5, n_negatives: int = 25) -> dict:
    """Dev R@5 after training with kNN vs uniformly random negatives, per seed.

    Each seed draws a new corpus and is also used for sampling and training.
    """
    t0 = time.perf_counter()
    rows = []
    for seed in seeds:
        row = {"seed": seed}
        base = SeparableSetup(n_triples=n_triples, corpus_seed=seed, sample_seed=seed, train_seed=seed,
                              learning_rate=learning_rate, n_negatives=n_negatives)
        data = _separable_data(base)
        for strategy in ("knn", "random"):
            setup = SeparableSetup(**{**asdict(base), "strategy": strategy})
            row[strategy] = train_on_separable(setup, data)[1]["dev_r5"]
        rows.append(row)
    return {
        "per_seed": rows,
        "knn_mean": sum(r["knn"] for r in rows) / len(rows),
        "random_mean": sum(r["random"] for r in rows) / len(rows),
        "seconds": time.perf_counter() - t0,
    }
