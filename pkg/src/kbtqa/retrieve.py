"""Triple scoring and single/multistage retrieval over per-table indexes.

Every ranking here is ordered by score descending, then by ``Triple.key``
ascending, so results are a deterministic total order.
"""

from __future__ import annotations

import hashlib
import json
import math
import random
import threading
import time
import urllib.request
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Mapping, Protocol, Sequence, runtime_checkable

import numpy as np

from .kb import EntityTail, SubGraph, Triple, triple_from_record, triple_to_record
from .serialize import build_retrieval_context, serialize_table, serialize_triple
from .table import Table, triple_related_subtable
from .text import tokenize

INDEX_FORMAT = "kbtqa-triple-index"
INDEX_VERSION = 1


@runtime_checkable
class EmbeddingProvider(Protocol):
    dim: int
    fingerprint: str

    def embed_query(self, text: str) -> np.ndarray: ...

    def embed_context(self, text: str) -> np.ndarray: ...


@runtime_checkable
class PairScorer(Protocol):
    def score(self, question: str, table_text: str, triple_text: str) -> float: ...


def embed_many(provider: EmbeddingProvider, texts: Sequence[str], mode: str = "context") -> np.ndarray:
    """Stack embeddings into an ``(len(texts), dim)`` array, batching when supported."""
    batch = getattr(provider, "embed_batch", None)
    if batch is not None:
        out = np.asarray(batch(list(texts), mode), dtype=np.float64)
    else:
        fn = provider.embed_query if mode == "query" else provider.embed_context
        out = np.array([fn(t) for t in texts], dtype=np.float64)
    return out.reshape(len(texts), provider.dim)


def dot_scores(vectors: np.ndarray, q: np.ndarray) -> np.ndarray:
    """Correctly rounded dot product of each row with ``q``.

    BLAS kernels sum in an order that depends on shapes and build, so
    mathematically tied scores can differ in the last bit between two
    evaluations. Summing the exact elementwise products with ``math.fsum``
    makes every score a function of the vectors alone.
    """
    vectors = np.asarray(vectors, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if vectors.ndim != 2 or vectors.shape[1] != q.shape[0]:
        raise ValueError(f"shape mismatch: {vectors.shape} vs {q.shape}")
    return np.fromiter((math.fsum(row) for row in vectors * q), dtype=np.float64, count=len(vectors))


def score_many(scorer: PairScorer, question: str, pairs: Sequence[tuple[str, str]]) -> list[float]:
    batch = getattr(scorer, "score_batch", None)
    if batch is not None:
        return [float(s) for s in batch([(question, tab, tri) for tab, tri in pairs])]
    return [float(scorer.score(question, tab, tri)) for tab, tri in pairs]


# -- providers ---------------------------------------------------------------


@lru_cache(maxsize=1 << 18)
def _token_hash(token: str) -> int:
    return int.from_bytes(hashlib.blake2b(token.encode("utf-8"), digest_size=8).digest(), "little")


class HashingEmbedder:
    """Signed feature hashing of lowercase word tokens, L2-normalized.

    Query and context embeddings are identical. Empty text maps to the zero
    vector.
    """

    concurrent_safe = True

    def __init__(self, dim: int = 256):
        if dim < 8:
            raise ValueError("dim must be >= 8")
        self.dim = dim
        self.fingerprint = f"hashing-v1:dim={dim}"

    def features(self, text: str) -> np.ndarray:
        v = np.zeros(self.dim)
        for tok in tokenize(text):
            h = _token_hash(tok)
            v[h % self.dim] += 1.0 if (h >> 63) & 1 else -1.0
        return v

    def embed(self, text: str) -> np.ndarray:
        v = self.features(text)
        norm = np.linalg.norm(v)
        return v / norm if norm > 0 else v

    embed_query = embed
    embed_context = embed


def hashing_embedder(dim: int = 256) -> HashingEmbedder:
    return HashingEmbedder(dim)


class TokenOverlapScorer:
    """Lexical pair scorer in [0, 1]; the default stand-in for a cross-encoder.

    Weighs question tokens found in the triple twice as much as those found
    only in the table text.
    """

    concurrent_safe = True

    def score(self, question: str, table_text: str, triple_text: str) -> float:
        q = set(tokenize(question))
        if not q:
            return 0.0
        in_triple = q & set(tokenize(triple_text))
        in_table = (q - in_triple) & set(tokenize(table_text))
        return (2 * len(in_triple) + len(in_table)) / (2 * len(q))


def _post_json(url: str, payload: dict, timeout: float = 60.0, retries: int = 2) -> dict:
    data = json.dumps(payload).encode("utf-8")
    last: Exception | None = None
    for attempt in range(retries + 1):
        req = urllib.request.Request(url, data=data, headers={"Content-Type": "application/json"})
        try:
            with urllib.request.urlopen(req, timeout=timeout) as resp:
                return json.loads(resp.read().decode("utf-8"))
        except OSError as e:
            last = e
            time.sleep(0.5 * (attempt + 1))
    raise ConnectionError(f"request to {url} failed: {last}")


class HTTPEmbeddingProvider:
    """Client for ``POST /embed {"texts": [...], "mode": ...} -> {"vectors": [...]}``."""

    concurrent_safe = True

    def __init__(self, url: str, dim: int, name: str | None = None):
        self.url = url
        self.dim = dim
        self.fingerprint = f"http:{name or url}:dim={dim}"

    def embed_batch(self, texts: list[str], mode: str) -> np.ndarray:
        out = _post_json(self.url, {"texts": texts, "mode": mode})
        vecs = np.asarray(out["vectors"], dtype=np.float64)
        if vecs.shape != (len(texts), self.dim):
            raise ValueError(f"embedding service returned shape {vecs.shape}")
        return vecs

    def embed_query(self, text: str) -> np.ndarray:
        return self.embed_batch([text], "query")[0]

    def embed_context(self, text: str) -> np.ndarray:
        return self.embed_batch([text], "context")[0]


class HTTPPairScorer:
    """Client for ``POST /score {"pairs": [...]} -> {"scores": [...]}``."""

    concurrent_safe = True

    def __init__(self, url: str):
        self.url = url

    def score_batch(self, triples: list[tuple[str, str, str]]) -> list[float]:
        pairs = [{"question": q, "table": tab, "triple": tri} for q, tab, tri in triples]
        scores = _post_json(self.url, {"pairs": pairs})["scores"]
        if len(scores) != len(pairs):
            raise ValueError("pair-scorer returned wrong number of scores")
        return [float(s) for s in scores]

    def score(self, question: str, table_text: str, triple_text: str) -> float:
        return self.score_batch([(question, table_text, triple_text)])[0]


class _Serialized:
    """Proxy that serializes calls into a provider not safe for concurrency."""

    concurrent_safe = True

    def __init__(self, inner):
        self._inner = inner
        self._lock = threading.Lock()

    def __getattr__(self, name):
        attr = getattr(self._inner, name)
        if not callable(attr):
            return attr

        def call(*args, **kwargs):
            with self._lock:
                return attr(*args, **kwargs)

        return call


def thread_safe(component):
    return component if getattr(component, "concurrent_safe", False) else _Serialized(component)


# -- results -----------------------------------------------------------------


@dataclass(frozen=True)
class ScoredTriple:
    triple: Triple
    score: float
    stage: str

    def to_json(self, labels: Mapping[str, str]) -> dict:
        return {
            "key": self.triple.key,
            "text": serialize_triple(self.triple, labels),
            "score": self.score,
            "stage": self.stage,
        }


@dataclass
class RetrieverConfig:
    first_stage_n: int = 200
    top_k: int = 20
    hash_dim: int = 256
    tie_break: str = "lexicographic-triple-key"

    def __post_init__(self):
        if not 1 <= self.top_k <= self.first_stage_n:
            raise ValueError("need 1 <= top_k <= first_stage_n")
        if self.tie_break != "lexicographic-triple-key":
            raise ValueError(f"unsupported tie_break {self.tie_break!r}")


def rank(triples: Sequence[Triple], scores: Sequence[float], k: int | None, stage: str) -> list[ScoredTriple]:
    order = sorted(range(len(triples)), key=lambda i: (-scores[i], triples[i].key))
    if k is not None:
        order = order[:k]
    return [ScoredTriple(triples[i], float(scores[i]), stage) for i in order]


# -- index -------------------------------------------------------------------


class IndexFormatError(ValueError):
    pass


@dataclass
class TripleIndex:
    table_id: str
    triples: list[Triple]  # sorted by key
    vectors: np.ndarray  # (n, dim)
    fingerprint: str
    labels: Mapping[str, str] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.triples)

    def subgraph(self) -> SubGraph:
        return SubGraph(frozenset(self.triples), dict(self.labels))

    def save(self, path) -> None:
        header = {
            "format": INDEX_FORMAT,
            "version": INDEX_VERSION,
            "table_id": self.table_id,
            "fingerprint": self.fingerprint,
            "dim": int(self.vectors.shape[1]),
            "size": len(self.triples),
        }
        with open(path, "w", encoding="utf-8") as f:
            f.write(json.dumps(header) + "\n")
            for tr, vec in zip(self.triples, self.vectors):
                rec = {"key": tr.key, "triple": triple_to_record(tr, self.labels), "vector": vec.tolist()}
                f.write(json.dumps(rec, ensure_ascii=False) + "\n")

    @classmethod
    def load(cls, path, fingerprint: str | None = None) -> "TripleIndex":
        with open(path, encoding="utf-8") as f:
            header = json.loads(f.readline())
            if header.get("format") != INDEX_FORMAT or header.get("version") != INDEX_VERSION:
                raise IndexFormatError(f"{path}: not a version {INDEX_VERSION} triple index")
            if fingerprint is not None and header["fingerprint"] != fingerprint:
                raise IndexFormatError(
                    f"{path}: built with {header['fingerprint']!r}, provider is {fingerprint!r}"
                )
            triples, vecs, labels = [], [], {}
            for line in f:
                rec = json.loads(line)
                tr, lab = triple_from_record(rec["triple"])
                if tr.key != rec["key"]:
                    raise IndexFormatError(f"{path}: key mismatch for {rec['key']!r}")
                triples.append(tr)
                vecs.append(rec["vector"])
                labels.update(lab)
        dim = header["dim"]
        vectors = np.array(vecs, dtype=np.float64).reshape(len(vecs), dim)
        if len(triples) != header["size"]:
            raise IndexFormatError(f"{path}: truncated index")
        return cls(header["table_id"], triples, vectors, header["fingerprint"], labels)


class IndexBuildError(RuntimeError):
    def __init__(self, triple: Triple, cause: Exception):
        self.triple = triple
        super().__init__(f"embedding failed for triple {triple.key}: {cause}")


def build_index(g: SubGraph, t: Table, provider: EmbeddingProvider) -> TripleIndex:
    if not len(g):
        raise ValueError(f"empty sub-graph for table {t.id}")
    triples = g.sorted()
    texts = [build_retrieval_context(triple_related_subtable(t, tr), tr, g.labels) for tr in triples]
    try:
        vectors = embed_many(provider, texts, "context")
    except Exception:
        # locate the failing triple
        vecs = []
        for tr, text in zip(triples, texts):
            try:
                vecs.append(provider.embed_context(text))
            except Exception as e:
                raise IndexBuildError(tr, e) from e
        vectors = np.array(vecs, dtype=np.float64)
    return TripleIndex(t.id, triples, vectors, provider.fingerprint, dict(g.labels))


# -- retrievers --------------------------------------------------------------


def bi_encoder_retrieve(q: str, idx: TripleIndex, provider: EmbeddingProvider, k: int) -> list[ScoredTriple]:
    if k < 1:
        raise ValueError("k must be >= 1")
    qv = np.asarray(provider.embed_query(q), dtype=np.float64)
    scores = dot_scores(idx.vectors, qv)
    # entries are key-sorted, so a stable sort on -score gives the key tie-break
    order = np.argsort(-scores, kind="stable")[:k]
    return [ScoredTriple(idx.triples[i], float(scores[i]), "bi-encoder") for i in order]


def cross_encoder_rank(
    q: str,
    t: Table,
    cands: Sequence[Triple],
    scorer: PairScorer,
    labels: Mapping[str, str],
    k: int | None = None,
) -> list[ScoredTriple]:
    if not cands:
        raise ValueError("no candidates to re-rank")
    pairs = [
        (serialize_table(triple_related_subtable(t, c)), serialize_triple(c, labels)) for c in cands
    ]
    scores = score_many(scorer, q, pairs)
    return rank(list(cands), scores, k, "cross-encoder")


def multistage_retrieve(
    q: str,
    t: Table,
    idx: TripleIndex,
    provider: EmbeddingProvider,
    scorer: PairScorer,
    cfg: RetrieverConfig,
    report: dict | None = None,
) -> list[ScoredTriple]:
    """Bi-encoder top ``first_stage_n``, then cross-encoder re-rank to ``top_k``.

    If ``report`` is given, per-stage latencies (ms) and candidate counts are
    written into it.
    """
    t0 = time.perf_counter()
    first = bi_encoder_retrieve(q, idx, provider, cfg.first_stage_n)
    t1 = time.perf_counter()
    out = cross_encoder_rank(q, t, [s.triple for s in first], scorer, idx.labels, cfg.top_k)
    t2 = time.perf_counter()
    if report is not None:
        report["latency_ms"] = {"first_stage": (t1 - t0) * 1e3, "rerank": (t2 - t1) * 1e3}
        report["candidates"] = len(first)
    return out


def _match_words(tr: Triple, labels: Mapping[str, str]) -> set[str]:
    tail = labels[tr.tail.id] if isinstance(tr.tail, EntityTail) else tr.tail.text
    return set(tokenize(labels[tr.property])) | set(tokenize(tail))


def string_match_retrieve(q: str, g: SubGraph, labels: Mapping[str, str], k: int) -> list[ScoredTriple]:
    """Rank by the number of distinct question words shared with the property and tail labels."""
    if k < 1:
        raise ValueError("k must be >= 1")
    qset = set(tokenize(q))
    triples = g.sorted()
    scores = [float(len(qset & _match_words(tr, labels))) for tr in triples]
    return rank(triples, scores, k, "string-match")


def random_retrieve(g: SubGraph, k: int, seed: int) -> list[ScoredTriple]:
    if k < 1:
        raise ValueError("k must be >= 1")
    pool = g.sorted()
    chosen = random.Random(seed).sample(pool, min(k, len(pool)))
    # positional scores keep the sampled order under the standard ranking contract
    return [ScoredTriple(tr, float(len(chosen) - i), "random") for i, tr in enumerate(chosen)]


RETRIEVERS = ("multistage", "bi-encoder", "cross-encoder", "string-match", "random")


class UnknownTableError(KeyError):
    def __str__(self):
        return f"unknown table_id {self.args[0]!r}"


@dataclass
class RetrievalEngine:
    """Read-only bundle of per-table indexes with the components that score them."""

    tables: Mapping[str, Table]
    indexes: Mapping[str, TripleIndex]
    provider: EmbeddingProvider
    scorer: PairScorer
    cfg: RetrieverConfig = field(default_factory=RetrieverConfig)

    def __post_init__(self):
        self.provider = thread_safe(self.provider)
        self.scorer = thread_safe(self.scorer)

    def labels(self, table_id: str) -> Mapping[str, str]:
        return self.index(table_id).labels

    def index(self, table_id: str) -> TripleIndex:
        try:
            return self.indexes[table_id]
        except KeyError:
            raise UnknownTableError(table_id) from None

    def retrieve(
        self,
        question: str,
        table_id: str,
        k: int | None = None,
        method: str = "multistage",
        seed: int = 0,
        report: dict | None = None,
    ) -> list[ScoredTriple]:
        k = self.cfg.top_k if k is None else k
        idx = self.index(table_id)
        table = self.tables[table_id]
        if k < 1:
            return []
        if method == "multistage":
            cfg = RetrieverConfig(max(self.cfg.first_stage_n, k), k, self.cfg.hash_dim)
            return multistage_retrieve(question, table, idx, self.provider, self.scorer, cfg, report)
        if method == "bi-encoder":
            return bi_encoder_retrieve(question, idx, self.provider, k)
        if method == "cross-encoder":
            return cross_encoder_rank(question, table, idx.triples, self.scorer, idx.labels, k)
        if method == "string-match":
            return string_match_retrieve(question, idx.subgraph(), idx.labels, k)
        if method == "random":
            return random_retrieve(idx.subgraph(), k, seed)
        raise ValueError(f"unknown retriever {method!r}; choose from {', '.join(RETRIEVERS)}")
