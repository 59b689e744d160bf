"""On-disk store produced by ``kbtqa ingest`` and consumed by the other commands.

Layout::

    <store>/kb.jsonl  tables.jsonl  questions.jsonl  manifest.json
    <store>/indexes/<table id>.jsonl
"""

from __future__ import annotations

import json
import logging
from functools import cached_property
from pathlib import Path
from urllib.parse import quote

from ..kb import SubGraph, SubGraphStore, dump_kb, filter_attributes, load_kb, one_hop_subgraph
from ..retrieve import (
    EmbeddingProvider,
    HashingEmbedder,
    HTTPEmbeddingProvider,
    HTTPPairScorer,
    PairScorer,
    RetrievalEngine,
    TokenOverlapScorer,
    TripleIndex,
    build_index,
)
from ..table import Question, Table, linked_entities, load_questions, load_tables
from ..train import LinearEmbedder
from .config import RunConfig

logger = logging.getLogger(__name__)


def ingest(cfg: RunConfig) -> dict:
    cfg.check_paths("kb", "tables")
    store = load_kb(cfg.kb)
    tables = load_tables(cfg.tables)
    questions = load_questions(cfg.questions) if cfg.questions else []
    for q in questions:
        if q.table_id not in tables:
            raise ValueError(f"question {q.id} references unknown table {q.table_id!r}")
    out = Path(cfg.store)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "kb.jsonl", "w", encoding="utf-8") as f:
        dump_kb(store.triples(), store.labels, f)
    with open(out / "tables.jsonl", "w", encoding="utf-8") as f:
        for t in sorted(tables.values(), key=lambda t: t.id):
            f.write(json.dumps(t.to_record(), ensure_ascii=False) + "\n")
    with open(out / "questions.jsonl", "w", encoding="utf-8") as f:
        for q in questions:
            f.write(json.dumps(q.to_record(store.labels), ensure_ascii=False) + "\n")
    manifest = {"triples": len(store), "tables": len(tables), "questions": len(questions)}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")
    return manifest


def make_provider(cfg: RunConfig) -> EmbeddingProvider:
    if cfg.model:
        return LinearEmbedder.load(cfg.model)
    if cfg.embed_url:
        return HTTPEmbeddingProvider(cfg.embed_url, cfg.embed_dim)
    return HashingEmbedder(cfg.retriever.hash_dim)


def make_scorer(cfg: RunConfig) -> PairScorer:
    return HTTPPairScorer(cfg.score_url) if cfg.score_url else TokenOverlapScorer()


class Workspace:
    def __init__(self, cfg: RunConfig):
        self.cfg = cfg
        self.root = Path(cfg.store)
        if not (self.root / "manifest.json").exists():
            raise FileNotFoundError(f"{self.root} is not an ingested store; run `kbtqa ingest` first")

    @cached_property
    def kb(self) -> SubGraphStore:
        return load_kb(self.root / "kb.jsonl")

    @cached_property
    def tables(self) -> dict[str, Table]:
        return load_tables(self.root / "tables.jsonl")

    @cached_property
    def questions(self) -> list[Question]:
        return load_questions(self.root / "questions.jsonl")

    @cached_property
    def subgraphs(self) -> dict[str, SubGraph]:
        out = {}
        for tid, t in self.tables.items():
            ents = linked_entities(t)
            if not ents:
                logger.warning("table %s has no linked entities", tid)
                continue
            out[tid] = filter_attributes(one_hop_subgraph(self.kb, ents), self.cfg.excluded_datatypes)
        return out

    @cached_property
    def labels(self) -> dict[str, str]:
        return dict(self.kb.labels)

    def index_path(self, table_id: str) -> Path:
        return self.root / "indexes" / f"{quote(table_id, safe='')}.jsonl"

    def build_indexes(self, provider: EmbeddingProvider) -> dict[str, int]:
        (self.root / "indexes").mkdir(exist_ok=True)
        sizes = {}
        for tid, g in sorted(self.subgraphs.items()):
            if not len(g):
                logger.warning("table %s has an empty sub-graph; skipped", tid)
                continue
            idx = build_index(g, self.tables[tid], provider)
            idx.save(self.index_path(tid))
            sizes[tid] = len(idx)
        return sizes

    def load_indexes(self, provider: EmbeddingProvider) -> dict[str, TripleIndex]:
        out = {}
        for tid in self.tables:
            p = self.index_path(tid)
            if p.exists():
                out[tid] = TripleIndex.load(p, provider.fingerprint)
        if not out:
            raise FileNotFoundError(f"no indexes under {self.root / 'indexes'}; run `kbtqa index` first")
        return out

    def engine(self, provider: EmbeddingProvider | None = None, scorer: PairScorer | None = None) -> RetrievalEngine:
        provider = provider or make_provider(self.cfg)
        return RetrievalEngine(
            self.tables,
            self.load_indexes(provider),
            provider,
            scorer or make_scorer(self.cfg),
            self.cfg.retriever,
        )
