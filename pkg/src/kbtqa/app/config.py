"""Run configuration: an INI file plus environment overrides.

Example::

    [paths]
    kb = data/kb.jsonl
    tables = data/tables.jsonl
    questions = data/questions.jsonl
    store = store
    model =                      ; optional trained LinearEmbedder (.npz)

    [kb]
    excluded_datatypes = globe-coordinate, url

    [retriever]
    method = multistage          ; multistage | bi-encoder | cross-encoder | string-match | random
    first_stage_n = 200
    top_k = 20
    hash_dim = 256

    [endpoints]
    embed_url =                  ; POST /embed service; hashing embedder when empty
    embed_dim = 768
    score_url =                  ; POST /score service; token-overlap scorer when empty
    generate_url =

    [run]
    seed = 0
    output = out
    char_budget =                ; optional prompt length cap in characters

Each ``*_url`` endpoint entry is overridden by the environment variable
``KBTQA_<ENTRY>`` when set (``KBTQA_EMBED_URL`` and so on). Relative paths are
resolved against the config file's directory.
"""

from __future__ import annotations

import configparser
import os
from dataclasses import dataclass, field
from pathlib import Path

from ..kb import DEFAULT_EXCLUDED_DATATYPES
from ..retrieve import RETRIEVERS, RetrieverConfig

ENV_OVERRIDES = {
    "embed_url": "KBTQA_EMBED_URL",
    "score_url": "KBTQA_SCORE_URL",
    "generate_url": "KBTQA_GENERATE_URL",
}


@dataclass
class RunConfig:
    kb: Path | None = None
    tables: Path | None = None
    questions: Path | None = None
    store: Path = Path("store")
    model: Path | None = None
    excluded_datatypes: frozenset[str] = DEFAULT_EXCLUDED_DATATYPES
    method: str = "multistage"
    retriever: RetrieverConfig = field(default_factory=RetrieverConfig)
    embed_url: str | None = None
    embed_dim: int = 768
    score_url: str | None = None
    generate_url: str | None = None
    seed: int = 0
    output: Path = Path("out")
    char_budget: int | None = None

    def __post_init__(self):
        if self.method not in RETRIEVERS:
            raise ValueError(f"unknown retriever {self.method!r}")

    def check_paths(self, *names: str) -> None:
        for name in names:
            p = getattr(self, name)
            if p is None:
                raise FileNotFoundError(f"no path configured for {name!r}")
            if not Path(p).exists():
                raise FileNotFoundError(f"{name} path does not exist: {p}")


def _opt(cp, section, key):
    v = cp.get(section, key, fallback="").strip()
    return v or None


def load_config(path: str | os.PathLike | None = None, env=os.environ) -> RunConfig:
    cp = configparser.ConfigParser(inline_comment_prefixes=(";", "#"))
    base = Path(".")
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise FileNotFoundError(f"config file not found: {path}")
        cp.read(path, encoding="utf-8")
        base = path.parent

    def p(key):
        v = _opt(cp, "paths", key)
        return None if v is None else base / v

    cfg = RunConfig()
    cfg.kb, cfg.tables, cfg.questions, cfg.model = p("kb"), p("tables"), p("questions"), p("model")
    cfg.store = p("store") or cfg.store
    if (dt := _opt(cp, "kb", "excluded_datatypes")) is not None:
        cfg.excluded_datatypes = frozenset(x.strip() for x in dt.split(",") if x.strip())
    cfg.method = _opt(cp, "retriever", "method") or cfg.method
    r = cfg.retriever
    cfg.retriever = RetrieverConfig(
        cp.getint("retriever", "first_stage_n", fallback=r.first_stage_n),
        cp.getint("retriever", "top_k", fallback=r.top_k),
        cp.getint("retriever", "hash_dim", fallback=r.hash_dim),
    )
    for key, var in ENV_OVERRIDES.items():
        setattr(cfg, key, env.get(var) or _opt(cp, "endpoints", key))
    cfg.embed_dim = cp.getint("endpoints", "embed_dim", fallback=cfg.embed_dim)
    cfg.seed = cp.getint("run", "seed", fallback=cfg.seed)
    cfg.output = base / _opt(cp, "run", "output") if _opt(cp, "run", "output") else cfg.output
    if (cb := _opt(cp, "run", "char_budget")) is not None:
        cfg.char_budget = int(cb)
    cfg.__post_init__()
    return cfg
