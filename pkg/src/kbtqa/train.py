"""Contrastive retrieval loss and a trainable linear bi-encoder.

The bi-encoder projects hashed bag-of-words features with two independent
matrices (question tower and context tower); the relevance score is the dot
product of the projected vectors.
"""

from __future__ import annotations

import hashlib
import logging
import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .dataset import RetrievalInstance
from .retrieve import HashingEmbedder
from .serialize import build_retrieval_context
from .table import Table, triple_related_subtable

logger = logging.getLogger(__name__)

MODEL_FORMAT = "kbtqa-linear-embedder"
MODEL_VERSION = 1


class TrainingDivergedError(FloatingPointError):
    pass


def _check_finite(values: np.ndarray, what: str) -> None:
    if np.isnan(values).any():
        raise ValueError(f"NaN in {what}")


def contrastive_loss(pos_scores: Sequence[float], neg_scores: Sequence[float]) -> float:
    """-sum_j log(exp(p_j) / (exp(p_j) + sum_k exp(n_k))), max-shifted."""
    pos = np.asarray(pos_scores, dtype=np.float64)
    neg = np.asarray(neg_scores, dtype=np.float64)
    if pos.size < 1:
        raise ValueError("need at least one positive score")
    _check_finite(pos, "positive scores")
    _check_finite(neg, "negative scores")
    return float(sum(_term(p, neg)[0] for p in pos))


def _term(p: float, neg: np.ndarray) -> tuple[float, float, np.ndarray]:
    """Loss term for one positive, with the negatives' softmax weights as a total and per negative.

    When the positive outscores every negative the term is computed as
    ``log1p(sum exp(n - p))`` so that near-zero losses keep full relative
    precision.
    """
    if not neg.size:
        return 0.0, 0.0, neg.copy()
    top = neg.max()
    if p >= top:
        en = np.exp(neg - p)
        rest = float(en.sum())
        return math.log1p(rest), rest / (1.0 + rest), en / (1.0 + rest)
    ep = math.exp(p - top)
    en = np.exp(neg - top)
    denom = ep + float(en.sum())
    return (top - p) + math.log(denom), float(en.sum()) / denom, en / denom


def contrastive_score_grad(pos_scores, neg_scores) -> tuple[float, np.ndarray, np.ndarray]:
    """Loss and its derivatives with respect to each positive and negative score."""
    pos = np.asarray(pos_scores, dtype=np.float64)
    neg = np.asarray(neg_scores, dtype=np.float64)
    g_pos = np.zeros_like(pos)
    g_neg = np.zeros_like(neg)
    loss = 0.0
    for j, p in enumerate(pos):
        term, w_rest, w_neg = _term(p, neg)
        loss += term
        g_pos[j] = -w_rest
        g_neg += w_neg
    return loss, g_pos, g_neg


def loss_gradient(
    wq: np.ndarray,
    wc: np.ndarray,
    q_feat: np.ndarray,
    pos_feats: np.ndarray,
    neg_feats: np.ndarray,
) -> tuple[float, np.ndarray, np.ndarray]:
    """Instance loss and gradients with respect to both projections.

    Scores are ``(wq @ q_feat) . (wc @ c_feat)`` for each context row.
    """
    feats = np.vstack([pos_feats, neg_feats]) if len(neg_feats) else np.asarray(pos_feats)
    m = len(pos_feats)
    u = wq @ q_feat
    v = feats @ wc.T
    s = v @ u
    loss, g_pos, g_neg = contrastive_score_grad(s[:m], s[m:])
    g = np.concatenate([g_pos, g_neg])
    grad_q = np.outer(v.T @ g, q_feat)
    grad_c = np.outer(u, feats.T @ g)
    return loss, grad_q, grad_c


class LinearEmbedder:
    """Hashing features followed by a per-tower linear projection."""

    concurrent_safe = True

    def __init__(self, dim: int = 256, wq: np.ndarray | None = None, wc: np.ndarray | None = None):
        self.base = HashingEmbedder(dim)
        self.dim = dim
        self.wq = np.eye(dim) if wq is None else np.array(wq, dtype=np.float64)
        self.wc = np.eye(dim) if wc is None else np.array(wc, dtype=np.float64)
        if self.wq.shape != (dim, dim) or self.wc.shape != (dim, dim):
            raise ValueError("projection shape does not match dim")
        if not (np.isfinite(self.wq).all() and np.isfinite(self.wc).all()):
            raise ValueError("projection must be finite")
        self.train_log: list[dict] = []

    @property
    def fingerprint(self) -> str:
        h = hashlib.sha256(self.wq.tobytes() + self.wc.tobytes()).hexdigest()[:16]
        return f"linear-v1:dim={self.dim}:{h}"

    def embed_query(self, text: str) -> np.ndarray:
        return self.wq @ self.base.embed(text)

    def embed_context(self, text: str) -> np.ndarray:
        return self.wc @ self.base.embed(text)

    def embed_batch(self, texts: list[str], mode: str) -> np.ndarray:
        # row by row, so batched and single-text embeddings agree bit for bit
        embed = self.embed_query if mode == "query" else self.embed_context
        return np.array([embed(t) for t in texts]).reshape(len(texts), self.dim)

    def save(self, path) -> None:
        with open(path, "wb") as f:
            np.savez(
                f,
                format=np.array(MODEL_FORMAT),
                version=np.array(MODEL_VERSION),
                dim=np.array(self.dim),
                hasher=np.array(self.base.fingerprint),
                wq=self.wq,
                wc=self.wc,
            )

    @classmethod
    def load(cls, path) -> "LinearEmbedder":
        with np.load(path, allow_pickle=False) as z:
            if str(z["format"]) != MODEL_FORMAT or int(z["version"]) != MODEL_VERSION:
                raise ValueError(f"{path}: not a version {MODEL_VERSION} linear embedder")
            dim = int(z["dim"])
            if str(z["hasher"]) != HashingEmbedder(dim).fingerprint:
                raise ValueError(f"{path}: incompatible base hasher {z['hasher']}")
            return cls(dim, z["wq"], z["wc"])


@dataclass
class TrainConfig:
    epochs: int = 20
    batch_size: int = 16
    learning_rate: float = 1e-5
    seed: int = 0
    dim: int = 256

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1 or self.learning_rate <= 0 or self.dim < 8:
            raise ValueError("epochs >= 0, batch_size >= 1, learning_rate > 0, dim >= 8 required")


@dataclass
class _Features:
    q: np.ndarray
    pos: np.ndarray
    neg: np.ndarray = field(repr=False)


def instance_features(
    inst: RetrievalInstance,
    tables: Mapping[str, Table],
    labels: Mapping[str, str],
    base: HashingEmbedder,
) -> _Features:
    t = tables[inst.table_id]

    def ctx(tr):
        return base.embed(build_retrieval_context(triple_related_subtable(t, tr), tr, labels))

    pos = np.array([ctx(tr) for tr in inst.positives]).reshape(-1, base.dim)
    neg = np.array([ctx(tr) for tr in inst.negatives]).reshape(-1, base.dim)
    return _Features(base.embed(inst.question), pos, neg)


def _mean_loss(model: LinearEmbedder, feats: Sequence[_Features]) -> float:
    total = 0.0
    for f in feats:
        u = model.wq @ f.q
        pos = (f.pos @ model.wc.T) @ u
        neg = (f.neg @ model.wc.T) @ u if len(f.neg) else np.zeros(0)
        total += contrastive_loss(pos, neg)
    return total / len(feats)


def train_bi_encoder(
    dataset: Sequence[RetrievalInstance],
    tables: Mapping[str, Table],
    labels: Mapping[str, str],
    cfg: TrainConfig | None = None,
    dev: Sequence[RetrievalInstance] | None = None,
) -> LinearEmbedder:
    """Mini-batch SGD on the contrastive loss, starting from identity projections.

    Keeps the epoch with the lowest dev loss when ``dev`` is given, else the
    final epoch. Per-epoch losses are stored in ``model.train_log``.
    """
    cfg = cfg or TrainConfig()
    if not dataset:
        raise ValueError("empty training set")
    model = LinearEmbedder(cfg.dim)
    feats = [instance_features(i, tables, labels, model.base) for i in dataset]
    dev_feats = [instance_features(i, tables, labels, model.base) for i in dev] if dev else []
    rng = np.random.default_rng(cfg.seed)

    log = [{"epoch": 0, "train_loss": _mean_loss(model, feats)}]
    if dev_feats:
        log[0]["dev_loss"] = _mean_loss(model, dev_feats)
    best = (log[0].get("dev_loss", math.inf), model.wq.copy(), model.wc.copy())

    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(len(feats))
        running = 0.0
        for start in range(0, len(order), cfg.batch_size):
            batch = order[start:start + cfg.batch_size]
            gq = np.zeros_like(model.wq)
            gc = np.zeros_like(model.wc)
            with np.errstate(over="ignore", invalid="ignore"):
                for i in batch:
                    f = feats[i]
                    loss, dq, dc = loss_gradient(model.wq, model.wc, f.q, f.pos, f.neg)
                    running += loss
                    gq += dq
                    gc += dc
                model.wq -= cfg.learning_rate * gq / len(batch)
                model.wc -= cfg.learning_rate * gc / len(batch)
            if not (math.isfinite(running) and np.isfinite(model.wq).all() and np.isfinite(model.wc).all()):
                raise TrainingDivergedError(
                    f"loss diverged at epoch {epoch}; try a learning rate below {cfg.learning_rate:g}"
                )
        entry = {"epoch": epoch, "train_loss": running / len(feats)}
        if dev_feats:
            entry["dev_loss"] = _mean_loss(model, dev_feats)
            if entry["dev_loss"] < best[0]:
                best = (entry["dev_loss"], model.wq.copy(), model.wc.copy())
        log.append(entry)
        logger.info("epoch %d: %s", epoch, entry)

    if dev_feats:
        model.wq, model.wc = best[1], best[2]
    model.train_log = log
    return model
