"""Pair/triplet DML losses, the per-order HORDE sum and the total objective.

Losses are built as graph nodes so they can be differentiated. Pair
structure enters through non-differentiable mask inputs whose entries
already carry the 1/count factor of the mean reduction; bind them with
:func:`pair_feed` for every batch. ``*_loss`` functions are eager wrappers
that evaluate on plain arrays.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .numkernel import Graph, Node

POS_MASK = "pairs.pos"
NEG_MASK = "pairs.neg"
TRIPLET_MASK = "pairs.triplet"

_DEFAULT_MARGIN = {"contrastive": 0.5, "triplet": 0.2, "binomial": 0.0}


@dataclass
class PairSet:
    positives: np.ndarray
    negatives: np.ndarray
    batch_size: int

    def weight_masks(self) -> tuple[np.ndarray, np.ndarray]:
        """(B, B) upper-triangular masks weighted by 1/#pairs of each kind."""
        b = self.batch_size
        pos = np.zeros((b, b))
        neg = np.zeros((b, b))
        if len(self.positives):
            pos[self.positives[:, 0], self.positives[:, 1]] = 1.0 / len(self.positives)
        if len(self.negatives):
            neg[self.negatives[:, 0], self.negatives[:, 1]] = 1.0 / len(self.negatives)
        return pos, neg


@dataclass
class LossConfig:
    kind: str = "contrastive"
    margin: float | None = None
    alpha: float = 2.0
    beta: float = 0.5
    C: float = 25.0
    order_weights: dict[int, float] = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in _DEFAULT_MARGIN:
            raise ValueError(f"unknown loss kind {self.kind!r}")
        if self.margin is None:
            self.margin = _DEFAULT_MARGIN[self.kind]
        if self.margin < 0:
            raise ValueError("margin must be >= 0")
        if self.alpha <= 0 or self.C <= 0:
            raise ValueError("binomial alpha and C must be > 0")
        self.order_weights = {int(k): float(v) for k, v in self.order_weights.items()}

    def weight(self, k: int) -> float:
        return self.order_weights.get(k, 1.0)


def build_pairs(labels) -> PairSet:
    """All in-batch pairs (i < j), split by label equality."""
    labels = np.asarray(labels)
    b = labels.shape[0]
    if b < 2:
        raise ValueError("need at least two samples to form pairs")
    i, j = np.triu_indices(b, k=1)
    same = labels[i] == labels[j]
    return PairSet(
        positives=np.stack([i[same], j[same]], axis=1),
        negatives=np.stack([i[~same], j[~same]], axis=1),
        batch_size=b,
    )


def triplet_mask(labels) -> np.ndarray:
    """(B, B, B) mask over (anchor, positive, negative), weighted by 1/#triplets."""
    labels = np.asarray(labels)
    same = labels[:, None] == labels[None, :]
    pos = same & ~np.eye(len(labels), dtype=bool)
    valid = pos[:, :, None] & ~same[:, None, :]
    n = int(valid.sum())
    return valid / n if n else valid.astype(np.float64)


def pair_feed(labels, kind: str) -> dict[str, np.ndarray]:
    """Mask inputs a loss graph of ``kind`` needs for a batch with ``labels``."""
    if kind == "triplet":
        m = triplet_mask(labels)
        if not m.any():
            raise ValueError("batch has no valid (anchor, positive, negative) triplet")
        return {TRIPLET_MASK: m}
    pairs = build_pairs(labels)
    if not len(pairs.positives) and not len(pairs.negatives):
        raise ValueError("batch has neither positive nor negative pairs")
    pos, neg = pairs.weight_masks()
    return {POS_MASK: pos, NEG_MASK: neg}


# -- graph builders


def contrastive_graph(g: Graph, emb: Node, margin: float) -> Node:
    d2 = g.pairwise_sqdist(emb)
    pos = g.sum(g.hadamard(g.input(POS_MASK, differentiable=False), d2))
    hinge = g.square(g.relu(g.scale(g.sqrt(d2), -1.0) + margin))
    neg = g.sum(g.hadamard(g.input(NEG_MASK, differentiable=False), hinge))
    return g.add(pos, neg)


def triplet_graph(g: Graph, emb: Node, margin: float) -> Node:
    d2 = g.pairwise_sqdist(emb)
    # gap[a, p, n] = d2[a, p] - d2[a, n]
    gap = g.sub(g.expand_dims(d2, 2), g.expand_dims(d2, 1))
    hinge = g.relu(gap + margin)
    return g.sum(g.hadamard(g.input(TRIPLET_MASK, differentiable=False), hinge))


def binomial_graph(g: Graph, emb: Node, alpha: float, beta: float, C: float) -> Node:
    sim = g.matmul(emb, g.transpose(emb))
    z = g.scale(g.shift(sim, -beta), alpha)
    pos = g.sum(g.hadamard(g.input(POS_MASK, differentiable=False), g.softplus(g.scale(z, -1.0))))
    neg = g.sum(g.hadamard(g.input(NEG_MASK, differentiable=False), g.softplus(z)))
    return g.add(pos, g.scale(neg, C))


def dml_graph(g: Graph, emb: Node, cfg: LossConfig) -> Node:
    if cfg.kind == "contrastive":
        return contrastive_graph(g, emb, cfg.margin)
    if cfg.kind == "triplet":
        return triplet_graph(g, emb, cfg.margin)
    return binomial_graph(g, emb, cfg.alpha, cfg.beta, cfg.C)


def horde_graph(g: Graph, order_embs: dict[int, Node], cfg: LossConfig) -> tuple[Node, dict]:
    """Sum over orders of weight_k * L(order-k embeddings); also returns per-order nodes."""
    if not order_embs or min(order_embs) < 2:
        raise ValueError("HORDE needs orders k >= 2")
    per_order = {k: dml_graph(g, e, cfg) for k, e in sorted(order_embs.items())}
    terms = [g.scale(node, cfg.weight(k)) for k, node in per_order.items()]
    total = terms[0]
    for t in terms[1:]:
        total = g.add(total, t)
    return total, per_order


# -- eager wrappers


def _eager(embeddings, build, feed) -> float:
    emb = np.asarray(embeddings, dtype=np.float64)
    g = Graph()
    x = g.input("embeddings")
    g.output("loss", build(g, x))
    return float(g.forward({"embeddings": emb, **feed})["loss"])


def contrastive_loss(embeddings, pairs: PairSet, margin: float = 0.5) -> float:
    if not len(pairs.positives) and not len(pairs.negatives):
        raise ValueError("empty pair set")
    pos, neg = pairs.weight_masks()
    return _eager(embeddings, lambda g, x: contrastive_graph(g, x, margin), {POS_MASK: pos, NEG_MASK: neg})


def triplet_loss(embeddings, labels, margin: float = 0.2) -> float:
    feed = pair_feed(labels, "triplet")
    return _eager(embeddings, lambda g, x: triplet_graph(g, x, margin), feed)


def binomial_deviance_loss(embeddings, pairs: PairSet, alpha: float = 2.0, beta: float = 0.5,
                           C: float = 25.0) -> float:
    if not len(pairs.positives) and not len(pairs.negatives):
        raise ValueError("empty pair set")
    pos, neg = pairs.weight_masks()
    return _eager(embeddings, lambda g, x: binomial_graph(g, x, alpha, beta, C), {POS_MASK: pos, NEG_MASK: neg})


def dml_loss(embeddings, labels, cfg: LossConfig) -> float:
    if cfg.kind == "triplet":
        return triplet_loss(embeddings, labels, cfg.margin)
    pairs = build_pairs(labels)
    if cfg.kind == "contrastive":
        return contrastive_loss(embeddings, pairs, cfg.margin)
    return binomial_deviance_loss(embeddings, pairs, cfg.alpha, cfg.beta, cfg.C)


def horde_loss(order_embeddings, labels, cfg: LossConfig) -> float:
    """sum_{k=2..K} weight_k * L(order-k embeddings); ``order_embeddings[0]`` is order 2."""
    if len(order_embeddings) < 1:
        raise ValueError("HORDE needs K >= 2 (at least one high-order embedding)")
    return float(sum(cfg.weight(k) * dml_loss(e, labels, cfg)
                     for k, e in enumerate(order_embeddings, start=2)))


def total_loss(dml: float, horde: float) -> float:
    if math.isnan(dml) or math.isnan(horde):
        raise ValueError("NaN loss component")
    return dml + horde
