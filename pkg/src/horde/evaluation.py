"""Retrieval metrics, the spatial-subsampling probe, scatter statistics and
the concatenate + PCA evaluation mode."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.distance import cdist

_CHUNK = 1024


@dataclass
class RetrievalResult:
    recall_at: dict[int, float]
    neighbors: np.ndarray
    dim: int

    def to_dict(self) -> dict:
        return {"recall_at": {str(k): v for k, v in self.recall_at.items()}, "dim": self.dim}


@dataclass
class ProbeResult:
    rho: float
    keep: int
    recall_full: dict[int, float]
    recall_sub: dict[int, float]
    scatter_ratio: float
    extra: dict = field(default_factory=dict)

    @property
    def degradation(self) -> float:
        return self.recall_full[1] - self.recall_sub[1]

    def to_dict(self) -> dict:
        return {
            "rho": self.rho,
            "keep": self.keep,
            "recall_full": {str(k): v for k, v in self.recall_full.items()},
            "recall_sub": {str(k): v for k, v in self.recall_sub.items()},
            "degradation": self.degradation,
            "scatter_ratio": self.scatter_ratio,
            **self.extra,
        }


def _parse_ks(Ks) -> list[int]:
    ks = sorted({int(k) for k in Ks})
    if not ks or ks[0] < 1:
        raise ValueError("Ks must be positive integers")
    return ks


def recall_at_k(query_emb, gallery_emb, query_labels, gallery_labels, Ks=(1, 2, 4, 8),
                exclude_self: bool | None = None) -> RetrievalResult:
    """Recall@K with Euclidean nearest neighbours.

    ``exclude_self`` drops the i-th gallery item for the i-th query; by default
    it is on when the query and gallery sets are the same arrays.
    """
    q = np.asarray(query_emb, dtype=np.float64)
    gal = np.asarray(gallery_emb, dtype=np.float64)
    ql = np.asarray(query_labels)
    gl = np.asarray(gallery_labels)
    if q.ndim != 2 or gal.ndim != 2 or q.shape[1] != gal.shape[1]:
        raise ValueError(f"embedding shapes {q.shape} and {gal.shape} are incompatible")
    if not len(q) or not len(gal):
        raise ValueError("query and gallery sets must be nonempty")
    if len(ql) != len(q) or len(gl) != len(gal):
        raise ValueError("label counts do not match embedding counts")
    if exclude_self is None:
        exclude_self = q is gal or (q.shape == gal.shape and np.array_equal(q, gal) and np.array_equal(ql, gl))
    ks = _parse_ks(Ks)
    if ks[-1] >= len(gal):
        raise ValueError(f"K={ks[-1]} must be smaller than the gallery size {len(gal)}")
    kmax = ks[-1]
    neighbors = np.empty((len(q), kmax), dtype=np.int64)
    for start in range(0, len(q), _CHUNK):
        dist = cdist(q[start : start + _CHUNK], gal, "sqeuclidean")
        if exclude_self:
            rows = np.arange(dist.shape[0])
            dist[rows, rows + start] = np.inf
        neighbors[start : start + _CHUNK] = np.argsort(dist, axis=1, kind="stable")[:, :kmax]
    hit = gl[neighbors] == ql[:, None]
    first = np.where(hit.any(axis=1), hit.argmax(axis=1), kmax)
    recall = {k: float(np.mean(first < k)) for k in ks}
    return RetrievalResult(recall, neighbors, q.shape[1])


# -- spatial subsampling probe


def keep_count(rho: float, positions: int) -> int:
    if not 0 < rho <= 1:
        raise ValueError("rho must lie in (0, 1]")
    # guard against 49 * (1/6) landing a hair above an integer
    return max(1, math.ceil(round(rho * positions, 9)))


def subsample_positions(n_images: int, positions: int, rho: float, seed: int) -> np.ndarray:
    """(n_images, keep) sorted position ids, uniform without replacement per image."""
    keep = keep_count(rho, positions)
    if keep == positions:
        return np.broadcast_to(np.arange(positions), (n_images, positions))
    rng = np.random.default_rng(seed)
    idx = np.argsort(rng.random((n_images, positions)), axis=1)[:, :keep]
    return np.sort(idx, axis=1)


def pool_positions(fmaps, idx) -> np.ndarray:
    """Mean over the selected spatial positions of (N, h, w, c) feature maps."""
    fmaps = np.asarray(fmaps, dtype=np.float64)
    n, h, w, c = fmaps.shape
    flat = fmaps.reshape(n, h * w, c)
    return flat[np.arange(n)[:, None], idx].mean(axis=1)


def subsample_probe(model, dataset, rho: float, seed: int = 0, Ks=(1, 2, 4, 8),
                    fmaps: np.ndarray | None = None) -> ProbeResult:
    """Recall@K from the mean of a random ``rho`` fraction of spatial positions
    versus the mean of all of them, on one model. Retrieval uses the dataset as
    both query and gallery."""
    if fmaps is None:
        fmaps = model.run(dataset.images, ("features",))["features"]
    n, h, w, _ = fmaps.shape
    full_idx = subsample_positions(n, h * w, 1.0, seed)
    sub_idx = subsample_positions(n, h * w, rho, seed)
    emb_full = model.embed_features(pool_positions(fmaps, full_idx))
    emb_sub = model.embed_features(pool_positions(fmaps, sub_idx))
    labels = dataset.labels
    full = recall_at_k(emb_full, emb_full, labels, labels, Ks, exclude_self=True)
    sub = recall_at_k(emb_sub, emb_sub, labels, labels, Ks, exclude_self=True)
    ratio = scatter_ratio(fmaps.reshape(n, h * w, -1), labels)
    return ProbeResult(float(rho), sub_idx.shape[1], full.recall_at, sub.recall_at, ratio)


def scatter_ratio(feature_sets, labels) -> float:
    """Mean within-class trace covariance of the local features of each class,
    over the trace covariance of all local features.

    ``feature_sets`` is (N, m, c), a list of (m_i, c) arrays, or (N, c) for one
    feature per image.
    """
    labels = np.asarray(labels)
    if isinstance(feature_sets, np.ndarray) and feature_sets.ndim == 2:
        feature_sets = feature_sets[:, None, :]
    sets = [np.asarray(s, dtype=np.float64).reshape(-1, np.shape(s)[-1]) for s in feature_sets]
    if len(sets) != len(labels):
        raise ValueError("one label per feature set required")
    classes = np.unique(labels)
    if len(classes) < 2:
        raise ValueError("scatter_ratio needs at least two classes")
    allf = np.concatenate(sets)
    total = float(np.sum(allf.var(axis=0)))
    if not total > 0:
        raise ValueError("total covariance is zero (all features identical)")
    within = []
    for c in classes:
        f = np.concatenate([s for s, lab in zip(sets, labels) if lab == c])
        within.append(float(np.sum(f.var(axis=0))))
    return float(np.mean(within) / total)


# -- concatenation + PCA


def pca_basis(x, target_dim: int) -> tuple[np.ndarray, np.ndarray]:
    """(mean, components[target_dim, dim]) of ``x``; errors if rank is too low."""
    x = np.asarray(x, dtype=np.float64)
    mu = x.mean(axis=0)
    _, s, vt = np.linalg.svd(x - mu, full_matrices=False)
    tol = s[0] * max(x.shape) * np.finfo(np.float64).eps if len(s) else 0.0
    rank = int(np.sum(s > tol))
    if rank < target_dim:
        raise ValueError(f"PCA target_dim={target_dim} exceeds the achievable rank {rank}")
    return mu, vt[:target_dim]


def concat_pca_eval(representations, labels, target_dim: int, Ks=(1, 2, 4, 8),
                    query_representations=None, query_labels=None) -> RetrievalResult:
    """Concatenate per-order blocks, project on the top ``target_dim`` principal
    axes of the gallery, l2-normalize, then Recall@K.

    The components come from the centered gallery; the vectors themselves are
    projected uncentered, so a full-rank projection is a pure rotation.
    """
    gal = np.concatenate([np.asarray(b, dtype=np.float64) for b in representations], axis=1)
    if gal.shape[1] < target_dim:
        raise ValueError(f"concatenated dim {gal.shape[1]} < target_dim {target_dim}")
    _, comps = pca_basis(gal, target_dim)

    def project(x):
        z = x @ comps.T
        return z / np.maximum(np.linalg.norm(z, axis=1, keepdims=True), 1e-12)

    g = project(gal)
    if query_representations is None:
        return recall_at_k(g, g, labels, labels, Ks, exclude_self=True)
    q = project(np.concatenate([np.asarray(b, dtype=np.float64) for b in query_representations], axis=1))
    return recall_at_k(q, g, query_labels, labels, Ks, exclude_self=False)


def export_pca2d(path, model, dataset, n_images: int = 20) -> int:
    """CSV of 2-D PCA coordinates for local features and their per-image means
    (columns: kind, image, label, pc1, pc2). Returns the number of rows."""
    sub = dataset.subset(np.arange(min(n_images, len(dataset))))
    fmaps = model.run(sub.images, ("features",))["features"]
    n, h, w, c = fmaps.shape
    local = fmaps.reshape(n * h * w, c)
    mu, comps = pca_basis(local, 2)
    rows = []
    for i in range(n):
        for v in (local[i * h * w : (i + 1) * h * w] - mu) @ comps.T:
            rows.append(("feature", i, int(sub.labels[i]), *v))
        rows.append(("representation", i, int(sub.labels[i]), *((fmaps[i].reshape(-1, c).mean(0) - mu) @ comps.T)))
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["kind", "image", "label", "pc1", "pc2"])
        wr.writerows(rows)
    return len(rows)
