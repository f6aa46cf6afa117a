"""Latent-space evaluation: kNN graph, Leiden clusters, bio-conservation and batch-mixing scores."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np
from scipy import sparse
from scipy.sparse.csgraph import connected_components

from .errors import LengthMismatch, ShapeMismatch, SingleClass
from .leiden import leiden


@dataclass
class LatentEmbedding:
    coords: np.ndarray
    vars: Optional[np.ndarray] = None
    cell_ids: Optional[tuple] = None

    def __post_init__(self):
        self.coords = np.asarray(self.coords, dtype=np.float64)
        if self.coords.ndim != 2:
            raise ShapeMismatch(f"embedding must be 2-D, got shape {self.coords.shape}")
        if not np.all(np.isfinite(self.coords)):
            raise ValueError("embedding contains non-finite values")


@dataclass
class MetricsReport:
    nmi: float
    ari: float
    cell_asw: float
    batch_asw: float
    graph_connectivity: float
    avg_bio: float
    avg_batch: float
    clustering_meta: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)


def _coords(emb) -> np.ndarray:
    return emb.coords if isinstance(emb, LatentEmbedding) else np.asarray(emb, dtype=np.float64)


def _pairwise_distances(X: np.ndarray, rows=None) -> np.ndarray:
    rows = X if rows is None else rows
    diff = rows[:, None, :] - X[None, :, :]
    return np.sqrt((diff * diff).sum(-1))


def _distance_blocks(X: np.ndarray, chunk: int = 256):
    for start in range(0, X.shape[0], chunk):
        yield start, _pairwise_distances(X, X[start : start + chunk])


# --------------------------------------------------------------------------
# graph + clustering
# --------------------------------------------------------------------------


def knn_graph(emb, k: int = 15) -> sparse.csr_matrix:
    """Union-symmetrized 0/1 adjacency of Euclidean k nearest neighbours.

    Self is excluded; equal distances are broken by the lower index.
    """
    X = _coords(emb)
    n = X.shape[0]
    if not 1 <= k < n:
        raise ValueError(f"k must satisfy 1 <= k < N ({n}), got {k}")
    rows, cols = [], []
    for start, dist in _distance_blocks(X):
        for i, drow in enumerate(dist):
            node = start + i
            drow[node] = np.inf
            nbrs = np.argsort(drow, kind="stable")[:k]
            rows.append(np.full(k, node))
            cols.append(nbrs)
    rows, cols = np.concatenate(rows), np.concatenate(cols)
    A = sparse.csr_matrix((np.ones(rows.size), (rows, cols)), shape=(n, n))
    A = ((A + A.T) > 0).astype(np.float64)
    return sparse.csr_matrix(A)


def leiden_cluster(graph, resolution: float = 1.0, seed: int = 0) -> np.ndarray:
    return leiden(graph, resolution=resolution, seed=seed).labels


# --------------------------------------------------------------------------
# label agreement
# --------------------------------------------------------------------------


def _contingency(a, b) -> np.ndarray:
    a, b = np.asarray(a), np.asarray(b)
    if a.shape != b.shape or a.ndim != 1:
        raise LengthMismatch(f"label vectors differ: {a.shape} vs {b.shape}")
    if a.size == 0:
        raise LengthMismatch("empty label vectors")
    _, ai = np.unique(a, return_inverse=True)
    _, bi = np.unique(b, return_inverse=True)
    table = np.zeros((ai.max() + 1, bi.max() + 1), dtype=np.int64)
    np.add.at(table, (ai, bi), 1)
    return table


def _entropy(counts: np.ndarray, n: int) -> float:
    p = counts[counts > 0] / n
    return float(-(p * np.log(p)).sum())


def nmi(true_labels, pred_labels) -> float:
    """``2 I(T; C) / (H(T) + H(C))`` with natural logs.

    Two single-cluster labelings score 1; if exactly one labeling is a single
    cluster the score is 0.
    """
    table = _contingency(true_labels, pred_labels)
    n = table.sum()
    rows, cols = table.sum(1), table.sum(0)
    h_t, h_c = _entropy(rows, n), _entropy(cols, n)
    if h_t == 0.0 and h_c == 0.0:
        return 1.0
    if h_t == 0.0 or h_c == 0.0:
        return 0.0
    nz = table > 0
    joint = table[nz] / n
    outer = np.outer(rows, cols)[nz]
    mi = float((joint * np.log(n * table[nz] / outer)).sum())
    return float(2.0 * mi / (h_t + h_c))


def _comb2(x):
    x = np.asarray(x, dtype=np.float64)
    return x * (x - 1) / 2.0


def ari(true_labels, pred_labels) -> float:
    """Adjusted Rand index from pair counts of the contingency table."""
    table = _contingency(true_labels, pred_labels)
    n = table.sum()
    index = _comb2(table).sum()
    sum_a = _comb2(table.sum(1)).sum()
    sum_b = _comb2(table.sum(0)).sum()
    total = _comb2(n)
    if total == 0:
        return 1.0
    expected = sum_a * sum_b / total
    maximum = 0.5 * (sum_a + sum_b)
    if maximum == expected:
        # both labelings trivial in the same way (one cluster each, or all singletons)
        return 1.0
    return float((index - expected) / (maximum - expected))


# --------------------------------------------------------------------------
# silhouettes
# --------------------------------------------------------------------------


def silhouette_samples(X, labels) -> np.ndarray:
    """Per-point silhouette ``(b - a) / max(a, b)``; singleton clusters score 0."""
    X = _coords(X)
    labels = np.asarray(labels)
    if labels.shape[0] != X.shape[0]:
        raise LengthMismatch("labels and embedding differ in length")
    levels, codes = np.unique(labels, return_inverse=True)
    if levels.size < 2:
        raise SingleClass("silhouette needs at least two labels")
    sizes = np.bincount(codes, minlength=levels.size).astype(np.float64)
    onehot = np.zeros((X.shape[0], levels.size))
    onehot[np.arange(X.shape[0]), codes] = 1.0
    out = np.zeros(X.shape[0])
    for start, dist in _distance_blocks(X):
        sums = dist @ onehot  # summed distance to each cluster
        idx = np.arange(start, start + dist.shape[0])
        own = codes[idx]
        own_size = sizes[own]
        a = sums[np.arange(len(idx)), own] / np.maximum(own_size - 1, 1)
        mean_other = sums / sizes
        mean_other[np.arange(len(idx)), own] = np.inf
        b = mean_other.min(axis=1)
        denom = np.maximum(a, b)
        s = np.where(denom > 0, (b - a) / np.where(denom > 0, denom, 1.0), 0.0)
        s[own_size == 1] = 0.0
        out[idx] = s
    return out


def cell_asw(emb, celltype_labels) -> float:
    """Silhouette by cell type, averaged within types, then across types, rescaled to [0, 1]."""
    labels = np.asarray(celltype_labels)
    s = silhouette_samples(emb, labels)
    per_type = [s[labels == t].mean() for t in np.unique(labels)]
    return float(0.5 * (1.0 + np.mean(per_type)))


def batch_asw(emb, batch_labels, celltype_labels=None) -> float:
    """Mean over cell types of ``mean(1 - |s_batch|)`` computed within each type.

    Cell types observed in a single batch are skipped.
    """
    X = _coords(emb)
    batch = np.asarray(batch_labels)
    if np.unique(batch).size < 2:
        raise SingleClass("batch ASW needs at least two batches")
    types = np.zeros(X.shape[0], dtype=int) if celltype_labels is None else np.asarray(celltype_labels)
    scores = []
    for t in np.unique(types):
        mask = types == t
        if np.unique(batch[mask]).size < 2:
            continue
        s = silhouette_samples(X[mask], batch[mask])
        scores.append(np.mean(1.0 - np.abs(s)))
    if not scores:
        raise SingleClass("no cell type spans two batches")
    return float(np.mean(scores))


def graph_connectivity(emb, celltype_labels, k: int = 15, graph=None) -> float:
    """Mean over cell types of the largest-connected-component fraction of the type's kNN subgraph."""
    if graph is None:
        graph = knn_graph(emb, k)
    labels = np.asarray(celltype_labels)
    fractions = []
    for t in np.unique(labels):
        idx = np.flatnonzero(labels == t)
        sub = graph[idx][:, idx]
        _, comp = connected_components(sub, directed=False)
        fractions.append(np.bincount(comp).max() / idx.size)
    return float(np.mean(fractions))


def evaluate(
    emb,
    batch_labels,
    celltype_labels,
    k: int = 15,
    resolution: float = 1.0,
    seed: int = 0,
) -> MetricsReport:
    """All five scores plus the bio and batch averages (never a combined total)."""
    X = _coords(emb)
    if celltype_labels is None:
        raise ValueError("evaluation needs cell-type labels")
    batch_labels = np.asarray(batch_labels)
    celltype_labels = np.asarray(celltype_labels)
    if not (X.shape[0] == batch_labels.shape[0] == celltype_labels.shape[0]):
        raise LengthMismatch("embedding and labels differ in length")
    graph = knn_graph(X, k)
    clusters = leiden_cluster(graph, resolution, seed)
    scores = dict(
        nmi=nmi(celltype_labels, clusters),
        ari=ari(celltype_labels, clusters),
        cell_asw=cell_asw(X, celltype_labels),
        batch_asw=batch_asw(X, batch_labels, celltype_labels),
        graph_connectivity=graph_connectivity(X, celltype_labels, graph=graph),
    )
    return MetricsReport(
        **scores,
        avg_bio=float(np.mean([scores["nmi"], scores["ari"], scores["cell_asw"]])),
        avg_batch=float(np.mean([scores["batch_asw"], scores["graph_connectivity"]])),
        clustering_meta={"k": k, "resolution": resolution, "seed": seed, "n_clusters": int(clusters.max() + 1)},
    )
