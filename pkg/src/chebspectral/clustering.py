"""Row-normalized eigenvector features, seeded k-means, and partition-agreement metrics."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

log = logging.getLogger("chebspectral")


@dataclass(frozen=True)
class Partition:
    """Cluster assignment per node; labels lie in [0, n_clusters)."""

    labels: np.ndarray  # (N,) int64
    n_clusters: int

    def __post_init__(self):
        labels = np.asarray(self.labels, dtype=np.int64)
        object.__setattr__(self, "labels", labels)
        if labels.size and (labels.min() < 0 or labels.max() >= self.n_clusters):
            raise ValueError("labels out of range for n_clusters")

    @property
    def n(self) -> int:
        return self.labels.shape[0]


def save_partition(p: Partition, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for lab in p.labels:
            fh.write(f"{lab}\n")


def load_partition(path) -> Partition:
    labels = np.loadtxt(path, dtype=np.int64, ndmin=1)
    return Partition(labels=labels, n_clusters=int(labels.max()) + 1 if labels.size else 0)


def row_normalize(v: np.ndarray) -> np.ndarray:
    """Scale each row to unit 2-norm; all-zero rows stay zero (logged)."""
    v = np.asarray(v, dtype=np.float64)
    norms = np.sqrt(np.sum(v * v, axis=1))
    zero = norms == 0.0
    if zero.any():
        log.warning("row_normalize: %d all-zero rows left unnormalized", int(zero.sum()))
    scale = np.where(zero, 1.0, norms)
    return v / scale[:, None]


def _kmeans_pp_init(f: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = f.shape[0]
    centers = np.empty((k, f.shape[1]))
    first = int(rng.integers(n))
    centers[0] = f[first]
    d2 = np.sum((f - centers[0]) ** 2, axis=1)
    for c in range(1, k):
        total = d2.sum()
        if total <= 0.0:
            # all remaining points coincide with a chosen center
            idx = int(rng.integers(n))
        else:
            idx = int(rng.choice(n, p=d2 / total))
        centers[c] = f[idx]
        d2 = np.minimum(d2, np.sum((f - centers[c]) ** 2, axis=1))
    return centers


def _lloyd(f: np.ndarray, centers: np.ndarray, max_iter: int) -> tuple[np.ndarray, float]:
    n, k = f.shape[0], centers.shape[0]
    labels = np.full(n, -1, dtype=np.int64)
    for _ in range(max_iter):
        d2 = (np.sum(f * f, axis=1)[:, None] - 2.0 * f @ centers.T
              + np.sum(centers * centers, axis=1)[None, :])
        new_labels = np.argmin(d2, axis=1)
        if np.array_equal(new_labels, labels):
            break
        labels = new_labels
        for c in range(k):
            mask = labels == c
            if mask.any():
                centers[c] = f[mask].mean(axis=0)
            else:
                # deterministic repair: grab the point farthest from its center
                far = int(np.argmax(np.min(d2, axis=1)))
                centers[c] = f[far]
                labels[far] = c
    d2 = np.sum((f - centers[labels]) ** 2, axis=1)
    return labels, float(d2.sum())


def kmeans(f: np.ndarray, k: int, seed: int = 0, max_iter: int = 300,
           n_restarts: int = 1) -> Partition:
    """Seeded k-means with k-means++ initialization; best-inertia restart wins."""
    f = np.asarray(f, dtype=np.float64)
    n = f.shape[0]
    if k > n:
        raise ValueError(f"k={k} exceeds the number of points {n}")
    rng = np.random.Generator(np.random.Philox(seed))
    best = None
    for _ in range(n_restarts):
        centers = _kmeans_pp_init(f, k, rng)
        labels, inertia = _lloyd(f, centers, max_iter)
        if best is None or inertia < best[1]:
            best = (labels, inertia)
    return Partition(labels=best[0], n_clusters=k)


def _contingency(a: Partition, b: Partition) -> np.ndarray:
    if a.n != b.n:
        raise ValueError("partitions must label the same number of nodes")
    _, ai = np.unique(a.labels, return_inverse=True)
    _, bi = np.unique(b.labels, return_inverse=True)
    table = np.zeros((ai.max() + 1, bi.max() + 1), dtype=np.int64)
    np.add.at(table, (ai, bi), 1)
    return table


def ari(a: Partition, b: Partition) -> float:
    """Adjusted Rand Index via pair counting; 1.0 when both partitions are trivial."""
    table = _contingency(a, b)
    n = a.n

    def comb2(x):
        return x * (x - 1) / 2.0

    sum_ij = comb2(table.astype(np.float64)).sum()
    sum_a = comb2(table.sum(axis=1).astype(np.float64)).sum()
    sum_b = comb2(table.sum(axis=0).astype(np.float64)).sum()
    total = comb2(float(n))
    expected = sum_a * sum_b / total if total > 0 else 0.0
    denom = 0.5 * (sum_a + sum_b) - expected
    if denom == 0.0:
        return 1.0
    return float((sum_ij - expected) / denom)


def nmi(a: Partition, b: Partition) -> float:
    """Normalized mutual information with arithmetic-mean normalization."""
    table = _contingency(a, b).astype(np.float64)
    n = float(a.n)
    pa = table.sum(axis=1) / n
    pb = table.sum(axis=0) / n
    pab = table / n
    mask = pab > 0
    outer = pa[:, None] * pb[None, :]
    mi = float(np.sum(pab[mask] * np.log(pab[mask] / outer[mask])))

    def entropy(p):
        p = p[p > 0]
        return float(-np.sum(p * np.log(p)))

    ha, hb = entropy(pa), entropy(pb)
    mean_h = 0.5 * (ha + hb)
    if mean_h == 0.0:
        return 1.0  # both partitions trivial: perfect (degenerate) agreement
    return float(mi / mean_h)
