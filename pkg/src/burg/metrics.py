"""k-means and clustering scores (ACC, NMI, ARI)."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment

from .numerics import Rng


@dataclass
class ContingencyTable:
    counts: np.ndarray  # K_pred x K_true

    @classmethod
    def from_labels(cls, pred, truth) -> "ContingencyTable":
        pred, truth = _check_pair(pred, truth)
        _, p = np.unique(pred, return_inverse=True)
        _, t = np.unique(truth, return_inverse=True)
        counts = np.zeros((p.max(initial=-1) + 1, t.max(initial=-1) + 1), dtype=np.int64)
        np.add.at(counts, (p, t), 1)
        return cls(counts)

    @property
    def row_sums(self) -> np.ndarray:
        return self.counts.sum(axis=1)

    @property
    def col_sums(self) -> np.ndarray:
        return self.counts.sum(axis=0)

    @property
    def n(self) -> int:
        return int(self.counts.sum())


def _check_pair(pred, truth) -> tuple[np.ndarray, np.ndarray]:
    pred = np.asarray(pred).ravel()
    truth = np.asarray(truth).ravel()
    if pred.shape != truth.shape:
        raise ValueError(f"label vectors differ in length: {pred.size} vs {truth.size}")
    if pred.size == 0:
        raise ValueError("label vectors are empty")
    return pred, truth


def hungarian(cost) -> np.ndarray:
    """Column assigned to each row of a square cost matrix, minimising total cost."""
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2 or cost.shape[0] != cost.shape[1]:
        raise ValueError(f"hungarian needs a square matrix, got shape {cost.shape}")
    if not np.all(np.isfinite(cost)):
        raise ValueError("cost matrix has non-finite entries")
    rows, cols = linear_sum_assignment(cost)
    out = np.empty(cost.shape[0], dtype=np.intp)
    out[rows] = cols
    return out


def accuracy(pred, truth) -> float:
    table = ContingencyTable.from_labels(pred, truth).counts
    k = max(table.shape)
    padded = np.zeros((k, k))
    padded[: table.shape[0], : table.shape[1]] = table
    match = hungarian(-padded)
    return float(padded[np.arange(k), match].sum() / table.sum())


def _entropy(counts: np.ndarray, n: int) -> float:
    p = counts[counts > 0] / n
    return float(-(p * np.log(p)).sum())


def nmi(pred, truth) -> float:
    """Mutual information over the arithmetic mean of the two entropies."""
    ct = ContingencyTable.from_labels(pred, truth)
    n = ct.n
    c = ct.counts
    nz = c > 0
    outer = np.outer(ct.row_sums, ct.col_sums)
    mi = float((c[nz] / n * np.log(c[nz] * n / outer[nz])).sum())
    h_pred, h_true = _entropy(ct.row_sums, n), _entropy(ct.col_sums, n)
    denom = 0.5 * (h_pred + h_true)
    if denom == 0.0:
        return 0.0
    return max(0.0, min(1.0, mi / denom))


def _pairs(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return x * (x - 1) / 2.0


def ari(pred, truth) -> float:
    ct = ContingencyTable.from_labels(pred, truth)
    sum_ij = _pairs(ct.counts).sum()
    sum_a = _pairs(ct.row_sums).sum()
    sum_b = _pairs(ct.col_sums).sum()
    total = _pairs(ct.n)
    expected = sum_a * sum_b / total if total else 0.0
    max_index = 0.5 * (sum_a + sum_b)
    if max_index == expected:
        return 1.0
    return float((sum_ij - expected) / (max_index - expected))


def _sq_dists(points: np.ndarray, centers: np.ndarray) -> np.ndarray:
    d = (points * points).sum(1)[:, None] - 2.0 * points @ centers.T + (centers * centers).sum(1)[None, :]
    return np.maximum(d, 0.0)


def _plusplus(points: np.ndarray, k: int, rng: Rng) -> np.ndarray:
    n = len(points)
    centers = [points[rng.choice(n)]]
    closest = _sq_dists(points, centers[0][None, :])[:, 0]
    for _ in range(1, k):
        total = closest.sum()
        idx = rng.choice(n, p=closest / total) if total > 0 else rng.choice(n)
        centers.append(points[idx])
        closest = np.minimum(closest, _sq_dists(points, points[idx][None, :])[:, 0])
    return np.array(centers)


def _lloyd(points: np.ndarray, centers: np.ndarray, max_iter: int):
    labels = None
    for _ in range(max_iter):
        dist = _sq_dists(points, centers)
        new = dist.argmin(axis=1)
        if labels is not None and np.array_equal(new, labels):
            break
        labels = new
        centers = centers.copy()
        for c in range(len(centers)):
            members = labels == c
            if members.any():
                centers[c] = points[members].mean(axis=0)
            else:
                far = dist[np.arange(len(points)), labels].argmax()
                centers[c] = points[far]
                labels[far] = c
                dist[far] = 0.0
    dist = _sq_dists(points, centers)
    labels = dist.argmin(axis=1)
    inertia = float(dist[np.arange(len(points)), labels].sum())
    return labels, centers, inertia


def kmeans(points, k: int, rng: Rng, max_iter: int = 100, n_init: int = 4):
    """k-means++ seeded Lloyd iterations; best of ``n_init`` restarts by inertia.

    Returns ``(labels, centroids, inertia)``.
    """
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2:
        raise ValueError(f"points must be a 2-D matrix, got shape {points.shape}")
    if not 1 <= k <= len(points):
        raise ValueError(f"cannot form {k} clusters from {len(points)} points")
    if not np.all(np.isfinite(points)):
        raise ValueError("points contain non-finite values")
    best = None
    for _ in range(n_init):
        result = _lloyd(points, _plusplus(points, k, rng), max_iter)
        if best is None or result[2] < best[2]:
            best = result
    return best


def score(pred, truth) -> dict[str, float]:
    return {"acc": accuracy(pred, truth), "nmi": nmi(pred, truth), "ari": ari(pred, truth)}
