"""Neighbour-aware and prototypical consistency terms."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .metrics import kmeans
from .numerics import DomainError, Rng, Tensor, as_tensor

LOG_FLOOR = 1e-12


@dataclass(frozen=True)
class NeighborIndex:
    """Snapshot of per-view latents; only rows with ``mask[:, v] == 1`` are searchable in view ``v``."""

    latents: tuple[np.ndarray, ...]
    mask: np.ndarray

    @classmethod
    def build(cls, latents: Sequence[np.ndarray], mask) -> "NeighborIndex":
        lat = tuple(np.array(z, dtype=np.float64, copy=True) for z in latents)
        m = np.array(mask, dtype=np.int64, copy=True)
        for z in lat:
            z.setflags(write=False)
        m.setflags(write=False)
        return cls(lat, m)

    @property
    def n_views(self) -> int:
        return len(self.latents)


def find_cross_view_neighbor(i: int, v: int, z_tilde, index: NeighborIndex) -> int | None:
    """Neighbour whose view-``v`` latent should anchor the recovered latent of slot (i, v).

    For every view ``u`` observed for sample ``i``, take the 1-NN of ``z_tilde``
    among samples observed in both ``u`` and ``v`` (excluding ``i``); keep the
    candidate whose view-``u`` latent lies closest to ``i``'s own. Returns None
    when no sample qualifies.
    """
    z_tilde = np.asarray(z_tilde, dtype=np.float64)
    mask = index.mask
    best, best_score = None, np.inf
    for u in range(index.n_views):
        if u == v or mask[i, u] == 0:
            continue
        cands = np.flatnonzero((mask[:, u] == 1) & (mask[:, v] == 1))
        cands = cands[cands != i]
        if len(cands) == 0:
            continue
        zu = index.latents[u]
        j = cands[np.argmin(((zu[cands] - z_tilde) ** 2).sum(axis=1))]
        score = float(((zu[j] - zu[i]) ** 2).sum())
        if score < best_score:
            best, best_score = int(j), score
    return best


def _sq_dists(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    d = (a * a).sum(1)[:, None] - 2.0 * a @ b.T + (b * b).sum(1)[None, :]
    return np.maximum(d, 0.0)


def resolve_neighbors(index: NeighborIndex, rows: np.ndarray, view: int, z_tilde: np.ndarray) -> np.ndarray:
    """Vectorised :func:`find_cross_view_neighbor` for many rows missing ``view``; -1 marks none."""
    rows = np.asarray(rows, dtype=np.intp)
    z_tilde = np.asarray(z_tilde, dtype=np.float64).reshape(len(rows), -1)
    mask = index.mask
    out = np.full(len(rows), -1, dtype=np.intp)
    best_score = np.full(len(rows), np.inf)
    for u in range(index.n_views):
        if u == view:
            continue
        cands = np.flatnonzero((mask[:, u] == 1) & (mask[:, view] == 1))
        active = mask[rows, u] == 1
        if len(cands) == 0 or not active.any():
            continue
        zu = index.latents[u]
        dist = _sq_dists(z_tilde, zu[cands])
        dist[rows[:, None] == cands[None, :]] = np.inf
        pick = dist.argmin(axis=1)
        ok = active & np.isfinite(dist[np.arange(len(rows)), pick])
        j = cands[pick]
        score = ((zu[j] - zu[rows]) ** 2).sum(axis=1)
        better = ok & (score < best_score)
        out[better] = j[better]
        best_score[better] = score[better]
    return out


def nac_loss(z_tilde: Tensor, targets: np.ndarray, valid=None) -> Tensor:
    """Mean squared distance between recovered latents and their neighbours' latents.

    Averaged over all recovered rows; rows flagged invalid (no neighbour)
    contribute zero.
    """
    z_tilde = as_tensor(z_tilde)
    n = z_tilde.shape[0]
    if n == 0:
        return Tensor(0.0)
    targets = np.asarray(targets, dtype=np.float64)
    weight = np.ones(n) if valid is None else np.asarray(valid, dtype=np.float64)
    targets = np.where(weight[:, None] > 0, targets, 0.0)
    return ((z_tilde - targets).sq_norm(axis=1) * weight).sum() * (1.0 / n)


@dataclass
class PrototypeSet:
    centroids: np.ndarray
    temperature: float = 1.0
    gamma: float = 0.1

    def __post_init__(self):
        self.centroids = np.asarray(self.centroids, dtype=np.float64)
        if self.centroids.ndim != 2 or len(self.centroids) < 2:
            raise ValueError("need at least two prototypes")
        if not np.all(np.isfinite(self.centroids)):
            raise ValueError("prototypes must be finite")
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")

    @property
    def k(self) -> int:
        return len(self.centroids)


def compute_prototypes(fused: np.ndarray, k: int, rng: Rng, temperature: float = 1.0,
                       gamma: float = 0.1) -> PrototypeSet:
    fused = np.asarray(fused, dtype=np.float64)
    if k > len(fused):
        raise ValueError(f"cannot form {k} prototypes from {len(fused)} samples")
    _, centroids, _ = kmeans(fused, k, rng, max_iter=20, n_init=4)
    return PrototypeSet(centroids, temperature, gamma)


def soft_assign(z, protos: PrototypeSet) -> Tensor:
    """Softmax over prototypes of cosine similarity divided by the temperature."""
    z = as_tensor(z)
    single = z.ndim == 1
    if single:
        z = z.reshape(1, -1)
    c = protos.centroids
    c_norm = np.linalg.norm(c, axis=1)
    if np.any(c_norm == 0):
        raise DomainError("cosine similarity undefined for a zero-norm prototype")
    z_norm = z.sq_norm(axis=1, keepdims=True)
    if np.any(z_norm.data == 0):
        raise DomainError("cosine similarity undefined for a zero-norm latent")
    sim = (z / z_norm.sqrt()) @ (c / c_norm[:, None]).T
    p = (sim * (1.0 / protos.temperature)).softmax()
    return p.reshape(-1) if single else p


def consensus_label(assignments: Sequence[np.ndarray], mask) -> np.ndarray:
    """Argmax of observed views' mean assignment; ties go to the lowest cluster id.

    Accepts per-view ``(K,)`` vectors with a length-V mask, or ``(N, K)``
    matrices with an ``(N, V)`` mask.
    """
    mask = np.asarray(mask, dtype=np.float64)
    counts = mask.sum(axis=-1)
    if np.any(np.atleast_1d(counts) == 0):
        raise ValueError("consensus needs at least one observed view")
    total = sum(np.asarray(p, dtype=np.float64) * (mask[..., v, None] if mask.ndim > 1 else mask[v])
                for v, p in enumerate(assignments))
    mean = total / (counts[..., None] if mask.ndim > 1 else counts)
    return np.argmax(mean, axis=-1)


def pc_loss(assignments: Sequence[Tensor], labels, gamma: float, entropy: str = "sample") -> Tensor:
    """Cross-entropy to consensus labels plus the gamma-weighted entropy term.

    ``entropy="sample"`` adds ``-gamma * sum_k p log p`` per (sample, view);
    ``"batch"`` instead rewards a spread-out batch-mean assignment.
    """
    labels = np.asarray(labels, dtype=np.intp)
    total, count = None, 0
    for p in assignments:
        p = as_tensor(p)
        n, k = p.shape
        onehot = np.zeros((n, k))
        onehot[np.arange(n), labels] = 1.0
        logp = p.clip_min(LOG_FLOOR).log()
        ce = -(logp * onehot).sum()
        if entropy == "sample":
            term = ce - (p * logp).sum() * gamma
        elif entropy == "batch":
            mean_p = p.mean(axis=0)
            term = ce + (mean_p * mean_p.clip_min(LOG_FLOOR).log()).sum() * (gamma * n)
        else:
            raise ValueError(f"unknown entropy mode {entropy!r}")
        total = term if total is None else total + term
        count += n
    if total is None or count == 0:
        return Tensor(0.0)
    return total * (1.0 / count)
