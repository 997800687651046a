"""Trajectory windows of latent coefficients: distances, spectral clustering, analogs."""

from __future__ import annotations

from dataclasses import dataclass
from datetime import datetime, timedelta
from typing import Optional, Sequence

import numpy as np

from .errors import DataError


@dataclass(frozen=True, eq=False)
class Trajectory:
    storm_id: str
    times: tuple
    coeffs: np.ndarray   # (len(times), k)


@dataclass(frozen=True, eq=False)
class Window:
    storm_id: str
    start: datetime
    coeffs: np.ndarray   # (L, k)
    label: Optional[int] = None   # generation regime, when known


def extract_windows(traj: Trajectory, length: int = 5, stride: int = 1,
                    cadence_hours: float = 6.0, label: Optional[int] = None) -> list[Window]:
    """Fixed-length windows that contain no gaps at the given cadence."""
    step = timedelta(hours=cadence_hours)
    out = []
    times = list(traj.times)
    for i in range(0, len(times) - length + 1, stride):
        span = times[i:i + length]
        if all(b - a == step for a, b in zip(span, span[1:])):
            out.append(Window(traj.storm_id, span[0], np.asarray(traj.coeffs[i:i + length], float), label))
    return out


def trajectory_distance(a, b) -> float:
    """sqrt(sum of squared coefficient differences / window length)."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape or a.ndim != 2:
        raise ValueError(f"window shapes differ: {a.shape} vs {b.shape}")
    return float(np.sqrt(np.sum((a - b) ** 2) / a.shape[0]))


def distance_matrix(windows: Sequence) -> np.ndarray:
    W = np.array([np.asarray(getattr(w, "coeffs", w), dtype=float) for w in windows])
    n, L = W.shape[0], W.shape[1]
    flat = W.reshape(n, -1)
    sq = np.sum(flat ** 2, axis=1)
    G = flat @ flat.T
    D2 = np.maximum(sq[:, None] + sq[None, :] - 2 * G, 0.0)
    # exact recomputation where cancellation dominates
    D = np.sqrt(D2 / L)
    close = D < 1e-6 * max(1.0, float(D.max(initial=0.0)))
    for i, j in zip(*np.nonzero(close)):
        D[i, j] = trajectory_distance(W[i], W[j])
    D = 0.5 * (D + D.T)
    np.fill_diagonal(D, 0.0)
    return D


@dataclass(frozen=True, eq=False)
class ClusterResult:
    labels: np.ndarray
    embedding: np.ndarray
    sigma: float
    seed: int
    eigenvalues: np.ndarray
    inertia: float

    @property
    def eigengap(self) -> float:
        m = self.embedding.shape[1]
        ev = self.eigenvalues
        return float(ev[m] - ev[m - 1]) if ev.size > m else float("nan")


def affinity(D: np.ndarray, sigma: float) -> np.ndarray:
    return np.exp(-D ** 2 / (2.0 * sigma ** 2))


def normalized_laplacian(A: np.ndarray) -> np.ndarray:
    deg = A.sum(axis=1)
    inv = np.where(deg > 0, 1.0 / np.sqrt(np.where(deg > 0, deg, 1.0)), 0.0)
    L = np.eye(A.shape[0]) - inv[:, None] * A * inv[None, :]
    return 0.5 * (L + L.T)


def kmeans_pp(Y: np.ndarray, k: int, seed: int, restarts: int = 10, max_iter: int = 300):
    """Lloyd's k-means with k-means++ seeding; best of ``restarts`` by within-cluster SS."""
    rng = np.random.Generator(np.random.PCG64(seed))
    n = Y.shape[0]
    best = None
    for _ in range(restarts):
        centers = [Y[rng.integers(n)]]
        d2 = np.sum((Y - centers[0]) ** 2, axis=1)
        for _ in range(1, k):
            tot = d2.sum()
            if tot <= 0:
                idx = int(rng.integers(n))
            else:
                idx = int(np.searchsorted(np.cumsum(d2), rng.random() * tot, side="right"))
                idx = min(idx, n - 1)
            centers.append(Y[idx])
            d2 = np.minimum(d2, np.sum((Y - Y[idx]) ** 2, axis=1))
        C = np.array(centers)
        labels = None
        for _ in range(max_iter):
            dist = np.sum((Y[:, None, :] - C[None, :, :]) ** 2, axis=2)
            new = np.argmin(dist, axis=1)
            if labels is not None and np.array_equal(new, labels):
                break
            labels = new
            for c in range(k):
                members = Y[labels == c]
                if len(members):
                    C[c] = members.mean(axis=0)
        inertia = float(np.sum((Y - C[labels]) ** 2))
        if best is None or inertia < best[1] - 1e-12:
            best = (labels.copy(), inertia)
    return best


def _canonical(labels: np.ndarray) -> np.ndarray:
    """Relabel so clusters are numbered by first appearance."""
    mapping = {}
    out = np.empty_like(labels)
    for i, l in enumerate(labels):
        out[i] = mapping.setdefault(int(l), len(mapping))
    return out


def spectral_cluster(distances, k_clusters: int, seed: int = 0, restarts: int = 10) -> ClusterResult:
    D = np.asarray(distances, dtype=float)
    n = D.shape[0]
    if D.shape != (n, n):
        raise DataError("distance matrix must be square")
    if not np.allclose(D, D.T, rtol=0, atol=1e-12) or (D < 0).any():
        raise DataError("distance matrix must be symmetric and non-negative")
    if k_clusters < 1 or n < k_clusters:
        raise DataError(f"need n >= k_clusters >= 1 (n={n}, k={k_clusters})")
    off = D[~np.eye(n, dtype=bool)]
    sigma = float(np.median(off)) if off.size else 0.0
    if sigma == 0.0:
        sigma = float(off.mean()) if off.size else 0.0
    if sigma == 0.0 or k_clusters == 1:
        return ClusterResult(np.zeros(n, dtype=int), np.zeros((n, k_clusters)), sigma, seed,
                             np.zeros(n), 0.0)
    A = affinity(D, sigma)
    L = normalized_laplacian(A)
    evals, evecs = np.linalg.eigh(L)
    U = evecs[:, :k_clusters]
    norms = np.linalg.norm(U, axis=1)
    Y = np.where(norms[:, None] > 0, U / np.where(norms > 0, norms, 1.0)[:, None], 0.0)
    labels, inertia = kmeans_pp(Y, k_clusters, seed, restarts)
    return ClusterResult(_canonical(labels), Y, sigma, seed, evals, inertia)


def adjusted_rand_index(a, b) -> float:
    a = np.asarray(a)
    b = np.asarray(b)
    _, ai = np.unique(a, return_inverse=True)
    _, bi = np.unique(b, return_inverse=True)
    table = np.zeros((ai.max() + 1, bi.max() + 1))
    np.add.at(table, (ai, bi), 1)
    comb = lambda x: x * (x - 1) / 2.0  # noqa: E731
    sum_ij = comb(table).sum()
    sum_a = comb(table.sum(axis=1)).sum()
    sum_b = comb(table.sum(axis=0)).sum()
    total = comb(float(a.size))
    expected = sum_a * sum_b / total if total else 0.0
    max_index = 0.5 * (sum_a + sum_b)
    if max_index == expected:
        return 1.0
    return float((sum_ij - expected) / (max_index - expected))


@dataclass(frozen=True)
class Analog:
    storm_id: str
    start: datetime
    distance: float


def find_analogs(query: Window, library: Sequence[Window], m: int = 5,
                 exclude_self: bool = True) -> list[Analog]:
    if not library:
        raise DataError("empty analog library")
    hits = []
    for w in library:
        if exclude_self and w.storm_id == query.storm_id:
            continue
        if w.coeffs.shape != query.coeffs.shape:
            raise DataError("library window shape differs from query")
        hits.append(Analog(w.storm_id, w.start, trajectory_distance(query.coeffs, w.coeffs)))
    hits.sort(key=lambda h: (h.distance, h.storm_id, h.start))
    return hits[:m]
