"""Standardized PCA over ORB vectors (or flattened images)."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .blockio import read_blocks, write_blocks, write_json
from .errors import DataError

log = logging.getLogger(__name__)

SCALE_FLOOR = 1e-8


@dataclass(frozen=True, eq=False)
class PcBasis:
    mean: np.ndarray
    scale: np.ndarray
    components: np.ndarray        # (k, d), orthonormal rows
    singular_values: np.ndarray   # (k,)
    explained_fraction: np.ndarray  # (k,) cumulative

    @property
    def k(self) -> int:
        return self.components.shape[0]

    @property
    def d(self) -> int:
        return self.mean.size

    def standardize(self, x: np.ndarray) -> np.ndarray:
        return (np.asarray(x, dtype=float) - self.mean) / self.scale

    def save(self, prefix, meta: Optional[dict] = None) -> None:
        prefix = Path(prefix)
        write_blocks(prefix.with_suffix(".bin"),
                     [self.mean, self.scale, self.components, self.singular_values,
                      self.explained_fraction])
        write_json(prefix.with_suffix(".json"),
                   {"kind": "PcBasis", "k": self.k, "d": self.d,
                    "blocks": ["mean", "scale", "components", "singular_values",
                               "explained_fraction"],
                    "meta": meta or {}})

    @classmethod
    def load(cls, prefix) -> "PcBasis":
        mean, scale, comps, sv, ef = read_blocks(Path(prefix).with_suffix(".bin"))
        k = int(sv.size)
        return cls(mean.ravel(), scale.ravel(), comps.reshape(k, -1), sv.ravel(), ef.ravel())


def _select_rank(frac_all: np.ndarray, fraction: float) -> int:
    return int(np.searchsorted(frac_all, fraction - 1e-12) + 1)


def fit_pca(X, k: Optional[int] = None, fraction: float = 0.95) -> PcBasis:
    """Fit a standardized PCA basis.

    ``k`` fixes the rank; otherwise the smallest rank whose cumulative
    explained variance reaches ``fraction`` is kept. Rank never exceeds
    ``min(n - 1, d)``.
    """
    X = np.asarray(X, dtype=float)
    if X.ndim != 2:
        raise ValueError("X must be 2-D")
    n, d = X.shape
    if n < 2:
        raise DataError("PCA needs at least two rows")
    bad = ~np.isfinite(X).all(axis=1)
    if bad.any():
        raise DataError(f"non-finite value in row {int(np.flatnonzero(bad)[0])}")

    mean = X.mean(axis=0)
    scale = np.maximum(X.std(axis=0), SCALE_FLOOR)
    Z = (X - mean) / scale
    _, s, vt = np.linalg.svd(Z, full_matrices=False)
    var = s ** 2
    total = var.sum()
    if total > 0:
        frac_all = np.cumsum(var) / total
    else:
        frac_all = np.ones_like(var)

    k_max = min(n - 1, d)
    if k is None:
        if not 0 < fraction <= 1:
            raise ValueError("fraction must lie in (0, 1]")
        k_sel = _select_rank(frac_all, fraction)
    else:
        if k < 1:
            raise ValueError("k must be >= 1")
        k_sel = k
    if k_sel > k_max:
        log.info("PCA rank %d capped at min(n-1, d) = %d", k_sel, k_max)
        k_sel = k_max

    comps = vt[:k_sel].copy()
    for row in comps:
        j = int(np.argmax(np.abs(row)))
        if row[j] < 0:
            row *= -1.0
    return PcBasis(mean, scale, comps, s[:k_sel].copy(), frac_all[:k_sel].copy())


def project(basis: PcBasis, x) -> np.ndarray:
    """Latent coefficients of one vector (1-D) or many rows (2-D)."""
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != basis.d:
        raise ValueError(f"expected length {basis.d}, got {x.shape[-1]}")
    return basis.standardize(x) @ basis.components.T


def reconstruct(basis: PcBasis, z) -> np.ndarray:
    z = np.asarray(z, dtype=float)
    if z.shape[-1] != basis.k:
        raise ValueError(f"expected {basis.k} coefficients, got {z.shape[-1]}")
    return basis.mean + (z @ basis.components) * basis.scale
