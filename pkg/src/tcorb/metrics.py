"""Intensity (RMSE / bias) and structural (standardized L2) evaluation."""

from __future__ import annotations

import math
from collections import defaultdict
from dataclasses import dataclass, field
from datetime import datetime
from typing import Mapping, Optional, Sequence

import numpy as np

from .errors import DataError
from .latent import PcBasis

BIAS_CONVENTION = "bias = mean(forecast - truth), kt"
PAIRS = (("A", "B"), ("A", "truth"), ("B", "truth"), ("persistence", "truth"))


@dataclass(frozen=True)
class IntensityPrediction:
    storm_id: str
    issue_time: datetime
    horizon: int
    model: str
    v_now: float
    v_hat: float
    p_ri: Optional[float] = None


@dataclass(frozen=True)
class MetricsRow:
    horizon: int
    model: str
    n: int
    rmse: float   # NaN when n == 0
    bias: float


@dataclass
class MetricsReport:
    rows: list
    unmatched: int = 0

    def get(self, horizon: int, model: str) -> Optional[MetricsRow]:
        for r in self.rows:
            if r.horizon == horizon and r.model == model:
                return r
        return None


def intensity_metrics(predictions: Sequence[IntensityPrediction],
                      truths: Mapping[tuple, float],
                      groups: Optional[Sequence[tuple[int, str]]] = None) -> MetricsReport:
    """RMSE and bias per (horizon, model); ``truths`` is keyed by (storm_id, issue_time, horizon)."""
    errors = defaultdict(list)
    unmatched = 0
    for p in predictions:
        truth = truths.get((p.storm_id, p.issue_time, p.horizon))
        if truth is None:
            unmatched += 1
            continue
        errors[(p.horizon, p.model)].append(p.v_hat - truth)
    keys = sorted(set(errors) | set(groups or ()))
    rows = []
    for h, m in keys:
        e = np.asarray(errors.get((h, m), []), dtype=float)
        if e.size == 0:
            rows.append(MetricsRow(h, m, 0, math.nan, math.nan))
        else:
            rows.append(MetricsRow(h, m, int(e.size), float(np.sqrt(np.mean(e ** 2))), float(e.mean())))
    return MetricsReport(rows, unmatched)


@dataclass(frozen=True)
class StructuralRow:
    horizon: int
    pair: str
    n: int
    mean_l2: float


def standardized_l2(a: np.ndarray, b: np.ndarray, basis: PcBasis) -> float:
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.size != basis.d or b.size != basis.d:
        raise DataError(f"vector length {a.size}/{b.size} does not match layout d={basis.d}")
    return float(np.linalg.norm((a - b) / basis.scale) / math.sqrt(basis.d))


def structural_metrics(forecasts: Mapping[str, Mapping[tuple, np.ndarray]],
                       truth: Mapping[tuple, np.ndarray], basis: PcBasis,
                       pairs: Sequence[tuple[str, str]] = PAIRS) -> list[StructuralRow]:
    """Mean standardized L2 distance per (horizon, pathway pair).

    ``forecasts`` maps pathway -> {(storm_id, issue_time, horizon): x_hat};
    ``truth`` uses the same keys.
    """
    sources = dict(forecasts)
    sources["truth"] = truth
    horizons = sorted({key[2] for src in sources.values() for key in src})
    rows = []
    for h in horizons:
        for left, right in pairs:
            if left not in sources or right not in sources:
                continue
            a, b = sources[left], sources[right]
            keys = sorted(k for k in a if k[2] == h and k in b)
            dists = [standardized_l2(a[k], b[k], basis) for k in keys]
            rows.append(StructuralRow(h, f"{left}-{right}", len(dists),
                                      float(np.mean(dists)) if dists else math.nan))
    return rows
