"""Structure-to-intensity models.

Additive model: target is the intensity change dv = V(t+h) - V(t); each
feature gets a piecewise-linear smoother on quantile knots with a
second-difference penalty, fitted by backfitting.

Rapid-change classifier: L1-penalized logistic regression on standardized
features, solved by proximal gradient with backtracking.
"""

from __future__ import annotations

import logging
import warnings
from collections import Counter
from dataclasses import dataclass, field
from datetime import datetime, timedelta
from typing import Optional, Sequence

import numpy as np
from scipy.special import expit, log_expit

from .errors import DataError
from .ingest import StormTrack

log = logging.getLogger(__name__)

RI_WINDOW_HOURS = 24
RI_THRESHOLD_KT = 30
V_MIN, V_MAX = 0.0, 250.0


# --------------------------------------------------------------------------
# labels and design

def label_rapid_change(track: StormTrack, t: datetime, window_hours: float = RI_WINDOW_HOURS,
                       threshold: float = RI_THRESHOLD_KT, increase_only: bool = False) -> Optional[bool]:
    """True iff the intensity changes by at least ``threshold`` kt over the window.

    Returns None when either endpoint intensity is unavailable.
    """
    v0 = track.vmax_at(t)
    v1 = track.vmax_at(t + timedelta(hours=window_hours))
    if v0 is None or v1 is None:
        return None
    dv = v1 - v0
    return dv >= threshold if increase_only else abs(dv) >= threshold


@dataclass(frozen=True, eq=False)
class ObservedState:
    storm_id: str
    time: datetime
    vmax: float
    z: np.ndarray   # observed ORB coefficients


@dataclass(eq=False)
class Design:
    X: np.ndarray
    y: Optional[np.ndarray]
    keys: list            # (storm_id, issue_time)
    feature_names: list
    skipped: Counter = field(default_factory=Counter)

    @property
    def v_now(self) -> np.ndarray:
        return self.X[:, 0]


def feature_names(k: int, with_pathway_a: bool = False) -> list[str]:
    names = ["v_now", "dv_past"] + [f"z_obs{i}" for i in range(k)] + [f"z_fc{i}" for i in range(k)]
    if with_pathway_a:
        names += [f"z_fcA{i}" for i in range(k)]
    return names


def build_design(states: Sequence[ObservedState], forecasts: Sequence, horizon: int,
                 cadence_hours: float = 6.0, require_target: bool = True,
                 pathway_a: Optional[Sequence] = None) -> Design:
    """One row per issue time: [v_now, dv_past, z_obs, z_fc(horizon)] and target dv.

    ``forecasts`` are pathway-B structural forecasts; ``pathway_a``
    optionally appends pathway-A coefficients as extra features.
    """
    by_key = {(s.storm_id, s.time): s for s in states}
    fc = {(f.storm_id, f.issue_time): f for f in forecasts
          if f.horizon_hours == horizon and f.pathway == "B"}
    fa = None
    if pathway_a is not None:
        fa = {(f.storm_id, f.issue_time): f for f in pathway_a
              if f.horizon_hours == horizon and f.pathway == "A"}
    h = timedelta(hours=horizon)
    step = timedelta(hours=cadence_hours)
    rows, ys, keys = [], [], []
    skipped = Counter()
    k = None
    for key in sorted(by_key):
        s = by_key[key]
        target_state = by_key.get((s.storm_id, s.time + h))
        if require_target and target_state is None:
            skipped["no_target"] += 1
            continue
        f = fc.get(key)
        if f is None:
            skipped["no_forecast"] += 1
            continue
        if f.z_hat.size != s.z.size or (k is not None and s.z.size != k):
            raise DataError(f"{s.storm_id} {s.time}: z_obs/z_fc basis mismatch")
        k = s.z.size
        extra = []
        if fa is not None:
            a = fa.get(key)
            if a is None:
                skipped["no_forecast_a"] += 1
                continue
            extra = [a.z_hat]
        prev = by_key.get((s.storm_id, s.time - step))
        dv_past = 0.0 if prev is None else s.vmax - prev.vmax
        rows.append(np.concatenate([[s.vmax, dv_past], s.z, f.z_hat, *extra]))
        ys.append(np.nan if target_state is None else target_state.vmax - s.vmax)
        keys.append(key)
    kk = k if k is not None else 0
    X = np.array(rows) if rows else np.empty((0, 2 + (3 if fa is not None else 2) * kk))
    y = np.array(ys) if require_target else (np.array(ys) if ys else None)
    return Design(X, y, keys, feature_names(kk, fa is not None), skipped)


# --------------------------------------------------------------------------
# additive model

def hat_basis(x: np.ndarray, knots: np.ndarray) -> np.ndarray:
    """Piecewise-linear interpolation basis; linear extrapolation beyond the end knots."""
    x = np.asarray(x, dtype=float)
    K = knots.size
    seg = np.clip(np.searchsorted(knots, x, side="right") - 1, 0, K - 2)
    t = (x - knots[seg]) / (knots[seg + 1] - knots[seg])
    B = np.zeros((x.size, K))
    rows = np.arange(x.size)
    B[rows, seg] = 1.0 - t
    B[rows, seg + 1] += t
    return B


def second_difference(K: int) -> np.ndarray:
    D = np.zeros((max(K - 2, 0), K))
    for i in range(K - 2):
        D[i, i:i + 3] = (1.0, -2.0, 1.0)
    return D


@dataclass(eq=False)
class GamModel:
    intercept: float
    knots: list            # per feature; empty array for degenerate features
    coefs: list            # per feature
    penalty: float
    feature_names: list
    fitted: Optional[np.ndarray] = None        # training fitted change (excl. v_now offset)
    objective_history: list = field(default_factory=list)
    cycles: int = 0

    @property
    def n_features(self) -> int:
        return len(self.knots)

    def smoother(self, j: int, x) -> np.ndarray:
        x = np.atleast_1d(np.asarray(x, dtype=float))
        if self.knots[j].size < 2:
            return np.zeros(x.size)
        return hat_basis(x, self.knots[j]) @ self.coefs[j]

    def predict_change(self, X) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        if X.shape[1] != self.n_features:
            raise ValueError(f"expected {self.n_features} features, got {X.shape[1]}")
        out = np.full(X.shape[0], self.intercept)
        for j in range(self.n_features):
            out = out + self.smoother(j, X[:, j])
        return out

    def to_dict(self) -> dict:
        return {"kind": "GamModel", "intercept": self.intercept, "penalty": self.penalty,
                "feature_names": list(self.feature_names),
                "knots": [k.tolist() for k in self.knots], "coefs": [c.tolist() for c in self.coefs],
                "cycles": self.cycles}

    @classmethod
    def from_dict(cls, d: dict) -> "GamModel":
        return cls(d["intercept"], [np.array(k, dtype=float) for k in d["knots"]],
                   [np.array(c, dtype=float) for c in d["coefs"]], d["penalty"],
                   list(d["feature_names"]), cycles=d.get("cycles", 0))


def _knots_for(x: np.ndarray, n_knots: int) -> np.ndarray:
    return np.unique(np.quantile(x, np.linspace(0.0, 1.0, n_knots)))


def fit_gam(X, y, knots_per_feature: int = 10, penalty: float = 1.0, max_cycles: int = 100,
            tol: float = 1e-8, feature_names: Optional[Sequence[str]] = None) -> GamModel:
    X = np.atleast_2d(np.asarray(X, dtype=float))
    y = np.asarray(y, dtype=float)
    n, p = X.shape
    if n < 20:
        raise DataError(f"additive model needs >= 20 rows, got {n}")
    if y.shape != (n,) or not np.isfinite(y).all():
        raise DataError("targets must be finite with one per row")
    if not np.isfinite(X).all():
        raise DataError("features must be finite")
    names = list(feature_names) if feature_names is not None else [f"f{j}" for j in range(p)]

    knots, bases, solvers, pens = [], [], [], []
    for j in range(p):
        kn = _knots_for(X[:, j], knots_per_feature)
        if kn.size < 2:
            warnings.warn(f"feature {names[j]!r} is constant; its smoother is fixed at 0")
            knots.append(np.empty(0))
            bases.append(None)
            solvers.append(None)
            pens.append(None)
            continue
        B = hat_basis(X[:, j], kn)
        D = second_difference(kn.size)
        aug = np.vstack([B, np.sqrt(penalty) * D])
        knots.append(kn)
        bases.append(B)
        solvers.append(np.linalg.pinv(aug)[:, :n])
        pens.append(D)

    alpha = float(y.mean())
    coefs = [np.zeros(kn.size) for kn in knots]
    F = np.zeros((n, p))

    def objective():
        rss = float(np.sum((y - alpha - F.sum(axis=1)) ** 2))
        pen = sum(penalty * float(np.sum((D @ c) ** 2)) for D, c in zip(pens, coefs) if D is not None)
        return rss + pen

    history = [objective()]
    fitted = alpha + F.sum(axis=1)
    cycles = 0
    for cycles in range(1, max_cycles + 1):
        total = F.sum(axis=1)
        for j in range(p):
            if bases[j] is None:
                continue
            r = y - alpha - (total - F[:, j])
            beta = solvers[j] @ r
            fj = bases[j] @ beta
            m = float(fj.mean())
            beta = beta - m
            fj = fj - m
            alpha += m
            total = total - F[:, j] + fj
            F[:, j] = fj
            coefs[j] = beta
        history.append(objective())
        new_fitted = alpha + F.sum(axis=1)
        change = float(np.max(np.abs(new_fitted - fitted)))
        fitted = new_fitted
        if change < tol:
            break
    model = GamModel(alpha, knots, coefs, penalty, names, objective_history=history, cycles=cycles)
    model.fitted = model.predict_change(X)
    return model


def predict_intensity(model: GamModel, row, v_now: Optional[float] = None) -> float:
    """V_hat(t+h) = v_now + intercept + sum of smoothers, clamped to [0, 250] kt."""
    row = np.asarray(row, dtype=float)
    if row.ndim != 1 or row.size != model.n_features:
        raise ValueError(f"expected {model.n_features} features")
    if not np.isfinite(row).all():
        raise ValueError("features must be finite")
    if v_now is None:
        v_now = row[model.feature_names.index("v_now")] if "v_now" in model.feature_names else row[0]
    v = v_now + float(model.predict_change(row[None, :])[0])
    return float(min(max(v, V_MIN), V_MAX))


# --------------------------------------------------------------------------
# logistic lasso

@dataclass(eq=False)
class LassoModel:
    weights: np.ndarray      # on standardized features
    intercept: float
    lam: float
    feature_mean: np.ndarray
    feature_scale: np.ndarray
    objective_history: list = field(default_factory=list)
    iterations: int = 0

    def score(self, X) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        if X.shape[1] != self.weights.size:
            raise ValueError(f"expected {self.weights.size} features, got {X.shape[1]}")
        return self.intercept + ((X - self.feature_mean) / self.feature_scale) @ self.weights

    def to_dict(self) -> dict:
        return {"kind": "LassoModel", "weights": self.weights.tolist(), "intercept": self.intercept,
                "lam": self.lam, "feature_mean": self.feature_mean.tolist(),
                "feature_scale": self.feature_scale.tolist(), "iterations": self.iterations}

    @classmethod
    def from_dict(cls, d: dict) -> "LassoModel":
        return cls(np.array(d["weights"], dtype=float), d["intercept"], d["lam"],
                   np.array(d["feature_mean"], dtype=float), np.array(d["feature_scale"], dtype=float),
                   iterations=d.get("iterations", 0))


def _logistic_loss(Z: np.ndarray, y: np.ndarray, b: float, w: np.ndarray) -> float:
    s = b + Z @ w
    return float(-np.mean(y * log_expit(s) + (1 - y) * log_expit(-s)))


def lambda_max(X, labels) -> float:
    """Smallest L1 weight for which the all-zero weight vector is optimal."""
    X = np.asarray(X, dtype=float)
    y = np.asarray(labels, dtype=float)
    Z = (X - X.mean(axis=0)) / np.maximum(X.std(axis=0), 1e-8)
    return float(np.max(np.abs(Z.T @ (y - y.mean())) / len(y)))


def fit_logistic_lasso(X, labels, lam: float, max_iter: int = 10_000, tol: float = 1e-10,
                       step_tol: float = 1e-12, allow_single_class: bool = False) -> LassoModel:
    """Minimize mean logistic loss + lam * ||w||_1 (intercept unpenalized).

    Stops once the objective decrease falls below ``tol`` and the parameter
    step below ``step_tol``, or after ``max_iter`` iterations.
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    y = np.asarray(labels, dtype=bool).astype(float)
    n, p = X.shape
    if lam < 0:
        raise ValueError("lam must be non-negative")
    if y.shape != (n,):
        raise DataError("one label per row required")
    if (y.min() == y.max()) and not allow_single_class:
        raise DataError("labels contain a single class")
    mu = X.mean(axis=0)
    sd = np.maximum(X.std(axis=0), 1e-8)
    Z = (X - mu) / sd

    def F(b, w):
        return _logistic_loss(Z, y, b, w) + lam * float(np.abs(w).sum())

    b, w = 0.0, np.zeros(p)
    obj = F(b, w)
    history = [obj]
    t = 4.0
    it = 0
    for it in range(1, max_iter + 1):
        r = expit(b + Z @ w) - y
        gb = float(r.mean())
        gw = Z.T @ r / n
        f0 = obj - lam * float(np.abs(w).sum())
        while True:
            b_new = b - t * gb
            v = w - t * gw
            w_new = np.sign(v) * np.maximum(np.abs(v) - t * lam, 0.0)
            db, dw = b_new - b, w_new - w
            f_new = _logistic_loss(Z, y, b_new, w_new)
            quad = f0 + gb * db + float(gw @ dw) + (db * db + float(dw @ dw)) / (2 * t)
            if f_new <= quad + 1e-15 or t < 1e-12:
                break
            t *= 0.5
        new_obj = f_new + lam * float(np.abs(w_new).sum())
        if new_obj > obj:
            break
        step = max(abs(db), float(np.max(np.abs(dw))) if p else 0.0)
        decrease = obj - new_obj
        b, w, obj = b_new, w_new, new_obj
        history.append(obj)
        if decrease < tol and step < step_tol:
            break
    return LassoModel(w, b, float(lam), mu, sd, history, it)


def predict_ri(model: LassoModel, row) -> float:
    row = np.asarray(row, dtype=float)
    if row.ndim != 1 or row.size != model.weights.size:
        raise ValueError(f"expected {model.weights.size} features")
    if not np.isfinite(row).all():
        raise ValueError("features must be finite")
    return float(expit(model.score(row[None, :])[0]))
