"""Structural forecasts: VAR on latent coefficients (pathway B), linear latent
image dynamics followed by ORB re-extraction (pathway A), and persistence."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from datetime import datetime, timedelta
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from .blockio import read_blocks, read_csv, write_blocks, write_csv, write_json
from .errors import DataError
from .ingest import T_MAX, T_MIN, CenteredImage, GridGeometry, format_time, parse_time
from .latent import PcBasis, fit_pca, project, reconstruct
from .orb import OrbConfig, assemble_orb_vector

log = logging.getLogger(__name__)

PATHWAYS = ("A", "B", "persistence")


@dataclass(frozen=True, eq=False)
class VarModel:
    coefs: np.ndarray       # (p, k, k); z_t ~ b + sum_i coefs[i-1] @ z_{t-i}
    intercept: np.ndarray   # (k,)
    ridge: float
    resid_var: np.ndarray   # (k,)

    @property
    def p(self) -> int:
        return self.coefs.shape[0]

    @property
    def k(self) -> int:
        return self.intercept.size

    def save(self, prefix, meta: Optional[dict] = None) -> None:
        prefix = Path(prefix)
        p, k = self.p, self.k
        write_blocks(prefix.with_suffix(".bin"),
                     [self.coefs.reshape(p * k, k), self.intercept, self.resid_var])
        write_json(prefix.with_suffix(".json"),
                   {"kind": "VarModel", "p": p, "k": k, "ridge": self.ridge,
                    "blocks": ["coefs", "intercept", "resid_var"], "meta": meta or {}})

    @classmethod
    def load(cls, prefix) -> "VarModel":
        import json
        prefix = Path(prefix)
        meta = json.loads(prefix.with_suffix(".json").read_text())
        coefs, b, rv = read_blocks(prefix.with_suffix(".bin"))
        p, k = meta["p"], meta["k"]
        return cls(coefs.reshape(p, k, k), b.ravel(), float(meta["ridge"]), rv.ravel())


def _lagged(series: Sequence[np.ndarray], p: int) -> tuple[np.ndarray, np.ndarray]:
    X, Y = [], []
    for z in series:
        for t in range(p, len(z)):
            X.append(np.concatenate([[1.0], *[z[t - i] for i in range(1, p + 1)]]))
            Y.append(z[t])
    return np.array(X), np.array(Y)


def fit_var(series: Sequence, p: int = 4, lam: float = 0.0) -> VarModel:
    """Pooled ridge least squares for z_t = b + sum_i A_i z_{t-i}; the intercept is unpenalized."""
    if p < 1:
        raise ValueError("order p must be >= 1")
    if lam < 0:
        raise ValueError("ridge must be non-negative")
    series = [np.atleast_2d(np.asarray(z, dtype=float)) for z in series]
    if not series:
        raise DataError("no sequences supplied")
    k = series[0].shape[1]
    if any(z.shape[1] != k for z in series):
        raise DataError("sequences disagree on dimension k")
    usable = [z for z in series if len(z) >= p + 1]
    if not usable:
        raise DataError(f"no sequence has at least p+1 = {p + 1} steps")
    X, Y = _lagged(usable, p)
    ncol = X.shape[1]
    if lam > 0:
        pen = np.zeros((ncol - 1, ncol))
        pen[:, 1:] = np.sqrt(lam) * np.eye(ncol - 1)
        X_aug = np.vstack([X, pen])
        Y_aug = np.vstack([Y, np.zeros((ncol - 1, k))])
    else:
        X_aug, Y_aug = X, Y
    B, *_ = np.linalg.lstsq(X_aug, Y_aug, rcond=None)
    resid = Y - X @ B
    intercept = B[0].copy()
    # C order, matching what load() returns, so reloaded models reproduce bit for bit
    coefs = np.ascontiguousarray(np.stack([B[1 + i * k:1 + (i + 1) * k].T for i in range(p)]))
    return VarModel(coefs, intercept, float(lam), resid.var(axis=0))


def forecast_var(model: VarModel, history, steps: int) -> np.ndarray:
    """Iterated one-step forecasts; returns (steps, k)."""
    history = np.atleast_2d(np.asarray(history, dtype=float))
    if len(history) < model.p:
        raise DataError(f"history of {len(history)} shorter than order {model.p}")
    lags = [history[-i] for i in range(1, model.p + 1)]  # lags[0] = most recent
    out = np.empty((steps, model.k))
    for s in range(steps):
        z = model.intercept.copy()
        for i in range(model.p):
            z = z + model.coefs[i] @ lags[i]
        out[s] = z
        lags = [z] + lags[:-1]
    return out


def one_step_rms(model: VarModel, series: Sequence) -> float:
    X, Y = _lagged([np.atleast_2d(np.asarray(z, dtype=float)) for z in series
                    if len(z) >= model.p + 1], model.p)
    if len(X) == 0:
        return float("nan")
    B = np.vstack([model.intercept[None, :]] + [model.coefs[i].T for i in range(model.p)])
    return float(np.sqrt(np.mean((Y - X @ B) ** 2)))


def select_var_ridge(train: Sequence, validation: Sequence, p: int,
                     grid: Iterable[float] = (0.01, 0.1, 1.0, 10.0)) -> float:
    """Ridge weight from ``grid`` with the lowest one-step validation RMS (ties -> smaller)."""
    grid = sorted(grid)
    scores = []
    for lam in grid:
        rms = one_step_rms(fit_var(train, p, lam), validation)
        scores.append(np.inf if np.isnan(rms) else rms)
    if all(np.isinf(scores)):
        return grid[0]
    return grid[int(np.argmin(scores))]


def persistence_forecast(history: Sequence, steps: int) -> list:
    if len(history) == 0:
        raise DataError("persistence needs a non-empty history")
    return [history[-1]] * steps


# --------------------------------------------------------------------------
# pathway A: linear latent image dynamics

@dataclass(frozen=True, eq=False)
class ImageDynamicsModel:
    image_basis: PcBasis
    dynamics: VarModel
    geometry: GridGeometry

    def save(self, prefix) -> None:
        prefix = Path(prefix)
        self.image_basis.save(prefix.with_name(prefix.name + "_basis"),
                              meta={"half_width_km": self.geometry.half_width_km,
                                    "step_km": self.geometry.step_km})
        self.dynamics.save(prefix.with_name(prefix.name + "_var"))

    @classmethod
    def load(cls, prefix) -> "ImageDynamicsModel":
        import json
        prefix = Path(prefix)
        bp = prefix.with_name(prefix.name + "_basis")
        meta = json.loads(bp.with_suffix(".json").read_text())["meta"]
        return cls(PcBasis.load(bp), VarModel.load(prefix.with_name(prefix.name + "_var")),
                   GridGeometry(meta["half_width_km"], meta["step_km"]))


def flatten_image(img) -> np.ndarray:
    """Flattened temps with missing pixels set to the image's non-missing mean."""
    t = np.asarray(img.temps if isinstance(img, CenteredImage) else img, dtype=float).ravel()
    miss = np.isnan(t)
    if miss.all():
        raise DataError("cannot flatten a fully missing image")
    if miss.any():
        t = np.where(miss, t[~miss].mean(), t)
    return t


def _geometry_of(images: Sequence[CenteredImage]) -> GridGeometry:
    geoms = {(im.half_width_km, im.step_km) for im in images}
    if len(geoms) != 1:
        raise DataError("images do not share one grid geometry")
    return GridGeometry(*geoms.pop())


def fit_image_dynamics(sequences: Sequence[Sequence[CenteredImage]], k_img: int = 64, p: int = 4,
                       lam: float = 0.1) -> ImageDynamicsModel:
    sequences = [list(s) for s in sequences]
    geom = _geometry_of([im for s in sequences for im in s])
    if not any(len(s) >= p + 1 for s in sequences):
        raise DataError(f"no image sequence has at least p+1 = {p + 1} frames")
    flat = [np.array([flatten_image(im) for im in s]) for s in sequences if s]
    basis = fit_pca(np.vstack(flat), k=k_img)
    latent = [project(basis, f) for f in flat]
    return ImageDynamicsModel(basis, fit_var(latent, p, lam), geom)


def forecast_images(model: ImageDynamicsModel, history: Sequence[CenteredImage], steps: int,
                    cadence_hours: float = 6.0) -> list[CenteredImage]:
    if len(history) < model.dynamics.p:
        raise DataError(f"history of {len(history)} shorter than order {model.dynamics.p}")
    if _geometry_of(history) != model.geometry:
        raise DataError("history grid does not match the training geometry")
    if steps == 0:
        return []
    z_hist = project(model.image_basis, np.array([flatten_image(im) for im in history]))
    z_fc = forecast_var(model.dynamics, z_hist, steps)
    frames = np.clip(reconstruct(model.image_basis, z_fc), T_MIN, T_MAX)
    last = history[-1]
    side = model.geometry.side
    out = []
    for s in range(steps):
        vt = None if last.valid_time is None else last.valid_time + timedelta(hours=cadence_hours * (s + 1))
        out.append(CenteredImage(last.center_lat, last.center_lon, last.half_width_km, last.step_km,
                                 frames[s].reshape(side, side), vt))
    return out


# --------------------------------------------------------------------------
# per-issue-time structural forecasts

@dataclass(frozen=True, eq=False)
class StructuralForecast:
    storm_id: str
    issue_time: datetime
    horizon_hours: int
    pathway: str
    z_hat: np.ndarray
    x_hat: np.ndarray


def _steps_for(horizons: Sequence[int], cadence_hours: float) -> int:
    steps = []
    for h in horizons:
        s = h / cadence_hours
        if h <= 0 or abs(s - round(s)) > 1e-9:
            raise ValueError(f"horizon {h} h is not a positive multiple of the cadence")
        steps.append(int(round(s)))
    return max(steps)


def forecast_pathway_b(storm_id: str, issue_time: datetime, orb_history: np.ndarray,
                       orb_basis: PcBasis, var: VarModel, horizons: Sequence[int],
                       cadence_hours: float = 6.0) -> list[StructuralForecast]:
    """Project observed ORB vectors, step the coefficients forward, reconstruct."""
    z_hist = project(orb_basis, np.atleast_2d(orb_history))
    z_fc = forecast_var(var, z_hist, _steps_for(horizons, cadence_hours))
    out = []
    for h in horizons:
        z = z_fc[int(round(h / cadence_hours)) - 1]
        out.append(StructuralForecast(storm_id, issue_time, int(h), "B", z, reconstruct(orb_basis, z)))
    return out


def forecast_pathway_a(storm_id: str, issue_time: datetime, image_history: Sequence[CenteredImage],
                       img_model: ImageDynamicsModel, orb_basis: PcBasis, cfg: OrbConfig,
                       horizons: Sequence[int], cadence_hours: float = 6.0) -> list[StructuralForecast]:
    """Step the imagery forward, then recompute ORB on each forecast frame."""
    frames = forecast_images(img_model, image_history, _steps_for(horizons, cadence_hours), cadence_hours)
    out = []
    for h in horizons:
        x = assemble_orb_vector(frames[int(round(h / cadence_hours)) - 1], cfg).values
        out.append(StructuralForecast(storm_id, issue_time, int(h), "A", project(orb_basis, x), x))
    return out


def forecast_persistence(storm_id: str, issue_time: datetime, orb_history: np.ndarray,
                         orb_basis: PcBasis, horizons: Sequence[int]) -> list[StructuralForecast]:
    x = np.atleast_2d(orb_history)[-1]
    z = project(orb_basis, x)
    return [StructuralForecast(storm_id, issue_time, int(h), "persistence", z, x.copy())
            for h in horizons]


def write_forecasts(path, forecasts: Sequence[StructuralForecast]) -> None:
    forecasts = sorted(forecasts, key=lambda f: (f.storm_id, f.issue_time, f.horizon_hours, f.pathway))
    k = forecasts[0].z_hat.size if forecasts else 0
    d = forecasts[0].x_hat.size if forecasts else 0
    header = (["storm_id", "issue_time", "horizon", "pathway"] + [f"z{i}" for i in range(k)]
              + [f"x{i}" for i in range(d)])
    rows = ([f.storm_id, format_time(f.issue_time), f.horizon_hours, f.pathway, *f.z_hat, *f.x_hat]
            for f in forecasts)
    write_csv(path, header, rows)


def read_forecasts(path) -> list[StructuralForecast]:
    rows = read_csv(path)
    out = []
    for r in rows:
        zs = np.array([float(v) for key, v in r.items() if key.startswith("z")])
        xs = np.array([float(v) for key, v in r.items() if key.startswith("x")])
        out.append(StructuralForecast(r["storm_id"], parse_time(r["issue_time"]), int(r["horizon"]),
                                      r["pathway"], zs, xs))
    return out
