"""In-memory experiment steps shared by the on-disk pipeline and the scripts.

A storm is handled as a :class:`StormSeries`: its synoptic sample times,
observed intensities, ORB vectors and (optionally) centred images.
"""

from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass
from datetime import datetime, timedelta
from typing import Iterable, Optional, Sequence

import numpy as np

from .errors import DataError
from .ingest import GridGeometry
from .intensity import ObservedState
from .latent import PcBasis, fit_pca, project
from .orb import OrbConfig, OrbRejected, assemble_orb_vector
from .structfc import (ImageDynamicsModel, StructuralForecast, VarModel, fit_var, flatten_image,
                       forecast_pathway_a, forecast_pathway_b, forecast_persistence, select_var_ridge)
from .synth import SyntheticStorm

log = logging.getLogger(__name__)


@dataclass(eq=False)
class StormSeries:
    storm_id: str
    times: list
    vmax: np.ndarray
    orb: np.ndarray                  # (T, d)
    images: Optional[list] = None
    regime: Optional[int] = None

    def index_of(self, t: datetime) -> Optional[int]:
        try:
            return self.times.index(t)
        except ValueError:
            return None


def assign_split(storm_id: str, seed: int, fractions: dict) -> str:
    """Deterministic storm-level split from a hash of (seed, storm_id)."""
    h = hashlib.sha256(f"{seed}:{storm_id}".encode()).digest()
    u = int.from_bytes(h[:8], "big") / 2.0 ** 64
    acc = 0.0
    for name in ("train", "validation", "test"):
        acc += fractions.get(name, 0.0)
        if u < acc:
            return name
    return "test"


def contiguous_runs(times: Sequence[datetime], cadence_hours: float) -> list[range]:
    step = timedelta(hours=cadence_hours)
    runs, start = [], 0
    for i in range(1, len(times) + 1):
        if i == len(times) or times[i] - times[i - 1] != step:
            runs.append(range(start, i))
            start = i
    return [r for r in runs if len(r)]


def issue_indices(times: Sequence[datetime], p: int, cadence_hours: float) -> list[int]:
    """Indices whose p most recent samples (inclusive) are gap-free."""
    out = []
    for run in contiguous_runs(times, cadence_hours):
        out.extend(i for i in run if i - run.start + 1 >= p)
    return out


def series_from_synthetic(storm: SyntheticStorm, cfg: OrbConfig, keep_images: bool = False,
                          images: Optional[Iterable] = None) -> StormSeries:
    """ORB series of a simulated storm; uses rounded (best-track) intensities."""
    imgs = list(images if images is not None else storm.images)
    times, vmax, orbs, kept = [], [], [], []
    for fix, img in zip(storm.track.fixes, imgs):
        try:
            orbs.append(assemble_orb_vector(img, cfg).values)
        except OrbRejected as exc:
            log.warning("%s %s: %s", storm.storm_id, fix.time, exc)
            continue
        times.append(fix.time)
        vmax.append(float(fix.vmax))
        kept.append(img)
    return StormSeries(storm.storm_id, times, np.array(vmax), np.array(orbs),
                       kept if keep_images else None, storm.regime)


def fit_orb_basis(train: Sequence[StormSeries], fraction: float = 0.95,
                  k: Optional[int] = None) -> PcBasis:
    X = np.vstack([s.orb for s in train if len(s.times)])
    return fit_pca(X, k=k, fraction=fraction)


def latent_runs(series: Sequence[StormSeries], basis: PcBasis, cadence_hours: float) -> list[np.ndarray]:
    out = []
    for s in series:
        if not len(s.times):
            continue
        z = project(basis, s.orb)
        out.extend(z[list(r)] for r in contiguous_runs(s.times, cadence_hours))
    return out


def fit_orb_dynamics(train: Sequence[StormSeries], validation: Sequence[StormSeries], basis: PcBasis,
                     p: int, lambdas: Sequence[float], cadence_hours: float) -> VarModel:
    tr = latent_runs(train, basis, cadence_hours)
    va = latent_runs(validation, basis, cadence_hours)
    lam = select_var_ridge(tr, va if va else tr, p, lambdas)
    return fit_var(tr, p, lam)


def fit_image_model(train: Sequence[StormSeries], validation: Sequence[StormSeries], k_img: int,
                    p: int, lambdas: Sequence[float], cadence_hours: float) -> ImageDynamicsModel:
    def runs(series):
        out = []
        for s in series:
            for r in contiguous_runs(s.times, cadence_hours):
                out.append(np.array([flatten_image(s.images[i]) for i in r]))
        return out

    tr, va = runs(train), runs(validation)
    if not tr:
        raise DataError("no training imagery for the image dynamics model")
    basis = fit_pca(np.vstack(tr), k=k_img)
    ztr = [project(basis, f) for f in tr]
    zva = [project(basis, f) for f in va]
    lam = select_var_ridge(ztr, zva if zva else ztr, p, lambdas)
    first = next(s for s in train if s.images)
    geom = GridGeometry(first.images[0].half_width_km, first.images[0].step_km)
    return ImageDynamicsModel(basis, fit_var(ztr, p, lam), geom)


def structural_forecasts(series: Sequence[StormSeries], basis: PcBasis, var: VarModel,
                         horizons: Sequence[int], cadence_hours: float,
                         pathways: Sequence[str] = ("B", "persistence"),
                         img_model: Optional[ImageDynamicsModel] = None,
                         orb_cfg: Optional[OrbConfig] = None) -> list[StructuralForecast]:
    p = var.p
    if "A" in pathways:
        if img_model is None or orb_cfg is None:
            raise ValueError("pathway A needs an image model and an ORB config")
        p = max(p, img_model.dynamics.p)
    out = []
    for s in series:
        for i in issue_indices(s.times, p, cadence_hours):
            t = s.times[i]
            if "B" in pathways:
                out += forecast_pathway_b(s.storm_id, t, s.orb[i - var.p + 1:i + 1], basis, var,
                                          horizons, cadence_hours)
            if "persistence" in pathways:
                out += forecast_persistence(s.storm_id, t, s.orb[:i + 1], basis, horizons)
            if "A" in pathways:
                q = img_model.dynamics.p
                try:
                    out += forecast_pathway_a(s.storm_id, t, s.images[i - q + 1:i + 1], img_model,
                                              basis, orb_cfg, horizons, cadence_hours)
                except OrbRejected as exc:
                    log.warning("%s %s: pathway A frame rejected: %s", s.storm_id, t, exc)
    return out


def observed_states(series: Sequence[StormSeries], basis: PcBasis) -> list[ObservedState]:
    out = []
    for s in series:
        if not len(s.times):
            continue
        z = project(basis, s.orb)
        out += [ObservedState(s.storm_id, t, float(v), z[i]) for i, (t, v) in enumerate(zip(s.times, s.vmax))]
    return out


def intensity_truths(series: Sequence[StormSeries], horizons: Sequence[int]) -> dict:
    """{(storm_id, issue_time, horizon): V(t+h)} over available sample pairs."""
    out = {}
    for s in series:
        lookup = dict(zip(s.times, s.vmax))
        for t in s.times:
            for h in horizons:
                v = lookup.get(t + timedelta(hours=h))
                if v is not None:
                    out[(s.storm_id, t, h)] = float(v)
    return out


def orb_truths(series: Sequence[StormSeries], horizons: Sequence[int]) -> dict:
    out = {}
    for s in series:
        lookup = {t: s.orb[i] for i, t in enumerate(s.times)}
        for t in s.times:
            for h in horizons:
                x = lookup.get(t + timedelta(hours=h))
                if x is not None:
                    out[(s.storm_id, t, h)] = x
    return out


# --------------------------------------------------------------------------
# self-contained experiments (used by scripts/ and the acceptance tests)

@dataclass
class SkillRow:
    horizon: int
    n: int
    rmse_gam: float
    rmse_persistence: float
    bias_gam: float

    @property
    def skill(self) -> float:
        return 1.0 - self.rmse_gam / self.rmse_persistence


def skill_experiment(n_storms: int = 200, seed: int = 7, horizons: Sequence[int] = (6, 12, 24),
                     pca_k: Optional[int] = 8, orb_cfg: OrbConfig = OrbConfig(),
                     regimes: Optional[Sequence] = None, var_p: int = 4,
                     var_lambdas: Sequence[float] = (0.01, 0.1, 1.0, 10.0),
                     split: Optional[dict] = None, cadence_hours: float = 6.0) -> list[SkillRow]:
    """GAM on [v_now, dv_past, z_obs, z_fc] vs persistence on held-out synthetic storms, in memory."""
    from .intensity import build_design, fit_gam
    from .synth import DEFAULT_REGIMES, simulate_library, storm_images

    split = split or {"train": 0.6, "validation": 0.2, "test": 0.2}
    storms = simulate_library(n_storms, regimes or DEFAULT_REGIMES, seed=seed, render=False)
    series = [series_from_synthetic(s, orb_cfg, images=storm_images(s)) for s in storms]
    parts = {name: [] for name in ("train", "validation", "test")}
    for s in series:
        parts[assign_split(s.storm_id, seed, split)].append(s)
    basis = fit_orb_basis(parts["train"], k=pca_k)
    var = fit_orb_dynamics(parts["train"], parts["validation"], basis, var_p, var_lambdas, cadence_hours)
    states = {name: observed_states(parts[name], basis) for name in ("train", "test")}
    rows = []
    for h in horizons:
        d_tr = build_design(states["train"], structural_forecasts(parts["train"], basis, var, [h],
                                                                   cadence_hours, ("B",)), h, cadence_hours)
        d_te = build_design(states["test"], structural_forecasts(parts["test"], basis, var, [h],
                                                                  cadence_hours, ("B",)), h, cadence_hours)
        gam = fit_gam(d_tr.X, d_tr.y, feature_names=d_tr.feature_names)
        v_hat = np.clip(d_te.v_now + gam.predict_change(d_te.X), 0.0, 250.0)
        err = v_hat - (d_te.v_now + d_te.y)
        rows.append(SkillRow(h, int(err.size), float(np.sqrt(np.mean(err ** 2))),
                             float(np.sqrt(np.mean(d_te.y ** 2))), float(err.mean())))
    return rows


def pathway_agreement(movies: Sequence[Sequence], n_train: int, orb_cfg: OrbConfig,
                      horizons: Sequence[int] = (6, 12, 24), k_img: int = 4,
                      pca_fraction: float = 0.9999, cadence_hours: float = 6.0):
    """Pathway A vs B vs truth on image movies; returns (structural rows, ORB basis).

    Both pathways are first-order and unregularized; every frame of the
    held-out movies with a full horizon ahead serves as an issue time.
    """
    from .metrics import structural_metrics
    from .structfc import fit_image_dynamics

    orbs = [np.array([assemble_orb_vector(im, orb_cfg).values for im in m]) for m in movies]
    train, test = range(n_train), range(n_train, len(movies))
    img_model = fit_image_dynamics([movies[i] for i in train], k_img=k_img, p=1, lam=0.0)
    basis = fit_pca(np.vstack([orbs[i] for i in train]), fraction=pca_fraction)
    var = fit_var([project(basis, orbs[i]) for i in train], p=1, lam=0.0)
    steps = {h: int(round(h / cadence_hours)) for h in horizons}
    fa, fb, truth = {}, {}, {}
    for i in test:
        sid = f"M{i:03d}"
        for t in range(len(movies[i]) - max(steps.values())):
            when = movies[i][t].valid_time
            for f in forecast_pathway_a(sid, when, movies[i][t:t + 1], img_model, basis, orb_cfg,
                                        horizons, cadence_hours):
                fa[(sid, when, f.horizon_hours)] = f.x_hat
            for f in forecast_pathway_b(sid, when, orbs[i][t:t + 1], basis, var, horizons, cadence_hours):
                fb[(sid, when, f.horizon_hours)] = f.x_hat
            for h in horizons:
                truth[(sid, when, h)] = orbs[i][t + steps[h]]
    return structural_metrics({"A": fa, "B": fb}, truth, basis), basis
