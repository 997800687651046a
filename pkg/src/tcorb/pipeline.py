"""End-to-end batch pipeline over an output directory.

Every stage reads its inputs from files written by earlier stages, so any
stage can be re-run on its own (the CLI subcommands do exactly that).
Layout of ``out``::

    synth/                 generated library (when the config has a synth section)
    samples.csv/.bin       synoptic samples and their storm-centred grids
    orb.csv/.layout.json   ORB vectors; orb_rejects.csv
    split.csv              storm -> train/validation/test (+ regime when known)
    models/                PCA basis, VAR, image dynamics, GAMs, lasso
    forecasts_{A,B,persistence}.csv
    predictions.csv, metrics_intensity.csv, metrics_structural.csv
    clusters.csv, cluster_summary.csv, cluster_embedding.json, analogs.csv
    plots/*.svg, run_manifest.json, DONE
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import platform
import shutil
from collections import Counter
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from datetime import timedelta
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.special import expit

from . import __version__
from .analogs import (Trajectory, adjusted_rand_index, distance_matrix, extract_windows, find_analogs,
                      spectral_cluster)
from .blockio import read_blocks, read_csv, write_blocks, write_csv, write_json, atomic_write_text
from .config import RunConfig
from .errors import DataError, StageError
from .experiment import (StormSeries, assign_split, fit_image_model, fit_orb_basis, fit_orb_dynamics,
                         intensity_truths, observed_states, orb_truths, structural_forecasts)
from .ingest import (CenteredImage, GridGeometry, build_samples, format_time, parse_time, read_hurdat2,
                     read_ir_stack)
from .intensity import (GamModel, LassoModel, _logistic_loss, build_design, fit_gam, fit_logistic_lasso,
                        label_rapid_change)
from .latent import PcBasis, project
from .metrics import BIAS_CONVENTION, IntensityPrediction, intensity_metrics, structural_metrics
from .orb import OrbConfig, OrbRejected, assemble_orb_vector, read_orb_table, write_orb_table
from .structfc import ImageDynamicsModel, VarModel, read_forecasts, write_forecasts
from .svgplot import line_plot
from .synth import DEFAULT_REGIMES, StormSimConfig, generate_library

log = logging.getLogger(__name__)

PATHWAY_NAMES = {"a": "A", "b": "B", "persistence": "persistence"}
SPLITS = ("train", "validation", "test")


# --------------------------------------------------------------------------
# helpers

def _regimes(cfg: RunConfig) -> list[StormSimConfig]:
    regs = [StormSimConfig.from_dict(r) for r in cfg.regimes] if cfg.regimes else list(DEFAULT_REGIMES)
    if cfg.synth is not None:
        regs = [replace(r, steps=cfg.synth.steps) for r in regs]
    return regs


def _inputs(cfg: RunConfig, out: Path) -> tuple[Path, list[Path]]:
    """HURDAT2 path and manifest files, from the config or the generated library."""
    if cfg.synth is not None and cfg.hurdat is None:
        lib = out / "synth"
        hurdat, sources = lib / "tracks.hurdat2", [lib / "frames"]
    else:
        if cfg.hurdat is None:
            raise DataError("config names no HURDAT2 input and has no synth section")
        hurdat, sources = cfg.resolve(cfg.hurdat), [cfg.resolve(m) for m in cfg.manifests]
    if not hurdat.is_file():
        raise DataError(f"{hurdat}: no such file")
    manifests = []
    for src in sources:
        if src.is_dir():
            manifests += sorted(src.glob("*.json"))
        elif src.is_file():
            manifests.append(src)
        else:
            raise DataError(f"{src}: no such file or directory")
    return hurdat, manifests


def _need(path: Path, stage: str) -> Path:
    if not path.exists():
        raise DataError(f"{path.name} not found; run the {stage} stage first")
    return path


def _ri_horizon(cfg: RunConfig) -> int:
    return 24 if 24 in cfg.horizons else int(max(cfg.horizons))


def _split_table(out: Path) -> dict[str, tuple[str, Optional[int]]]:
    rows = read_csv(_need(out / "split.csv", "split"))
    return {r["storm_id"]: (r["split"], int(r["regime"]) if r["regime"] else None) for r in rows}


def _load_images(cfg: RunConfig, out: Path) -> dict:
    rows = read_csv(_need(out / "samples.csv", "ingest"))
    blocks = read_blocks(out / "samples.bin")
    images = {}
    for r, temps in zip(rows, blocks):
        t = parse_time(r["time"])
        images[(r["storm_id"], t)] = CenteredImage(float(r["center_lat"]), float(r["center_lon"]),
                                                   cfg.half_width_km, cfg.step_km, temps, t)
    return images


def load_series(cfg: RunConfig, out: Path, with_images: bool = False) -> dict[str, list[StormSeries]]:
    """Per-split storm series rebuilt from samples.csv, orb.csv and split.csv."""
    vmax = {(r["storm_id"], parse_time(r["time"])): float(r["vmax"])
            for r in read_csv(_need(out / "samples.csv", "ingest"))}
    records, _ = read_orb_table(_need(out / "orb.csv", "extract"))
    split = _split_table(out)
    images = _load_images(cfg, out) if with_images else None
    grouped: dict[str, list] = {}
    for sid, t, x in records:
        grouped.setdefault(sid, []).append((t, x))
    result = {name: [] for name in SPLITS}
    for sid in sorted(grouped):
        rows = sorted(grouped[sid], key=lambda r: r[0])
        times = [t for t, _ in rows]
        name, regime = split[sid]
        s = StormSeries(sid, times, np.array([vmax[(sid, t)] for t in times]),
                        np.array([x for _, x in rows]),
                        [images[(sid, t)] for t in times] if images is not None else None, regime)
        result[name].append(s)
    return result


def _models(out: Path) -> Path:
    d = out / "models"
    d.mkdir(parents=True, exist_ok=True)
    return d


def _tracks(cfg: RunConfig, out: Path) -> dict:
    hurdat, _ = _inputs(cfg, out)
    return {t.storm_id: t for t in read_hurdat2(hurdat)}


def _read_pathway(out: Path, pathway: str, stage: str = "forecast"):
    return read_forecasts(_need(out / f"forecasts_{pathway}.csv", stage))


# --------------------------------------------------------------------------
# stages

def stage_synth(cfg: RunConfig, out: Path, jobs: int = 1) -> None:
    if cfg.synth is None:
        log.info("no synth section; skipping library generation")
        return
    s = cfg.synth
    lib = out / "synth"
    if lib.exists():
        shutil.rmtree(lib)
    generate_library(lib, s.n_storms, _regimes(cfg), seed=s.seed if s.seed is not None else cfg.seed,
                     geometry=GridGeometry(s.half_width_km, s.step_km), jitter_minutes=s.jitter_minutes)


def stage_ingest(cfg: RunConfig, out: Path, jobs: int = 1) -> None:
    hurdat, manifests = _inputs(cfg, out)
    rejects: list = []
    tracks = {t.storm_id: t for t in read_hurdat2(hurdat, rejects)}
    summary = Counter()
    samples = []
    for m in manifests:
        sid = json.loads(m.read_text(encoding="utf-8")).get("storm_id", m.stem)
        track = tracks.get(sid)
        if track is None:
            summary["manifest_without_track"] += 1
            log.warning("%s: no best track for %s", m, sid)
            continue
        samples += build_samples(read_ir_stack(m), track, cfg.cadence_hours, cfg.tolerance_minutes,
                                 cfg.half_width_km, cfg.step_km, summary)
    samples.sort(key=lambda s: (s.storm_id, s.time))
    write_csv(out / "samples.csv", ["storm_id", "time", "vmax", "center_lat", "center_lon"],
              [[s.storm_id, format_time(s.time), s.vmax, s.image.center_lat, s.image.center_lon]
               for s in samples])
    write_blocks(out / "samples.bin", [s.image.temps for s in samples])
    write_csv(out / "ingest_summary.csv", ["key", "count"],
              sorted([k, v] for k, v in (summary | Counter(tracks=len(tracks),
                                                         rejected_tracks=len(rejects))).items()))
    write_csv(out / "ingest_rejects.csv", ["storm_id", "line", "reason"],
              [[r.storm_id or "", r.line, r.reason] for r in rejects])
    if not samples:
        raise DataError("ingest produced no samples")


def _orb_job(args):
    temps, lat, lon, hw, step, t, cfg_dict = args
    try:
        img = CenteredImage(lat, lon, hw, step, temps, t)
        return assemble_orb_vector(img, OrbConfig.from_dict(cfg_dict)).values, None
    except OrbRejected as exc:
        return None, str(exc)


def stage_extract(cfg: RunConfig, out: Path, jobs: int = 1) -> None:
    images = _load_images(cfg, out)
    keys = sorted(images)
    cd = cfg.orb.to_dict()
    tasks = ((images[k].temps, images[k].center_lat, images[k].center_lon, cfg.half_width_km,
              cfg.step_km, k[1], cd) for k in keys)
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            results = list(ex.map(_orb_job, tasks, chunksize=16))
    else:
        results = [_orb_job(t) for t in tasks]
    records, rejects = [], []
    for (sid, t), (values, reason) in zip(keys, results):
        if values is None:
            rejects.append([sid, format_time(t), reason])
        else:
            records.append((sid, t, values))
    write_orb_table(out / "orb.csv", records, cfg.orb)
    write_csv(out / "orb_rejects.csv", ["storm_id", "time", "reason"], rejects)
    if not records:
        raise DataError("every sample was rejected by ORB extraction")


def stage_split(cfg: RunConfig, out: Path, jobs: int = 1) -> None:
    records, _ = read_orb_table(_need(out / "orb.csv", "extract"))
    regimes = {}
    lib = out / "synth" / "library.json"
    if cfg.synth is not None and lib.exists():
        regimes = {e["storm_id"]: e["regime"] for e in json.loads(lib.read_text())["storms"]}
    storms = sorted({sid for sid, _, _ in records})
    rows = [[sid, assign_split(sid, cfg.seed, cfg.split), regimes.get(sid, "")] for sid in storms]
    write_csv(out / "split.csv", ["storm_id", "split", "regime"], rows)
    if not any(r[1] == "train" for r in rows):
        raise DataError("no storm fell into the training split")


def fit_pca_stage(cfg: RunConfig, out: Path, jobs: int = 1) -> None:
    series = load_series(cfg, out)
    basis = fit_orb_basis(series["train"], cfg.pca_fraction, cfg.pca_k)
    basis.save(_models(out) / "orb_basis", meta={"fraction": cfg.pca_fraction, "k_rule": cfg.pca_k})


def _basis(out: Path) -> PcBasis:
    _need(out / "models" / "orb_basis.json", "fit --what pca")
    return PcBasis.load(out / "models" / "orb_basis")


def _var(out: Path) -> VarModel:
    _need(out / "models" / "orb_var.json", "fit --what var")
    return VarModel.load(out / "models" / "orb_var")


def _imgdyn(out: Path) -> ImageDynamicsModel:
    _need(out / "models" / "imgdyn_var.json", "fit --what imagedyn")
    return ImageDynamicsModel.load(out / "models" / "imgdyn")


def fit_var_stage(cfg: RunConfig, out: Path, jobs: int = 1) -> None:
    series = load_series(cfg, out)
    var = fit_orb_dynamics(series["train"], series["validation"], _basis(out), cfg.var_p,
                           cfg.var_lambdas, cfg.cadence_hours)
    var.save(_models(out) / "orb_var", meta={"lambda_grid": list(cfg.var_lambdas)})


def fit_imagedyn_stage(cfg: RunConfig, out: Path, jobs: int = 1) -> None:
    series = load_series(cfg, out, with_images=True)
    model = fit_image_model(series["train"], series["validation"], cfg.img_k, cfg.var_p,
                            cfg.var_lambdas, cfg.cadence_hours)
    model.save(_models(out) / "imgdyn")


def stage_forecast(cfg: RunConfig, out: Path, jobs: int = 1,
                   pathways: Sequence[str] = ("A", "B", "persistence")) -> None:
    need_images = "A" in pathways
    series = load_series(cfg, out, with_images=need_images)
    everything = [s for name in SPLITS for s in series[name]]
    basis, var = _basis(out), _var(out)
    img_model = _imgdyn(out) if need_images else None
    for pw in pathways:
        fcs = structural_forecasts(everything, basis, var, cfg.horizons, cfg.cadence_hours, (pw,),
                                   img_model, cfg.orb)
        write_forecasts(out / f"forecasts_{pw}.csv", fcs)


def _designs(cfg: RunConfig, out: Path, split: str, require_target: bool) -> dict:
    series = load_series(cfg, out)
    states = observed_states(series[split], _basis(out))
    fb = _read_pathway(out, "B")
    fa = _read_pathway(out, "A") if cfg.gam_use_pathway_a else None
    return {h: build_design(states, fb, h, cfg.cadence_hours, require_target, fa) for h in cfg.horizons}


def fit_gam_stage(cfg: RunConfig, out: Path, jobs: int = 1) -> None:
    for h, design in _designs(cfg, out, "train", True).items():
        model = fit_gam(design.X, design.y, cfg.gam_knots, cfg.gam_penalty,
                        feature_names=design.feature_names)
        d = model.to_dict()
        d["horizon"] = h
        write_json(_models(out) / f"gam_h{h}.json", d)


def _ri_data(cfg: RunConfig, out: Path, split: str, tracks: dict):
    h = _ri_horizon(cfg)
    design = _designs(cfg, out, split, False)[h]
    rows, labels, keys = [], [], []
    for x, key in zip(design.X, design.keys):
        lab = label_rapid_change(tracks[key[0]], key[1]) if key[0] in tracks else None
        if lab is not None:
            rows.append(x)
            labels.append(lab)
            keys.append(key)
    return np.array(rows).reshape(len(rows), design.X.shape[1]), np.array(labels, dtype=bool), keys


def fit_lasso_stage(cfg: RunConfig, out: Path, jobs: int = 1) -> None:
    tracks = _tracks(cfg, out)
    X, y, _ = _ri_data(cfg, out, "train", tracks)
    path = _models(out) / "lasso.json"
    if len(y) == 0 or y.min() == y.max():
        log.warning("rapid-change labels in the training split are single-class; lasso skipped")
        write_json(path, {"kind": "LassoModel", "skipped": "single-class training labels",
                          "n": int(len(y)), "positives": int(y.sum())})
        return
    Xv, yv, _ = _ri_data(cfg, out, "validation", tracks)
    best = None
    scores = []
    for lam in sorted(cfg.lasso_lambdas):
        m = fit_logistic_lasso(X, y, lam)
        if len(yv):
            Zv = (Xv - m.feature_mean) / m.feature_scale
            loss = _logistic_loss(Zv, yv.astype(float), m.intercept, m.weights)
        else:
            loss = m.objective_history[-1]
        scores.append({"lambda": lam, "validation_log_loss": loss})
        if best is None or loss < best[0]:
            best = (loss, m)
    d = best[1].to_dict()
    d.update({"horizon": _ri_horizon(cfg), "selection": scores, "n": int(len(y)), "positives": int(y.sum())})
    write_json(path, d)


def _load_lasso(out: Path) -> Optional[LassoModel]:
    d = json.loads(_need(out / "models" / "lasso.json", "fit --what lasso").read_text())
    return None if "skipped" in d else LassoModel.from_dict(d)


def stage_predict(cfg: RunConfig, out: Path, jobs: int = 1) -> list[IntensityPrediction]:
    designs = _designs(cfg, out, "test", False)
    lasso = _load_lasso(out)
    h_ri = _ri_horizon(cfg)
    preds = []
    for h, design in designs.items():
        gam = GamModel.from_dict(json.loads(_need(out / "models" / f"gam_h{h}.json", "fit --what gam")
                                            .read_text()))
        if design.X.shape[0] == 0:
            continue
        change = gam.predict_change(design.X)
        p_ri = lasso is not None and h == h_ri
        probs = expit(lasso.score(design.X)) if p_ri else None
        for i, (sid, t) in enumerate(design.keys):
            v_now = float(design.X[i, 0])
            v_hat = float(np.clip(v_now + change[i], 0.0, 250.0))
            preds.append(IntensityPrediction(sid, t, h, "gam", v_now, v_hat,
                                             float(probs[i]) if p_ri else None))
            preds.append(IntensityPrediction(sid, t, h, "persistence", v_now, v_now))
    preds.sort(key=lambda p: (p.storm_id, p.issue_time, p.horizon, p.model))
    write_csv(out / "predictions.csv",
              ["storm_id", "issue_time", "horizon", "model", "v_now", "v_hat", "p_ri"],
              [[p.storm_id, format_time(p.issue_time), p.horizon, p.model, p.v_now, p.v_hat, p.p_ri]
               for p in preds])
    return preds


def stage_evaluate(cfg: RunConfig, out: Path, jobs: int = 1) -> None:
    preds = stage_predict(cfg, out, jobs)
    series = load_series(cfg, out)
    test = series["test"]
    groups = [(h, m) for h in cfg.horizons for m in ("gam", "persistence")]
    report = intensity_metrics(preds, intensity_truths(test, cfg.horizons), groups)
    write_csv(out / "metrics_intensity.csv", ["horizon", "model", "n", "rmse", "bias"],
              [[r.horizon, r.model, r.n, r.rmse, r.bias] for r in report.rows],
              comments=[BIAS_CONVENTION, f"unmatched predictions: {report.unmatched}"])

    basis = _basis(out)
    test_ids = {s.storm_id for s in test}
    horizons = set(cfg.horizons)
    by_pathway = {}
    for pw in ("A", "B", "persistence"):
        path = out / f"forecasts_{pw}.csv"
        if path.exists():
            by_pathway[pw] = {(f.storm_id, f.issue_time, f.horizon_hours): f.x_hat
                              for f in read_forecasts(path)
                              if f.storm_id in test_ids and f.horizon_hours in horizons}
    rows = structural_metrics(by_pathway, orb_truths(test, cfg.horizons), basis)
    write_csv(out / "metrics_structural.csv", ["horizon", "pair", "n", "mean_l2"],
              [[r.horizon, r.pair, r.n, r.mean_l2] for r in rows],
              comments=["mean over issue times of ||(a - b) / scale|| / sqrt(d)"])


def _windows(cfg: RunConfig, series: Sequence[StormSeries], basis: PcBasis) -> list:
    out = []
    for s in series:
        if len(s.times):
            traj = Trajectory(s.storm_id, tuple(s.times), project(basis, s.orb))
            out += extract_windows(traj, cfg.window_length, cfg.window_stride, cfg.cadence_hours, s.regime)
    return out


def stage_cluster(cfg: RunConfig, out: Path, jobs: int = 1) -> None:
    series = load_series(cfg, out)
    windows = _windows(cfg, series["train"], _basis(out))
    if len(windows) < cfg.k_clusters:
        raise DataError(f"{len(windows)} training windows cannot form {cfg.k_clusters} clusters")
    if len(windows) > cfg.max_cluster_windows:
        idx = np.unique(np.round(np.linspace(0, len(windows) - 1, cfg.max_cluster_windows)).astype(int))
        windows = [windows[i] for i in idx]
    res = spectral_cluster(distance_matrix(windows), cfg.k_clusters, seed=cfg.seed)
    write_csv(out / "clusters.csv", ["storm_id", "start", "cluster", "regime"],
              [[w.storm_id, format_time(w.start), int(c), "" if w.label is None else w.label]
               for w, c in zip(windows, res.labels)])
    known = [w.label for w in windows if w.label is not None]
    ari = (adjusted_rand_index([w.label for w in windows], res.labels)
           if len(known) == len(windows) else math.nan)
    sizes = np.bincount(res.labels, minlength=cfg.k_clusters)
    write_csv(out / "cluster_summary.csv", ["key", "value"],
              [["n_windows", len(windows)], ["k_clusters", cfg.k_clusters], ["sigma", res.sigma],
               ["eigengap", res.eigengap], ["inertia", res.inertia], ["ari_vs_regime", ari]]
              + [[f"size_{c}", int(n)] for c, n in enumerate(sizes)])
    write_blocks(out / "cluster_embedding.bin", [res.embedding, res.eigenvalues])
    write_json(out / "cluster_embedding.json",
               {"kind": "ClusterEmbedding", "blocks": ["embedding", "eigenvalues"],
                "n_windows": len(windows), "sigma": res.sigma, "seed": res.seed})


def stage_analogs(cfg: RunConfig, out: Path, jobs: int = 1) -> None:
    series = load_series(cfg, out)
    basis = _basis(out)
    library = _windows(cfg, series["train"], basis)
    if not library:
        raise DataError("no training windows for the analog library")
    rows = []
    for q in _windows(cfg, series["test"], basis):
        for rank, a in enumerate(find_analogs(q, library, cfg.analogs_m), start=1):
            rows.append([q.storm_id, format_time(q.start), rank, a.storm_id, format_time(a.start),
                         a.distance])
    write_csv(out / "analogs.csv",
              ["query_storm", "query_start", "rank", "analog_storm", "analog_start", "distance"], rows)


def stage_plots(cfg: RunConfig, out: Path, jobs: int = 1) -> None:
    if not cfg.plots:
        return
    plots = out / "plots"
    plots.mkdir(parents=True, exist_ok=True)
    series = load_series(cfg, out)
    test = series["test"] or series["train"]
    s = next((x for x in test if len(x.times)), None)
    if s is None:
        return
    r = cfg.orb.r_grid
    n_r = r.size
    curves = [(format_time(s.times[i]), r, s.orb[i][:n_r]) for i in sorted({0, len(s.times) // 2,
                                                                             len(s.times) - 1})]
    atomic_write_text(plots / "orb_radial_mean.svg",
                      line_plot(curves, f"{s.storm_id} radial mean", "radius (km)", "T (K)"))
    preds = [r for r in read_csv(_need(out / "predictions.csv", "evaluate")) if r["storm_id"] == s.storm_id]
    t0 = s.times[0]

    def hours(t):
        return (t - t0).total_seconds() / 3600.0

    traces = [("observed", [hours(t) for t in s.times], s.vmax)]
    h = _ri_horizon(cfg)
    for model in ("gam", "persistence"):
        sel = [p for p in preds if p["model"] == model and int(p["horizon"]) == h]
        traces.append((f"{model} +{h}h",
                       [hours(parse_time(p["issue_time"]) + timedelta(hours=h)) for p in sel],
                       [float(p["v_hat"]) for p in sel]))
    atomic_write_text(plots / f"intensity_{s.storm_id}.svg",
                      line_plot(traces, f"{s.storm_id} intensity", "hours since first sample", "kt"))


def _versions() -> dict:
    import scipy
    return {"tcorb": __version__, "numpy": np.__version__, "scipy": scipy.__version__,
            "python": platform.python_version()}


def write_manifest(cfg: RunConfig, out: Path, stages: Sequence[str]) -> None:
    reports = {}
    for p in sorted(out.glob("*.csv")):
        reports[p.name] = hashlib.sha256(p.read_bytes()).hexdigest()
    write_json(out / "run_manifest.json", {
        "config": cfg.to_dict(), "config_hash": cfg.config_hash(), "seed": cfg.seed,
        "versions": _versions(), "stages": list(stages), "reports_sha256": reports,
    })


FIT_STAGES: dict[str, Callable] = {
    "pca": fit_pca_stage, "var": fit_var_stage, "imagedyn": fit_imagedyn_stage,
    "gam": fit_gam_stage, "lasso": fit_lasso_stage,
}

STAGES: tuple[tuple[str, Callable], ...] = (
    ("synth", stage_synth),
    ("ingest", stage_ingest),
    ("extract", stage_extract),
    ("split", stage_split),
    ("fit-pca", fit_pca_stage),
    ("fit-var", fit_var_stage),
    ("fit-imagedyn", fit_imagedyn_stage),
    ("forecast", stage_forecast),
    ("fit-gam", fit_gam_stage),
    ("fit-lasso", fit_lasso_stage),
    ("evaluate", stage_evaluate),
    ("cluster", stage_cluster),
    ("analogs", stage_analogs),
    ("plots", stage_plots),
)


def run_stage(name: str, fn: Callable, cfg: RunConfig, out: Path, jobs: int = 1, **kw) -> None:
    log.info("stage %s", name)
    try:
        fn(cfg, out, jobs, **kw)
    except StageError:
        raise
    except (DataError, ValueError, OSError, KeyError, np.linalg.LinAlgError) as exc:
        raise StageError(name, exc) from exc


def run_pipeline(cfg: RunConfig, out, jobs: int = 1) -> Path:
    """Run every stage in order; the DONE sentinel appears only after full success."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "DONE").unlink(missing_ok=True)
    for name, fn in STAGES:
        run_stage(name, fn, cfg, out, jobs)
    write_manifest(cfg, out, [n for n, _ in STAGES])
    atomic_write_text(out / "DONE", "ok\n")
    return out
