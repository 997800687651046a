"""Deterministic synthetic storms: parametric eye/eyewall IR scenes whose
convective depth drives intensity change.

All randomness comes from counter-based Philox streams keyed by
(seed, storm, step, purpose); draw i of a stream is the noise for pixel or
step i, so outputs do not depend on generation order.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, replace
from datetime import datetime, timedelta, timezone
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .blockio import atomic_write_text, write_json
from .ingest import (KM_PER_DEG, T_MAX, T_MIN, CenteredImage, GridGeometry, IrFrame, StormTrack,
                     TrackFix, format_hurdat2, format_time, interpolate_center, write_ir_stack)

V_FLOOR, V_CEIL = 15.0, 185.0

_PURPOSE = {"pixel": 1, "depth": 2, "intensity": 3, "depth0": 4, "track": 5, "jitter": 6, "frame": 7}


def noise_stream(key: Sequence[int], n: int) -> np.ndarray:
    """First ``n`` standard normals of the Philox stream identified by ``key``."""
    ss = np.random.SeedSequence([int(k) & 0xFFFFFFFF for k in key])
    return np.random.Generator(np.random.Philox(ss)).standard_normal(n)


def uniform_stream(key: Sequence[int], n: int) -> np.ndarray:
    ss = np.random.SeedSequence([int(k) & 0xFFFFFFFF for k in key])
    return np.random.Generator(np.random.Philox(ss)).random(n)


@dataclass(frozen=True)
class SceneParams:
    eye_radius: float = 20.0
    eyewall_outer_radius: float = 100.0
    eye_temp: float = 285.0
    eyewall_temp: float = 215.0
    background_temp: float = 290.0
    asym_amp: float = 0.0
    asym_phase: float = 0.0
    noise_sd: float = 0.0
    rng_seed: int = 0

    def validate(self, geometry: Optional[GridGeometry] = None) -> None:
        if not 0 < self.eye_radius < self.eyewall_outer_radius:
            raise ValueError("need 0 < eye_radius < eyewall_outer_radius")
        if geometry is not None and self.eyewall_outer_radius > geometry.half_width_km:
            raise ValueError("eyewall extends past the grid half-width")
        for name in ("eye_temp", "eyewall_temp", "background_temp"):
            if not T_MIN <= getattr(self, name) <= T_MAX:
                raise ValueError(f"{name} outside [{T_MIN}, {T_MAX}] K")
        if self.noise_sd < 0:
            raise ValueError("noise_sd must be >= 0")


def scene_temperature(params: SceneParams, x_km: np.ndarray, y_km: np.ndarray,
                      noise_key: Optional[Sequence[int]] = None) -> np.ndarray:
    """Evaluate the scene at (x east, y north) km offsets from the centre."""
    r = np.hypot(x_km, y_km)
    theta = np.arctan2(y_km, x_km)
    ring = params.eyewall_temp + params.asym_amp * np.cos(theta - params.asym_phase)
    T = np.where(r < params.eye_radius, params.eye_temp,
                 np.where(r < params.eyewall_outer_radius, ring, params.background_temp))
    if params.noise_sd > 0:
        key = noise_key if noise_key is not None else (params.rng_seed, _PURPOSE["pixel"])
        T = T + params.noise_sd * noise_stream(key, T.size).reshape(T.shape)
    return np.clip(T, T_MIN, T_MAX)


def render_scene(params: SceneParams, geometry: GridGeometry = GridGeometry(),
                 center: tuple[float, float] = (0.0, 0.0),
                 valid_time: Optional[datetime] = None) -> CenteredImage:
    params.validate(geometry)
    x, y = geometry.offsets()
    T = scene_temperature(params, x, y)
    return CenteredImage(center[0], center[1], geometry.half_width_km, geometry.step_km,
                         np.ascontiguousarray(T, dtype=float), valid_time)


@dataclass(frozen=True)
class StormSimConfig:
    steps: int = 40
    cadence_hours: float = 6.0
    rho: float = 0.9
    depth_noise_sd: float = 1.5
    gain: float = 0.8
    intensity_noise_sd: float = 2.0
    v0: float = 60.0
    depth_ref: float = 70.0
    regime: str = "deep-symmetric"
    depth_init: Optional[float] = None
    scene: SceneParams = field(default_factory=SceneParams)

    def validate(self) -> None:
        if not abs(self.rho) < 1:
            raise ValueError("|rho| must be < 1")
        if self.steps < 2:
            raise ValueError("steps must be >= 2")
        if self.cadence_hours <= 0 or self.depth_noise_sd < 0 or self.intensity_noise_sd < 0:
            raise ValueError("cadence and noise levels must be non-negative")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "StormSimConfig":
        d = dict(d)
        if "scene" in d:
            d["scene"] = SceneParams(**d["scene"])
        return cls(**d)


DEEP_SYMMETRIC = StormSimConfig(
    regime="deep-symmetric", depth_ref=75.0,
    scene=SceneParams(eye_radius=20.0, eyewall_outer_radius=90.0, eye_temp=282.0,
                      background_temp=290.0, asym_amp=2.0, asym_phase=0.0, noise_sd=1.0))
SHALLOW_ASYMMETRIC = StormSimConfig(
    regime="shallow-asymmetric", depth_ref=40.0,
    scene=SceneParams(eye_radius=32.0, eyewall_outer_radius=130.0, eye_temp=276.0,
                      background_temp=290.0, asym_amp=12.0, asym_phase=0.8, noise_sd=1.0))
DEFAULT_REGIMES = (DEEP_SYMMETRIC, SHALLOW_ASYMMETRIC)


@dataclass(frozen=True)
class SimState:
    depth: np.ndarray      # D_t
    intensity: np.ndarray  # V_t (continuous)


def simulate_dynamics(config: StormSimConfig, seed: int) -> SimState:
    """Depth/intensity recurrences only (no imagery)."""
    config.validate()
    n = config.steps
    eta = config.depth_noise_sd * noise_stream((seed, _PURPOSE["depth"]), n)
    eps = config.intensity_noise_sd * noise_stream((seed, _PURPOSE["intensity"]), n)
    if config.depth_init is not None:
        d0 = config.depth_init
    else:
        stationary_sd = config.depth_noise_sd / math.sqrt(1 - config.rho ** 2)
        d0 = config.depth_ref + stationary_sd * noise_stream((seed, _PURPOSE["depth0"]), 1)[0]
    D = np.empty(n)
    V = np.empty(n)
    D[0], V[0] = d0, config.v0
    for t in range(n - 1):
        D[t + 1] = config.depth_ref * (1 - config.rho) + config.rho * D[t] + eta[t]
        V[t + 1] = min(max(V[t] + config.gain * (D[t] - config.depth_ref) + eps[t], V_FLOOR), V_CEIL)
    return SimState(D, V)


def scene_at(config: StormSimConfig, template: SceneParams, depth: float, seed: int, t: int) -> SceneParams:
    eyewall = min(max(template.background_temp - depth, T_MIN), T_MAX)
    return replace(template, eyewall_temp=eyewall, rng_seed=_mix(seed, t))


def _mix(*parts: int) -> int:
    ss = np.random.SeedSequence([int(p) & 0xFFFFFFFF for p in parts])
    return int(ss.generate_state(1)[0])


def simulate_storm(config: StormSimConfig, template: Optional[SceneParams] = None, seed: int = 0,
                   geometry: GridGeometry = GridGeometry()) -> list[tuple[CenteredImage, float]]:
    """Rendered scenes and intensities for ``config.steps`` synoptic steps."""
    template = template if template is not None else config.scene
    state = simulate_dynamics(config, seed)
    out = []
    for t in range(config.steps):
        params = scene_at(config, template, state.depth[t], seed, t)
        out.append((render_scene(params, geometry), float(state.intensity[t])))
    return out


# --------------------------------------------------------------------------
# libraries

@dataclass(eq=False)
class SyntheticStorm:
    storm_id: str
    regime: int
    config: StormSimConfig
    seed: int
    track: StormTrack
    depth: np.ndarray
    intensity: np.ndarray   # continuous simulation values
    images: Optional[list] = None   # storm-centred scenes at synoptic times

    @property
    def times(self) -> list[datetime]:
        return self.track.times


def storm_id_for(i: int) -> str:
    """SY + 2-digit number + year; 99 storms per synthetic year starting 2000."""
    return f"SY{(i % 99) + 1:02d}{2000 + i // 99}"


def _status(v: int) -> str:
    return "TD" if v < 34 else ("TS" if v < 64 else "HU")


def _track_for(i: int, storm_id: str, config: StormSimConfig, seed: int, V: np.ndarray) -> StormTrack:
    u = uniform_stream((seed, _PURPOSE["track"]), 4)
    start = datetime(2000 + i // 99, 7, 1, tzinfo=timezone.utc) + timedelta(days=i % 99)
    lat0 = 10.0 + 10.0 * u[0]
    lon0 = -35.0 - 30.0 * u[1]
    dlat = 0.15 + 0.25 * u[2]
    dlon = -(0.3 + 0.4 * u[3])
    fixes = []
    for t in range(config.steps):
        v = int(round(V[t]))
        lat = round(lat0 + dlat * t, 1)
        lon = round(lon0 + dlon * t, 1)
        pmin = int(round(1012 - 1.1 * max(v - 20, 0)))
        fixes.append(TrackFix(start + timedelta(hours=config.cadence_hours * t), "", _status(v),
                              lat, lon, v, pmin))
    return StormTrack(storm_id, f"SYN{i:04d}", tuple(fixes))


def simulate_library(n_storms: int, regimes: Sequence[StormSimConfig] = DEFAULT_REGIMES, seed: int = 7,
                     geometry: Optional[GridGeometry] = GridGeometry(),
                     render: bool = True) -> list[SyntheticStorm]:
    """Storms assigned round-robin to ``regimes``; images rendered on storm-centred grids."""
    if n_storms < 1:
        raise ValueError("n_storms must be >= 1")
    if not regimes:
        raise ValueError("at least one regime required")
    storms = []
    for i in range(n_storms):
        r = i % len(regimes)
        cfg = regimes[r]
        s_seed = _mix(seed, i)
        state = simulate_dynamics(cfg, s_seed)
        sid = storm_id_for(i)
        track = _track_for(i, sid, cfg, s_seed, state.intensity)
        storm = SyntheticStorm(sid, r, cfg, s_seed, track, state.depth, state.intensity)
        if render:
            storm.images = list(storm_images(storm, geometry))
        storms.append(storm)
    return storms


def storm_images(storm: SyntheticStorm, geometry: GridGeometry = GridGeometry()):
    """Yield the storm-centred scene of every synoptic step (same images as ``render=True``)."""
    for t, fix in enumerate(storm.track.fixes):
        params = scene_at(storm.config, storm.config.scene, storm.depth[t], storm.seed, t)
        yield render_scene(params, geometry, (fix.lat, fix.lon), fix.time)


def render_frame(storm: SyntheticStorm, t: int, frame_time: datetime, geometry: GridGeometry,
                 margin_km: float = 24.0) -> IrFrame:
    """Lat/lon frame around the storm position at ``frame_time`` showing the scene of step t."""
    clat, clon = interpolate_center(storm.track, min(max(frame_time, storm.times[0]), storm.times[-1]))
    step_deg = geometry.step_km / KM_PER_DEG
    ext = geometry.half_width_km + margin_km
    half_rows = int(math.ceil(ext / KM_PER_DEG / step_deg))
    coslat = math.cos(math.radians(clat))
    half_cols = int(math.ceil(ext / (KM_PER_DEG * coslat) / step_deg))
    origin_lat = clat + half_rows * step_deg
    origin_lon = clon - half_cols * step_deg
    rows = np.arange(2 * half_rows + 1)
    cols = np.arange(2 * half_cols + 1)
    lat = origin_lat - rows[:, None] * step_deg
    lon = origin_lon + cols[None, :] * step_deg
    x = (lon - clon) * KM_PER_DEG * coslat
    y = (lat - clat) * KM_PER_DEG
    x, y = np.broadcast_arrays(x, y)
    params = scene_at(storm.config, storm.config.scene, storm.depth[t], storm.seed, t)
    T = scene_temperature(params, x, y, noise_key=(storm.seed, t, _PURPOSE["frame"]))
    return IrFrame(frame_time, float(origin_lat), float(origin_lon), float(step_deg),
                   T.astype(np.float32).astype(np.float64))


def generate_library(out_dir, n_storms: int, regimes: Sequence[StormSimConfig] = DEFAULT_REGIMES,
                     seed: int = 7, geometry: GridGeometry = GridGeometry(),
                     jitter_minutes: float = 30.0) -> Path:
    """Write tracks (HURDAT2), TCIR1 frame stacks and manifests; returns ``out_dir``.

    Frame times are offset from synoptic times by a deterministic jitter of
    at most ``jitter_minutes``.
    """
    out_dir = Path(out_dir)
    storms = simulate_library(n_storms, regimes, seed, geometry, render=False)
    atomic_write_text(out_dir / "tracks.hurdat2", format_hurdat2(s.track for s in storms))
    entries = []
    for s in storms:
        jit = uniform_stream((s.seed, _PURPOSE["jitter"]), len(s.times))
        frames = []
        for t, when in enumerate(s.times):
            offset = timedelta(minutes=int(round((2 * jit[t] - 1) * jitter_minutes)))
            frames.append(render_frame(s, t, when + offset, geometry))
        manifest = write_ir_stack(out_dir / "frames", s.storm_id, frames)
        entries.append({"storm_id": s.storm_id, "regime": s.regime, "regime_tag": s.config.regime,
                        "seed": s.seed, "manifest": str(manifest.relative_to(out_dir))})
    write_json(out_dir / "library.json", {
        "seed": seed, "n_storms": n_storms,
        "geometry": {"half_width_km": geometry.half_width_km, "step_km": geometry.step_km},
        "regimes": [r.to_dict() for r in regimes],
        "storms": entries,
    })
    return out_dir


# --------------------------------------------------------------------------
# noise-free linear-latent movies (exactly linear image dynamics)

@dataclass(frozen=True)
class LatentMovieSpec:
    """Images are mean + sum_j z_j * pattern_j with z following a stable VAR(1) about ``z_bar``.

    Patterns: a broad eyewall ring, a narrow eye ring and the cos/sin
    wavenumber-1 modes of an outer ring (radii and widths in km).
    """
    background_temp: float = 300.0
    ring_depth: float = 125.0
    ring_center_km: float = 70.0
    ring_width_km: float = 40.0
    eye_center_km: float = 30.0
    eye_width_km: float = 12.0
    asym_center_km: float = 80.0
    asym_width_km: float = 40.0
    z_bar: tuple = (0.0, 0.0, 6.0, 0.0)
    rotation: float = 0.5      # rad per step for the (ring, eye) pair
    radius: float = 0.9        # spectral radius of that pair
    decay: tuple = (0.8, 0.5)  # AR coefficients of the two asymmetry modes
    z0_sd: tuple = (4.0, 4.0, 2.0, 0.0)

    def transition(self) -> np.ndarray:
        c, s = math.cos(self.rotation), math.sin(self.rotation)
        A = np.zeros((4, 4))
        A[:2, :2] = self.radius * np.array([[c, -s], [s, c]])
        A[2, 2], A[3, 3] = self.decay
        return A

    def patterns(self, geometry: GridGeometry) -> tuple[np.ndarray, np.ndarray]:
        x, y = geometry.offsets()
        r = np.hypot(x, y)
        th = np.arctan2(y, x)
        ring = lambda c, w: np.exp(-((r - c) / w) ** 2)  # noqa: E731
        mean = self.background_temp - self.ring_depth * ring(self.ring_center_km, self.ring_width_km)
        outer = ring(self.asym_center_km, self.asym_width_km)
        pats = np.array([ring(self.ring_center_km, self.ring_width_km),
                         ring(self.eye_center_km, self.eye_width_km),
                         np.cos(th) * outer, np.sin(th) * outer])
        return mean, pats


def linear_latent_movies(n_movies: int, steps: int, geometry: GridGeometry = GridGeometry(200, 2),
                         spec: LatentMovieSpec = LatentMovieSpec(), seed: int = 0,
                         cadence_hours: float = 6.0) -> list[list[CenteredImage]]:
    """Noise-free movies whose pixels evolve by an exactly linear latent recurrence."""
    rng = np.random.default_rng(seed)
    mean, pats = spec.patterns(geometry)
    A = spec.transition()
    zbar = np.asarray(spec.z_bar, dtype=float)
    t0 = datetime(2001, 8, 1, tzinfo=timezone.utc)
    movies = []
    for _ in range(n_movies):
        z = zbar + rng.normal(0.0, spec.z0_sd)
        frames = []
        for t in range(steps):
            T = np.clip(mean + np.tensordot(z, pats, 1), T_MIN, T_MAX)
            frames.append(CenteredImage(20.0, -60.0, geometry.half_width_km, geometry.step_km, T,
                                        t0 + timedelta(hours=cadence_hours * t)))
            z = zbar + A @ (z - zbar)
        movies.append(frames)
    return movies
