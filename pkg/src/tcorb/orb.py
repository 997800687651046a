"""ORB structural summaries of a storm-centred IR image.

Four one-dimensional functions are computed per image:

* radial mean / population stdev of brightness temperature per annulus,
* amplitude of the azimuthal wavenumber-k harmonic per annulus,
* cold-cloud fraction (share of pixels at or below a threshold) per threshold.

Annulus sums are accumulated per 90-degree rotation orbit of pixels, with the
orbit members sorted before adding, so every profile is bit-identical under
90/180/270 degree rotations of the grid.
"""

from __future__ import annotations

import functools
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Literal, Optional, Sequence

import numpy as np

from .blockio import atomic_write_text, fmt, read_csv, write_csv
from .errors import DataError
from .ingest import CenteredImage, format_time, parse_time

RADIUS = "radius-km"
THRESHOLD = "threshold-K"


class OrbRejected(DataError):
    """Sample cannot yield a dense ORB vector."""


@dataclass(frozen=True)
class OrbConfig:
    r_max_km: float = 400.0
    r_step_km: float = 4.0
    c_min: float = 180.0
    c_max: float = 310.0
    c_step: float = 2.0
    asym_wavenumbers: tuple[int, ...] = (1,)
    max_missing_fraction: float = 0.5

    def __post_init__(self):
        if self.r_step_km <= 0 or self.c_step <= 0:
            raise ValueError("grid steps must be positive")
        if self.r_max_km < self.r_step_km or self.c_max < self.c_min:
            raise ValueError("grids must be non-empty")
        if any(k < 1 for k in self.asym_wavenumbers):
            raise ValueError("wavenumbers must be >= 1")
        object.__setattr__(self, "asym_wavenumbers", tuple(int(k) for k in self.asym_wavenumbers))

    @property
    def r_edges(self) -> np.ndarray:
        n = int(round(self.r_max_km / self.r_step_km))
        return self.r_step_km * np.arange(n + 1, dtype=float)

    @property
    def r_grid(self) -> np.ndarray:
        e = self.r_edges
        return 0.5 * (e[:-1] + e[1:])

    @property
    def c_grid(self) -> np.ndarray:
        n = int(round((self.c_max - self.c_min) / self.c_step)) + 1
        return self.c_min + self.c_step * np.arange(n, dtype=float)

    def to_dict(self) -> dict:
        return {"r_max_km": self.r_max_km, "r_step_km": self.r_step_km, "c_min": self.c_min,
                "c_max": self.c_max, "c_step": self.c_step,
                "asym_wavenumbers": list(self.asym_wavenumbers),
                "max_missing_fraction": self.max_missing_fraction}

    @classmethod
    def from_dict(cls, d: dict) -> "OrbConfig":
        d = dict(d)
        if "asym_wavenumbers" in d:
            d["asym_wavenumbers"] = tuple(d["asym_wavenumbers"])
        return cls(**d)


@dataclass(frozen=True, eq=False)
class OrbFunction:
    kind: str
    grid: np.ndarray
    values: np.ndarray  # NaN where missing
    name: str = ""

    @property
    def missing(self) -> np.ndarray:
        return np.isnan(self.values)


@dataclass(frozen=True)
class LayoutEntry:
    name: str
    kind: str
    offset: int
    length: int


@dataclass(frozen=True, eq=False)
class OrbVector:
    values: np.ndarray
    layout: tuple[LayoutEntry, ...]

    @property
    def d(self) -> int:
        return int(self.values.size)

    def component(self, name: str) -> np.ndarray:
        for e in self.layout:
            if e.name == name:
                return self.values[e.offset:e.offset + e.length]
        raise KeyError(name)


def orb_layout(cfg: OrbConfig) -> tuple[LayoutEntry, ...]:
    nr, nc = cfg.r_grid.size, cfg.c_grid.size
    names = [("radial_mean", RADIUS, nr), ("radial_stdev", RADIUS, nr)]
    names += [(f"asym_k{k}", RADIUS, nr) for k in cfg.asym_wavenumbers]
    names.append(("levelset_area", THRESHOLD, nc))
    out, off = [], 0
    for name, kind, n in names:
        out.append(LayoutEntry(name, kind, off, n))
        off += n
    return tuple(out)


# --------------------------------------------------------------------------
# geometry caches

@dataclass(frozen=True, eq=False)
class _Geometry:
    ann: np.ndarray          # annulus index per flat pixel, -1 outside the radial grid
    east: np.ndarray         # integer lattice offsets per flat pixel, east and north
    north: np.ndarray
    orbits: np.ndarray       # (n_orbits, 4) flat pixel indices; padding index = n_pixels
    orbit_ann: np.ndarray    # annulus per orbit (-1 outside)
    total: np.ndarray        # pixels per annulus
    beyond: np.ndarray       # annulus extends past the image
    n_ann: int

    def __post_init__(self):
        keep = self.ann >= 0
        object.__setattr__(self, "ann_keep", keep)
        object.__setattr__(self, "ann_kept", self.ann[keep])
        object.__setattr__(self, "ann_clipped", np.where(keep, self.ann, 0))
        okeep = self.orbit_ann >= 0
        object.__setattr__(self, "orbit_keep", okeep)
        object.__setattr__(self, "orbit_ann_kept", self.orbit_ann[okeep])
        object.__setattr__(self, "_harm", {})

    def harmonics(self, k: int) -> tuple[np.ndarray, np.ndarray]:
        """cos(k theta), sin(k theta) per flat pixel, 0 at the centre.

        Built from the integer power (x + iy)^k divided by r^k, so a 90 degree
        rotation maps the tables onto each other with exact sign flips.
        """
        if k not in self._harm:
            x, y = self.east, self.north
            re, im = np.ones_like(x), np.zeros_like(x)
            for _ in range(k):
                re, im = re * x - im * y, re * y + im * x
            r2 = (x * x + y * y).astype(float)
            rk = r2 ** (k // 2) if k % 2 == 0 else np.sqrt(r2) ** k
            with np.errstate(invalid="ignore", divide="ignore"):
                c = np.where(r2 > 0, re / rk, 0.0)
                s = np.where(r2 > 0, im / rk, 0.0)
            self._harm[k] = (c, s)
        return self._harm[k]


@functools.lru_cache(maxsize=16)
def _geometry(side: int, step_km: float, edges: tuple[float, ...]) -> _Geometry:
    m = side // 2
    ii, jj = np.meshgrid(np.arange(side), np.arange(side), indexing="ij")
    a = (ii - m).ravel()          # row offset (southward)
    b = (jj - m).ravel()          # column offset (eastward)
    r = np.sqrt((a * a + b * b).astype(float)) * step_km
    edges_arr = np.asarray(edges)
    n_ann = edges_arr.size - 1
    ann = np.searchsorted(edges_arr, r, side="right") - 1
    ann[(ann < 0) | (ann >= n_ann)] = -1

    npix = side * side
    flat = lambda p, q: (p + m) * side + (q + m)  # noqa: E731
    rep = (a > 0) & (b >= 0)
    pa, pb = a[rep], b[rep]
    orbits = np.stack([flat(pa, pb), flat(pb, -pa), flat(-pa, -pb), flat(-pb, pa)], axis=1)
    center = np.array([[flat(0, 0), npix, npix, npix]])
    orbits = np.concatenate([center, orbits], axis=0)
    orbit_ann = ann[orbits[:, 0]]

    total = np.bincount(ann[ann >= 0], minlength=n_ann)
    half_width = m * step_km
    beyond = edges_arr[1:] > half_width * (1 + 1e-12)
    return _Geometry(ann, b, -a, orbits, orbit_ann, total, beyond, n_ann)


def _geom_for(img: CenteredImage, cfg: OrbConfig) -> _Geometry:
    return _geometry(img.temps.shape[0], float(img.step_km), tuple(cfg.r_edges.tolist()))


def _orbit_sums(g: _Geometry, pix_values: np.ndarray) -> np.ndarray:
    """Per-annulus sums of a per-pixel quantity, invariant to 90-degree grid rotations."""
    padded = np.append(pix_values, 0.0)
    v = padded[g.orbits]
    a, b, c, d = v[:, 0], v[:, 1], v[:, 2], v[:, 3]
    # 4-element sorting network so the summation order is rotation-independent
    a, b = np.minimum(a, b), np.maximum(a, b)
    c, d = np.minimum(c, d), np.maximum(c, d)
    a, c = np.minimum(a, c), np.maximum(a, c)
    b, d = np.minimum(b, d), np.maximum(b, d)
    b, c = np.minimum(b, c), np.maximum(b, c)
    # outer pairs first: negating every member reverses the order, which this sum absorbs exactly
    s = (a + d) + (b + c)
    return np.bincount(g.orbit_ann_kept, weights=s[g.orbit_keep], minlength=g.n_ann)


@dataclass(frozen=True, eq=False)
class _AnnulusStats:
    n: np.ndarray         # valid pixels per annulus
    mean: np.ndarray      # NaN where n == 0
    usable: np.ndarray    # passes the missing-fraction rule
    valid: np.ndarray     # flat per-pixel validity
    dev: np.ndarray       # flat deviation from the annulus mean, 0 where missing/outside


def _annulus_stats(img: CenteredImage, cfg: OrbConfig, g: _Geometry) -> _AnnulusStats:
    t = img.temps.ravel()
    valid = ~np.isnan(t)
    tz = np.where(valid, t, 0.0)
    n = np.bincount(g.ann_kept, weights=valid[g.ann_keep], minlength=g.n_ann)
    s = _orbit_sums(g, tz)
    with np.errstate(invalid="ignore", divide="ignore"):
        mean = np.where(n > 0, s / np.where(n > 0, n, 1.0), np.nan)
        miss_frac = np.where(g.total > 0, (g.total - n) / np.where(g.total > 0, g.total, 1), 1.0)
    usable = (g.total > 0) & (n > 0) & ~g.beyond & (miss_frac <= cfg.max_missing_fraction)
    pix_mean = np.nan_to_num(mean)[g.ann_clipped]
    dev = np.where(valid & (g.ann >= 0), tz - pix_mean, 0.0)
    return _AnnulusStats(n, mean, usable, valid, dev)


def _stdev(g: _Geometry, st: _AnnulusStats) -> np.ndarray:
    ss = _orbit_sums(g, st.dev * st.dev)
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.sqrt(ss / np.where(st.n > 0, st.n, 1.0))


def _harmonic(g: _Geometry, st: _AnnulusStats, k: int) -> np.ndarray:
    cos_k, sin_k = g.harmonics(k)
    re = _orbit_sums(g, st.dev * cos_k)
    im = _orbit_sums(g, st.dev * sin_k)
    with np.errstate(invalid="ignore", divide="ignore"):
        return 2.0 / st.n * np.hypot(re, im)


def radial_profile(img: CenteredImage, statistic: Literal["mean", "stdev"] = "mean",
                   cfg: OrbConfig = OrbConfig()) -> OrbFunction:
    g = _geom_for(img, cfg)
    st = _annulus_stats(img, cfg, g)
    if statistic == "mean":
        vals = st.mean
    elif statistic == "stdev":
        vals = _stdev(g, st)
    else:
        raise ValueError(f"unknown statistic {statistic!r}")
    return OrbFunction(RADIUS, cfg.r_grid, np.where(st.usable, vals, np.nan), f"radial_{statistic}")


def asymmetry_profile(img: CenteredImage, k: int = 1, cfg: OrbConfig = OrbConfig()) -> OrbFunction:
    """Amplitude (K) of the wavenumber-k azimuthal harmonic in each annulus."""
    if k < 1:
        raise ValueError("wavenumber must be >= 1")
    g = _geom_for(img, cfg)
    st = _annulus_stats(img, cfg, g)
    vals = _harmonic(g, st, k)
    return OrbFunction(RADIUS, cfg.r_grid, np.where(st.usable, vals, np.nan), f"asym_k{k}")


def levelset_area(img: CenteredImage, cfg: OrbConfig = OrbConfig()) -> OrbFunction:
    """Fraction of non-missing pixels with temperature <= each threshold."""
    t = img.temps[~np.isnan(img.temps)]
    if t.size == 0:
        raise DataError("level-set area undefined for a fully missing image")
    counts = np.searchsorted(np.sort(t), cfg.c_grid, side="right")
    return OrbFunction(THRESHOLD, cfg.c_grid, counts / t.size, "levelset_area")


def impute_nearest(grid: np.ndarray, values: np.ndarray) -> np.ndarray:
    """Fill NaNs with the nearest non-missing value along ``grid`` (ties -> lower abscissa)."""
    miss = np.isnan(values)
    if not miss.any():
        return values.copy()
    ok = np.flatnonzero(~miss)
    if ok.size == 0:
        raise ValueError("cannot impute an all-missing function")
    out = values.copy()
    gok = grid[ok]
    for i in np.flatnonzero(miss):
        j = np.searchsorted(gok, grid[i])
        cands = [c for c in (j - 1, j) if 0 <= c < ok.size]
        best = min(cands, key=lambda c: (abs(gok[c] - grid[i]), gok[c]))
        out[i] = values[ok[best]]
    return out


def orb_functions(img: CenteredImage, cfg: OrbConfig = OrbConfig()) -> list[OrbFunction]:
    """All ORB functions of ``img`` in layout order (missing entries left as NaN)."""
    g = _geom_for(img, cfg)
    st = _annulus_stats(img, cfg, g)
    mask = lambda v: np.where(st.usable, v, np.nan)  # noqa: E731
    funcs = [OrbFunction(RADIUS, cfg.r_grid, mask(st.mean), "radial_mean"),
             OrbFunction(RADIUS, cfg.r_grid, mask(_stdev(g, st)), "radial_stdev")]
    funcs += [OrbFunction(RADIUS, cfg.r_grid, mask(_harmonic(g, st, k)), f"asym_k{k}")
              for k in cfg.asym_wavenumbers]
    funcs.append(levelset_area(img, cfg))
    return funcs


def assemble_orb_vector(img: CenteredImage, cfg: OrbConfig = OrbConfig()) -> OrbVector:
    if np.isnan(img.temps).all():
        raise OrbRejected("image fully missing")
    parts = []
    for f in orb_functions(img, cfg):
        frac = f.missing.mean()
        if frac > 0.5:
            raise OrbRejected(f"{f.name}: {frac:.0%} of entries missing")
        parts.append(impute_nearest(f.grid, f.values))
    return OrbVector(np.concatenate(parts), orb_layout(cfg))


# --------------------------------------------------------------------------
# persistence

def layout_json(cfg: OrbConfig) -> dict:
    return {
        "config": cfg.to_dict(),
        "layout": [{"name": e.name, "kind": e.kind, "offset": e.offset, "length": e.length}
                   for e in orb_layout(cfg)],
        "r_grid": cfg.r_grid.tolist(),
        "c_grid": cfg.c_grid.tolist(),
        "d": sum(e.length for e in orb_layout(cfg)),
    }


def write_orb_table(path, records: Sequence[tuple[str, object, np.ndarray]], cfg: OrbConfig) -> None:
    """Write ORB vectors as CSV (storm_id, time, x0..x{d-1}) plus a ``.layout.json`` sidecar."""
    path = Path(path)
    meta = layout_json(cfg)
    d = meta["d"]
    header = ["storm_id", "time"] + [f"x{i}" for i in range(d)]
    rows = []
    for storm_id, t, values in records:
        if len(values) != d:
            raise ValueError("ORB vector length does not match layout")
        rows.append([storm_id, format_time(t), *values])
    write_csv(path, header, rows)
    atomic_write_text(path.with_suffix(".layout.json"), json.dumps(meta, indent=2, sort_keys=True) + "\n")


def read_orb_table(path) -> tuple[list[tuple[str, object, np.ndarray]], OrbConfig]:
    path = Path(path)
    meta = json.loads(path.with_suffix(".layout.json").read_text())
    cfg = OrbConfig.from_dict(meta["config"])
    d = meta["d"]
    out = []
    for row in read_csv(path):
        vals = np.array([float(row[f"x{i}"]) for i in range(d)])
        out.append((row["storm_id"], parse_time(row["time"]), vals))
    return out, cfg
