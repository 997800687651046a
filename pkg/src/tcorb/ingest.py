"""Best-track parsing, IR frame stacks and storm-centred resampling.

HURDAT2 blocks look like::

    AL092011,              IRENE,     39,
    20110821, 0000,  , TS, 15.0N,  59.0W,  45, 1011, -999, ...

Only the first eight data fields are used; wind radii are ignored.
"""

from __future__ import annotations

import bisect
import json
import logging
import math
import re
import struct
from collections import Counter
from dataclasses import dataclass, field
from datetime import datetime, timedelta, timezone
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from .blockio import atomic_write_bytes, write_json
from .errors import DataError

log = logging.getLogger(__name__)

KM_PER_DEG = 111.32
FRAME_MAGIC = b"TCIR1\0"
T_MIN, T_MAX = 150.0, 340.0
MISSING_SENTINELS = {-99, -999}
STORM_ID_RE = re.compile(r"^[A-Z]{2}\d{6}$")
_LAT_RE = re.compile(r"^(\d+(?:\.\d+)?)([NS])$")
_LON_RE = re.compile(r"^(\d+(?:\.\d+)?)([EW])$")


# --------------------------------------------------------------------------
# time helpers

def utc(year, month, day, hour=0, minute=0, second=0) -> datetime:
    return datetime(year, month, day, hour, minute, second, tzinfo=timezone.utc)


def parse_time(text: str) -> datetime:
    """Parse an ISO-8601 timestamp, treating naive values and 'Z' as UTC."""
    text = text.strip()
    if text.endswith("Z"):
        text = text[:-1] + "+00:00"
    t = datetime.fromisoformat(text)
    if t.tzinfo is None:
        t = t.replace(tzinfo=timezone.utc)
    return t.astimezone(timezone.utc)


def format_time(t: datetime) -> str:
    return t.astimezone(timezone.utc).strftime("%Y-%m-%dT%H:%M:%SZ")


def is_synoptic(t: datetime, cadence_hours: float) -> bool:
    midnight = t.replace(hour=0, minute=0, second=0, microsecond=0)
    secs = (t - midnight).total_seconds()
    step = cadence_hours * 3600.0
    return abs(secs / step - round(secs / step)) < 1e-9


# --------------------------------------------------------------------------
# tracks

@dataclass(frozen=True)
class TrackFix:
    time: datetime
    record_id: str
    status: str
    lat: float
    lon: float
    vmax: Optional[int]
    pmin: Optional[int]

    def __post_init__(self):
        if not -90.0 <= self.lat <= 90.0:
            raise DataError(f"latitude {self.lat} out of range")
        if not -180.0 <= self.lon <= 180.0:
            raise DataError(f"longitude {self.lon} out of range")
        if self.vmax is not None and not 0 <= self.vmax <= 250:
            raise DataError(f"vmax {self.vmax} kt out of range")
        if self.pmin is not None and not 800 <= self.pmin <= 1100:
            raise DataError(f"pmin {self.pmin} mb out of range")


@dataclass(frozen=True)
class StormTrack:
    storm_id: str
    name: str
    fixes: tuple[TrackFix, ...]

    def __post_init__(self):
        if not STORM_ID_RE.match(self.storm_id):
            raise DataError(f"bad storm id {self.storm_id!r}")
        times = [f.time for f in self.fixes]
        if any(b <= a for a, b in zip(times, times[1:])):
            raise DataError(f"{self.storm_id}: fix times not strictly increasing")

    @property
    def times(self) -> list[datetime]:
        return [f.time for f in self.fixes]

    def fix_at(self, t: datetime) -> Optional[TrackFix]:
        times = self.times
        i = bisect.bisect_left(times, t)
        if i < len(times) and times[i] == t:
            return self.fixes[i]
        return None

    def vmax_at(self, t: datetime) -> Optional[int]:
        fix = self.fix_at(t)
        return None if fix is None else fix.vmax


@dataclass(frozen=True)
class TrackRejection:
    storm_id: Optional[str]
    line: int
    reason: str

    def __str__(self):
        return f"{self.storm_id or '<none>'} (line {self.line}): {self.reason}"


def _fields(line: str) -> list[str]:
    parts = [p.strip() for p in line.split(",")]
    while parts and parts[-1] == "":
        parts.pop()
    return parts


def _is_header(parts: list[str]) -> bool:
    return len(parts) == 3 and parts[2].lstrip("-").isdigit() and not parts[0].isdigit()


def _sentinel_int(text: str, what: str, lineno: int) -> Optional[int]:
    try:
        value = int(text)
    except ValueError:
        raise DataError(f"line {lineno}: unparseable {what} {text!r}") from None
    return None if value in MISSING_SENTINELS else value


def _coord(text: str, pattern: re.Pattern, negative: str, what: str, lineno: int) -> float:
    m = pattern.match(text)
    if not m:
        raise DataError(f"line {lineno}: bad {what} {text!r}")
    value = float(m.group(1))
    return -value if m.group(2) == negative else value


def _parse_row(parts: list[str], lineno: int) -> TrackFix:
    if len(parts) < 8:
        raise DataError(f"line {lineno}: expected >= 8 fields, got {len(parts)}")
    date, hhmm, rid, status, lat_s, lon_s, vmax_s, pmin_s = parts[:8]
    if not (len(date) == 8 and date.isdigit() and len(hhmm) == 4 and hhmm.isdigit()):
        raise DataError(f"line {lineno}: bad date/time {date!r} {hhmm!r}")
    try:
        t = datetime(int(date[:4]), int(date[4:6]), int(date[6:]), int(hhmm[:2]), int(hhmm[2:]),
                     tzinfo=timezone.utc)
    except ValueError as exc:
        raise DataError(f"line {lineno}: {exc}") from None
    if len(rid) > 1:
        raise DataError(f"line {lineno}: bad record id {rid!r}")
    if len(status) != 2:
        raise DataError(f"line {lineno}: bad status {status!r}")
    lat = _coord(lat_s, _LAT_RE, "S", "latitude", lineno)
    lon = _coord(lon_s, _LON_RE, "W", "longitude", lineno)
    vmax = _sentinel_int(vmax_s, "vmax", lineno)
    pmin = _sentinel_int(pmin_s, "pmin", lineno)
    try:
        return TrackFix(t, rid, status, lat, lon, vmax, pmin)
    except DataError as exc:
        raise DataError(f"line {lineno}: {exc}") from None


def parse_hurdat2(text: str, rejects: Optional[list] = None) -> list[StormTrack]:
    """Parse HURDAT2 text into tracks.

    Malformed storm blocks are skipped individually; each skip is logged and,
    if ``rejects`` is given, appended to it as a :class:`TrackRejection`.
    """
    lines = text.splitlines()
    tracks: list[StormTrack] = []

    def reject(storm_id, lineno, reason):
        rej = TrackRejection(storm_id, lineno, reason)
        log.warning("rejected track %s", rej)
        if rejects is not None:
            rejects.append(rej)

    i = 0
    while i < len(lines):
        parts = _fields(lines[i])
        if not parts:
            i += 1
            continue
        if not _is_header(parts):
            reject(None, i + 1, "data line outside a storm block")
            i += 1
            continue
        header_line = i + 1
        storm_id, name, count_s = parts
        rows = []
        i += 1
        while i < len(lines):
            p = _fields(lines[i])
            if p and _is_header(p):
                break
            if p:
                rows.append((i + 1, p))
            i += 1
        if int(count_s) != len(rows):
            reject(storm_id, header_line, f"declared {count_s} rows, found {len(rows)}")
            continue
        try:
            fixes = tuple(_parse_row(p, ln) for ln, p in rows)
            for (ln, _), a, b in zip(rows[1:], fixes, fixes[1:]):
                if b.time <= a.time:
                    raise DataError(f"line {ln}: non-monotone time")
            tracks.append(StormTrack(storm_id, name, fixes))
        except DataError as exc:
            reject(storm_id, header_line, str(exc))
    return tracks


def read_hurdat2(path, rejects: Optional[list] = None) -> list[StormTrack]:
    with open(path, "r", encoding="ascii", newline="") as fh:
        return parse_hurdat2(fh.read(), rejects)


def _fmt_coord(value: float, pos: str, neg: str) -> str:
    return f"{abs(value):.1f}{pos if value >= 0 else neg}"


def format_hurdat2(tracks: Iterable[StormTrack]) -> str:
    """Serialize tracks in the HURDAT2 layout (wind-radii fields written as -999)."""
    out = []
    tail = ", ".join(["-999"] * 13)
    for tr in tracks:
        out.append(f"{tr.storm_id},{tr.name:>19},{len(tr.fixes):>7},")
        for f in tr.fixes:
            vmax = -99 if f.vmax is None else f.vmax
            pmin = -999 if f.pmin is None else f.pmin
            out.append(
                f"{f.time:%Y%m%d}, {f.time:%H%M}, {f.record_id:>1}, {f.status:>2}, "
                f"{_fmt_coord(f.lat, 'N', 'S'):>5}, {_fmt_coord(f.lon, 'E', 'W'):>6}, "
                f"{vmax:>3}, {pmin:>4}, {tail},"
            )
    return "".join(line + "\n" for line in out)


def interpolate_center(track: StormTrack, t: datetime) -> tuple[float, float]:
    times = track.times
    if not times:
        raise DataError(f"{track.storm_id}: empty track")
    if len(times) == 1:
        if t == times[0]:
            return track.fixes[0].lat, track.fixes[0].lon
        raise DataError(f"{track.storm_id}: cannot interpolate a single-fix track")
    if t < times[0] or t > times[-1]:
        raise DataError(f"{track.storm_id}: time {format_time(t)} outside track span")
    i = bisect.bisect_left(times, t)
    if times[i] == t:
        return track.fixes[i].lat, track.fixes[i].lon
    a, b = track.fixes[i - 1], track.fixes[i]
    w = (t - a.time).total_seconds() / (b.time - a.time).total_seconds()
    return a.lat + w * (b.lat - a.lat), a.lon + w * (b.lon - a.lon)


# --------------------------------------------------------------------------
# IR frames

@dataclass(frozen=True, eq=False)
class IrFrame:
    valid_time: datetime
    origin_lat: float
    origin_lon: float
    step_deg: float
    temps: np.ndarray  # (height, width) Kelvin, NaN = missing; row 0 northernmost
    channel: str = "IR ~10.7um"

    @property
    def height(self) -> int:
        return self.temps.shape[0]

    @property
    def width(self) -> int:
        return self.temps.shape[1]

    @property
    def missing(self) -> np.ndarray:
        return np.isnan(self.temps)


def encode_frame(temps: np.ndarray) -> bytes:
    h, w = temps.shape
    return FRAME_MAGIC + struct.pack("<II", w, h) + np.ascontiguousarray(temps, dtype="<f4").tobytes()


def decode_frame(data: bytes, source: str = "<bytes>") -> np.ndarray:
    if len(data) < 14 or data[:6] != FRAME_MAGIC:
        raise DataError(f"{source}: bad frame magic")
    w, h = struct.unpack_from("<II", data, 6)
    need = w * h * 4
    if len(data) - 14 < need:
        raise DataError(f"{source}: truncated frame ({len(data) - 14} of {need} payload bytes)")
    if len(data) - 14 > need:
        raise DataError(f"{source}: trailing bytes after frame payload")
    return np.frombuffer(data, dtype="<f4", count=w * h, offset=14).reshape(h, w).astype(np.float64)


def _check_frame(temps: np.ndarray, source: str) -> None:
    h, w = temps.shape
    if w < 16 or h < 16:
        raise DataError(f"{source}: frame {w}x{h} smaller than 16x16")
    ok = temps[~np.isnan(temps)]
    if ok.size and (ok.min() < T_MIN or ok.max() > T_MAX):
        raise DataError(f"{source}: brightness temperature outside [{T_MIN}, {T_MAX}] K")


def read_ir_stack(manifest_path) -> list[IrFrame]:
    """Read all frames listed by a stack manifest, checking order and geometry."""
    manifest_path = Path(manifest_path)
    try:
        meta = json.loads(manifest_path.read_text(encoding="utf-8"))
    except (OSError, ValueError) as exc:
        raise DataError(f"{manifest_path}: {exc}") from None
    channel = meta.get("channel", "IR ~10.7um")
    frames: list[IrFrame] = []
    for entry in meta.get("frames", []):
        path = manifest_path.parent / entry["file"]
        t = parse_time(entry["valid_time"])
        if frames and t <= frames[-1].valid_time:
            kind = "duplicate" if t == frames[-1].valid_time else "unordered"
            raise DataError(f"{path}: {kind} valid_time {entry['valid_time']} in manifest")
        try:
            data = path.read_bytes()
        except OSError as exc:
            raise DataError(f"{path}: {exc}") from None
        temps = decode_frame(data, str(path))
        if temps.shape != (int(entry["height"]), int(entry["width"])):
            raise DataError(f"{path}: dimensions {temps.shape[::-1]} do not match manifest "
                            f"({entry['width']}, {entry['height']})")
        _check_frame(temps, str(path))
        frames.append(IrFrame(t, float(entry["origin_lat"]), float(entry["origin_lon"]),
                              float(entry["step_deg"]), temps, channel))
    return frames


def write_ir_stack(directory, storm_id: str, frames: Sequence[IrFrame],
                   channel: str = "IR ~10.7um") -> Path:
    """Write frames as TCIR1 files plus a manifest; returns the manifest path."""
    directory = Path(directory)
    entries = []
    for i, fr in enumerate(frames):
        name = f"{storm_id}_{i:04d}.tcir"
        atomic_write_bytes(directory / name, encode_frame(fr.temps))
        entries.append({"file": name, "valid_time": format_time(fr.valid_time),
                        "origin_lat": fr.origin_lat, "origin_lon": fr.origin_lon,
                        "step_deg": fr.step_deg, "width": fr.width, "height": fr.height})
    manifest = directory / f"{storm_id}.json"
    write_json(manifest, {"storm_id": storm_id, "channel": channel, "frames": entries})
    return manifest


# --------------------------------------------------------------------------
# storm-centred grids

@dataclass(frozen=True)
class GridGeometry:
    half_width_km: float = 400.0
    step_km: float = 4.0

    def __post_init__(self):
        if self.step_km <= 0:
            raise ValueError("step_km must be positive")
        m = self.half_width_km / self.step_km
        if self.half_width_km <= 0 or abs(m - round(m)) > 1e-9:
            raise ValueError("half_width_km must be a positive multiple of step_km")

    @property
    def half_pixels(self) -> int:
        return int(round(self.half_width_km / self.step_km))

    @property
    def side(self) -> int:
        return 2 * self.half_pixels + 1

    def offsets(self) -> tuple[np.ndarray, np.ndarray]:
        """(x_km, y_km) of every grid point; x east, y north, row 0 north."""
        m = self.half_pixels
        idx = np.arange(-m, m + 1)
        x = np.broadcast_to(idx[None, :] * self.step_km, (self.side, self.side))
        y = np.broadcast_to(-idx[:, None] * self.step_km, (self.side, self.side))
        return x, y


@dataclass(frozen=True, eq=False)
class CenteredImage:
    center_lat: float
    center_lon: float
    half_width_km: float
    step_km: float
    temps: np.ndarray  # square, odd side, NaN = missing
    valid_time: Optional[datetime] = None

    def __post_init__(self):
        n = self.temps.shape[0]
        if self.temps.ndim != 2 or self.temps.shape[1] != n or n % 2 != 1:
            raise DataError(f"centred grid must be square with odd side, got {self.temps.shape}")
        if n != self.geometry.side:
            raise DataError("temps shape inconsistent with half_width_km/step_km")

    @property
    def geometry(self) -> GridGeometry:
        return GridGeometry(self.half_width_km, self.step_km)

    @property
    def missing(self) -> np.ndarray:
        return np.isnan(self.temps)

    def with_temps(self, temps: np.ndarray) -> "CenteredImage":
        return CenteredImage(self.center_lat, self.center_lon, self.half_width_km, self.step_km,
                             temps, self.valid_time)


def regrid_to_storm(frame: IrFrame, center: tuple[float, float], half_width_km: float = 400.0,
                    step_km: float = 4.0) -> CenteredImage:
    """Bilinear, missing-aware resampling of a lat/lon frame onto a km grid about ``center``."""
    clat, clon = center
    if step_km <= 0:
        raise ValueError("step_km must be positive")
    if abs(clat) >= 85.0:
        raise ValueError(f"centre latitude {clat} too close to the pole for the flat-earth grid")
    geom = GridGeometry(half_width_km, step_km)
    x, y = geom.offsets()
    src_lon = clon + x / (KM_PER_DEG * math.cos(math.radians(clat)))
    src_lat = clat + y / KM_PER_DEG
    # origin longitude moved into (clon - 180, clon + 180]
    origin_lon = clon + 180.0 - ((clon + 180.0 - frame.origin_lon) % 360.0)
    col = (src_lon - origin_lon) / frame.step_deg
    row = (frame.origin_lat - src_lat) / frame.step_deg

    H, W = frame.temps.shape
    inside = (col >= 0) & (col <= W - 1) & (row >= 0) & (row <= H - 1)
    c0 = np.clip(np.floor(col), 0, W - 2).astype(int)
    r0 = np.clip(np.floor(row), 0, H - 2).astype(int)
    fc = col - c0
    fr = row - r0
    src = frame.temps
    neigh = [(r0, c0, (1 - fr) * (1 - fc)), (r0, c0 + 1, (1 - fr) * fc),
             (r0 + 1, c0, fr * (1 - fc)), (r0 + 1, c0 + 1, fr * fc)]
    num = np.zeros(x.shape)
    den = np.zeros(x.shape)
    plain_sum = np.zeros(x.shape)
    plain_n = np.zeros(x.shape)
    for rr, cc, w in neigh:
        v = src[rr, cc]
        ok = ~np.isnan(v)
        vz = np.where(ok, v, 0.0)
        num += np.where(ok, w * vz, 0.0)
        den += np.where(ok, w, 0.0)
        plain_sum += vz
        plain_n += ok
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.where(den > 0, num / np.where(den > 0, den, 1.0),
                       plain_sum / np.maximum(plain_n, 1))
    out = np.where(inside & (plain_n > 0), out, np.nan)
    return CenteredImage(clat, clon, float(half_width_km), float(step_km), out, frame.valid_time)


# --------------------------------------------------------------------------
# samples

@dataclass(frozen=True, eq=False)
class Sample:
    storm_id: str
    time: datetime
    image: CenteredImage
    vmax: int


def synoptic_times(start: datetime, end: datetime, cadence_hours: float) -> list[datetime]:
    step = timedelta(hours=cadence_hours)
    midnight = start.replace(hour=0, minute=0, second=0, microsecond=0)
    n = math.ceil((start - midnight) / step - 1e-12)
    t = midnight + n * step
    out = []
    while t <= end:
        out.append(t)
        t += step
    return out


def build_samples(frames: Sequence[IrFrame], track: StormTrack, cadence_hours: float = 6,
                  tolerance_minutes: float = 90, half_width_km: float = 400.0,
                  step_km: float = 4.0, summary: Optional[Counter] = None) -> list[Sample]:
    """Pair each synoptic fix carrying vmax with its nearest frame and regrid it.

    Skipped synoptic times are tallied in ``summary`` (keys ``no_vmax``,
    ``no_frame``) instead of raising.
    """
    counts = summary if summary is not None else Counter()
    if not frames:
        counts["no_frames"] += 1
        log.warning("%s: no frames supplied", track.storm_id)
        return []
    if not track.fixes:
        return []
    frame_times = [f.valid_time for f in frames]
    tol = timedelta(minutes=tolerance_minutes)
    first, last = track.times[0], track.times[-1]
    samples = []
    for t in synoptic_times(first, last, cadence_hours):
        vmax = track.vmax_at(t)
        if vmax is None:
            counts["no_vmax"] += 1
            continue
        i = bisect.bisect_left(frame_times, t)
        cands = [j for j in (i - 1, i) if 0 <= j < len(frames)]
        best = min(cands, key=lambda j: (abs(frame_times[j] - t), frame_times[j]))
        if abs(frame_times[best] - t) > tol:
            counts["no_frame"] += 1
            continue
        ft = min(max(frame_times[best], first), last)
        center = interpolate_center(track, ft)
        image = regrid_to_storm(frames[best], center, half_width_km, step_km)
        samples.append(Sample(track.storm_id, t, image, vmax))
        counts["emitted"] += 1
    return samples
