"""Run configuration (JSON) for the end-to-end pipeline."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields
from importlib import resources
from pathlib import Path
from typing import Optional

from .orb import OrbConfig


@dataclass
class SynthSection:
    n_storms: int = 30
    steps: int = 28
    half_width_km: float = 200.0
    step_km: float = 4.0
    jitter_minutes: float = 30.0
    seed: Optional[int] = None   # falls back to RunConfig.seed


@dataclass
class RunConfig:
    hurdat: Optional[str] = None
    manifests: list = field(default_factory=list)   # manifest files or directories
    synth: Optional[SynthSection] = None
    regimes: Optional[list] = None                  # synth regime dicts; None = defaults
    cadence_hours: float = 6.0
    tolerance_minutes: float = 90.0
    half_width_km: float = 400.0
    step_km: float = 4.0
    orb: OrbConfig = field(default_factory=OrbConfig)
    pca_fraction: float = 0.95
    pca_k: Optional[int] = None
    var_p: int = 4
    var_lambdas: list = field(default_factory=lambda: [0.01, 0.1, 1.0, 10.0])
    img_k: int = 64
    gam_knots: int = 10
    gam_penalty: float = 1.0
    gam_use_pathway_a: bool = False
    lasso_lambdas: list = field(default_factory=lambda: [0.001, 0.01, 0.1, 1.0])
    horizons: list = field(default_factory=lambda: [6, 12, 24])
    split: dict = field(default_factory=lambda: {"train": 0.6, "validation": 0.2, "test": 0.2})
    seed: int = 7
    window_length: int = 5
    window_stride: int = 1
    k_clusters: int = 2
    max_cluster_windows: int = 2000
    analogs_m: int = 5
    plots: bool = True
    out_dir: str = "out"
    base_dir: str = field(default=".", repr=False, compare=False)

    def __post_init__(self):
        for h in self.horizons:
            s = h / self.cadence_hours
            if h <= 0 or abs(s - round(s)) > 1e-9:
                raise ValueError(f"horizon {h} is not a positive multiple of the cadence")
        if abs(sum(self.split.values()) - 1.0) > 1e-9:
            raise ValueError("split fractions must sum to 1")
        if set(self.split) - {"train", "validation", "test"}:
            raise ValueError("split keys must be train/validation/test")

    def to_dict(self) -> dict:
        d = asdict(self)
        d.pop("base_dir")
        d["orb"] = self.orb.to_dict()
        return d

    def config_hash(self) -> str:
        text = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(text.encode()).hexdigest()

    def resolve(self, path: str) -> Path:
        p = Path(path)
        return p if p.is_absolute() else Path(self.base_dir) / p

    @classmethod
    def from_dict(cls, d: dict, base_dir: str = ".") -> "RunConfig":
        d = dict(d)
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        if "orb" in d:
            d["orb"] = OrbConfig.from_dict(d["orb"])
        if d.get("synth") is not None:
            d["synth"] = SynthSection(**d["synth"])
        d["base_dir"] = base_dir
        return cls(**d)


BUNDLED = ("default-synth.json",)


def load_config(path: Optional[str]) -> RunConfig:
    """Load a JSON run config; bare names of bundled configs resolve to the packaged copy."""
    if path is None:
        return RunConfig()
    p = Path(path)
    if not p.exists() and p.name in BUNDLED and len(p.parts) == 1:
        text = resources.files("tcorb").joinpath("configs", p.name).read_text(encoding="utf-8")
        return RunConfig.from_dict(json.loads(text), base_dir=".")
    return RunConfig.from_dict(json.loads(p.read_text(encoding="utf-8")), base_dir=str(p.parent))
