import hashlib
import json
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from oracles import brute_orb, recurrence
from tcorb.ingest import GridGeometry, read_hurdat2, read_ir_stack
from tcorb.orb import OrbConfig, radial_profile
from tcorb.synth import (DEEP_SYMMETRIC, SceneParams, StormSimConfig, _PURPOSE, generate_library,
                         noise_stream, render_scene, simulate_dynamics, simulate_library, simulate_storm,
                         storm_id_for)

GEOM = GridGeometry(120, 4)


def test_piecewise_scene_has_zero_stdev_inside_regions():
    img = render_scene(SceneParams(eye_radius=20, eyewall_outer_radius=80), GEOM)
    cfg = OrbConfig(r_max_km=120)
    sd = radial_profile(img, "stdev", cfg).values
    edges = cfg.r_edges
    inside = [(lo >= 0 and hi <= 20) or (lo >= 20 and hi <= 80) or lo >= 80
              for lo, hi in zip(edges[:-1], edges[1:])]
    np.testing.assert_allclose(sd[np.array(inside)], 0.0, atol=1e-12)


def test_asymmetry_amplitude_against_brute_force():
    p = SceneParams(eye_radius=20, eyewall_outer_radius=110, asym_amp=10.0, asym_phase=0.3)
    g = GridGeometry(120, 2)
    img = render_scene(p, g)
    cfg = OrbConfig(r_max_km=120, r_step_km=10)
    ref = brute_orb(img.temps, 2.0, cfg.r_edges, 0.5, (1,))["asym_k1"]
    # eyewall annuli fully inside [20, 110)
    np.testing.assert_allclose(ref[3:10], 10.0, atol=0.3)


def test_render_deterministic_and_clamped():
    p = SceneParams(noise_sd=30.0, rng_seed=11, eyewall_temp=160)
    a, b = render_scene(p, GEOM), render_scene(p, GEOM)
    assert np.array_equal(a.temps, b.temps)
    assert a.temps.min() >= 150 and a.temps.max() <= 340
    assert not np.array_equal(a.temps, render_scene(replace(p, rng_seed=12), GEOM).temps)


def test_scene_validation():
    with pytest.raises(ValueError):
        render_scene(SceneParams(eye_radius=50, eyewall_outer_radius=40), GEOM)
    with pytest.raises(ValueError):
        render_scene(SceneParams(eyewall_outer_radius=130), GEOM)
    with pytest.raises(ValueError):
        render_scene(SceneParams(eye_temp=100), GEOM)
    with pytest.raises(ValueError):
        render_scene(SceneParams(noise_sd=-1), GEOM)
    with pytest.raises(ValueError):
        StormSimConfig(rho=1.0).validate()
    with pytest.raises(ValueError):
        StormSimConfig(steps=1).validate()


def test_noise_stream_prefix_stable():
    a = noise_stream((7, 1), 10)
    b = noise_stream((7, 1), 1000)
    assert np.array_equal(a, b[:10])


def test_constant_intensity_without_gain():
    cfg = StormSimConfig(gain=0.0, intensity_noise_sd=0.0, v0=55.0, steps=20)
    assert (simulate_dynamics(cfg, 3).intensity == 55.0).all()


def test_fixed_point():
    cfg = StormSimConfig(depth_noise_sd=0.0, intensity_noise_sd=0.0, depth_init=70.0, depth_ref=70.0)
    st_ = simulate_dynamics(cfg, 1)
    assert (st_.depth == 70.0).all() and (st_.intensity == cfg.v0).all()


@given(st.integers(0, 2 ** 32 - 1))
def test_recurrence_oracle(seed):
    cfg = StormSimConfig(gain=0.8, rho=0.9, steps=30, depth_init=60.0)
    eta = cfg.depth_noise_sd * noise_stream((seed, _PURPOSE["depth"]), cfg.steps)
    eps = cfg.intensity_noise_sd * noise_stream((seed, _PURPOSE["intensity"]), cfg.steps)
    D, V = recurrence(60.0, cfg.v0, 0.9, cfg.depth_ref, 0.8, eta, eps, cfg.steps)
    sim = simulate_dynamics(cfg, seed)
    np.testing.assert_allclose(sim.depth, D, rtol=0, atol=1e-12)
    np.testing.assert_allclose(sim.intensity, V, rtol=0, atol=1e-12)
    assert (sim.intensity >= 15).all() and (sim.intensity <= 185).all()


def test_structural_signal_noise_free():
    cfg = StormSimConfig(depth_init=75.0, intensity_noise_sd=0.0, v0=80.0, steps=30)
    s = simulate_dynamics(cfg, 5)
    assert 15 < s.intensity.min() and s.intensity.max() < 185  # clamp never active
    dv = np.diff(s.intensity)
    dd = s.depth[:-1] - cfg.depth_ref
    assert np.corrcoef(dd, dv)[0, 1] == pytest.approx(1.0, abs=1e-12)


def test_simulate_storm_eyewall_tracks_depth():
    cfg = replace(DEEP_SYMMETRIC, steps=5)
    tmpl = replace(cfg.scene, noise_sd=0.0, asym_amp=0.0)
    out = simulate_storm(cfg, tmpl, seed=2, geometry=GEOM)
    D = simulate_dynamics(cfg, 2).depth
    for (img, v), d in zip(out, D):
        m = GEOM.side // 2
        assert img.temps[m, m + 12] == pytest.approx(tmpl.background_temp - d)  # 48 km, in the eyewall


def test_storm_ids():
    assert storm_id_for(0) == "SY012000" and storm_id_for(98) == "SY992000" and storm_id_for(99) == "SY012001"


def test_library_round_robin():
    lib = simulate_library(4, render=False)
    assert [s.regime for s in lib] == [0, 1, 0, 1]


def _digest(root):
    h = hashlib.sha256()
    for p in sorted(root.rglob("*")):
        if p.is_file():
            h.update(str(p.relative_to(root)).encode())
            h.update(p.read_bytes())
    return h.hexdigest()


def test_library_files_round_trip_and_determinism(tmp_path):
    g = GridGeometry(60, 4)
    regimes = [replace(r, steps=6, scene=replace(r.scene, eyewall_outer_radius=50,
                                                 eye_radius=min(r.scene.eye_radius, 20)))
               for r in (DEEP_SYMMETRIC, DEEP_SYMMETRIC)]
    a = generate_library(tmp_path / "a", 3, regimes, seed=7, geometry=g)
    b = generate_library(tmp_path / "b", 3, regimes, seed=7, geometry=g)
    assert _digest(a) == _digest(b)
    meta = json.loads((a / "library.json").read_text())
    sims = simulate_library(3, regimes, seed=7, render=False)
    tracks = read_hurdat2(a / "tracks.hurdat2")
    for tr, sim in zip(tracks, sims):
        assert tr.storm_id == sim.storm_id
        assert np.max(np.abs(np.array([f.vmax for f in tr.fixes]) - sim.intensity)) <= 0.5
    for entry in meta["storms"]:
        frames = read_ir_stack(a / entry["manifest"])
        assert len(frames) == 6
        assert all(150 <= f.temps.min() and f.temps.max() <= 340 for f in frames)
