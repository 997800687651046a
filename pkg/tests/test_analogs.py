from datetime import timedelta
from itertools import product

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.special import comb

from tcorb.analogs import (Trajectory, Window, adjusted_rand_index, affinity, distance_matrix,
                           extract_windows, find_analogs, normalized_laplacian, spectral_cluster,
                           trajectory_distance)
from tcorb.errors import DataError
from tcorb.ingest import utc

T0 = utc(2015, 8, 1)


def _ari_oracle(a, b):
    """Textbook pair-counting formula with scipy binomials."""
    la, lb = sorted(set(a)), sorted(set(b))
    n = np.array([[sum(1 for x, y in zip(a, b) if x == i and y == j) for j in lb] for i in la])
    idx = comb(n, 2).sum()
    ra = comb(n.sum(1), 2).sum()
    rb = comb(n.sum(0), 2).sum()
    exp = ra * rb / comb(len(a), 2)
    return (idx - exp) / (0.5 * (ra + rb) - exp)


def test_distance_examples():
    a = np.zeros((5, 3))
    assert trajectory_distance(a, a) == 0
    b = a.copy()
    b[2, 1] = 0.7
    assert trajectory_distance(a, b) == pytest.approx(0.7 / np.sqrt(5))
    with pytest.raises(ValueError):
        trajectory_distance(a, np.zeros((4, 3)))


def test_distance_metric_axioms(rng):
    W = rng.normal(size=(3000, 5, 2))
    for i in range(1000):
        a, b, c = W[3 * i], W[3 * i + 1], W[3 * i + 2]
        dab, dbc, dac = trajectory_distance(a, b), trajectory_distance(b, c), trajectory_distance(a, c)
        assert dab == trajectory_distance(b, a)
        assert dac <= dab + dbc + 1e-12


def test_distance_matrix_matches_pairwise(rng):
    W = rng.normal(size=(12, 5, 3))
    W[4] = W[7]
    D = distance_matrix(list(W))
    for i, j in product(range(12), repeat=2):
        assert D[i, j] == pytest.approx(trajectory_distance(W[i], W[j]), abs=1e-12)
    assert D[4, 7] == 0.0


def test_extract_windows_skips_gaps():
    times = [T0 + timedelta(hours=h) for h in (0, 6, 12, 18, 24, 36, 42, 48)]  # 12 h gap after 24
    traj = Trajectory("S", tuple(times), np.arange(16.0).reshape(8, 2))
    wins = extract_windows(traj, length=3)
    assert [w.start for w in wins] == [times[0], times[1], times[2], times[5]]
    np.testing.assert_array_equal(wins[1].coeffs, traj.coeffs[1:4])


def test_ari_known_values():
    assert adjusted_rand_index([0, 0, 1, 1], [1, 1, 0, 0]) == 1.0
    a, b = [0, 0, 0, 1, 1, 1, 2, 2], [0, 0, 1, 1, 2, 2, 2, 0]
    assert adjusted_rand_index(a, b) == pytest.approx(_ari_oracle(a, b), abs=1e-12)


@given(st.lists(st.integers(0, 3), min_size=4, max_size=40), st.integers(0, 2 ** 32 - 1))
def test_ari_matches_oracle(a, seed):
    b = list(np.random.default_rng(seed).integers(0, 3, len(a)))
    if len(set(a)) == 1 and len(set(b)) == 1:
        return
    ref = _ari_oracle(a, b)
    if np.isfinite(ref):
        assert adjusted_rand_index(a, b) == pytest.approx(ref, abs=1e-12)


def _bundles(rng, n_per=25, sep=20.0):
    base = rng.normal(size=(5, 2))
    A = [base + 0.1 * rng.normal(size=(5, 2)) for _ in range(n_per)]
    B = [base + sep * 0.1 * np.sqrt(10) + 0.1 * rng.normal(size=(5, 2)) for _ in range(n_per)]
    return A + B, np.array([0] * n_per + [1] * n_per)


def test_separated_bundles_recovered(rng):
    W, truth = _bundles(rng)
    res = spectral_cluster(distance_matrix(W), 2, seed=3)
    assert adjusted_rand_index(res.labels, truth) == 1.0
    assert np.isfinite(res.embedding).all()
    assert set(res.labels) == {0, 1} and res.labels[0] == 0


def test_permutation_invariance(rng):
    W, truth = _bundles(rng)
    D = distance_matrix(W)
    perm = rng.permutation(len(W))
    a = spectral_cluster(D, 2, seed=1).labels
    b = spectral_cluster(D[np.ix_(perm, perm)], 2, seed=1).labels
    assert adjusted_rand_index(a[perm], b) == 1.0


def test_laplacian_psd(rng):
    W, _ = _bundles(rng)
    D = distance_matrix(W)
    L = normalized_laplacian(affinity(D, float(np.median(D[D > 0]))))
    assert np.linalg.eigvalsh(L).min() > -1e-8


def test_degenerate_cases(rng):
    D = distance_matrix(rng.normal(size=(6, 5, 2)))
    assert (spectral_cluster(D, 1).labels == 0).all()
    assert (spectral_cluster(np.zeros((4, 4)), 2).labels == 0).all()
    with pytest.raises(DataError):
        spectral_cluster(D, 7)
    bad = D.copy()
    bad[0, 1] += 1
    with pytest.raises(DataError):
        spectral_cluster(bad, 2)
    with pytest.raises(DataError):
        spectral_cluster(-D, 2)


def test_duplicates_share_label(rng):
    W, _ = _bundles(rng, n_per=10)
    W.append(W[3].copy())
    W.append(W[14].copy())
    labels = spectral_cluster(distance_matrix(W), 2, seed=0).labels
    assert labels[-2] == labels[3] and labels[-1] == labels[14]


def test_deterministic(rng):
    W, _ = _bundles(rng, sep=2.0)
    D = distance_matrix(W)
    a, b = spectral_cluster(D, 3, seed=9), spectral_cluster(D, 3, seed=9)
    assert np.array_equal(a.labels, b.labels) and a.inertia == b.inertia


def test_find_analogs(rng):
    lib = [Window(f"S{i % 3}", T0 + timedelta(hours=6 * i), rng.normal(size=(5, 2))) for i in range(9)]
    q = lib[4]
    hits = find_analogs(q, lib, m=100, exclude_self=False)
    assert hits[0].storm_id == q.storm_id and hits[0].distance == 0 and len(hits) == 9
    assert all(a.distance <= b.distance for a, b in zip(hits, hits[1:]))
    hits = find_analogs(q, lib, m=3)
    assert len(hits) == 3 and all(h.storm_id != q.storm_id for h in hits)
    # ties broken by storm id, then start time
    tie = [Window("B", T0 + timedelta(hours=6), q.coeffs), Window("A", T0 + timedelta(hours=12), q.coeffs),
           Window("A", T0, q.coeffs)]
    hits = find_analogs(Window("Q", T0, q.coeffs), tie, m=3)
    assert [(h.storm_id, h.start) for h in hits] == [("A", T0), ("A", T0 + timedelta(hours=12)),
                                                     ("B", T0 + timedelta(hours=6))]
    with pytest.raises(DataError):
        find_analogs(q, [], m=1)
    with pytest.raises(DataError):
        find_analogs(q, [Window("Z", T0, np.zeros((4, 2)))])
