import itertools

import numpy as np
import pytest

from eqfa.frames import (
    SIGN_PATTERNS,
    Frame,
    TooFewPoints,
    frames_equal_as_sets,
    left_translate,
    pca_frame,
    pca_frames_batch,
)
from eqfa.group import EuclideanMotion, act_points
from eqfa.linalg3 import ZeroWeight

from conftest import generic_cloud, motions

AXIS_CLOUD = np.array([[1.0, 0, 0], [-1, 0, 0], [0, 2, 0], [0, -2, 0], [0, 0, 3], [0, 0, -3]])


def test_axis_cloud_frame():
    F, diag = pca_frame(AXIS_CLOUD, np.ones(6))
    assert len(F) == 8
    np.testing.assert_array_equal(F.translation, 0.0)
    expected = {tuple(np.diag(s).ravel()) for s in itertools.product((1.0, -1.0), repeat=3)}
    got = {tuple(np.round(g.R, 12).ravel() + 0.0) for g in F}
    assert got == expected
    np.testing.assert_allclose(diag.eigenvalues, [2, 8, 18])


def test_translation_moves_centroid_only():
    F, _ = pca_frame(AXIS_CLOUD)
    G, _ = pca_frame(AXIS_CLOUD + [5.0, 0, 0])
    np.testing.assert_allclose(G.translation, [5, 0, 0])
    np.testing.assert_allclose(F.rotations, G.rotations, atol=1e-12)


def test_sign_pattern_order():
    assert [tuple(s) for s in SIGN_PATTERNS] == list(itertools.product((1.0, -1.0), repeat=3))
    F, _ = pca_frame(AXIS_CLOUD)
    for g, s in zip(F, SIGN_PATTERNS):
        np.testing.assert_allclose(g.R, F.motions[0].R * s, atol=0)


def test_frame_structure(rng):
    F, _ = pca_frame(generic_cloud(rng))
    R0 = F.motions[0].R
    for g in F:
        assert np.array_equal(g.t, F.translation)
        D = R0.T @ g.R
        np.testing.assert_allclose(D, np.diag(np.diag(D)), atol=1e-12)
        np.testing.assert_allclose(np.abs(np.diag(D)), 1.0, atol=1e-12)


def test_errors(rng):
    with pytest.raises(TooFewPoints):
        pca_frame(rng.standard_normal((2, 3)))
    with pytest.raises(ZeroWeight):
        pca_frame(rng.standard_normal((4, 3)), np.zeros(4))


def test_degenerate_flag_proceeds():
    sphere_like = np.vstack([np.eye(3), -np.eye(3)])
    F, diag = pca_frame(sphere_like)
    assert F.source_degenerate and len(F) == 8 and diag.min_gap < 1e-7


def test_proposition_one(rng):
    done = 0
    while done < 200:
        V = generic_cloud(rng, n=int(rng.integers(4, 20)))
        w = rng.random(len(V)) + 0.05
        (g,) = motions(rng, 1)
        F, diag = pca_frame(V, w)
        if F.source_degenerate or diag.min_gap < 1e-3:
            continue
        G, _ = pca_frame(act_points(g, V), w)
        assert frames_equal_as_sets(G, left_translate(g, F), 1e-6)
        done += 1


def test_set_equality_examples(rng):
    F, _ = pca_frame(generic_cloud(rng))
    assert frames_equal_as_sets(F, F, 1e-6)
    bad = list(F.motions)
    R = bad[3].R.copy()
    c, s = np.cos(1e-5), np.sin(1e-5)
    R = R @ np.array([[c, -s, 0], [s, c, 0], [0, 0, 1]])
    bad[3] = EuclideanMotion(R, bad[3].t)
    assert not frames_equal_as_sets(F, Frame(tuple(bad)), 1e-6)


def test_weight_scale_bit_identical(rng):
    V = generic_cloud(rng)
    w = rng.random(len(V)) + 0.1
    for c in (2.0, 0.25, 1024.0):
        a = pca_frames_batch(V, w)
        b = pca_frames_batch(V, c * w)
        assert np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])


def test_weight_scale_general(rng):
    V = generic_cloud(rng)
    w = rng.random(len(V)) + 0.1
    for c in (3.0, 0.7, 1e3):
        a = pca_frames_batch(V, w)
        b = pca_frames_batch(V, c * w)
        np.testing.assert_allclose(a[0], b[0], atol=1e-12)
        np.testing.assert_allclose(a[1], b[1], atol=1e-12)


def test_permutation_invariance(rng):
    V = generic_cloud(rng, n=15)
    w = rng.random(15) + 0.1
    p = rng.permutation(15)
    a = pca_frames_batch(V, w)
    b = pca_frames_batch(V[p], w[p])
    np.testing.assert_allclose(a[0], b[0], atol=1e-12)
    np.testing.assert_allclose(a[1], b[1], atol=1e-12)


def test_batched_matches_single(rng):
    V = rng.standard_normal((4, 9, 3)) * [1, 2, 3]
    rot, t, _, _ = pca_frames_batch(V)
    for i in range(4):
        F, _ = pca_frame(V[i])
        np.testing.assert_array_equal(rot[i], F.rotations)
        np.testing.assert_array_equal(t[i], F.translation)
