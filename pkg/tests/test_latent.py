import numpy as np
import pytest
from scipy.spatial.transform import Rotation

from eqfa import data as D
from eqfa import metrics
from eqfa import models as M
from eqfa.group import FeatureMatrix, act_features, act_points
from eqfa.latent import interpolate, interpolate_parts, interpolation_path

from conftest import generic_cloud, motions


def _Z(rng, a=3, b=5):
    return FeatureMatrix(rng.standard_normal(a), generic_cloud(rng, b))


def test_endpoints(rng):
    for _ in range(20):
        Z0, Z1 = _Z(rng), _Z(rng)
        A = interpolate(Z0, Z1, 0.0)
        B = interpolate(Z0, Z1, 1.0)
        assert np.abs(A.U - Z0.U).max() < 1e-10 and np.abs(A.u - Z0.u).max() < 1e-10
        assert np.abs(B.U - Z1.U).max() < 1e-8 and np.abs(B.u - Z1.u).max() < 1e-8


def test_rigid_pair_gives_rigid_path(rng):
    Z0 = _Z(rng)
    g = D.random_motion(rng, 2.0)
    Z1 = act_features(g, Z0)
    c0 = Z0.U.mean(axis=0)
    for t in np.linspace(0, 1, 7):
        Zt = interpolate(Z0, Z1, t)
        # rows move rigidly: pairwise distances are preserved
        d0 = np.linalg.norm(Z0.U[:, None] - Z0.U[None], axis=-1)
        dt = np.linalg.norm(Zt.U[:, None] - Zt.U[None], axis=-1)
        np.testing.assert_allclose(dt, d0, atol=1e-10)
        np.testing.assert_allclose(Zt.U.mean(axis=0), (1 - t) * c0 + t * (g.R @ c0 + g.t), atol=1e-12)
        # the rotation angle grows linearly along the geodesic
        R_t, _ = Rotation.align_vectors(Zt.U - Zt.U.mean(0), Z0.U - c0)
        assert abs(R_t.magnitude() - t * Rotation.from_matrix(g.R).magnitude()) < 1e-8


def test_joint_motion_commutes(rng):
    for _ in range(20):
        Z0, Z1 = _Z(rng), _Z(rng)
        (g,) = motions(rng, 1, reflections=False)
        t = rng.random()
        a = interpolate(act_features(g, Z0), act_features(g, Z1), t)
        b = act_features(g, interpolate(Z0, Z1, t))
        np.testing.assert_allclose(a.U, b.U, atol=1e-6)
        np.testing.assert_allclose(a.u, b.u, atol=1e-12)


def test_continuity(rng):
    Z0, Z1 = _Z(rng), _Z(rng)
    path = interpolation_path(Z0, Z1, 101)
    steps = [np.linalg.norm(b.flat() - a.flat()) for a, b in zip(path, path[1:])]
    length = sum(steps)
    assert max(steps) < 3 * length / 100


def test_parts_and_errors(rng):
    Zs0 = [_Z(rng) for _ in range(3)]
    Zs1 = [_Z(rng) for _ in range(3)]
    mid = interpolate_parts(Zs0, Zs1, 0.5)
    for a, b, m in zip(Zs0, Zs1, mid):
        np.testing.assert_array_equal(m.U, interpolate(a, b, 0.5).U)
    assert len(interpolation_path(Zs0, Zs1, 4)) == 4
    with pytest.raises(ValueError):
        interpolate(_Z(rng, 2), _Z(rng, 3), 0.5)
    with pytest.raises(ValueError):
        interpolate_parts(Zs0, Zs1[:2], 0.5)
    with pytest.raises(ValueError):
        interpolation_path(Zs0[0], Zs1[0], 1)


def _kabsch_residual(Y, Y0):
    """Chamfer between Y0 and Y after optimal rigid alignment (independent oracle)."""
    c, c0 = Y.mean(0), Y0.mean(0)
    R, _ = Rotation.align_vectors(Y0 - c0, Y - c)
    return metrics.chamfer(R.apply(Y - c) + c0, Y0)


def test_decoded_rigid_path():
    rng = np.random.default_rng(11)
    angles, _ = D.random_joint_angles(rng, 3)
    spec = D.ArticulatedChainSpec(ring_size=6, rings_per_segment=3, joint_angles=angles)
    A, _ = D.gen_chain(spec)
    model = M.GlobalMeshAE(M.MeshAEConfig(len(A), D.faces_to_edges(D.chain_faces(spec)), m=3, d=4, hidden=8))
    params = model.init_params(rng)
    for g in motions(rng, 20, reflections=False):
        Z0 = M.encode_global(model, params, A)
        Z1 = M.encode_global(model, params, act_points(g, A))
        Y0 = M.decode_global(model, params, Z0)
        for Zt in interpolation_path(Z0, Z1, 5)[1:-1]:
            assert _kabsch_residual(M.decode_global(model, params, Zt), Y0) < 1e-3
