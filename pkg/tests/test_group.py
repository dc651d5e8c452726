import numpy as np
import pytest

from eqfa.group import (
    EuclideanMotion,
    FeatureMatrix,
    ScalarField,
    act_features,
    act_field,
    act_points,
    compose,
    inverse,
)
from eqfa.linalg3 import axis_angle_matrix
from eqfa.metrics import GridSpec, extract_zero_crossings

from conftest import motions


def _same(g, h, tol=1e-10):
    return np.abs(g.R - h.R).max() <= tol and np.abs(g.t - h.t).max() <= tol


def test_compose_identity_and_inverse(rng):
    for g in motions(rng, 20):
        assert _same(compose(g, EuclideanMotion.identity()), g, 0)
        assert _same(compose(g, inverse(g)), EuclideanMotion.identity())
        assert _same(compose(inverse(g), g), EuclideanMotion.identity())


def test_compose_pointwise(rng):
    g1, g2 = motions(rng, 2)
    x = rng.standard_normal((4, 3))
    np.testing.assert_allclose(act_points(compose(g1, g2), x), act_points(g1, act_points(g2, x)), atol=1e-12)


def test_compose_associative(rng):
    a, b, c = motions(rng, 3)
    assert _same(compose(compose(a, b), c), compose(a, compose(b, c)))


def test_inverse_examples():
    assert _same(inverse(EuclideanMotion.identity()), EuclideanMotion.identity(), 0)
    g = inverse(EuclideanMotion(np.eye(3), [1.0, 2.0, 3.0]))
    np.testing.assert_array_equal(g.t, [-1, -2, -3])


def test_non_orthogonal_rejected():
    with pytest.raises(ValueError):
        EuclideanMotion(np.diag([1.0, 2.0, 1.0]), np.zeros(3))


def test_reflections_allowed():
    assert EuclideanMotion(np.diag([1.0, 1.0, -1.0]), np.zeros(3)).det == -1.0


def test_act_features_examples():
    V = FeatureMatrix(np.array([0.3, -1.0]), np.array([[1.0, 0.0, 0.0]]))
    same = act_features(EuclideanMotion.identity(), V)
    assert np.array_equal(same.U, V.U)
    g = EuclideanMotion(axis_angle_matrix([0, 0, 1], np.pi / 2), np.zeros(3))
    np.testing.assert_allclose(act_features(g, V).U, [[0.0, 1.0, 0.0]], atol=1e-15)


def test_action_axioms(rng):
    for seed in range(100):
        r = np.random.default_rng(seed)
        g1, g2 = motions(r, 2)
        V = FeatureMatrix(r.standard_normal(3), r.standard_normal((5, 3)))
        lhs = act_features(g1, act_features(g2, V))
        rhs = act_features(compose(g1, g2), V)
        np.testing.assert_allclose(lhs.U, rhs.U, atol=1e-9)
        assert np.array_equal(lhs.u, V.u)  # invariant part is untouched bit for bit
        f = ScalarField(lambda x: np.sin(x[..., 0]) + x[..., 1] * x[..., 2])
        x = r.standard_normal((4, 3))
        np.testing.assert_allclose(act_field(g1, act_field(g2, f))(x), act_field(compose(g1, g2), f)(x), atol=1e-9)
        np.testing.assert_allclose(act_field(EuclideanMotion.identity(), f)(x), f(x), atol=0)


def test_act_points_examples(rng):
    g = EuclideanMotion(np.eye(3), [1.0, 2.0, 3.0])
    np.testing.assert_array_equal(act_points(g, [[0.0, 0.0, 0.0]]), [[1, 2, 3]])
    X = rng.standard_normal((6, 3))
    np.testing.assert_array_equal(act_points(EuclideanMotion.identity(), X), X)
    (h,) = motions(rng, 1)
    loop = np.array([h.R @ x + h.t for x in X])
    np.testing.assert_allclose(act_points(h, X), loop, atol=1e-12)


def test_act_field_examples(rng):
    f = ScalarField(lambda x: x[..., 0], lambda x: np.broadcast_to([1.0, 0, 0], x.shape))
    g = EuclideanMotion(np.eye(3), [1.0, 0.0, 0.0])
    x = rng.standard_normal((5, 3))
    np.testing.assert_allclose(act_field(g, f)(x), x[:, 0] - 1.0, atol=1e-15)


def test_act_field_change_of_variables(rng):
    f = ScalarField(lambda x: np.linalg.norm(x, axis=-1) - 1.0 + 0.3 * x[..., 0] ** 3)
    for g in motions(rng, 20):
        x = rng.standard_normal((8, 3))
        np.testing.assert_allclose(act_field(g, f)(act_points(g, x)), f(x), atol=1e-10)


def test_act_field_gradient_chain_rule(rng):
    f = ScalarField(lambda x: x[..., 0] ** 2 + np.sin(x[..., 1]) * x[..., 2],
                    lambda x: np.stack([2 * x[..., 0], np.cos(x[..., 1]) * x[..., 2], np.sin(x[..., 1])], -1))
    for g in motions(rng, 10):
        gf = act_field(g, f)
        x = rng.standard_normal((5, 3))
        fd = ScalarField(gf.value).gradient(x)
        np.testing.assert_allclose(gf.gradient(x), fd, rtol=1e-4, atol=1e-6)


def test_act_field_sphere_zero_set(rng):
    f = ScalarField(lambda x: np.linalg.norm(x, axis=-1) - 1.0)
    grid = GridSpec((-4, -4, -4), (4, 4, 4), 41)
    for g in motions(rng, 5, scale=1.0):
        pts = extract_zero_crossings(act_field(g, f), grid)
        # pulled back, the crossings lie on the unit sphere up to linear-interpolation error
        back = (pts - g.t) @ g.R
        assert len(pts) > 0
        radial = np.abs(np.linalg.norm(back, axis=1) - 1.0)
        assert radial.max() < grid.cell_diagonal ** 2
        # and exactly: the transformed field vanishes where f vanishes on the pulled-back points
        on_sphere = back / np.linalg.norm(back, axis=1, keepdims=True)
        np.testing.assert_allclose(act_field(g, f)(act_points(g, on_sphere)), 0.0, atol=1e-6)


def test_feature_matrix_checks():
    with pytest.raises(ValueError):
        FeatureMatrix(np.array([np.nan]), np.zeros((1, 3)))
    V = FeatureMatrix(np.arange(2.0), np.arange(6.0).reshape(2, 3))
    W = FeatureMatrix.from_flat(V.flat(), 2)
    assert np.array_equal(W.u, V.u) and np.array_equal(W.U, V.U)
