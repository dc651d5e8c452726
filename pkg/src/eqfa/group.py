"""E(3) = O(3) x| R^3 and its actions on feature matrices and scalar fields."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np


@dataclass(frozen=True)
class EuclideanMotion:
    R: np.ndarray
    t: np.ndarray

    def __post_init__(self):
        R = np.array(self.R, dtype=np.float64).reshape(3, 3)
        t = np.array(self.t, dtype=np.float64).reshape(3)
        if not np.allclose(R.T @ R, np.eye(3), atol=1e-8, rtol=0.0):
            raise ValueError("R is not orthogonal")
        R.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "R", R)
        object.__setattr__(self, "t", t)

    @classmethod
    def identity(cls):
        return cls(np.eye(3), np.zeros(3))

    @property
    def det(self):
        return float(np.linalg.det(self.R))


def compose(g1: EuclideanMotion, g2: EuclideanMotion) -> EuclideanMotion:
    """g1 after g2."""
    return EuclideanMotion(g1.R @ g2.R, g1.R @ g2.t + g1.t)


def inverse(g: EuclideanMotion) -> EuclideanMotion:
    return EuclideanMotion(g.R.T, -(g.R.T @ g.t))


def motion_distance(g1: EuclideanMotion, g2: EuclideanMotion) -> float:
    return max(np.linalg.norm(g1.R - g2.R), np.linalg.norm(g1.t - g2.t))


@dataclass(frozen=True)
class FeatureMatrix:
    """Invariant part u (a,) and equivariant part U (b, 3)."""

    u: np.ndarray
    U: np.ndarray

    def __post_init__(self):
        u = np.array(self.u, dtype=np.float64).reshape(-1)
        U = np.array(self.U, dtype=np.float64).reshape(-1, 3)
        if not (np.all(np.isfinite(u)) and np.all(np.isfinite(U))):
            raise ValueError("FeatureMatrix entries must be finite")
        u.setflags(write=False)
        U.setflags(write=False)
        object.__setattr__(self, "u", u)
        object.__setattr__(self, "U", U)

    @property
    def a(self):
        return self.u.shape[0]

    @property
    def b(self):
        return self.U.shape[0]

    def flat(self):
        return np.concatenate([self.u, self.U.reshape(-1)])

    @classmethod
    def from_flat(cls, vec, a):
        vec = np.asarray(vec, dtype=np.float64)
        return cls(vec[:a], vec[a:].reshape(-1, 3))


def act_points(g: EuclideanMotion, X):
    X = np.asarray(X, dtype=np.float64)
    return X @ g.R.T + g.t


def act_features(g: EuclideanMotion, V: FeatureMatrix) -> FeatureMatrix:
    return FeatureMatrix(V.u, act_points(g, V.U))


def _finite_difference_gradient(value, x, h=1e-5):
    x = np.asarray(x, dtype=np.float64)
    grad = np.zeros(x.shape)
    for k in range(3):
        e = np.zeros(3)
        e[k] = h
        grad[..., k] = (value(x + e) - value(x - e)) / (2.0 * h)
    return grad


@dataclass(frozen=True)
class ScalarField:
    """A map R^3 -> R, vectorised over leading axes of the query points.

    ``value`` takes points (..., 3) and returns (...). ``grad`` returns
    (..., 3); when omitted, central differences of ``value`` are used.
    """

    value: Callable[[np.ndarray], np.ndarray]
    grad: Callable[[np.ndarray], np.ndarray] | None = field(default=None)

    def __call__(self, x):
        return self.value(np.asarray(x, dtype=np.float64))

    def gradient(self, x):
        x = np.asarray(x, dtype=np.float64)
        if self.grad is not None:
            return self.grad(x)
        return _finite_difference_gradient(self.value, x)


def act_field(g: EuclideanMotion, f: ScalarField) -> ScalarField:
    """x -> f(R^T (x - t)); gradients pulled back by the chain rule."""
    R = g.R
    t = g.t

    def value(x):
        return f((np.asarray(x) - t) @ R)

    def grad(x):
        # d/dx f(R^T(x - t)) = R grad f(R^T(x - t))
        return f.gradient((np.asarray(x) - t) @ R) @ R.T

    return ScalarField(value, grad)
