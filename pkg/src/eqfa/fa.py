"""Frame averaging: <phi>_F(V) = 1/|F| sum_g rho_W(g) phi(rho_V(g)^-1 V).

``fa_apply`` is the generic, value-level operator over any pair of actions.
``canonicalize`` / ``average_back`` are the batched tensor versions used by
the trainable models; the frame enters those as constants, so no gradient
flows through its construction.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .frames import Frame
from .group import (
    EuclideanMotion,
    FeatureMatrix,
    ScalarField,
    act_features,
    act_field,
    act_points,
    inverse,
)


class DimensionMismatch(ValueError):
    pass


@dataclass(frozen=True)
class ActionSpec:
    """How E(3) acts on a space.

    kind is one of ``features`` (invariant a + equivariant b x 3 rows),
    ``points`` (n x 3 matrix), ``invariant`` (anything, acted on trivially)
    or ``field`` (ScalarField, change of variables).
    """

    kind: str
    a: int | None = None
    b: int | None = None

    def __post_init__(self):
        if self.kind not in ("features", "points", "invariant", "field"):
            raise ValueError(f"unknown action kind {self.kind!r}")

    def check(self, value):
        if self.kind == "features":
            if not isinstance(value, FeatureMatrix):
                raise DimensionMismatch(f"expected FeatureMatrix, got {type(value).__name__}")
            if (self.a is not None and value.a != self.a) or (self.b is not None and value.b != self.b):
                raise DimensionMismatch(f"expected (a, b) = ({self.a}, {self.b}), got ({value.a}, {value.b})")
        elif self.kind == "points":
            arr = np.asarray(value)
            if arr.ndim != 2 or arr.shape[1] != 3 or (self.b is not None and arr.shape[0] != self.b):
                raise DimensionMismatch(f"expected ({self.b}, 3) point matrix, got {arr.shape}")
        elif self.kind == "field" and not isinstance(value, ScalarField):
            raise DimensionMismatch(f"expected ScalarField, got {type(value).__name__}")

    def act(self, g: EuclideanMotion, value):
        if self.kind == "features":
            return act_features(g, value)
        if self.kind == "points":
            return act_points(g, value)
        if self.kind == "field":
            return act_field(g, value)
        return value


FEATURES = ActionSpec("features")
POINTS = ActionSpec("points")
INVARIANT = ActionSpec("invariant")
FIELD = ActionSpec("field")


def _average(values, kind):
    n = len(values)
    if kind == "features":
        u = values[0].u.copy()
        U = values[0].U.copy()
        for v in values[1:]:
            u = u + v.u
            U = U + v.U
        return FeatureMatrix(u / n, U / n)
    if kind == "field":
        fields = tuple(values)

        def value(x):
            acc = fields[0](x)
            for f in fields[1:]:
                acc = acc + f(x)
            return acc / n

        def grad(x):
            acc = fields[0].gradient(x)
            for f in fields[1:]:
                acc = acc + f.gradient(x)
            return acc / n

        return ScalarField(value, grad)
    acc = np.array(values[0], dtype=np.float64)
    for v in values[1:]:
        acc = acc + np.asarray(v, dtype=np.float64)
    return acc / n


def fa_apply(phi, frame: Frame, rho_in: ActionSpec, rho_out: ActionSpec, V):
    """Average rho_out(g) phi(rho_in(g)^-1 V) over the frame, in frame order."""
    if len(frame) == 0:
        raise ValueError("empty frame")
    rho_in.check(V)
    outs = []
    for g in frame:
        y = phi(rho_in.act(inverse(g), V))
        rho_out.check(y)
        outs.append(rho_out.act(g, y))
    return _average(outs, rho_out.kind)


def fa_apply_pointwise(psi_hat, frame_of_Z: Frame, Z: FeatureMatrix, x):
    """Invariant average of psi(Z, x) with (Z, x) moved jointly by g^-1."""
    x = np.asarray(x, dtype=np.float64)
    acc = 0.0
    for g in frame_of_Z:
        gi = inverse(g)
        acc = acc + psi_hat(act_features(gi, Z), act_points(gi, x))
    return acc / len(frame_of_Z)


# -- batched tensor helpers --------------------------------------------------------
def canonicalize(X, rotations, t):
    """rho(g)^-1 X = (X - t) R for every frame element.

    X (..., n, 3) tensor or array; rotations (..., F, 3, 3); t (..., 3).
    Returns (..., F, n, 3).
    """
    Xc = ad.sub(ad.expand_dims(X, -3), np.asarray(t)[..., None, None, :])
    return ad.matmul(Xc, rotations)


def transform_rows(Y, rotations, t):
    """rho(g) Y = Y R^T + t for each frame element; Y (..., F, n, 3)."""
    return ad.add(ad.matmul(Y, np.swapaxes(rotations, -1, -2)), np.asarray(t)[..., None, None, :])


def average_back(Y, rotations, t):
    """Mean over the frame axis of rho(g) Y_g; Y (..., F, n, 3) -> (..., n, 3)."""
    return ad.mean(transform_rows(Y, rotations, t), axis=-3)
