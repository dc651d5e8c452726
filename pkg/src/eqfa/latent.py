"""Interpolation between latent codes that respects their E(3) structure."""
from __future__ import annotations

import numpy as np

from .group import FeatureMatrix
from .linalg3 import procrustes_rotation, slerp_rotation


def interpolate(Z0: FeatureMatrix, Z1: FeatureMatrix, t: float) -> FeatureMatrix:
    """Rotate-then-blend path from Z0 (t=0) to Z1 (t=1).

    Equivariant rows are centered, aligned by the Procrustes rotation R
    (Q0c R^T ~ Q1c), blended in the aligned pose and rotated along the geodesic
    from I to R; centroids and invariant parts are blended linearly.
    """
    if (Z0.a, Z0.b) != (Z1.a, Z1.b):
        raise ValueError(f"latent dims differ: {(Z0.a, Z0.b)} vs {(Z1.a, Z1.b)}")
    t = float(t)
    q = (1.0 - t) * Z0.u + t * Z1.u
    c0, c1 = Z0.U.mean(axis=0), Z1.U.mean(axis=0)
    Q0, Q1 = Z0.U - c0, Z1.U - c1
    R = procrustes_rotation(Q0, Q1)
    D = Q1 @ R - Q0
    Qt = (Q0 + t * D) @ slerp_rotation(t, R).T + (1.0 - t) * c0 + t * c1
    return FeatureMatrix(q, Qt)


def interpolate_parts(Zs0, Zs1, t):
    """Per-part interpolation for piecewise latents."""
    if len(Zs0) != len(Zs1):
        raise ValueError(f"part counts differ: {len(Zs0)} vs {len(Zs1)}")
    return [interpolate(a, b, t) for a, b in zip(Zs0, Zs1)]


def interpolation_path(Z0, Z1, steps):
    """``steps`` codes at uniform t in [0, 1]; accepts single latents or part lists."""
    if steps < 2:
        raise ValueError("need at least 2 steps")
    ts = np.linspace(0.0, 1.0, steps)
    if isinstance(Z0, FeatureMatrix):
        return [interpolate(Z0, Z1, t) for t in ts]
    return [interpolate_parts(Z0, Z1, t) for t in ts]
