"""Small 3D linear algebra with fixed output contracts.

Everything here works on float64 numpy arrays. ``sym_eig3_batch`` is the
workhorse used by frame construction; the scalar helpers wrap it.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

EIGEN_GAP_RTOL = 1e-7
WEIGHT_SUM_TOL = 1e-12
NEAR_PI_TOL = 1e-6
_JACOBI_MAX_SWEEPS = 50


class ZeroWeight(ValueError):
    pass


class DegenerateAlignment(ValueError):
    pass


class NearPiRotation(ValueError):
    pass


@dataclass(frozen=True)
class EigenResult3:
    eigenvalues: np.ndarray  # (3,), ascending
    eigenvectors: np.ndarray  # (3, 3), column i pairs with eigenvalues[i]
    degenerate: bool


def _jacobi_sweeps(A):
    """Cyclic Jacobi on a stack of symmetric 3x3 matrices. Returns (A_diag, V)."""
    A = A.copy()
    n_batch = A.shape[0]
    V = np.broadcast_to(np.eye(3), (n_batch, 3, 3)).copy()
    for _ in range(_JACOBI_MAX_SWEEPS):
        off = A[:, 0, 1] ** 2 + A[:, 0, 2] ** 2 + A[:, 1, 2] ** 2
        scale = np.einsum("bii->b", A * A)
        if np.all(off <= 1e-36 * np.maximum(scale, 1e-300)):
            break
        for p, q in ((0, 1), (0, 2), (1, 2)):
            apq = A[:, p, q]
            active = np.abs(apq) > 0.0
            if not np.any(active):
                continue
            app = A[:, p, p]
            aqq = A[:, q, q]
            safe_apq = np.where(active, apq, 1.0)
            with np.errstate(over="ignore"):
                # huge theta means a negligible off-diagonal; t -> 0
                theta = (aqq - app) / (2.0 * safe_apq)
                t = np.sign(theta) / (np.abs(theta) + np.hypot(theta, 1.0))
            t = np.where(theta == 0.0, 1.0, t)
            t = np.where(active, t, 0.0)
            c = 1.0 / np.sqrt(t * t + 1.0)
            s = t * c
            # A <- J^T A J with J the (p, q) Givens rotation
            Ap = A[:, :, p].copy()
            Aq = A[:, :, q].copy()
            A[:, :, p] = c[:, None] * Ap - s[:, None] * Aq
            A[:, :, q] = s[:, None] * Ap + c[:, None] * Aq
            Ap = A[:, p, :].copy()
            Aq = A[:, q, :].copy()
            A[:, p, :] = c[:, None] * Ap - s[:, None] * Aq
            A[:, q, :] = s[:, None] * Ap + c[:, None] * Aq
            A[:, p, q] = 0.0
            A[:, q, p] = 0.0
            Vp = V[:, :, p].copy()
            Vq = V[:, :, q].copy()
            V[:, :, p] = c[:, None] * Vp - s[:, None] * Vq
            V[:, :, q] = s[:, None] * Vp + c[:, None] * Vq
    return A, V


def sym_eig3_batch(C):
    """Eigendecomposition of a stack (..., 3, 3) of symmetric matrices.

    Returns ascending eigenvalues (..., 3), eigenvector columns (..., 3, 3)
    and a degeneracy mask (...). Each eigenvector is signed so that its
    largest-magnitude entry is positive (lowest index wins ties).
    """
    C = np.asarray(C, dtype=np.float64)
    lead = C.shape[:-2]
    C = C.reshape(-1, 3, 3)
    C = 0.5 * (C + np.swapaxes(C, -1, -2))
    D, V = _jacobi_sweeps(C)
    lam = np.einsum("bii->bi", D)
    order = np.argsort(lam, axis=-1, kind="stable")
    lam = np.take_along_axis(lam, order, axis=-1)
    V = np.take_along_axis(V, order[:, None, :], axis=-1)
    idx = np.argmax(np.abs(V), axis=-2)  # first max per column
    pivot = np.take_along_axis(V, idx[:, None, :], axis=-2)[:, 0, :]
    V = V * np.where(pivot < 0.0, -1.0, 1.0)[:, None, :]
    gaps = np.diff(lam, axis=-1)
    degenerate = np.min(gaps, axis=-1) < EIGEN_GAP_RTOL * np.maximum(1.0, lam[:, 2])
    return lam.reshape(lead + (3,)), V.reshape(lead + (3, 3)), degenerate.reshape(lead)


def sym_eig3(C) -> EigenResult3:
    lam, V, deg = sym_eig3_batch(np.asarray(C, dtype=np.float64)[None])
    return EigenResult3(lam[0], V[0], bool(deg[0]))


def _check_weights(w):
    total = w.sum(axis=-1)
    if np.any(total <= WEIGHT_SUM_TOL):
        raise ZeroWeight(f"weight sum {np.min(total)!r} is not positive")
    return total


def weighted_centroid(V, w):
    V = np.asarray(V, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    total = _check_weights(w)
    return np.einsum("...n,...nk->...k", w / total[..., None], V)


def weighted_covariance(V, w):
    """(V - 1 t^T)^T diag(w) (V - 1 t^T) with t the weighted centroid."""
    V = np.asarray(V, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    t = weighted_centroid(V, w)
    Vc = V - t[..., None, :]
    return np.einsum("...ni,...n,...nj->...ij", Vc, w, Vc)


def procrustes_rotation(A, B, rtol=1e-10):
    """Rotation R in SO(3) minimising ||A R^T - B||_F for centered A, B."""
    A = np.asarray(A, dtype=np.float64)
    B = np.asarray(B, dtype=np.float64)
    H = A.T @ B
    U, s, Vt = np.linalg.svd(H)
    if s[1] <= rtol * max(s[0], 1e-300):
        raise DegenerateAlignment("cross-covariance has rank < 2; rotation is not unique")
    d = np.sign(np.linalg.det(Vt.T @ U.T))
    if d == 0.0:
        d = 1.0
    S = np.diag([1.0, 1.0, d])
    return Vt.T @ S @ U.T


def rotation_log(R):
    """Axis-angle vector of a proper rotation (angle in [0, pi))."""
    R = np.asarray(R, dtype=np.float64)
    cos_a = np.clip(0.5 * (np.trace(R) - 1.0), -1.0, 1.0)
    angle = np.arccos(cos_a)
    if np.pi - angle < NEAR_PI_TOL:
        raise NearPiRotation(f"rotation angle {angle!r} is within {NEAR_PI_TOL} of pi")
    w = np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    if angle < 1e-8:
        # sin(a)/a -> 1; first-order term is exact to O(a^3)
        return 0.5 * w
    return w * (angle / (2.0 * np.sin(angle)))


def rotation_exp(v):
    """Rodrigues formula for an axis-angle vector."""
    v = np.asarray(v, dtype=np.float64)
    angle = float(np.linalg.norm(v))
    K = np.array([[0.0, -v[2], v[1]], [v[2], 0.0, -v[0]], [-v[1], v[0], 0.0]])
    if angle < 1e-8:
        return np.eye(3) + K + 0.5 * K @ K
    a = np.sin(angle) / angle
    b = (1.0 - np.cos(angle)) / (angle * angle)
    return np.eye(3) + a * K + b * K @ K


def slerp_rotation(t, R):
    """Geodesic exp(t log R) from the identity (t=0) to R (t=1)."""
    R = np.asarray(R, dtype=np.float64)
    if t == 0.0:
        return np.eye(3)
    if t == 1.0:
        rotation_log(R)  # still reject near-pi inputs
        return R.copy()
    return rotation_exp(t * rotation_log(R))


def axis_angle_matrix(axis, angle):
    axis = np.asarray(axis, dtype=np.float64)
    return rotation_exp(axis / np.linalg.norm(axis) * angle)
