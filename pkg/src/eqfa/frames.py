"""Weighted-PCA frames: the centroid plus all 8 sign choices of the eigenbasis."""
from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from .group import EuclideanMotion, compose, motion_distance
from .linalg3 import sym_eig3_batch, weighted_covariance, weighted_centroid

# +++, ++-, +-+, +--, -++, -+-, --+, ---
SIGN_PATTERNS = np.array(list(itertools.product((1.0, -1.0), repeat=3)))


class TooFewPoints(ValueError):
    pass


@dataclass(frozen=True)
class Frame:
    motions: tuple
    source_degenerate: bool = False

    def __len__(self):
        return len(self.motions)

    def __iter__(self):
        return iter(self.motions)

    @property
    def rotations(self):
        return np.stack([g.R for g in self.motions])

    @property
    def translation(self):
        return self.motions[0].t


@dataclass(frozen=True)
class FrameDiagnostics:
    eigenvalues: np.ndarray
    min_gap: float
    centroid: np.ndarray


def pca_frames_batch(V, w=None):
    """Batched frame construction.

    V is (..., d, 3), w is (..., d) or None for unit weights. Returns
    rotations (..., 8, 3, 3), translations (..., 3), eigenvalues (..., 3)
    and the degeneracy mask (...). Rotations follow SIGN_PATTERNS order.
    """
    V = np.asarray(V, dtype=np.float64)
    if V.shape[-2] < 3:
        raise TooFewPoints(f"need at least 3 rows to build a frame, got {V.shape[-2]}")
    if w is None:
        w = np.ones(V.shape[:-1])
    w = np.broadcast_to(np.asarray(w, dtype=np.float64), V.shape[:-1])
    t = weighted_centroid(V, w)
    C = weighted_covariance(V, w)
    lam, E, degenerate = sym_eig3_batch(C)
    rotations = E[..., None, :, :] * SIGN_PATTERNS[:, None, :]
    return rotations, t, lam, degenerate


def pca_frame(V, w=None):
    """Frame and diagnostics of a single (d, 3) point matrix."""
    V = np.asarray(V, dtype=np.float64)
    if V.ndim != 2 or V.shape[1] != 3:
        raise ValueError(f"expected a (d, 3) matrix, got shape {V.shape}")
    rotations, t, lam, degenerate = pca_frames_batch(V, w)
    frame = Frame(tuple(EuclideanMotion(R, t) for R in rotations), bool(degenerate))
    diag = FrameDiagnostics(lam, float(np.min(np.diff(lam))), t)
    return frame, diag


def frames_equal_as_sets(F1: Frame, F2: Frame, tol: float) -> bool:
    """Greedy nearest matching of motions; each motion of F2 used once."""
    if len(F1) != len(F2):
        return False
    remaining = list(F2.motions)
    for g in F1.motions:
        dists = [motion_distance(g, h) for h in remaining]
        best = int(np.argmin(dists))
        if dists[best] > tol:
            return False
        remaining.pop(best)
    return True


def left_translate(g: EuclideanMotion, F: Frame) -> Frame:
    return Frame(tuple(compose(g, h) for h in F.motions), F.source_degenerate)
