"""Reconstruction metrics and zero-level-set point extraction."""
from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .autodiff import ShapeMismatch
from .backbones import EmptyCloud


class EmptySample(ValueError):
    pass


def mse(X, Y):
    """Mean over shapes and vertices of the per-vertex Euclidean error (not squared)."""
    X = np.asarray(X, dtype=np.float64)
    Y = np.asarray(Y, dtype=np.float64)
    if X.shape != Y.shape:
        raise ShapeMismatch(f"mesh batches differ in shape: {X.shape} vs {Y.shape}")
    return float(np.mean(np.linalg.norm(X - Y, axis=-1)))


def nearest_sq_dist(A, B, chunk=2048):
    """For each row of A, squared distance to the closest row of B (brute force)."""
    A = np.asarray(A, dtype=np.float64).reshape(-1, 3)
    B = np.asarray(B, dtype=np.float64).reshape(-1, 3)
    if len(A) == 0 or len(B) == 0:
        raise EmptyCloud("Chamfer distance needs two non-empty clouds")
    out = np.empty(len(A))
    for s in range(0, len(A), chunk):
        d = A[s:s + chunk, None, :] - B[None, :, :]
        out[s:s + chunk] = np.min(np.einsum("ijk,ijk->ij", d, d), axis=1)
    return out


def chamfer_one_sided(A, B):
    return float(np.mean(nearest_sq_dist(A, B)))


def chamfer(A, B):
    return 0.5 * (chamfer_one_sided(A, B) + chamfer_one_sided(B, A))


def iou(S, occ_X, occ_Y):
    """Fraction of samples inside both shapes: (1/|S|) sum o_X(x) o_Y(x)."""
    S = np.asarray(S, dtype=np.float64).reshape(-1, 3)
    if len(S) == 0:
        raise EmptySample("IoU needs at least one sample point")
    return float(np.mean(np.asarray(occ_X(S), dtype=np.float64) * np.asarray(occ_Y(S), dtype=np.float64)))


def occupancy_from_field(f):
    """Inside is f <= 0."""
    return lambda x: (np.asarray(f(x)) <= 0.0).astype(np.int64)


@dataclass(frozen=True)
class IouConfig:
    bbox_samples: int = 10_000
    near_samples: int = 20_000
    near_sigma: float = 0.01
    box_lo: tuple = (-1.0, -1.0, -1.0)
    box_hi: tuple = (1.0, 1.0, 1.0)

    def __post_init__(self):
        if self.bbox_samples <= 0 or self.near_samples <= 0:
            raise ValueError("IoU sample counts must be positive")
        if self.near_sigma <= 0:
            raise ValueError("near-surface sigma must be positive")


def iou_samples(rng, cfg: IouConfig, surface_points):
    """Uniform box samples plus Gaussian-jittered copies of surface points."""
    surface_points = np.asarray(surface_points, dtype=np.float64).reshape(-1, 3)
    box = rng.uniform(cfg.box_lo, cfg.box_hi, size=(cfg.bbox_samples, 3))
    idx = rng.integers(0, len(surface_points), size=cfg.near_samples)
    near = surface_points[idx] + cfg.near_sigma * rng.standard_normal((cfg.near_samples, 3))
    return np.concatenate([box, near])


@dataclass(frozen=True)
class GridSpec:
    lo: tuple
    hi: tuple
    resolution: tuple

    def __post_init__(self):
        res = tuple(int(r) for r in np.broadcast_to(self.resolution, (3,)))
        if min(res) < 2:
            raise ValueError("grid resolution must be at least 2 per axis")
        object.__setattr__(self, "resolution", res)

    @property
    def axes(self):
        return [np.linspace(self.lo[i], self.hi[i], self.resolution[i]) for i in range(3)]

    @property
    def cell_diagonal(self):
        step = (np.asarray(self.hi, dtype=np.float64) - self.lo) / (np.asarray(self.resolution) - 1)
        return float(np.linalg.norm(step))

    def points(self):
        return np.stack(np.meshgrid(*self.axes, indexing="ij"), axis=-1)


def extract_zero_crossings(f, grid: GridSpec, batch=65536):
    """Linear-interpolated zeros on grid edges whose endpoints have strictly opposite signs.

    Edges are visited x-direction first, then y, then z, each in C order of
    their lower endpoint.
    """
    P = grid.points()
    flat = P.reshape(-1, 3)
    vals = np.concatenate([np.asarray(f(flat[s:s + batch]), dtype=np.float64).reshape(-1)
                           for s in range(0, len(flat), batch)]).reshape(grid.resolution)
    out = []
    for axis in range(3):
        lo = [slice(None)] * 3
        hi = [slice(None)] * 3
        lo[axis] = slice(0, -1)
        hi[axis] = slice(1, None)
        v0, v1 = vals[tuple(lo)], vals[tuple(hi)]
        p0, p1 = P[tuple(lo)], P[tuple(hi)]
        mask = ((v0 < 0) & (v1 > 0)) | ((v0 > 0) & (v1 < 0))
        a = v0[mask] / (v0[mask] - v1[mask])
        out.append(p0[mask] + a[:, None] * (p1[mask] - p0[mask]))
    return np.concatenate(out) if out else np.zeros((0, 3))


def write_metrics_csv(path, rows):
    """rows: iterable of (split, metric, value)."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["split", "metric", "value"])
        for split, metric, value in rows:
            w.writerow([split, metric, repr(float(value))])


def read_metrics_csv(path):
    with open(path, newline="") as fh:
        return [(r["split"], r["metric"], float(r["value"])) for r in csv.DictReader(fh)]
