"""Synthetic articulated chains, point clouds, split protocols and file I/O."""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .group import EuclideanMotion, act_points
from .linalg3 import axis_angle_matrix


class InvalidSpec(ValueError):
    pass


class ParseError(ValueError):
    def __init__(self, path, lineno, message):
        super().__init__(f"{path}:{lineno}: {message}")
        self.path = path
        self.lineno = lineno


# -- random motions --------------------------------------------------------------
def random_rotation(rng):
    """Haar-uniform rotation from a normalised Gaussian quaternion."""
    q = rng.standard_normal(4)
    q /= np.linalg.norm(q)
    w, x, y, z = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
        [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
        [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
    ])


def random_motion(rng, translation_scale=1.0, reflections=False):
    R = random_rotation(rng)
    if reflections and rng.random() < 0.5:
        R = -R
    t = rng.uniform(-translation_scale, translation_scale, size=3) if translation_scale > 0 else np.zeros(3)
    return EuclideanMotion(R, t)


def rotation_about_z(angle):
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


# -- articulated chains -------------------------------------------------------------
@dataclass(frozen=True)
class ArticulatedChainSpec:
    """A tube along +z split into rigid segments joined at pivots.

    joint_angles holds one axis-angle vector per joint (segments - 1 of them);
    the distal side of joint j rotates about the pivot at z = (j+1) * length.
    """

    segments: int = 3
    ring_size: int = 8
    rings_per_segment: int = 8
    segment_length: float = 1.0
    radius: float = 0.25
    aspect: float = 0.6  # elliptic cross-section keeps PCA spectra non-degenerate
    taper: float = 0.3  # radius shrinks by this fraction from root to tip
    skew: float = 0.25  # lopsided cross-section; breaks mirror symmetries of the tube
    joint_angles: tuple = ()
    soft: bool = False

    def validate(self):
        if self.segments < 2:
            raise InvalidSpec("segments must be ≥ 2")
        if self.ring_size < 3:
            raise InvalidSpec("ring_size must be ≥ 3")
        if self.rings_per_segment < 2:
            raise InvalidSpec("rings_per_segment must be ≥ 2")
        if self.segment_length <= 0 or self.radius <= 0 or self.aspect <= 0:
            raise InvalidSpec("lengths must be positive")
        if not 0.0 <= self.taper < 1.0 or not 0.0 <= self.skew < 0.5:
            raise InvalidSpec("taper must lie in [0, 1) and skew in [0, 0.5)")
        if self.joint_angles and len(self.joint_angles) != self.segments - 1:
            raise InvalidSpec(f"need {self.segments - 1} joint angles, got {len(self.joint_angles)}")

    @property
    def n_vertices(self):
        return self.segments * self.rings_per_segment * self.ring_size


def chain_rest_pose(spec: ArticulatedChainSpec):
    """Rest vertices (n, 3), per-vertex ring index and segment index."""
    spec.validate()
    n_rings = spec.segments * spec.rings_per_segment
    theta = 2.0 * np.pi * np.arange(spec.ring_size) / spec.ring_size
    ring_z = (np.arange(n_rings) + 0.5) * spec.segment_length / spec.rings_per_segment
    X = np.empty((n_rings, spec.ring_size, 3))
    r = spec.radius * (1.0 - spec.taper * ring_z / (spec.segments * spec.segment_length))
    X[:, :, 0] = r[:, None] * (np.cos(theta) + spec.skew * np.cos(2.0 * theta))
    X[:, :, 1] = spec.aspect * r[:, None] * (np.sin(theta) + spec.skew * np.cos(2.0 * theta))
    X[:, :, 2] = ring_z[:, None]
    ring = np.repeat(np.arange(n_rings), spec.ring_size)
    return X.reshape(-1, 3), ring, ring // spec.rings_per_segment


def chain_faces(spec: ArticulatedChainSpec):
    """Triangles of the open tube (no caps), 0-based."""
    n_rings = spec.segments * spec.rings_per_segment
    m = spec.ring_size
    faces = []
    for r in range(n_rings - 1):
        for i in range(m):
            a = r * m + i
            b = r * m + (i + 1) % m
            c = (r + 1) * m + i
            d = (r + 1) * m + (i + 1) % m
            faces.append((a, b, d))
            faces.append((a, d, c))
    return np.array(faces, dtype=np.int64)


def faces_to_edges(faces):
    e = np.concatenate([faces[:, [0, 1]], faces[:, [1, 2]], faces[:, [2, 0]]])
    e = np.sort(e, axis=1)
    return tuple(map(tuple, np.unique(e, axis=0)))


def chain_weights(spec: ArticulatedChainSpec, soft=None):
    """Skinning weights (n, k). Soft weights blend the ring on each side of a joint 0.75/0.25."""
    soft = spec.soft if soft is None else soft
    _, ring, seg = chain_rest_pose(spec)
    k = spec.segments
    W = np.zeros((ring.size, k))
    W[np.arange(ring.size), seg] = 1.0
    if soft:
        last = spec.rings_per_segment - 1
        local = ring % spec.rings_per_segment
        for v in range(ring.size):
            s = seg[v]
            if local[v] == last and s < k - 1:
                W[v, s], W[v, s + 1] = 0.75, 0.25
            elif local[v] == 0 and s > 0:
                W[v, s], W[v, s - 1] = 0.75, 0.25
    return W


def segment_motions(spec: ArticulatedChainSpec):
    """Rigid motion of every segment, composed down the chain from the root."""
    motions = [EuclideanMotion.identity()]
    for j, aa in enumerate(spec.joint_angles or [(0.0, 0.0, 0.0)] * (spec.segments - 1)):
        aa = np.asarray(aa, dtype=np.float64)
        angle = np.linalg.norm(aa)
        Rj = np.eye(3) if angle == 0.0 else axis_angle_matrix(aa, angle)
        pivot = np.array([0.0, 0.0, (j + 1) * spec.segment_length])
        local = EuclideanMotion(Rj, pivot - Rj @ pivot)  # rotation about the pivot
        parent = motions[-1]
        motions.append(EuclideanMotion(parent.R @ local.R, parent.R @ local.t + parent.t))
    return motions


def gen_chain(spec: ArticulatedChainSpec, rng=None):
    """Posed chain vertices (n, 3) and skinning weights (n, k), blended by linear skinning.

    ``rng`` is accepted for interface symmetry; a chain is fully determined by its spec.
    """
    spec.validate()
    rest, _, _ = chain_rest_pose(spec)
    W = chain_weights(spec)
    motions = segment_motions(spec)
    X = np.zeros_like(rest)
    for j, g in enumerate(motions):
        X += W[:, j:j + 1] * act_points(g, rest)
    return X, W


def random_joint_angles(rng, segments, max_angle=np.deg2rad(60.0)):
    """Bends about random horizontal axes; returns (angles, signed first-joint angle)."""
    out, signed = [], []
    for _ in range(segments - 1):
        phi = rng.uniform(0.0, 2.0 * np.pi)
        ang = rng.uniform(-max_angle, max_angle)
        out.append(tuple(ang * np.array([np.cos(phi), np.sin(phi), 0.0])))
        signed.append(ang)
    return tuple(out), float(signed[0])


@dataclass
class ChainDataset:
    shapes: np.ndarray  # (N, n, 3)
    weights: np.ndarray  # (n, k) template skinning weights
    faces: np.ndarray
    poses: np.ndarray  # (N,) signed first-joint angle
    spec: ArticulatedChainSpec

    def __len__(self):
        return self.shapes.shape[0]

    @property
    def edges(self):
        return faces_to_edges(self.faces)


def make_chain_dataset(count, rng, base: ArticulatedChainSpec | None = None,
                       max_angle=np.deg2rad(60.0)):
    base = base or ArticulatedChainSpec()
    base.validate()
    shapes, poses = [], []
    for _ in range(count):
        angles, pose = random_joint_angles(rng, base.segments, max_angle)
        spec = ArticulatedChainSpec(**{**base.__dict__, "joint_angles": angles})
        X, _ = gen_chain(spec)
        shapes.append(X)
        poses.append(pose)
    return ChainDataset(np.stack(shapes), chain_weights(base), chain_faces(base),
                        np.array(poses), base)


# -- point clouds -------------------------------------------------------------------
def sample_triangles(rng, X, faces, count):
    """Uniform area-weighted surface samples of a triangle mesh."""
    a, b, c = X[faces[:, 0]], X[faces[:, 1]], X[faces[:, 2]]
    area = 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1)
    idx = rng.choice(len(faces), size=count, p=area / area.sum())
    r1, r2 = rng.random(count), rng.random(count)
    s = np.sqrt(r1)
    return (1 - s)[:, None] * a[idx] + (s * (1 - r2))[:, None] * b[idx] + (s * r2)[:, None] * c[idx]


def corrupt_cloud(rng, P, noise=0.01, outlier_fraction=0.02):
    """Gaussian jitter plus a fraction of points replaced by uniform bbox outliers."""
    P = P + noise * rng.standard_normal(P.shape)
    n_out = int(round(outlier_fraction * len(P)))
    if n_out:
        lo, hi = P.min(axis=0), P.max(axis=0)
        idx = rng.choice(len(P), size=n_out, replace=False)
        P[idx] = rng.uniform(lo, hi, size=(n_out, 3))
    return P


def sphere_cloud(rng, count, radius=1.0, center=(0.0, 0.0, 0.0), noise=0.01, outlier_fraction=0.02):
    d = rng.standard_normal((count, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    return corrupt_cloud(rng, radius * d + np.asarray(center), noise, outlier_fraction)


def chain_clouds(rng, dataset: ChainDataset, count, noise=0.01, outlier_fraction=0.02):
    return np.stack([corrupt_cloud(rng, sample_triangles(rng, X, dataset.faces, count), noise, outlier_fraction)
                     for X in dataset.shapes])


# -- splits ---------------------------------------------------------------------------
SPLIT_KINDS = ("I", "z", "SO3", "unseen-pose")


@dataclass
class DatasetSplit:
    kind: str
    seed: int
    train: np.ndarray
    test: np.ndarray
    test_motions: list = field(default_factory=list)  # one EuclideanMotion per test index


def make_splits(dataset, kind, seed, test_fraction=0.2, pose_band=None):
    """Deterministic train/test partition and per-test-shape motion.

    I, z and SO3 share the same random partition for a given seed; z rotates
    test shapes about the +z axis, SO3 applies Haar rotations. unseen-pose
    holds out every shape whose pose parameter lies in ``pose_band``
    (default: the top 20% of poses).
    """
    if kind not in SPLIT_KINDS:
        raise ValueError(f"unknown split kind {kind!r}")
    N = len(dataset)
    if N == 0:
        raise ValueError("empty dataset")
    if kind == "unseen-pose":
        poses = np.asarray(dataset.poses)
        lo, hi = pose_band if pose_band is not None else (np.quantile(poses, 0.8), np.inf)
        held = (poses >= lo) & (poses <= hi)
        test, train = np.flatnonzero(held), np.flatnonzero(~held)
        return DatasetSplit(kind, seed, train, test, [EuclideanMotion.identity() for _ in test])
    perm = np.random.default_rng([seed, 0]).permutation(N)
    n_test = max(1, int(round(test_fraction * N)))
    test, train = np.sort(perm[:n_test]), np.sort(perm[n_test:])
    rng = np.random.default_rng([seed, 1 + SPLIT_KINDS.index(kind)])
    if kind == "I":
        motions = [EuclideanMotion.identity() for _ in test]
    elif kind == "z":
        motions = [EuclideanMotion(rotation_about_z(rng.uniform(0, 2 * np.pi)), np.zeros(3)) for _ in test]
    else:
        motions = [EuclideanMotion(random_rotation(rng), np.zeros(3)) for _ in test]
    return DatasetSplit(kind, seed, train, test, motions)


def split_test_shapes(shapes, split: DatasetSplit):
    return np.stack([act_points(g, shapes[i]) for i, g in zip(split.test, split.test_motions)])


# -- I/O ------------------------------------------------------------------------------
def _fmt(x):
    return repr(float(x))


def write_obj(path, X, faces=None):
    lines = [f"v {_fmt(a)} {_fmt(b)} {_fmt(c)}" for a, b, c in np.asarray(X, dtype=np.float64)]
    if faces is not None:
        lines += [f"f {i + 1} {j + 1} {k + 1}" for i, j, k in np.asarray(faces)]
    Path(path).write_text("\n".join(lines) + "\n")


def read_obj(path):
    """Read the ``v``/``f`` subset of OBJ. Returns (vertices (n, 3), faces (f, 3) 0-based)."""
    verts, faces = [], []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        tok = line.split()
        if not tok or tok[0].startswith("#"):
            continue
        try:
            if tok[0] == "v":
                if len(tok) != 4:
                    raise ValueError("vertex needs 3 coordinates")
                verts.append([float(t) for t in tok[1:]])
            elif tok[0] == "f":
                if len(tok) != 4:
                    raise ValueError("only triangular faces are supported")
                idx = [int(t.split("/")[0]) - 1 for t in tok[1:]]
                if min(idx) < 0:
                    raise ValueError("face indices are 1-based")
                faces.append(idx)
            else:
                raise ValueError(f"unsupported record {tok[0]!r}")
        except ValueError as exc:
            raise ParseError(path, lineno, str(exc)) from None
    V = np.array(verts, dtype=np.float64).reshape(-1, 3)
    F = np.array(faces, dtype=np.int64).reshape(-1, 3)
    if F.size and F.max() >= len(V):
        raise ParseError(path, 0, "face index exceeds vertex count")
    return V, F


def write_xyz(path, P):
    Path(path).write_text("".join(f"{_fmt(a)} {_fmt(b)} {_fmt(c)}\n" for a, b, c in np.asarray(P)))


def read_xyz(path):
    pts = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        tok = line.split()
        if not tok:
            continue
        try:
            if len(tok) != 3:
                raise ValueError(f"expected 3 values, got {len(tok)}")
            pts.append([float(t) for t in tok])
        except ValueError as exc:
            raise ParseError(path, lineno, str(exc)) from None
    return np.array(pts, dtype=np.float64).reshape(-1, 3)
