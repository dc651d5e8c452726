"""Shape autoencoders built by frame-averaging plain backbones.

Three instances share the same machinery:

* :class:`GlobalMeshAE`   mesh -> latent (u, U) -> mesh, equivariant to E(3).
* :class:`ImplicitVAE`    point cloud -> latent -> scalar field, trained with SALD.
* :class:`PiecewiseMeshAE` per-part frames from skinning weights, blended decode.

Model objects hold configuration only; parameters are plain ``{name: array}``
dicts passed explicitly so training, checkpoints and finite-difference checks
all see the same values. Frames are computed from array data and enter the
autodiff graph as constants.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, replace
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import fa
from .backbones import (
    EmptyCloud,
    MeshNetConfig,
    MlpConfig,
    PointNetConfig,
    init_meshnet,
    init_mlp,
    init_pointnet,
    meshnet_forward,
    mlp_forward,
    pointnet_forward,
)
from .frames import FrameDiagnostics, TooFewPoints, pca_frames_batch
from .group import FeatureMatrix
from .linalg3 import weighted_centroid

LOG_STD_MIN, LOG_STD_MAX = -20.0, 5.0


class EmptyBatch(ValueError):
    pass


class PartFrameError(ValueError):
    pass


class FrameRecorder:
    """Records frames on the first evaluation and replays them afterwards.

    Lets finite-difference checks hold the frames fixed, matching the
    constant-frame gradients used in training.
    """

    def __init__(self):
        self.frames = []
        self.replaying = False
        self._i = 0

    def __call__(self, V, w=None):
        if self.replaying:
            out = self.frames[self._i]
            self._i += 1
            return out
        out = pca_frames_batch(V, w)
        self.frames.append(out)
        return out

    def freeze(self):
        self.replaying = True
        self._i = 0

    def rewind(self):
        self._i = 0


def _frames(V, w=None, recorder=None):
    rot, t, lam, deg = (recorder or pca_frames_batch)(V, w)
    return rot, t


def _split_latent(out, m, d):
    u = ad.getitem(out, (Ellipsis, slice(0, m)))
    U = ad.reshape(ad.getitem(out, (Ellipsis, slice(m, m + 3 * d))), out.shape[:-1] + (d, 3))
    return u, U


def _fa_encode(cfg, params, X, rot, t, m, d):
    """<phi>_F on point matrices X (..., n, 3) with frames (rot, t)."""
    Xc = fa.canonicalize(X, rot, t)
    out = meshnet_forward(cfg, params, Xc, prefix="enc")
    u, Ucan = _split_latent(out, m, d)
    return ad.mean(u, axis=-2), fa.average_back(Ucan, rot, t)


def _latent_vector(u, U):
    flat = ad.reshape(U, U.shape[:-2] + (U.shape[-2] * 3,))
    return ad.concat([u, flat], axis=-1)


def _fa_decode(cfg, params, u, U, recorder=None):
    """<psi>_F with the frame of the latent's equivariant rows."""
    U = ad.as_tensor(U)
    if U.shape[-2] < 3:
        raise TooFewPoints(f"decoder frames need at least 3 equivariant rows, got {U.shape[-2]}")
    rot, t = _frames(U.data, None, recorder)
    Ucan = fa.canonicalize(U, rot, t)  # (..., F, d, 3)
    n_frames = rot.shape[-3]
    u_b = ad.broadcast_to(ad.expand_dims(u, -2), u.shape[:-1] + (n_frames, u.shape[-1]))
    Y = meshnet_forward(cfg, params, _latent_vector(u_b, Ucan), prefix="dec")
    return fa.average_back(Y, rot, t)


# -- mesh autoencoders -----------------------------------------------------------------
@dataclass(frozen=True)
class MeshAEConfig:
    n_vertices: int
    edges: tuple
    m: int = 8
    d: int = 8
    hidden: int = 64
    rounds: int = 2
    use_fa: bool = True

    @property
    def encoder(self):
        return MeshNetConfig(self.n_vertices, self.edges, self.rounds, self.hidden,
                             in_dim=3, out_dim=self.m + 3 * self.d, mode="encoder")

    @property
    def decoder(self):
        return MeshNetConfig(self.n_vertices, self.edges, self.rounds, self.hidden,
                             in_dim=self.m + 3 * self.d, out_dim=3, mode="decoder")


class _MeshAEBase:
    def __init__(self, cfg: MeshAEConfig):
        self.cfg = cfg
        self._enc = cfg.encoder
        self._dec = cfg.decoder

    def init_params(self, rng):
        params = init_meshnet(self._enc, rng, prefix="enc")
        params.update(init_meshnet(self._dec, rng, prefix="dec"))
        return params

    def reconstruct(self, params, X, recorder=None):
        u, U = self.encode_batch(params, X, recorder)
        return self.decode_batch(params, u, U, recorder)

    def loss(self, params, X, rng=None, recorder=None):
        return recon_loss_tensor(self.reconstruct(params, X, recorder), X)


class GlobalMeshAE(_MeshAEBase):
    kind = "global-mesh"

    def encode_batch(self, params, X, recorder=None):
        """X (B, n, 3) -> u (B, m), U (B, d, 3)."""
        X = np.asarray(X, dtype=np.float64)
        m, d = self.cfg.m, self.cfg.d
        if not self.cfg.use_fa:
            return _split_latent(meshnet_forward(self._enc, params, X, prefix="enc"), m, d)
        rot, t = _frames(X, None, recorder)
        return _fa_encode(self._enc, params, X, rot, t, m, d)

    def decode_batch(self, params, u, U, recorder=None):
        if not self.cfg.use_fa:
            return meshnet_forward(self._dec, params, _latent_vector(ad.as_tensor(u), ad.as_tensor(U)),
                                   prefix="dec")
        return _fa_decode(self._dec, params, ad.as_tensor(u), U, recorder)


def part_geometry(X, W, j):
    """X_j: vertices weighted toward the part, the rest pulled to its weighted centroid."""
    X = np.asarray(X, dtype=np.float64)
    w = np.asarray(W, dtype=np.float64)[:, j]
    c = weighted_centroid(X, w)
    return (1.0 - w)[:, None] * c[None, :] + w[:, None] * X


class PiecewiseMeshAE(_MeshAEBase):
    kind = "piecewise"

    def __init__(self, cfg: MeshAEConfig, weights):
        super().__init__(cfg)
        W = np.asarray(weights, dtype=np.float64)
        if W.shape[0] != cfg.n_vertices:
            raise ValueError(f"weights have {W.shape[0]} rows, template has {cfg.n_vertices} vertices")
        if not np.allclose(W.sum(axis=1), 1.0, atol=1e-8):
            raise ValueError("skinning weight rows must sum to 1")
        if np.any(W.sum(axis=0) <= 0):
            bad = int(np.flatnonzero(W.sum(axis=0) <= 0)[0])
            raise PartFrameError(f"part {bad} has zero total weight")
        self.weights = W

    @property
    def k(self):
        return self.weights.shape[1]

    def part_inputs(self, X, recorder=None):
        """Per-part geometries (B, k, n, 3) and their weighted frames."""
        wT = self.weights.T  # (k, n)
        Xb = np.broadcast_to(X[:, None], (X.shape[0], self.k) + X.shape[1:])
        rot, t = _frames(Xb, wT, recorder)
        Xj = (1.0 - wT)[None, :, :, None] * t[:, :, None, :] + wT[None, :, :, None] * Xb
        return Xj, rot, t

    def encode_batch(self, params, X, recorder=None):
        """X (B, n, 3) -> u (B, k, m), U (B, k, d, 3)."""
        X = np.asarray(X, dtype=np.float64)
        m, d = self.cfg.m, self.cfg.d
        Xj, rot, t = self.part_inputs(X, recorder)
        if not self.cfg.use_fa:
            return _split_latent(meshnet_forward(self._enc, params, Xj, prefix="enc"), m, d)
        return _fa_encode(self._enc, params, Xj, rot, t, m, d)

    def decode_batch(self, params, u, U, recorder=None):
        """Sum over parts of w_j (.) <psi>_F(Z_j)."""
        if self.cfg.use_fa:
            Yj = _fa_decode(self._dec, params, ad.as_tensor(u), U, recorder)
        else:
            Yj = meshnet_forward(self._dec, params, _latent_vector(ad.as_tensor(u), ad.as_tensor(U)),
                                 prefix="dec")
        return ad.sum_(ad.mul(self.weights.T[:, :, None], Yj), axis=-3)


def recon_loss_tensor(Y, X):
    """(1/N) sum_i ||Y_i - X_i||_F."""
    if Y.shape[0] == 0:
        raise EmptyBatch("empty batch")
    diff = ad.sub(Y, np.asarray(X))
    per_sample = ad.norm_rows(ad.reshape(diff, (diff.shape[0], -1)), axis=-1)
    return ad.mean(per_sample)


def recon_loss(X, model, params):
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 3 or X.shape[0] == 0:
        raise EmptyBatch("recon_loss needs a non-empty (N, n, 3) batch")
    return float(model.loss(params, X).data)


def encode_global(model, params, X):
    u, U = model.encode_batch(params, np.asarray(X, dtype=np.float64)[None])
    return FeatureMatrix(u.data[0], U.data[0])


def decode_global(model, params, Z: FeatureMatrix):
    return model.decode_batch(params, Z.u[None], Z.U[None]).data[0]


def encode_piecewise(model, params, X):
    u, U = model.encode_batch(params, np.asarray(X, dtype=np.float64)[None])
    return [FeatureMatrix(u.data[0, j], U.data[0, j]) for j in range(model.k)]


def decode_piecewise(model, params, Zs):
    u = np.stack([Z.u for Z in Zs])[None]
    U = np.stack([Z.U for Z in Zs])[None]
    return model.decode_batch(params, u, U).data[0]


# -- implicit VAE ------------------------------------------------------------------------
@dataclass(frozen=True)
class ImplicitConfig:
    m: int = 0
    d: int = 8
    encoder_hidden: int = 64
    encoder_blocks: int = 2
    decoder_hidden: int = 64
    decoder_layers: int = 4
    activation: str = "relu"
    # Radial term |x - c| - r added to the decoder output (c = latent centroid);
    # plays the role of SALD's geometric initialisation. None disables it.
    sphere_init_radius: float | None = 0.5
    invariant_noise: bool = False
    vae_weight: float = 0.001
    samples: int = 512
    near_sigma: float = 0.05  # fraction of the box diagonal
    fd_step: float = 1e-4  # fraction of the box diagonal
    box_lo: tuple = (-1.0, -1.0, -1.0)
    box_hi: tuple = (1.0, 1.0, 1.0)
    use_fa: bool = True

    @property
    def eta_dim(self):
        return self.d + (self.m if self.invariant_noise else 0)

    @property
    def encoder(self):
        return PointNetConfig(out_dim=self.m + 3 * self.d + self.eta_dim,
                              hidden=self.encoder_hidden, blocks=self.encoder_blocks)

    @property
    def decoder(self):
        h = self.decoder_hidden
        widths = (self.m + 3 * self.d + 3,) + (h,) * self.decoder_layers + (1,)
        skip = self.decoder_layers // 2 if self.decoder_layers >= 2 else None
        return MlpConfig(widths, activation=self.activation, skip=skip)

    @property
    def box_diagonal(self):
        return float(np.linalg.norm(np.subtract(self.box_hi, self.box_lo)))


def bounding_box(clouds, inflate=0.1):
    """Axis-aligned box of all points, grown by ``inflate`` of its extent per side."""
    P = np.asarray(clouds, dtype=np.float64).reshape(-1, 3)
    lo, hi = P.min(axis=0), P.max(axis=0)
    pad = inflate * (hi - lo)
    return tuple(lo - pad), tuple(hi + pad)


class ImplicitVAE:
    kind = "implicit"

    def __init__(self, cfg: ImplicitConfig):
        self.cfg = cfg
        self._enc = cfg.encoder
        self._dec = cfg.decoder

    def init_params(self, rng):
        params = init_pointnet(self._enc, rng, prefix="enc")
        params.update(init_mlp(self._dec, rng, prefix="dec"))
        return params

    def encode_batch(self, params, P, recorder=None):
        """P (B, n, 3) -> mu_u (B, m), mu_U (B, d, 3), eta (B, eta_dim)."""
        P = np.asarray(P, dtype=np.float64)
        if P.shape[-2] == 0:
            raise EmptyCloud("point cloud is empty")
        m, d = self.cfg.m, self.cfg.d
        if not self.cfg.use_fa:
            out = pointnet_forward(self._enc, params, P, prefix="enc")
            u, U = _split_latent(out, m, d)
            return u, U, ad.getitem(out, (Ellipsis, slice(m + 3 * d, None)))
        rot, t = _frames(P, None, recorder)
        out = pointnet_forward(self._enc, params, fa.canonicalize(P, rot, t), prefix="enc")
        u, Ucan = _split_latent(out, m, d)
        eta = ad.getitem(out, (Ellipsis, slice(m + 3 * d, None)))
        return ad.mean(u, axis=-2), fa.average_back(Ucan, rot, t), ad.mean(eta, axis=-2)

    def sample(self, u, U, eta, rng):
        """Reparameterised sample; isotropic noise per equivariant row keeps it equivariant."""
        u, U, eta = ad.as_tensor(u), ad.as_tensor(U), ad.as_tensor(eta)
        d = self.cfg.d
        std_U = ad.exp(ad.clip(ad.getitem(eta, (Ellipsis, slice(0, d))), LOG_STD_MIN, LOG_STD_MAX))
        eps = rng.standard_normal(U.shape)
        U_s = ad.add(U, ad.mul(ad.expand_dims(std_U, -1), eps))
        if self.cfg.invariant_noise and self.cfg.m:
            std_u = ad.exp(ad.clip(ad.getitem(eta, (Ellipsis, slice(d, None))), LOG_STD_MIN, LOG_STD_MAX))
            u = ad.add(u, ad.mul(std_u, rng.standard_normal(u.shape)))
        return u, U_s

    def decode_points(self, params, u, U, x, recorder=None):
        """Field values at query points x (B, P, 3) for latents (B, m), (B, d, 3) -> (B, P)."""
        u, U = ad.as_tensor(u), ad.as_tensor(U)
        x = np.asarray(x, dtype=np.float64)
        centroid = U.data.mean(axis=-2)
        if self.cfg.use_fa:
            rot, t = _frames(U.data, None, recorder)
            Ucan = fa.canonicalize(U, rot, t)  # (B, F, d, 3)
            n_frames = rot.shape[-3]
            u_b = ad.broadcast_to(ad.expand_dims(u, -2), u.shape[:-1] + (n_frames, u.shape[-1]))
            ctx = ad.expand_dims(_latent_vector(u_b, Ucan), -2)  # (B, F, 1, C)
            xc = fa.canonicalize(x, rot, t)  # (B, F, P, 3)
            out = mlp_forward(self._dec, params, (ctx, xc), prefix="dec")
            f = ad.mean(ad.reshape(out, out.shape[:-1]), axis=-2)
        else:
            ctx = ad.expand_dims(_latent_vector(u, U), -2)  # (B, 1, C)
            out = mlp_forward(self._dec, params, (ctx, x), prefix="dec")
            f = ad.reshape(out, out.shape[:-1])
        if self.cfg.sphere_init_radius is not None:
            radial = np.linalg.norm(x - centroid[:, None, :], axis=-1) - self.cfg.sphere_init_radius
            f = ad.add(f, radial)
        return f

    def loss(self, params, P, rng, recorder=None):
        return combined_implicit_loss(self, params, P, rng, recorder)


def encode_pc(model: ImplicitVAE, params, P, return_diagnostics=False):
    P = np.asarray(P, dtype=np.float64)
    u, U, eta = model.encode_batch(params, P[None])
    mu = FeatureMatrix(u.data[0], U.data[0])
    if not return_diagnostics:
        return mu, eta.data[0]
    _, t, lam, deg = pca_frames_batch(P)
    return mu, eta.data[0], FrameDiagnostics(lam, float(np.min(np.diff(lam))), t), bool(deg)


def sample_latent(mu: FeatureMatrix, eta, rng, invariant_noise=False):
    """Draw from N(mu, exp(eta)): one isotropic std per equivariant row (+ per invariant coord)."""
    eta = np.clip(np.asarray(eta, dtype=np.float64), LOG_STD_MIN, LOG_STD_MAX)
    d = mu.b
    U = mu.U + np.exp(eta[:d])[:, None] * rng.standard_normal(mu.U.shape)
    u = mu.u
    if invariant_noise and mu.a:
        u = u + np.exp(eta[d:d + mu.a]) * rng.standard_normal(mu.a)
    return FeatureMatrix(u, U)


def decode_implicit(model: ImplicitVAE, params, Z: FeatureMatrix, x):
    """Field value(s) at x (..., 3) for a single latent."""
    x = np.asarray(x, dtype=np.float64)
    flat = x.reshape(1, -1, 3)
    f = model.decode_points(params, Z.u[None], Z.U[None], flat).data[0]
    return f.reshape(x.shape[:-1])


def implicit_field(model: ImplicitVAE, params, Z: FeatureMatrix):
    """The decoded latent as a ScalarField (finite-difference gradient)."""
    from .group import ScalarField

    return ScalarField(lambda x: decode_implicit(model, params, Z, x))


# -- SALD --------------------------------------------------------------------------------
def unsigned_distance(cloud, x, chunk=4096):
    """Distance to the nearest cloud point and its gradient (unit vector away from it).

    Ties go to the lowest point index. x (P, 3) -> (P,), (P, 3).
    """
    cloud = np.asarray(cloud, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    if cloud.shape[0] == 0:
        raise EmptyCloud("cannot measure distance to an empty cloud")
    h = np.empty(x.shape[0])
    grad = np.empty_like(x)
    for s in range(0, x.shape[0], chunk):
        xs = x[s:s + chunk]
        d2 = np.sum((xs[:, None, :] - cloud[None, :, :]) ** 2, axis=-1)
        idx = np.argmin(d2, axis=1)
        diff = xs - cloud[idx]
        dist = np.linalg.norm(diff, axis=1)
        h[s:s + chunk] = dist
        grad[s:s + chunk] = np.where(dist[:, None] > 0, diff / np.where(dist > 0, dist, 1.0)[:, None], 0.0)
    return h, grad


def sample_domain(rng, cloud, count, box_lo, box_hi, near_sigma):
    """Half uniform in the box, half Gaussian-perturbed copies of cloud points."""
    n_uniform = count // 2
    n_near = count - n_uniform
    uni = rng.uniform(box_lo, box_hi, size=(n_uniform, 3))
    idx = rng.integers(0, len(cloud), size=n_near)
    near = cloud[idx] + near_sigma * rng.standard_normal((n_near, 3))
    return np.concatenate([uni, near])


def sald_tau(f, grad_f, h, grad_h):
    """||f| - h| + min(|grad f - grad h|, |grad f + grad h|), elementwise over samples."""
    value_term = ad.abs_(ad.sub(ad.abs_(f), h))
    minus = ad.norm_rows(ad.sub(grad_f, grad_h), axis=-1)
    plus = ad.norm_rows(ad.add(grad_f, grad_h), axis=-1)
    return ad.add(value_term, ad.minimum(minus, plus))


def sald_loss_field(field_fn, clouds, x, fd_step):
    """Mean over samples and shapes of tau(f, h).

    ``field_fn`` maps points (B, Q, 3) to a tensor (B, Q); its spatial gradient is
    taken by central differences evaluated in the same call (so it stays on the tape).
    """
    clouds = np.asarray(clouds, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    B, S, _ = x.shape
    if B == 0:
        raise EmptyBatch("empty batch")
    offsets = [np.zeros(3)]
    for k in range(3):
        e = np.zeros(3)
        e[k] = fd_step
        offsets += [e, -e]
    probe = np.concatenate([x + o for o in offsets], axis=1)  # (B, 7S, 3)
    vals = field_fn(probe)
    f = ad.getitem(vals, (slice(None), slice(0, S)))
    cols = []
    for k in range(3):
        fp = ad.getitem(vals, (slice(None), slice((1 + 2 * k) * S, (2 + 2 * k) * S)))
        fm = ad.getitem(vals, (slice(None), slice((2 + 2 * k) * S, (3 + 2 * k) * S)))
        cols.append(ad.expand_dims(ad.div(ad.sub(fp, fm), 2.0 * fd_step), -1))
    grad_f = ad.concat(cols, axis=-1)
    hs, gs = zip(*(unsigned_distance(c, xi) for c, xi in zip(clouds, x)))
    tau = sald_tau(f, grad_f, np.stack(hs), np.stack(gs))
    return ad.mean(tau)


def sald_loss(model: ImplicitVAE, params, clouds, rng, recorder=None, latents=None):
    """SALD loss of decoded samples against each input cloud's unsigned distance."""
    clouds = np.asarray(clouds, dtype=np.float64)
    if clouds.ndim != 3 or clouds.shape[0] == 0:
        raise EmptyBatch("sald_loss needs a non-empty (N, n, 3) batch")
    if clouds.shape[1] == 0:
        raise EmptyCloud("point cloud is empty")
    cfg = model.cfg
    diag = cfg.box_diagonal
    if latents is None:
        u, U, eta = model.encode_batch(params, clouds, recorder)
        latents = model.sample(u, U, eta, rng)
    u_s, U_s = latents
    x = np.stack([sample_domain(rng, c, cfg.samples, cfg.box_lo, cfg.box_hi, cfg.near_sigma * diag)
                  for c in clouds])
    return sald_loss_field(lambda q: model.decode_points(params, u_s, U_s, q, recorder),
                           clouds, x, cfg.fd_step * diag)


def vae_loss_tensor(mu_u, mu_U, eta):
    """sum_i ||mu_i||_1 + ||eta_i + 1||_1."""
    if eta.shape[0] == 0:
        raise EmptyBatch("empty batch")
    return ad.add(ad.add(ad.sum_(ad.abs_(mu_u)), ad.sum_(ad.abs_(mu_U))),
                  ad.sum_(ad.abs_(ad.add(eta, 1.0))))


def vae_loss(batch):
    """Numeric VAE loss over a list of (mu FeatureMatrix, eta) pairs."""
    if not batch:
        raise EmptyBatch("empty batch")
    return float(sum(np.abs(mu.u).sum() + np.abs(mu.U).sum() + np.abs(np.asarray(eta) + 1.0).sum()
                     for mu, eta in batch))


def combined_implicit_loss(model: ImplicitVAE, params, clouds, rng, recorder=None):
    clouds = np.asarray(clouds, dtype=np.float64)
    u, U, eta = model.encode_batch(params, clouds, recorder)
    latents = model.sample(u, U, eta, rng)
    sald = sald_loss(model, params, clouds, rng, recorder, latents=latents)
    return ad.add(sald, ad.mul(model.cfg.vae_weight, vae_loss_tensor(u, U, eta)))


# -- training ----------------------------------------------------------------------------
@dataclass
class TrainConfig:
    epochs: int = 200
    batch_size: int = 16
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0


@dataclass
class TrainResult:
    params: dict
    history: list
    adam_state: dict
    epochs_done: int = 0


def train(model, data, cfg: TrainConfig, params=None, adam_state=None, start_epoch=0, callback=None):
    """Minibatch Adam on ``model.loss``; deterministic given ``cfg.seed``.

    Each epoch's shuffling and each step's sampling draw from generators seeded
    by (seed, epoch[, step]), so a resumed run replays the same batches.
    ``history`` holds the mean pre-update batch loss of every epoch run.
    """
    data = np.asarray(data, dtype=np.float64)
    if len(data) == 0:
        raise ValueError("empty training set")
    if cfg.batch_size <= 0 or cfg.epochs < 0:
        raise ValueError("batch_size must be positive and epochs non-negative")
    if params is None:
        params = model.init_params(np.random.default_rng([cfg.seed, 0xA11CE]))
    params = {k: np.array(v) for k, v in params.items()}
    state = adam_state or ad.adam_init(params)
    history = []
    for epoch in range(start_epoch, start_epoch + cfg.epochs):
        order = np.random.default_rng([cfg.seed, epoch]).permutation(len(data))
        losses = []
        for step, s in enumerate(range(0, len(data), cfg.batch_size)):
            batch = data[order[s:s + cfg.batch_size]]
            step_rng = np.random.default_rng([cfg.seed, epoch, step])
            loss, grads = ad.value_and_grad(lambda p: model.loss(p, batch, step_rng), params)
            if not np.isfinite(loss):
                raise FloatingPointError(f"non-finite loss at epoch {epoch}, step {step}")
            params, state = ad.adam_step(params, grads, state, cfg.lr, cfg.beta1, cfg.beta2, cfg.eps)
            losses.append(loss)
        history.append(float(np.mean(losses)))
        if callback is not None:
            callback(epoch, history[-1])
    return TrainResult(params, history, state, start_epoch + cfg.epochs)


# -- persistence --------------------------------------------------------------------------
def save_model(path, model, params, adam_state=None, meta=None):
    """EQF1 checkpoint plus a ``<path>.meta`` key = value sidecar."""
    path = Path(path)
    tensors = {f"param.{k}": v for k, v in params.items()}
    if adam_state is not None:
        tensors["adam.step"] = np.array(float(adam_state["step"]))
        tensors.update({f"adam.m.{k}": v for k, v in adam_state["m"].items()})
        tensors.update({f"adam.v.{k}": v for k, v in adam_state["v"].items()})
    info = {"kind": model.kind}
    if isinstance(model, ImplicitVAE):
        info.update({k: v for k, v in asdict(model.cfg).items()})
    else:
        info.update({k: v for k, v in asdict(model.cfg).items() if k != "edges"})
        tensors["template.edges"] = np.asarray(model.cfg.edges, dtype=np.float64).reshape(-1, 2)
        if isinstance(model, PiecewiseMeshAE):
            tensors["template.weights"] = model.weights
    info.update(meta or {})
    ad.save_checkpoint(path, tensors)
    lines = [f"{k} = {_fmt_meta(v)}" for k, v in info.items()]
    Path(str(path) + ".meta").write_text("\n".join(lines) + "\n")


def _fmt_meta(v):
    if isinstance(v, (tuple, list)):
        return ", ".join(repr(float(x)) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def read_meta(path):
    out = {}
    for line in Path(str(path) + ".meta").read_text().splitlines():
        if "=" in line:
            k, v = line.split("=", 1)
            out[k.strip()] = v.strip()
    return out


def _parse(v, proto):
    if isinstance(proto, bool):
        return v == "True"
    if isinstance(proto, int):
        return int(v)
    if isinstance(proto, float) or proto is None:
        return None if v == "None" else float(v)
    if isinstance(proto, tuple):
        return tuple(float(x) for x in v.split(","))
    return v


def load_model(path):
    """Returns (model, params, adam_state or None, meta dict)."""
    meta = read_meta(path)
    tensors = ad.load_checkpoint(path)
    params = {k[len("param."):]: v for k, v in tensors.items() if k.startswith("param.")}
    adam_state = None
    if "adam.step" in tensors:
        adam_state = {
            "step": int(tensors["adam.step"]),
            "m": {k[len("adam.m."):]: v for k, v in tensors.items() if k.startswith("adam.m.")},
            "v": {k[len("adam.v."):]: v for k, v in tensors.items() if k.startswith("adam.v.")},
        }
    kind = meta["kind"]
    if kind == "implicit":
        proto = ImplicitConfig()
        kw = {f: _parse(meta[f], getattr(proto, f)) for f in proto.__dataclass_fields__ if f in meta}
        model = ImplicitVAE(replace(proto, **kw))
    else:
        edges = tuple(map(tuple, tensors["template.edges"].astype(np.int64)))
        cfg = MeshAEConfig(
            n_vertices=int(meta["n_vertices"]), edges=edges, m=int(meta["m"]), d=int(meta["d"]),
            hidden=int(meta["hidden"]), rounds=int(meta["rounds"]), use_fa=meta["use_fa"] == "True",
        )
        model = PiecewiseMeshAE(cfg, tensors["template.weights"]) if kind == "piecewise" else GlobalMeshAE(cfg)
    return model, params, adam_state, meta
