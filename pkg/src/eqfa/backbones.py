"""Plain (non-equivariant) networks that frame averaging wraps.

Parameters live in flat ``{name: array}`` dicts so they can be checkpointed
and optimised directly. Forward functions accept arrays or autodiff tensors
and are vectorised over any leading batch axes.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from . import autodiff as ad
from .autodiff import ShapeMismatch, glorot_uniform


class EmptyCloud(ValueError):
    pass


def _linear(params, name, x):
    return ad.add(ad.matmul(x, params[f"{name}.W"]), params[f"{name}.b"])


def _init_linear(rng, params, name, fan_in, fan_out):
    params[f"{name}.W"] = glorot_uniform(rng, fan_in, fan_out)
    params[f"{name}.b"] = np.zeros(fan_out)


# -- MLP ---------------------------------------------------------------------------
@dataclass(frozen=True)
class MlpConfig:
    widths: tuple  # (in, hidden..., out)
    activation: str = "relu"
    skip: int | None = None  # layer whose input is [hidden, network input]

    def __post_init__(self):
        if len(self.widths) < 2:
            raise ValueError("an MLP needs at least one layer")
        if self.skip is not None and not 0 < self.skip < len(self.widths) - 1:
            raise ValueError(f"skip layer {self.skip} out of range")

    @property
    def n_layers(self):
        return len(self.widths) - 1

    def fan_in(self, i):
        return self.widths[i] + (self.widths[0] if i == self.skip else 0)


def init_mlp(cfg: MlpConfig, rng, prefix="mlp"):
    params = {}
    for i in range(cfg.n_layers):
        _init_linear(rng, params, f"{prefix}.{i}", cfg.fan_in(i), cfg.widths[i + 1])
    return params


def _split_linear(params, name, parts, offset=0):
    """Linear layer on a concatenation of ``parts`` without materialising it.

    Each part multiplies its own row block of W; parts broadcast over leading axes.
    """
    W = params[f"{name}.W"]
    acc = None
    for part in parts:
        width = part.shape[-1]
        term = ad.matmul(part, ad.getitem(W, slice(offset, offset + width)))
        acc = term if acc is None else ad.add(acc, term)
        offset += width
    return ad.add(acc, params[f"{name}.b"])


def mlp_forward(cfg: MlpConfig, params, x, prefix="mlp"):
    """Feed-forward pass. ``x`` may be a tuple of parts that together form the input."""
    parts = tuple(ad.as_tensor(p) for p in (x if isinstance(x, tuple) else (x,)))
    width = sum(p.shape[-1] for p in parts)
    if width != cfg.widths[0]:
        raise ShapeMismatch(f"MLP expects input width {cfg.widths[0]}, got {width}")
    act = ad.ACTIVATIONS[cfg.activation]
    h = None
    for i in range(cfg.n_layers):
        name = f"{prefix}.{i}"
        if i == 0:
            h = _split_linear(params, name, parts)
        elif i == cfg.skip:
            h = _split_linear(params, name, (h,) + parts)
        else:
            h = _linear(params, name, h)
        if i < cfg.n_layers - 1:
            h = act(h)
    return h


# -- PointNet ------------------------------------------------------------------------
@dataclass(frozen=True)
class PointNetConfig:
    out_dim: int
    hidden: int = 64
    blocks: int = 2
    in_dim: int = 3
    activation: str = "relu"

    def __post_init__(self):
        if self.hidden % 2:
            raise ValueError("PointNet hidden width must be even")


def init_pointnet(cfg: PointNetConfig, rng, prefix="pn"):
    params = {}
    h, half = cfg.hidden, cfg.hidden // 2
    _init_linear(rng, params, f"{prefix}.fc_in", cfg.in_dim, h)
    for b in range(cfg.blocks):
        _init_linear(rng, params, f"{prefix}.block{b}", h, half)
    _init_linear(rng, params, f"{prefix}.fc_out", h, half)
    _init_linear(rng, params, f"{prefix}.head", half, cfg.out_dim)
    return params


def pointnet_forward(cfg: PointNetConfig, params, P, prefix="pn"):
    """Per-point FC layers with max-pool feedback blocks, a max-pool, and a linear head.

    P is (..., n, in_dim); the result is (..., out_dim).
    """
    P = ad.as_tensor(P)
    if P.shape[-2] == 0:
        raise EmptyCloud("point cloud is empty")
    if P.shape[-1] != cfg.in_dim:
        raise ShapeMismatch(f"PointNet expects {cfg.in_dim} coordinates, got {P.shape[-1]}")
    act = ad.ACTIVATIONS[cfg.activation]
    h = act(_linear(params, f"{prefix}.fc_in", P))
    for b in range(cfg.blocks):
        local = act(_linear(params, f"{prefix}.block{b}", h))
        pooled = ad.broadcast_to(ad.expand_dims(ad.max_(local, axis=-2), -2), local.shape)
        h = ad.concat([local, pooled], axis=-1)
    h = act(_linear(params, f"{prefix}.fc_out", h))
    return _linear(params, f"{prefix}.head", ad.max_(h, axis=-2))


# -- mesh message passing ------------------------------------------------------------
@dataclass(frozen=True)
class MeshNetConfig:
    """Mean-aggregation message passing on a fixed template graph.

    mode ``encoder``: per-vertex inputs (n, in_dim) -> rounds -> mean pool ->
    linear head (out_dim). mode ``decoder``: latent (in_dim,) -> linear lift to
    (n, hidden) -> rounds -> per-vertex linear head (n, out_dim).
    """

    n_vertices: int
    edges: tuple
    rounds: int = 2
    hidden: int = 64
    in_dim: int = 3
    out_dim: int = 3
    mode: str = "encoder"
    activation: str = "elu"
    adjacency: object = field(default=None, compare=False, repr=False)

    def __post_init__(self):
        if self.mode not in ("encoder", "decoder"):
            raise ValueError(f"unknown mode {self.mode!r}")
        n = self.n_vertices
        edges = np.asarray(self.edges, dtype=np.int64).reshape(-1, 2)
        if np.any(edges[:, 0] == edges[:, 1]):
            raise ValueError("adjacency must not contain self-loops")
        if edges.size and (edges.min() < 0 or edges.max() >= n):
            raise ValueError("edge index out of range")
        rows = np.concatenate([edges[:, 0], edges[:, 1]])
        cols = np.concatenate([edges[:, 1], edges[:, 0]])
        A = sp.coo_matrix((np.ones(rows.size), (rows, cols)), shape=(n, n)).tocsr()
        A.data[:] = 1.0  # duplicate edges collapse to one
        deg = np.asarray(A.sum(axis=1)).reshape(-1)
        inv = np.where(deg > 0, 1.0 / np.where(deg > 0, deg, 1.0), 0.0)
        object.__setattr__(self, "adjacency", (sp.diags(inv) @ A).tocsr())


def init_meshnet(cfg: MeshNetConfig, rng, prefix="mesh"):
    params = {}
    width = cfg.in_dim
    if cfg.mode == "decoder":
        _init_linear(rng, params, f"{prefix}.lift", cfg.in_dim, cfg.n_vertices * cfg.hidden)
        width = cfg.hidden
    for r in range(cfg.rounds):
        params[f"{prefix}.round{r}.W_self"] = glorot_uniform(rng, width, cfg.hidden)
        params[f"{prefix}.round{r}.W_nbr"] = glorot_uniform(rng, width, cfg.hidden)
        params[f"{prefix}.round{r}.b"] = np.zeros(cfg.hidden)
        width = cfg.hidden
    _init_linear(rng, params, f"{prefix}.head", width, cfg.out_dim)
    return params


def message_round(cfg: MeshNetConfig, params, h, r, prefix="mesh"):
    """h'_v = act(W_self h_v + W_nbr mean_{u ~ v} h_u + b)."""
    act = ad.ACTIVATIONS[cfg.activation]
    nbr = ad.sparse_left_matmul(cfg.adjacency, h)
    pre = ad.add(
        ad.add(ad.matmul(h, params[f"{prefix}.round{r}.W_self"]),
               ad.matmul(nbr, params[f"{prefix}.round{r}.W_nbr"])),
        params[f"{prefix}.round{r}.b"],
    )
    return act(pre)


def meshnet_forward(cfg: MeshNetConfig, params, X, prefix="mesh"):
    X = ad.as_tensor(X)
    act = ad.ACTIVATIONS[cfg.activation]
    if cfg.mode == "encoder":
        if X.shape[-2:] != (cfg.n_vertices, cfg.in_dim):
            raise ShapeMismatch(f"expected (..., {cfg.n_vertices}, {cfg.in_dim}), got {X.shape}")
        h = X
    else:
        if X.shape[-1] != cfg.in_dim:
            raise ShapeMismatch(f"expected latent width {cfg.in_dim}, got {X.shape[-1]}")
        lifted = act(_linear(params, f"{prefix}.lift", X))
        h = ad.reshape(lifted, X.shape[:-1] + (cfg.n_vertices, cfg.hidden))
    for r in range(cfg.rounds):
        h = message_round(cfg, params, h, r, prefix)
    if cfg.mode == "encoder":
        return _linear(params, f"{prefix}.head", ad.mean(h, axis=-2))
    return _linear(params, f"{prefix}.head", h)
