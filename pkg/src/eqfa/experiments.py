"""Desk-scale experiments shared by the CLI and the acceptance suite."""
from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import data as D
from . import metrics
from . import models as M


@dataclass(frozen=True)
class TrendConfig:
    shapes: int = 256
    epochs: int = 200
    batch_size: int = 16
    lr: float = 1e-3  # 1e-4 is too slow to converge within 200 epochs at this scale
    hidden: int = 32
    rounds: int = 2
    m: int = 8
    d: int = 8
    seed: int = 0


def eval_mesh_splits(model, params, dataset, seed, kinds=("I", "z", "SO3")):
    """Per-split MSE of reconstructions of (transformed) held-out shapes."""
    out = {}
    for kind in kinds:
        split = D.make_splits(dataset, kind, seed)
        X = D.split_test_shapes(dataset.shapes, split)
        Y = model.reconstruct(params, X).data
        out[kind] = metrics.mse(Y, X)
    return out


def rotation_trend(cfg: TrendConfig, use_fa=True, log=None):
    """Train one mesh AE on aligned chains; report test MSE on I/z/SO3 splits."""
    dataset = D.make_chain_dataset(cfg.shapes, np.random.default_rng([cfg.seed, 7]))
    split = D.make_splits(dataset, "I", cfg.seed)
    model = M.GlobalMeshAE(M.MeshAEConfig(dataset.shapes.shape[1], dataset.edges, cfg.m, cfg.d,
                                          cfg.hidden, cfg.rounds, use_fa))
    tcfg = M.TrainConfig(epochs=cfg.epochs, batch_size=cfg.batch_size, lr=cfg.lr, seed=cfg.seed)
    start = time.perf_counter()
    res = M.train(model, dataset.shapes[split.train], tcfg, callback=log)
    scores = eval_mesh_splits(model, res.params, dataset, cfg.seed)
    scores["train_seconds"] = time.perf_counter() - start
    scores["history"] = res.history
    return scores


@dataclass(frozen=True)
class SphereConfig:
    clouds: int = 32
    points: int = 256
    steps: int = 500
    batch_size: int = 4
    lr: float = 1e-3
    radius: float = 0.6
    encoder_hidden: int = 32
    decoder_hidden: int = 32
    samples: int = 256
    grid_resolution: int = 24
    seed: int = 0


def sphere_sald(cfg: SphereConfig, log=None):
    """Train the implicit VAE on noisy sphere clouds; Chamfer of extracted zeros to the sphere."""
    rng = np.random.default_rng([cfg.seed, 11])
    clouds = np.stack([D.sphere_cloud(rng, cfg.points, radius=cfg.radius) for _ in range(cfg.clouds)])
    lo, hi = M.bounding_box(clouds)
    icfg = M.ImplicitConfig(encoder_hidden=cfg.encoder_hidden, decoder_hidden=cfg.decoder_hidden,
                            samples=cfg.samples, box_lo=lo, box_hi=hi)
    model = M.ImplicitVAE(icfg)
    steps_per_epoch = -(-cfg.clouds // cfg.batch_size)
    epochs = -(-cfg.steps // steps_per_epoch)
    tcfg = M.TrainConfig(epochs=epochs, batch_size=cfg.batch_size, lr=cfg.lr, seed=cfg.seed)
    start = time.perf_counter()
    res = M.train(model, clouds, tcfg, callback=log)
    seconds = time.perf_counter() - start
    mu, _ = M.encode_pc(model, res.params, clouds[0])
    field = M.implicit_field(model, res.params, mu)
    grid = metrics.GridSpec(lo, hi, cfg.grid_resolution)
    zeros = metrics.extract_zero_crossings(field, grid)
    centre = clouds[0].mean(axis=0)
    ref = D.sphere_cloud(np.random.default_rng([cfg.seed, 12]), 4000, radius=cfg.radius, noise=0.0,
                         outlier_fraction=0.0)
    chamfer = metrics.chamfer(zeros, ref) if len(zeros) else np.inf
    probes = mu.U.mean(axis=0) + 0.5 * cfg.radius * D.sphere_cloud(
        np.random.default_rng([cfg.seed, 13]), 200, radius=1.0, noise=0.0, outlier_fraction=0.0)
    inside = float(np.mean(metrics.occupancy_from_field(field)(probes)))
    return {
        "chamfer": chamfer,
        "cell_diagonal": grid.cell_diagonal,
        "zeros": len(zeros),
        "inside_fraction": inside,
        "centre": centre,
        "train_seconds": seconds,
        "history": res.history,
        "steps": epochs * steps_per_epoch,
    }
