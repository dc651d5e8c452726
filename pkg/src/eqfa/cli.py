"""Command-line entry point: gen | train | eval | verify | interp | bench."""
from __future__ import annotations

import argparse
import configparser
import csv
import sys
import time
from pathlib import Path

import numpy as np

from . import data as D
from . import latent, metrics
from . import models as M
from .frames import Frame, frames_equal_as_sets, pca_frame
from .group import act_features, act_points, compose

DEFAULT_CONFIG = """
[data]
shapes = 256
segments = 3
ring_size = 8
rings_per_segment = 8
max_angle_deg = 60
soft = false
# surface points per shape for the implicit model; 0 disables clouds
cloud_points = 512
cloud_noise = 0.01
outlier_fraction = 0.02
test_fraction = 0.2

[model]
# global-mesh | piecewise | implicit
kind = global-mesh
use_fa = true
m = 8
d = 8
hidden = 64
rounds = 2
encoder_hidden = 64
decoder_hidden = 64
decoder_layers = 4
# weight of the VAE term (paper: 0.001)
vae_weight = 0.001
samples = 512

[train]
epochs = 200
# paper: 16 for meshes, 64 for point clouds
batch_size = 16
# paper: 1e-4
lr = 1e-4

[eval]
grid_resolution = 32
# IoU sampling (paper: 100000 / 200000, sigma 0.01)
iou_bbox_samples = 10000
iou_near_samples = 20000
iou_sigma = 0.01

[bench]
repeats = 20
batches = 1, 4, 16
"""


class UsageError(Exception):
    pass


def load_config(path=None):
    cp = configparser.ConfigParser(inline_comment_prefixes=("#",))
    cp.read_string(DEFAULT_CONFIG)
    if path is not None:
        if not Path(path).is_file():
            raise UsageError(f"config file not found: {path}")
        try:
            cp.read(path)
        except configparser.Error as exc:
            raise UsageError(f"bad config {path}: {exc}") from None
    return cp


def _ints(s):
    return [int(x) for x in s.split(",") if x.strip()]


def _chain_spec(cp):
    sec = cp["data"]
    return D.ArticulatedChainSpec(segments=sec.getint("segments"), ring_size=sec.getint("ring_size"),
                                  rings_per_segment=sec.getint("rings_per_segment"), soft=sec.getboolean("soft"))


# -- dataset directory layout -------------------------------------------------------------
def _load_dataset(root):
    root = Path(root)
    manifest = root / "manifest.txt"
    if not manifest.is_file():
        raise FileNotFoundError(f"no dataset manifest at {manifest}")
    entries = [line.split() for line in manifest.read_text().splitlines() if line and not line.startswith("#")]
    shapes, faces, poses, splits = [], None, [], []
    for path, split, pose in entries:
        X, F = D.read_obj(root / path)
        shapes.append(X)
        faces = F
        poses.append(float(pose))
        splits.append(split)
    W = np.loadtxt(root / "weights.txt", ndmin=2)
    ds = D.ChainDataset(np.stack(shapes), W, faces, np.array(poses), None)
    clouds = None
    if (root / "clouds").is_dir():
        clouds = np.stack([D.read_xyz(root / "clouds" / (Path(p).stem + ".xyz")) for p, _, _ in entries])
    train = np.array([i for i, s in enumerate(splits) if s == "train"])
    return ds, clouds, train


def cmd_gen(args, cp):
    out = Path(args.out)
    sec = cp["data"]
    base = _chain_spec(cp)
    base.validate()
    rng = np.random.default_rng([args.seed, 7])
    ds = D.make_chain_dataset(sec.getint("shapes"), rng, base, np.deg2rad(sec.getfloat("max_angle_deg")))
    split = D.make_splits(ds, "I", args.seed, sec.getfloat("test_fraction"))
    (out / "shapes").mkdir(parents=True, exist_ok=True)
    test = set(split.test.tolist())
    lines = ["# path split pose"]
    for i, X in enumerate(ds.shapes):
        name = f"shapes/shape_{i:04d}.obj"
        D.write_obj(out / name, X, ds.faces)
        lines.append(f"{name} {'test' if i in test else 'train'} {float(ds.poses[i])!r}")
    (out / "manifest.txt").write_text("\n".join(lines) + "\n")
    np.savetxt(out / "weights.txt", ds.weights, fmt="%.17g")
    n_pts = sec.getint("cloud_points")
    if n_pts > 0:
        (out / "clouds").mkdir(exist_ok=True)
        crng = np.random.default_rng([args.seed, 8])
        clouds = D.chain_clouds(crng, ds, n_pts, sec.getfloat("cloud_noise"), sec.getfloat("outlier_fraction"))
        for i, P in enumerate(clouds):
            D.write_xyz(out / "clouds" / f"shape_{i:04d}.xyz", P)
    print(f"wrote {len(ds)} shapes to {out}")
    return 0


def _build_model(cp, ds, clouds):
    sec = cp["model"]
    kind = sec.get("kind")
    if kind == "implicit":
        if clouds is None:
            raise UsageError("implicit model needs a dataset generated with cloud_points > 0")
        lo, hi = M.bounding_box(clouds)
        cfg = M.ImplicitConfig(d=sec.getint("d"), encoder_hidden=sec.getint("encoder_hidden"),
                               decoder_hidden=sec.getint("decoder_hidden"),
                               decoder_layers=sec.getint("decoder_layers"), vae_weight=sec.getfloat("vae_weight"),
                               samples=sec.getint("samples"), box_lo=lo, box_hi=hi, use_fa=sec.getboolean("use_fa"))
        return M.ImplicitVAE(cfg)
    cfg = M.MeshAEConfig(ds.shapes.shape[1], ds.edges, sec.getint("m"), sec.getint("d"), sec.getint("hidden"),
                         sec.getint("rounds"), sec.getboolean("use_fa"))
    if kind == "global-mesh":
        return M.GlobalMeshAE(cfg)
    if kind == "piecewise":
        return M.PiecewiseMeshAE(cfg, ds.weights)
    raise UsageError(f"unknown model kind {kind!r}")


def _train_mse(model, params, shapes):
    return metrics.mse(model.reconstruct(params, shapes).data, shapes)


def cmd_train(args, cp):
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ds, clouds, train_idx = _load_dataset(args.data or args.out)
    sec = cp["train"]
    tcfg = M.TrainConfig(epochs=sec.getint("epochs"), batch_size=sec.getint("batch_size"),
                         lr=sec.getfloat("lr"), seed=args.seed)
    start_epoch, params, state, prior = 0, None, None, []
    if args.resume:
        model, params, state, meta = M.load_model(args.resume)
        start_epoch = int(meta.get("epoch", 0))
        prior = _read_loss_csv(Path(str(args.resume) + ".loss.csv"))
    else:
        model = _build_model(cp, ds, clouds)
    data = clouds[train_idx] if model.kind == "implicit" else ds.shapes[train_idx]
    log = (lambda e, loss: print(f"epoch {e} loss {loss!r}", flush=True)) if args.verbose else None
    res = M.train(model, data, tcfg, params=params, adam_state=state, start_epoch=start_epoch, callback=log)
    history = prior + list(enumerate(res.history, start=start_epoch))
    meta = {"epoch": res.epochs_done, "seed": args.seed}
    if model.kind != "implicit":
        meta["train_mse"] = _train_mse(model, res.params, data)
    ckpt = out / "model.eqf"
    M.save_model(ckpt, model, res.params, res.adam_state, meta=meta)
    with open(str(ckpt) + ".loss.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "loss"])
        w.writerows((e, repr(v)) for e, v in history)
    final = history[-1][1] if history else float("nan")
    print(f"checkpoint {ckpt}; final loss {final!r}" + (f"; train mse {meta['train_mse']!r}" if "train_mse" in meta else ""))
    return 0


def _read_loss_csv(path):
    if not path.is_file():
        return []
    with open(path, newline="") as fh:
        return [(int(r["epoch"]), float(r["loss"])) for r in csv.DictReader(fh)]


def cmd_eval(args, cp):
    model, params, _, meta = M.load_model(args.checkpoint)
    ds, clouds, train_idx = _load_dataset(args.data)
    seed = int(meta.get("seed", args.seed))
    rows = []
    if model.kind == "implicit":
        sec = cp["eval"]
        grid = metrics.GridSpec(model.cfg.box_lo, model.cfg.box_hi, sec.getint("grid_resolution"))
        test = sorted(set(range(len(ds))) - set(train_idx.tolist()))
        scores = []
        for i in test:
            mu, _ = M.encode_pc(model, params, clouds[i])
            zeros = metrics.extract_zero_crossings(M.implicit_field(model, params, mu), grid)
            scores.append(metrics.chamfer(zeros, clouds[i]) if len(zeros) else np.inf)
        rows.append(("test", "chamfer", float(np.mean(scores))))
    else:
        rows.append(("train", "mse", _train_mse(model, params, ds.shapes[train_idx])))
        for kind in D.SPLIT_KINDS:
            split = D.make_splits(ds, kind, seed)
            X = D.split_test_shapes(ds.shapes, split)
            rows.append((kind, "mse", metrics.mse(model.reconstruct(params, X).data, X)))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    metrics.write_metrics_csv(out / "metrics.csv", rows)
    for split, metric, value in rows:
        print(f"{split:12s} {metric:8s} {value!r}")
    return 0


# -- verify --------------------------------------------------------------------------------
def _residual(a, b):
    a, b = np.asarray(a), np.asarray(b)
    return float(np.max(np.abs(a - b)) / max(1.0, np.max(np.abs(b))))


def run_verify(seed, trials, skip_fa=False):
    """List of (property, trials, max residual, passed)."""
    use_fa = not skip_fa
    rng = np.random.default_rng(seed)
    spec = D.ArticulatedChainSpec(segments=3, ring_size=6, rings_per_segment=3)
    edges = D.faces_to_edges(D.chain_faces(spec))
    report = {name: [] for name in ("frame", "encoder", "decoder", "implicit", "parts")}
    for _ in range(trials):
        g = D.random_motion(rng, 2.0, reflections=True)
        V = rng.standard_normal((12, 3)) * [1.0, 2.0, 3.0]
        w = rng.random(12) + 0.1
        F, _ = pca_frame(V, w)
        if not F.source_degenerate:
            G, _ = pca_frame(act_points(g, V), w)
            gF = Frame(tuple(compose(g, h) for h in F))
            report["frame"].append(0.0 if frames_equal_as_sets(G, gF, 1e-6) else 1.0)
        angles, _ = D.random_joint_angles(rng, spec.segments)
        X, W = D.gen_chain(D.ArticulatedChainSpec(**{**spec.__dict__, "joint_angles": angles}))
        cfg = M.MeshAEConfig(len(X), edges, m=3, d=4, hidden=8, use_fa=use_fa)
        mesh = M.GlobalMeshAE(cfg)
        p = mesh.init_params(rng)
        Z = M.encode_global(mesh, p, X)
        report["encoder"].append(_residual(M.encode_global(mesh, p, act_points(g, X)).U, act_points(g, Z.U)))
        report["decoder"].append(_residual(M.decode_global(mesh, p, act_features(g, Z)),
                                           act_points(g, M.decode_global(mesh, p, Z))))
        imp = M.ImplicitVAE(M.ImplicitConfig(encoder_hidden=8, decoder_hidden=8, use_fa=use_fa))
        ip = imp.init_params(rng)
        Zi, _ = M.encode_pc(imp, ip, rng.standard_normal((30, 3)) * [1.0, 0.6, 0.3])
        x = rng.standard_normal((5, 3))
        a = M.decode_implicit(imp, ip, act_features(g, Zi), act_points(g, x))
        b = M.decode_implicit(imp, ip, Zi, x)
        report["implicit"].append(float(np.max(np.abs(a - b) / np.maximum(1.0, np.abs(b)))))
        pw = M.PiecewiseMeshAE(cfg, W)
        gs = [D.random_motion(rng, 2.0, reflections=True) for _ in range(W.shape[1])]
        Xg = sum(W[:, j:j + 1] * act_points(h, X) for j, h in enumerate(gs))
        Zs, Zg = M.encode_piecewise(pw, p, X), M.encode_piecewise(pw, p, Xg)
        report["parts"].append(max(_residual(b.U, act_points(h, a.U)) for a, b, h in zip(Zs, Zg, gs)))
    tol = 1e-5
    return [(name, len(r), max(r, default=0.0), max(r, default=0.0) < tol) for name, r in report.items()]


def cmd_verify(args, cp):
    rows = run_verify(args.seed, args.trials, skip_fa=args.inject_bug == "skip-fa")
    for name, n, res, ok in rows:
        print(f"{name:10s} trials={n:4d} max_residual={res:.3e} {'PASS' if ok else 'FAIL'}")
    return 0 if all(ok for *_, ok in rows) else 1


# -- interp --------------------------------------------------------------------------------
def cmd_interp(args, cp):
    model, params, _, _ = M.load_model(args.checkpoint)
    if model.kind == "implicit":
        raise UsageError("interp needs a mesh-model checkpoint")
    A, faces = D.read_obj(args.shape_a)
    B, _ = D.read_obj(args.shape_b)
    if model.kind == "piecewise":
        Za, Zb = M.encode_piecewise(model, params, A), M.encode_piecewise(model, params, B)
        decode = lambda Z: M.decode_piecewise(model, params, Z)
    else:
        Za, Zb = M.encode_global(model, params, A), M.encode_global(model, params, B)
        decode = lambda Z: M.decode_global(model, params, Z)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    width = max(3, len(str(args.steps - 1)))
    for i, Z in enumerate(latent.interpolation_path(Za, Zb, args.steps)):
        D.write_obj(out / f"interp_{i:0{width}d}.obj", decode(Z), faces)
    print(f"wrote {args.steps} meshes to {out}")
    return 0


# -- bench ---------------------------------------------------------------------------------
def run_bench(cp, seed, repeats=None, batches=None):
    """Rows (variant, batch, median_ms) for backbone-alone vs frame-averaged forwards."""
    sec = cp["bench"]
    repeats = repeats or sec.getint("repeats")
    batches = batches or _ints(sec.get("batches"))
    rng = np.random.default_rng(seed)
    ds = D.make_chain_dataset(max(batches), rng, _chain_spec(cp))
    msec = cp["model"]
    cfg = M.MeshAEConfig(ds.shapes.shape[1], ds.edges, msec.getint("m"), msec.getint("d"),
                         msec.getint("hidden"), msec.getint("rounds"))
    variants = {
        "backbone": M.GlobalMeshAE(M.MeshAEConfig(**{**cfg.__dict__, "use_fa": False})),
        "fa-global": M.GlobalMeshAE(cfg),
        "fa-piecewise": M.PiecewiseMeshAE(cfg, ds.weights),
    }
    params = variants["backbone"].init_params(rng)
    rows = []
    for name, model in variants.items():
        for b in batches:
            X = ds.shapes[:b]
            model.reconstruct(params, X)
            times = []
            for _ in range(repeats):
                s = time.perf_counter()
                model.reconstruct(params, X)
                times.append(time.perf_counter() - s)
            rows.append((name, b, 1e3 * float(np.median(times))))
    return rows


def cmd_bench(args, cp):
    rows = run_bench(cp, args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "bench.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["variant", "batch", "median_ms"])
        w.writerows((v, b, f"{ms:.4f}") for v, b, ms in rows)
    for v, b, ms in rows:
        print(f"{v:14s} batch={b:3d} median_ms={ms:.3f}")
    return 0


# -- argument parsing -------------------------------------------------------------------
def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="INI config file overriding the defaults")
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--out", default=".", help="output directory")
    parser = argparse.ArgumentParser(prog="eqfa", description=__doc__)
    sub = parser.add_subparsers(dest="verb", required=True)
    sub.add_parser("gen", parents=[common], help="generate the synthetic chain dataset")
    p = sub.add_parser("train", parents=[common], help="train a model")
    p.add_argument("--data", help="dataset directory (default: --out)")
    p.add_argument("--resume", help="checkpoint to continue from")
    p.add_argument("--verbose", action="store_true")
    p = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint")
    p.add_argument("checkpoint")
    p.add_argument("--data", required=True)
    p = sub.add_parser("verify", parents=[common], help="run the equivariance property suite")
    p.add_argument("--trials", type=int, default=20)
    p.add_argument("--inject-bug", choices=["skip-fa"], help="mutation mode for testing the suite itself")
    p = sub.add_parser("interp", parents=[common], help="interpolate between two meshes")
    p.add_argument("checkpoint")
    p.add_argument("shape_a")
    p.add_argument("shape_b")
    p.add_argument("--steps", type=int, default=11)
    sub.add_parser("bench", parents=[common], help="time frame-averaged vs plain forwards")
    return parser


COMMANDS = {"gen": cmd_gen, "train": cmd_train, "eval": cmd_eval, "verify": cmd_verify,
            "interp": cmd_interp, "bench": cmd_bench}


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code == 0 else 2
    try:
        cp = load_config(args.config)
        if args.verb == "interp" and args.steps < 2:
            raise UsageError("--steps must be at least 2")
        if args.verb == "verify" and args.trials < 0:
            raise UsageError("--trials must be non-negative")
        return COMMANDS[args.verb](args, cp)
    except (UsageError, D.InvalidSpec, configparser.Error, ValueError, FileNotFoundError) as exc:
        print(f"eqfa {args.verb}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
