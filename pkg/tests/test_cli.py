import csv

import numpy as np
import pytest
from scipy.spatial.transform import Rotation

from eqfa import cli, metrics
from eqfa import data as D
from eqfa import models as M
from eqfa.group import act_points

SMALL = """
[data]
shapes = 12
ring_size = 6
rings_per_segment = 3
cloud_points = 64
[model]
kind = {kind}
hidden = 16
m = 3
d = 4
encoder_hidden = 8
decoder_hidden = 8
samples = 32
[train]
epochs = {epochs}
batch_size = 4
lr = 1e-2
[eval]
grid_resolution = 10
[bench]
repeats = 5
batches = 1, 4
"""


def _config(tmp_path, kind="global-mesh", epochs=3, name="c.ini"):
    p = tmp_path / name
    p.write_text(SMALL.format(kind=kind, epochs=epochs))
    return str(p)


@pytest.fixture
def dataset(tmp_path):
    cfg = _config(tmp_path)
    assert cli.main(["gen", "--config", cfg, "--out", str(tmp_path / "ds")]) == 0
    return tmp_path / "ds"


def _losses(path):
    with open(path, newline="") as fh:
        return [float(r["loss"]) for r in csv.DictReader(fh)]


def test_gen_default_count(tmp_path):
    # the default config asks for 256 shapes; skip the clouds to keep this quick
    cfg = tmp_path / "d.ini"
    cfg.write_text("[data]\ncloud_points = 0\n")
    assert cli.main(["gen", "--config", str(cfg), "--out", str(tmp_path / "big")]) == 0
    entries = [l for l in (tmp_path / "big" / "manifest.txt").read_text().splitlines() if not l.startswith("#")]
    assert len(entries) == 256
    assert len(list((tmp_path / "big" / "shapes").glob("*.obj"))) == 256


def test_gen_deterministic(tmp_path, dataset):
    cfg = _config(tmp_path)
    assert cli.main(["gen", "--config", cfg, "--out", str(tmp_path / "again")]) == 0
    for f in sorted(dataset.rglob("*")):
        if f.is_file():
            assert f.read_bytes() == (tmp_path / "again" / f.relative_to(dataset)).read_bytes()


def test_gen_invalid_segments(tmp_path, capsys):
    cfg = tmp_path / "bad.ini"
    cfg.write_text("[data]\nsegments = 1\n")
    assert cli.main(["gen", "--config", str(cfg), "--out", str(tmp_path / "x")]) == 2
    assert "segments must be ≥ 2" in capsys.readouterr().err


def test_usage_errors(tmp_path):
    assert cli.main([]) == 2
    assert cli.main(["nope"]) == 2
    assert cli.main(["gen", "--config", str(tmp_path / "missing.ini")]) == 2
    assert cli.main(["eval", str(tmp_path / "missing.eqf"), "--data", str(tmp_path)]) == 2


def test_train_zero_epochs_is_init(tmp_path, dataset):
    cfg = _config(tmp_path, epochs=0)
    assert cli.main(["train", "--config", cfg, "--data", str(dataset), "--out", str(tmp_path / "r"), "--seed", "3"]) == 0
    model, params, _, _ = M.load_model(tmp_path / "r" / "model.eqf")
    init = model.init_params(np.random.default_rng([3, 0xA11CE]))
    assert all(np.array_equal(params[k], init[k]) for k in init)


def test_train_piecewise_reduces_loss(tmp_path, dataset):
    cfg = _config(tmp_path, kind="piecewise", epochs=40)
    assert cli.main(["train", "--config", cfg, "--data", str(dataset), "--out", str(tmp_path / "r")]) == 0
    losses = _losses(tmp_path / "r" / "model.eqf.loss.csv")
    assert len(losses) == 40 and losses[-1] < 0.25 * losses[0]


def test_train_resume(tmp_path, dataset):
    full = _config(tmp_path, epochs=4, name="full.ini")
    half = _config(tmp_path, epochs=2, name="half.ini")
    assert cli.main(["train", "--config", full, "--data", str(dataset), "--out", str(tmp_path / "a")]) == 0
    assert cli.main(["train", "--config", half, "--data", str(dataset), "--out", str(tmp_path / "b")]) == 0
    assert cli.main(["train", "--config", half, "--data", str(dataset), "--out", str(tmp_path / "c"),
                     "--resume", str(tmp_path / "b" / "model.eqf")]) == 0
    a = _losses(tmp_path / "a" / "model.eqf.loss.csv")
    c = _losses(tmp_path / "c" / "model.eqf.loss.csv")
    assert len(c) == 4
    assert max(abs(x - y) for x, y in zip(a, c)) < 1e-9


def test_eval_mesh(tmp_path, dataset, capsys):
    cfg = _config(tmp_path)
    out = tmp_path / "r"
    assert cli.main(["train", "--config", cfg, "--data", str(dataset), "--out", str(out)]) == 0
    train_mse = float(M.read_meta(out / "model.eqf")["train_mse"])
    assert cli.main(["eval", str(out / "model.eqf"), "--data", str(dataset), "--out", str(out)]) == 0
    rows = {(s, m): v for s, m, v in metrics.read_metrics_csv(out / "metrics.csv")}
    assert abs(rows[("train", "mse")] - train_mse) < 1e-9
    assert set(s for s, _ in rows) == {"train", "I", "z", "SO3", "unseen-pose"}
    assert abs(rows[("SO3", "mse")] - rows[("I", "mse")]) / rows[("I", "mse")] < 0.05


def test_eval_implicit(tmp_path, dataset):
    cfg = _config(tmp_path, kind="implicit", epochs=1)
    out = tmp_path / "r"
    assert cli.main(["train", "--config", cfg, "--data", str(dataset), "--out", str(out)]) == 0
    assert cli.main(["eval", str(out / "model.eqf"), "--data", str(dataset), "--config", cfg, "--out", str(out)]) == 0
    ((split, metric, value),) = metrics.read_metrics_csv(out / "metrics.csv")
    assert (split, metric) == ("test", "chamfer") and np.isfinite(value)


def test_verify(capsys):
    assert cli.main(["verify", "--trials", "5"]) == 0
    out = capsys.readouterr().out
    assert out.count("PASS") == 5
    for line in out.splitlines():
        assert float(line.split("max_residual=")[1].split()[0]) < 1e-5
    assert cli.main(["verify", "--trials", "0"]) == 0
    assert "trials=   0" in capsys.readouterr().out


def test_verify_injected_bug(capsys):
    assert cli.main(["verify", "--trials", "3", "--inject-bug", "skip-fa"]) == 1
    out = {l.split()[0]: l for l in capsys.readouterr().out.splitlines()}
    # frames themselves are unaffected; everything built on frame averaging breaks
    assert out["frame"].endswith("PASS")
    assert all(out[k].endswith("FAIL") for k in ("encoder", "decoder", "implicit", "parts"))


def test_interp(tmp_path, dataset):
    cfg = _config(tmp_path)
    out = tmp_path / "r"
    assert cli.main(["train", "--config", cfg, "--data", str(dataset), "--out", str(out)]) == 0
    ck = out / "model.eqf"
    model, params, _, _ = M.load_model(ck)
    A_path = dataset / "shapes" / "shape_0000.obj"
    A, F = D.read_obj(A_path)
    B_path = tmp_path / "b.obj"
    g = D.random_motion(np.random.default_rng(2), 1.0)
    D.write_obj(B_path, act_points(g, A), F)

    assert cli.main(["interp", str(ck), str(A_path), str(B_path), "--steps", "2", "--out", str(tmp_path / "two")]) == 0
    Y0 = model.reconstruct(params, A[None]).data[0]
    Y1 = model.reconstruct(params, act_points(g, A)[None]).data[0]
    np.testing.assert_allclose(D.read_obj(tmp_path / "two" / "interp_000.obj")[0], Y0, atol=1e-10)
    np.testing.assert_allclose(D.read_obj(tmp_path / "two" / "interp_001.obj")[0], Y1, atol=1e-8)

    assert cli.main(["interp", str(ck), str(A_path), str(B_path), "--steps", "11", "--out", str(tmp_path / "eleven")]) == 0
    files = sorted((tmp_path / "eleven").glob("*.obj"))
    assert [f.name for f in files] == [f"interp_{i:03d}.obj" for i in range(11)]
    for f in files[1:-1]:
        Y = D.read_obj(f)[0]
        R, _ = Rotation.align_vectors(Y0 - Y0.mean(0), Y - Y.mean(0))
        assert metrics.chamfer(R.apply(Y - Y.mean(0)) + Y0.mean(0), Y0) < 1e-3
    assert cli.main(["interp", str(ck), str(A_path), str(B_path), "--steps", "1"]) == 2


def test_bench(tmp_path):
    cfg = _config(tmp_path)
    assert cli.main(["bench", "--config", cfg, "--out", str(tmp_path)]) == 0
    with open(tmp_path / "bench.csv", newline="") as fh:
        rows = list(csv.DictReader(fh))
    assert list(rows[0]) == ["variant", "batch", "median_ms"]
    t = {(r["variant"], int(r["batch"])): float(r["median_ms"]) for r in rows}
    assert set(t) == {(v, b) for v in ("backbone", "fa-global", "fa-piecewise") for b in (1, 4)}
    assert t[("fa-global", 1)] >= 4 * t[("backbone", 1)]
    assert t[("fa-piecewise", 1)] >= t[("fa-global", 1)]
    for v in ("backbone", "fa-global", "fa-piecewise"):
        assert t[(v, 4)] / 4 <= t[(v, 1)]
