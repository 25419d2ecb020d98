"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Criteria 5, 6 and 8 share two full seeded smoke runs (synthetic cube
cache -> train -> predict on a 96^3 sphere volume) driven through the
command-line entry point with ``--threads 1``.
"""

import csv
import io
import math
import shutil
import time
from contextlib import redirect_stdout
from pathlib import Path

import numpy as np
import pytest

from nodule3d import cli, gradcheck, ops
from nodule3d.checkpoint import load_checkpoint, parse_checkpoint, save_checkpoint
from nodule3d.errors import (BadMagic, CrcMismatch, DecodeError, MalformedHeader, MalformedNpy,
                             ShapeMismatch, SizeMismatch, VersionMismatch)
from nodule3d.inference import read_detections
from nodule3d.network import build_network, small_spec
from nodule3d.optim import OptimizerState, nesterov_step
from nodule3d.preprocess import load_npy, save_npy
from nodule3d.synthetic import Sphere, render, write_scan, write_smoke_dataset
from nodule3d.training import read_metrics
from nodule3d.volume_io import ScanMeta, Volume, read_mhd, write_mhd

from . import oracles

LAYER_COUNTS = [896, 27680, 55360, 110656, 221312, 442496, 884992, 1769728, 65792, 257]
SPATIAL = [46, 44, 22, 20, 18, 9, 7, 5, 3, 1]
CHANNELS = [32, 32, 32, 64, 64, 64, 128, 128, 256, 256]

SMOKE_SEED = 0
SMOKE_EPOCHS = 10
SPHERE_CENTER = (48.0, 48.0, 36.0)  # world mm = voxel index in the 96^3 unit-spacing volume
SPHERE_RADIUS = 6.0
SMOKE_CONFIG = """\
train_scans = 200
val_scans = 50
test_scans = 0
"""


@pytest.fixture
def report(capsys):
    def emit(number, title, ok, detail=""):
        with capsys.disabled():
            print(f"\n[criterion {number}] {'PASS' if ok else 'FAIL'}: {title}"
                  + (f" ({detail})" if detail else ""))
        assert ok, f"criterion {number} failed: {detail}"
    return emit


# --------------------------------------------------------------------------
# 1. Layer table
# --------------------------------------------------------------------------

def test_criterion_1_layer_table(report):
    start = time.perf_counter()
    buf = io.StringIO()
    with redirect_stdout(buf):
        code = cli.main(["inspect", "--network", "canonical", "--csv"])
    elapsed = time.perf_counter() - start
    rows = list(csv.DictReader(io.StringIO(buf.getvalue())))
    layers, total = rows[:-1], rows[-1]
    shapes = [tuple(int(s) for s in r["output_shape"].strip("()").split(", ")[1:])
              for r in layers if r["type"] in ("Conv3D", "MaxPooling3D")]
    counts = [int(r["params"]) for r in layers if int(r["params"])]

    buf = io.StringIO()
    with redirect_stdout(buf):
        cli.main(["inspect", "--network", "canonical"])
    ok = (code == 0
          and [s[0] for s in shapes] == SPATIAL
          and all(s[0] == s[1] == s[2] for s in shapes)
          and [s[3] for s in shapes] == CHANNELS
          and counts == LAYER_COUNTS
          and int(total["params"]) == 3_579_169
          and "Total trainable parameters: 3,579,169" in buf.getvalue()
          and elapsed < 5.0)
    report(1, "layer table shapes and parameter counts", ok,
           f"total {total['params']}, {elapsed:.2f} s")


# --------------------------------------------------------------------------
# 2. Oracle equivalence
# --------------------------------------------------------------------------

def _conv_case(rng):
    b = int(rng.integers(1, 3))
    d, h, w = (int(v) for v in rng.integers(3, 6, size=3))
    c, o = int(rng.integers(1, 7)), int(rng.integers(1, 4))
    return (rng.standard_normal((b, d, h, w, c)), rng.standard_normal((3, 3, 3, c, o)),
            rng.standard_normal(o))


def _max_abs(a, b):
    return float(np.max(np.abs(np.asarray(a, np.float64) - np.asarray(b, np.float64)), initial=0.0))


def test_criterion_2_oracle_equivalence(report):
    rng = np.random.default_rng(2024)
    start = time.perf_counter()
    worst64, worst32, pool_exact = 0.0, 0.0, True
    n_cases = 100
    for _ in range(n_cases):
        # convolution forward and all three gradients
        x, w, b = _conv_case(rng)
        y = ops.conv3d_forward(x, w, b)
        g = rng.standard_normal(y.shape)
        got = (y, *ops.conv3d_backward(x, w, g))
        ref = (oracles.conv3d(x, w, b), *oracles.conv3d_grads(x, w, g))
        worst64 = max(worst64, *(_max_abs(a, r) for a, r in zip(got, ref)))
        x32, w32, b32, g32 = (a.astype(np.float32) for a in (x, w, b, g))
        got32 = (ops.conv3d_forward(x32, w32, b32), *ops.conv3d_backward(x32, w32, g32))
        ref32 = (oracles.conv3d(x32, w32, b32), *oracles.conv3d_grads(x32, w32, g32))
        worst32 = max(worst32, *(_max_abs(a, r) for a, r in zip(got32, ref32)))

        # max pooling forward and routing
        shape = (int(rng.integers(1, 3)), *(2 * int(v) for v in rng.integers(1, 4, size=3)),
                 int(rng.integers(1, 4)))
        xp = rng.standard_normal(shape)
        for dtype in (np.float64, np.float32):
            xd = xp.astype(dtype)
            out, argmax = ops.maxpool3d_forward(xd)
            ref_out, where = oracles.maxpool3d(xd)
            gp = rng.standard_normal(out.shape).astype(dtype)
            pool_exact &= np.array_equal(out, ref_out)
            pool_exact &= np.array_equal(ops.maxpool3d_backward(gp, argmax, xd.shape),
                                         oracles.maxpool3d_grad(xd.shape, where, gp))

        # dense forward and gradients
        n, f, o = (int(v) for v in rng.integers(1, 9, size=3))
        xd, wd, bd = rng.standard_normal((n, f)), rng.standard_normal((f, o)), rng.standard_normal(o)
        gd = rng.standard_normal((n, o))
        got = (ops.dense_forward(xd, wd, bd), *ops.dense_backward(xd, wd, gd))
        ref = (oracles.dense(xd, wd, bd), *oracles.dense_grads(xd, wd, gd))
        worst64 = max(worst64, *(_max_abs(a, r) for a, r in zip(got, ref)))
        a32 = [v.astype(np.float32) for v in (xd, wd, bd, gd)]
        got32 = (ops.dense_forward(*a32[:3]), *ops.dense_backward(a32[0], a32[1], a32[3]))
        ref32 = (oracles.dense(*a32[:3]), *oracles.dense_grads(a32[0], a32[1], a32[3]))
        worst32 = max(worst32, *(_max_abs(a, r) for a, r in zip(got32, ref32)))
    elapsed = time.perf_counter() - start
    # float64 kernels sum in BLAS order, the oracles in loop order; 1e-12 pins "exact"
    ok = worst64 <= 1e-12 and worst32 <= 1e-5 and pool_exact and elapsed < 60
    report(2, f"kernels match loop oracles on {n_cases} random shapes per op", ok,
           f"64-bit max diff {worst64:.1e}, 32-bit {worst32:.1e}, pooling exact={pool_exact}, "
           f"{elapsed:.1f} s")


# --------------------------------------------------------------------------
# 3. Gradient verification
# --------------------------------------------------------------------------

def test_criterion_3_gradcheck(report):
    start = time.perf_counter()
    buf = io.StringIO()
    with redirect_stdout(buf):
        code = cli.main(["gradcheck", "--seed", "0"])
    errors = gradcheck.run_gradcheck(0)
    elapsed = time.perf_counter() - start
    ok = (code == 0 and all(errors[k] < 1e-5 for k in errors if k != "batchnorm")
          and errors["batchnorm"] < 1e-4 and elapsed < 120)
    worst = max(errors, key=lambda k: errors[k] / gradcheck.THRESHOLDS[k])
    report(3, "finite-difference gradient check on every layer kind", ok,
           f"worst {worst} {errors[worst]:.1e}, {elapsed:.1f} s")


# --------------------------------------------------------------------------
# 4. Optimizer fidelity
# --------------------------------------------------------------------------

def test_criterion_4_optimizer(report):
    theta = [np.array([1.0])]
    state = OptimizerState.for_params(theta, lr=0.003, momentum=0.9)
    got = []
    for _ in range(100):
        nesterov_step(theta, [theta[0].copy()], state)  # grad of theta^2 / 2
        got.append(theta[0].item())
    ref = oracles.nesterov_trajectory(1.0, 0.003, 0.9, 100)
    dev = max(abs(a - b) for a, b in zip(got, ref))

    rng = np.random.default_rng(4)
    params = [rng.standard_normal((3, 3, 3, 1, 2)).astype(np.float32), rng.standard_normal(7)]
    before = [p.tobytes() for p in params]
    frozen = OptimizerState.for_params(params, lr=0.0)
    nesterov_step(params, [rng.standard_normal(p.shape) for p in params], frozen)
    identity = [p.tobytes() for p in params] == before

    report(4, "Nesterov trajectory and zero-rate identity", dev <= 1e-12 and identity,
           f"max deviation {dev:.1e} over 100 steps, lr=0 identity={identity}")


# --------------------------------------------------------------------------
# 7. Format round trips
# --------------------------------------------------------------------------

def _raises(exc, fn, *args):
    try:
        fn(*args)
    except exc:
        return True
    except Exception:
        return False
    return False


def test_criterion_7_round_trips(tmp_path, report):
    rng = np.random.default_rng(7)
    checks = {}

    # MetaImage: load -> save reproduces both files byte for byte
    meta = ScanMeta((7, 5, 4), (0.6, 0.6, 2.5), (-120.5, 33.0, -7.25), "int16", series_id="a")
    vox = rng.integers(-1024, 3000, size=meta.array_shape).astype(np.float32)
    first = write_mhd(tmp_path / "a.mhd", Volume(meta, vox))
    (tmp_path / "copy").mkdir()
    second = write_mhd(tmp_path / "copy" / "a.mhd", read_mhd(first))
    checks["mhd"] = (first.read_bytes() == second.read_bytes()
                     and first.with_suffix(".raw").read_bytes() == second.with_suffix(".raw").read_bytes())
    raw = first.with_suffix(".raw")
    raw.write_bytes(raw.read_bytes()[:-2])
    checks["raw size"] = _raises(SizeMismatch, read_mhd, first)
    (tmp_path / "bad.mhd").write_text("NDims = 3\nDimSize = 2 2\n")
    checks["mhd header"] = _raises(MalformedHeader, read_mhd, tmp_path / "bad.mhd")
    fmeta = ScanMeta((2, 1, 1), (1, 1, 1), element_type="float32", raw_path="f.raw")
    (tmp_path / "f.mhd").write_text(
        "NDims = 3\nDimSize = 2 1 1\nElementSpacing = 1 1 1\nElementType = MET_FLOAT\n"
        "ElementDataFile = f.raw\n")
    (tmp_path / "f.raw").write_bytes(np.array([1.0, np.nan], "<f4").tobytes())
    checks["raw decode"] = _raises(DecodeError, read_mhd, tmp_path / "f.mhd")

    # NPY cubes: save -> load -> save byte identical
    cube = rng.random((48, 48, 48), dtype=np.float32)
    save_npy(tmp_path / "c.npy", cube)
    save_npy(tmp_path / "d.npy", load_npy(tmp_path / "c.npy", (48, 48, 48)))
    checks["npy"] = (tmp_path / "c.npy").read_bytes() == (tmp_path / "d.npy").read_bytes() \
        and np.array_equal(np.load(tmp_path / "c.npy"), cube)
    (tmp_path / "m.npy").write_bytes(b"XNUMPY" + (tmp_path / "c.npy").read_bytes()[6:])
    checks["npy magic"] = _raises(MalformedNpy, load_npy, tmp_path / "m.npy")
    save_npy(tmp_path / "s.npy", np.zeros((48, 48, 47), np.float32))
    checks["npy shape"] = _raises(ShapeMismatch, load_npy, tmp_path / "s.npy", (48, 48, 48))

    # checkpoint: save -> load -> save byte identical
    model = build_network(small_spec(), 3)
    state = OptimizerState.for_params(model.params)
    nesterov_step(model.params, [rng.standard_normal(p.shape).astype(np.float32) for p in model.params],
                  state)
    a = save_checkpoint(tmp_path / "a.ckpt", model, state, 2)
    b = save_checkpoint(tmp_path / "b.ckpt", *load_checkpoint(a))
    data = a.read_bytes()
    checks["checkpoint"] = data == b.read_bytes()
    checks["ckpt truncated"] = _raises(CrcMismatch, parse_checkpoint, data[:-64])
    checks["ckpt magic"] = _raises(BadMagic, parse_checkpoint, b"XXXX" + data[4:])
    checks["ckpt version"] = _raises(VersionMismatch, parse_checkpoint, data[:4] + b"\x07" + data[5:])

    failed = [k for k, v in checks.items() if not v]
    report(7, "byte-identical round trips and designated errors", not failed,
           "all of " + ", ".join(checks) if not failed else "failed: " + ", ".join(failed))


# --------------------------------------------------------------------------
# 5, 6, 8. Synthetic end-to-end runs
# --------------------------------------------------------------------------

def _run_pipeline(root: Path) -> dict:
    root.mkdir(parents=True, exist_ok=True)
    cache = root / "cache"
    write_smoke_dataset(cache, SMOKE_SEED, n_train=200, n_val=50)
    cfg = root / "smoke.cfg"
    cfg.write_text(SMOKE_CONFIG)

    run = root / "run"
    log = io.StringIO()
    with redirect_stdout(log):
        train_code = cli.main(["train", "--data", str(cache), "--out", str(run), "--config", str(cfg),
                               "--small", "--epochs", str(SMOKE_EPOCHS), "--seed", str(SMOKE_SEED),
                               "--threads", "1"])

    meta = ScanMeta((96, 96, 96), (1.0, 1.0, 1.0), series_id="sphere")
    volume = render(meta, [Sphere(SPHERE_CENTER, SPHERE_RADIUS)], np.random.default_rng(SMOKE_SEED))
    scan = write_scan(root / "sphere.mhd", volume)
    pred = root / "pred"
    with redirect_stdout(log):
        predict_code = cli.main(["predict", "--scan", str(scan), "--checkpoint", str(run / "best.ckpt"),
                                 "--out", str(pred), "--stride", "24", "--threshold", "0.9",
                                 "--seed", str(SMOKE_SEED), "--threads", "1"])
    return {"root": root, "run": run, "pred": pred, "log": log.getvalue(),
            "train_code": train_code, "predict_code": predict_code}


@pytest.fixture(scope="module")
def smoke_runs(tmp_path_factory):
    base = tmp_path_factory.mktemp("smoke")
    first = _run_pipeline(base / "first")
    second = _run_pipeline(base / "second")
    yield first, second
    shutil.rmtree(base, ignore_errors=True)


@pytest.mark.slow
def test_criterion_5_synthetic_training(smoke_runs, report):
    run = smoke_runs[0]
    rows = read_metrics(run["run"] / "metrics.csv")
    best = max((r["val_acc"] for r in rows), default=float("nan"))
    first_hit = next((r["epoch"] for r in rows if r["val_acc"] >= 0.90), None)
    ok = run["train_code"] == 0 and len(rows) == SMOKE_EPOCHS and first_hit is not None
    detail = "no epochs logged"
    if rows:
        detail = (f"best val_acc {best:.3f}" + (f" first at epoch {first_hit}" if first_hit else "")
                  + f", final val_loss {rows[-1]['val_loss']:.4f}")
    report(5, "small network reaches validation accuracy >= 0.90 within 10 epochs", ok, detail)


@pytest.mark.slow
def test_criterion_6_inference(smoke_runs, report):
    run = smoke_runs[0]
    grid = np.frombuffer((run["pred"] / "probability_map.raw").read_bytes(), "<f4")
    sidecar = (run["pred"] / "probability_map.txt").read_text()
    shape_ok = grid.size == 27 and "dims = 3 3 3" in sidecar and (96 - 48) // 24 + 1 == 3
    detections = read_detections(run["pred"] / "detections.csv")
    limit = math.sqrt(3) * 24
    dists = [math.dist(d.center_world, SPHERE_CENTER) for d in detections]
    near = min(dists, default=float("inf"))
    ok = run["predict_code"] == 0 and shape_ok and near <= limit
    report(6, "sliding-window detection near the embedded sphere", ok,
           f"{len(detections)} detections, nearest {near:.1f} mm (limit {limit:.1f}), "
           f"grid 3x3x3={shape_ok}, max p {grid.max():.3f}")


def _metrics_without_wall_time(path):
    with open(path, newline="") as fh:
        return [row[:-1] for row in csv.reader(fh)]


@pytest.mark.slow
def test_criterion_8_determinism(smoke_runs, report):
    a, b = smoke_runs
    same = {
        "metrics": _metrics_without_wall_time(a["run"] / "metrics.csv")
        == _metrics_without_wall_time(b["run"] / "metrics.csv"),
        "checkpoint": (a["run"] / "best.ckpt").read_bytes() == (b["run"] / "best.ckpt").read_bytes(),
        "detections": (a["pred"] / "detections.csv").read_bytes()
        == (b["pred"] / "detections.csv").read_bytes(),
        "probability map": (a["pred"] / "probability_map.raw").read_bytes()
        == (b["pred"] / "probability_map.raw").read_bytes(),
    }
    cache_a = sorted((a["root"] / "cache").iterdir())
    same["cube cache"] = all(p.read_bytes() == (b["root"] / "cache" / p.name).read_bytes()
                             for p in cache_a)
    report(8, "two seeded single-thread runs are byte-identical", all(same.values()),
           ", ".join(f"{k}={v}" for k, v in same.items()) + " (wall_seconds column excluded)")
