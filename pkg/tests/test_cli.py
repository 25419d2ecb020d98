import csv

import pytest

from nodule3d import cli
from nodule3d.checkpoint import save_checkpoint
from nodule3d.network import build_network, canonical_spec, small_spec
from nodule3d.optim import OptimizerState
from nodule3d.synthetic import write_synthetic_scans

TOTAL_LINE = "Total trainable parameters: 3,579,169"


@pytest.fixture(scope="module")
def scans(tmp_path_factory):
    root = tmp_path_factory.mktemp("scans")
    paths, ann = write_synthetic_scans(root, 2, seed=3, dims=(120, 56, 52))
    return root, paths, ann


def small_ckpt(path, spec=None):
    model = build_network(spec or small_spec(), 0)
    return save_checkpoint(path, model, OptimizerState.for_params(model.params))


class TestUsage:
    def test_unknown_command(self, capsys):
        assert cli.main(["frobnicate"]) == cli.EXIT_USAGE

    def test_unknown_flag(self):
        assert cli.main(["inspect", "--network", "small", "--bogus"]) == cli.EXIT_USAGE

    def test_missing_required(self):
        assert cli.main(["predict", "--scan", "x.mhd"]) == cli.EXIT_USAGE


class TestInspect:
    def test_canonical_table(self, capsys):
        assert cli.main(["inspect", "--network", "canonical"]) == 0
        out = capsys.readouterr().out
        assert out.rstrip().endswith(TOTAL_LINE)

    def test_checkpoint_csv(self, tmp_path, capsys):
        path = small_ckpt(tmp_path / "s.ckpt")
        assert cli.main(["inspect", "--checkpoint", str(path), "--csv"]) == 0
        rows = list(csv.DictReader(capsys.readouterr().out.splitlines()))
        assert rows[-1]["layer"] == "total" and int(rows[-1]["params"]) == 224_137

    def test_corrupt_checkpoint(self, tmp_path, capsys):
        path = small_ckpt(tmp_path / "s.ckpt")
        path.write_bytes(path.read_bytes()[:-10])
        assert cli.main(["inspect", "--checkpoint", str(path)]) == cli.EXIT_DATA
        assert "CrcMismatch" in capsys.readouterr().err


class TestGradcheck:
    def test_passes_and_repeats(self, capsys):
        assert cli.main(["gradcheck", "--seed", "2"]) == 0
        first = capsys.readouterr().out
        assert cli.main(["gradcheck", "--seed", "2"]) == 0
        assert capsys.readouterr().out == first
        assert first.count(" ok") == 7

    def test_corrupted_conv_fails(self, capsys):
        assert cli.main(["gradcheck", "--corrupt", "conv3d"]) == cli.EXIT_VERIFY
        assert "FAIL" in capsys.readouterr().out


class TestPreprocess:
    def test_cache_and_determinism(self, scans, tmp_path):
        root, _, ann = scans
        args = ["preprocess", "--scans", str(root), "--annotations", str(ann), "--seed", "5"]
        assert cli.main(args + ["--out", str(tmp_path / "a")]) == 0
        assert cli.main(args + ["--out", str(tmp_path / "b")]) == 0
        files = sorted(p.name for p in (tmp_path / "a").iterdir())
        assert "manifest.csv" in files and len(files) == 5  # 2 scans x (1 pos + 1 neg) + manifest
        for name in files:
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()

    def test_partial_failure(self, scans, tmp_path, capsys):
        root, paths, ann = scans
        bad = tmp_path / "scans"
        bad.mkdir()
        for p in paths:
            for suffix in (".mhd", ".raw"):
                (bad / p.with_suffix(suffix).name).write_bytes(p.with_suffix(suffix).read_bytes())
        raw = bad / paths[1].with_suffix(".raw").name
        raw.write_bytes(raw.read_bytes()[:1000])
        out = tmp_path / "cache"
        code = cli.main(["preprocess", "--scans", str(bad), "--annotations", str(ann), "--out", str(out)])
        assert code == cli.EXIT_DATA
        assert paths[1].name in capsys.readouterr().err
        with open(out / "manifest.csv") as fh:
            series = {row["series"] for row in csv.DictReader(fh)}
        assert series == {paths[0].stem}

    def test_empty_dir(self, tmp_path, capsys):
        ann = tmp_path / "a.csv"
        ann.write_text("seriesuid,coordX,coordY,coordZ,diameter_mm\n")
        code = cli.main(["preprocess", "--scans", str(tmp_path), "--annotations", str(ann),
                         "--out", str(tmp_path / "o")])
        assert code == cli.EXIT_DATA and "no scans found" in capsys.readouterr().err


class TestTrain:
    def test_zero_epochs(self, scans, tmp_path):
        root, _, ann = scans
        cache = tmp_path / "cache"
        cli.main(["preprocess", "--scans", str(root), "--annotations", str(ann), "--out", str(cache)])
        out = tmp_path / "run"
        assert cli.main(["train", "--data", str(cache), "--out", str(out), "--epochs", "0",
                         "--small"]) == 0
        assert (out / "best.ckpt").exists()
        assert (out / "metrics.csv").read_text().splitlines() == [
            "epoch,train_loss,train_acc,val_loss,val_acc,wall_seconds"]
        assert cli.main(["evaluate", "--data", str(cache), "--checkpoint", str(out / "best.ckpt")]) == 0

    def test_missing_manifest(self, tmp_path, capsys):
        assert cli.main(["train", "--data", str(tmp_path), "--out", str(tmp_path / "o")]) == cli.EXIT_DATA
        assert "manifest" in capsys.readouterr().err


class TestPredict:
    def test_untrained_high_threshold(self, scans, tmp_path):
        _, paths, _ = scans
        ckpt = small_ckpt(tmp_path / "s.ckpt")
        out = tmp_path / "pred"
        assert cli.main(["predict", "--scan", str(paths[0]), "--checkpoint", str(ckpt),
                         "--out", str(out), "--threshold", "0.99", "--stride", "8"]) == 0
        for name in ("probability_map.csv", "probability_map.raw", "probability_map.txt",
                     "detections.csv", "projection.pgm", "projection.csv", "mask_projection.pgm"):
            assert (out / name).exists()
        assert (out / "detections.csv").read_text().startswith("ix,iy,iz,x,y,z,probability")

    def test_stride_beyond_volume(self, scans, tmp_path, capsys):
        _, paths, _ = scans
        ckpt = small_ckpt(tmp_path / "s.ckpt")
        code = cli.main(["predict", "--scan", str(paths[0]), "--checkpoint", str(ckpt),
                         "--out", str(tmp_path / "p"), "--stride", "500"])
        assert code == cli.EXIT_DATA and "VolumeTooSmall" in capsys.readouterr().err
