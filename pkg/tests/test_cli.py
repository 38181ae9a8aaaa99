import csv
import subprocess
import sys

import numpy as np
import pytest

from jointdn import cli, nn
from jointdn import pipeline as P
from jointdn.data import load_pgm, read_manifest, save_pgm
from jointdn.eval import read_metrics_csv

SMALL = ["--set", "mask_count=9", "--set", "base_width=4"]


def run(*argv):
    return cli.main([str(a) for a in argv])


@pytest.fixture(autouse=True)
def no_env_seed(monkeypatch):
    monkeypatch.delenv("JNT_SEED", raising=False)


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    out = tmp_path_factory.mktemp("data")
    assert run("gen-data", "--out", out, "--count", 4, "--size", 16, "--seed", 3, "--force") == 0
    return out


def snapshot(root):
    return {p.name: p.read_bytes() for p in sorted(root.iterdir())}


class TestGenData:
    def test_counts(self, tmp_path):
        assert run("gen-data", "--out", tmp_path / "d", "--count", 4, "--size", 16) == 0
        assert len(read_manifest(tmp_path / "d" / "manifest.csv")) == 4
        assert len((tmp_path / "d" / "manifest.csv").read_text().splitlines()) == 4
        assert len(list((tmp_path / "d").glob("*.pgm"))) == 12

    def test_rerun_identical(self, tmp_path):
        args = ["gen-data", "--out", tmp_path / "d", "--count", 3, "--size", 16, "--seed", 9, "--style", "plaque"]
        assert run(*args) == 0
        first = snapshot(tmp_path / "d")
        assert run(*args) == cli.EXIT_USAGE
        assert run(*args, "--force") == 0
        assert snapshot(tmp_path / "d") == first

    def test_sigma_list(self, tmp_path):
        assert run("gen-data", "--out", tmp_path, "--count", 3, "--size", 16, "--sigma", "0.1,0.2", "--force") == 0
        rows = read_manifest(tmp_path / "manifest.csv")
        assert len(rows) == 6
        by_clean = {}
        for r in rows:
            by_clean.setdefault(r.clean_path, []).append(r.sigma)
            assert (tmp_path / r.noisy_path).exists()
        assert all(sorted(v) == [0.1, 0.2] for v in by_clean.values())
        assert len(list(tmp_path.glob("noisy_*.pgm"))) == 6

    def test_seed_changes_output(self, tmp_path):
        run("gen-data", "--out", tmp_path / "a", "--count", 2, "--size", 16, "--seed", 1)
        run("gen-data", "--out", tmp_path / "b", "--count", 2, "--size", 16, "--seed", 2)
        assert snapshot(tmp_path / "a")["clean_0000.pgm"] != snapshot(tmp_path / "b")["clean_0000.pgm"]

    def test_env_seed_fallback(self, tmp_path, monkeypatch):
        run("gen-data", "--out", tmp_path / "a", "--count", 2, "--size", 16, "--seed", 17)
        monkeypatch.setenv("JNT_SEED", "17")
        run("gen-data", "--out", tmp_path / "b", "--count", 2, "--size", 16)
        assert snapshot(tmp_path / "a") == snapshot(tmp_path / "b")
        assert "seed=17" in (tmp_path / "b" / "effective_config.txt").read_text().splitlines()

    def test_bad_style(self, tmp_path):
        assert run("gen-data", "--out", tmp_path, "--style", "cells") == cli.EXIT_USAGE


class TestConfig:
    def test_file_and_overrides(self, tmp_path):
        cfg = tmp_path / "run.cfg"
        cfg.write_text("# comment line\nlr = 0.001  # trailing\nsteps=7\n\nmask_position=center\n")
        out = cli.resolve_config(str(cfg), ["steps=9"], {"seed": 4})
        assert out["lr"] == 0.001 and out["steps"] == 9 and out["seed"] == 4 and out["mask_position"] == "center"

    def test_flag_beats_set(self):
        assert cli.resolve_config(None, ["seed=1"], {"seed": 2})["seed"] == 2

    @pytest.mark.parametrize("text", ["bogus=1", "steps=many", "mask_position=edge", "no equals sign"])
    def test_rejected(self, tmp_path, text):
        cfg = tmp_path / "bad.cfg"
        cfg.write_text(text + "\n")
        with pytest.raises(cli.UsageError):
            cli.resolve_config(str(cfg), [], {})

    def test_missing_file(self, tmp_path):
        with pytest.raises(cli.UsageError):
            cli.resolve_config(str(tmp_path / "nope.cfg"), [], {})

    def test_unknown_key_exit_code(self, tmp_path, dataset):
        assert run("train", "--mode", "n2v", "--data", dataset, "--out", tmp_path, "--set", "colour=red") == 2

    def test_effective_config_round_trip(self, tmp_path):
        cfg = cli.resolve_config(None, ["lr=0.002", "sigma=0.1,0.3", "w2=0.5"], {})
        cli.write_effective_config(cfg, tmp_path)
        assert cli.resolve_config(str(tmp_path / "effective_config.txt"), [], {}) == cfg


class TestTrain:
    def test_n2v_reproducible(self, tmp_path, dataset):
        for name in ("a", "b"):
            assert run("train", "--mode", "n2v", "--data", dataset, "--out", tmp_path / name,
                       "--steps", 4, "--seed", 5, *SMALL) == 0
        a, b = (tmp_path / n / "denoiser.ckpt" for n in "ab")
        assert a.read_bytes() == b.read_bytes()
        # re-running from the echoed config reproduces the run
        assert run("train", "--mode", "n2v", "--data", dataset, "--out", tmp_path / "c",
                   "--config", tmp_path / "a" / "effective_config.txt") == 0
        assert (tmp_path / "c" / "denoiser.ckpt").read_bytes() == a.read_bytes()

    def test_log_rows(self, tmp_path, dataset):
        assert run("train", "--mode", "n2v", "--data", dataset, "--out", tmp_path, "--steps", 12,
                   "--set", "log_every=3", *SMALL) == 0
        with open(tmp_path / "train_log.csv") as fh:
            rows = list(csv.DictReader(fh))
        assert len(rows) == 12 // 3
        assert [int(r["step"]) for r in rows] == [0, 3, 6, 9]

    def test_supervised_missing_labels(self, tmp_path, dataset, capsys):
        data = tmp_path / "nolabels"
        data.mkdir()
        for p in dataset.iterdir():
            if not p.name.startswith("label_"):
                (data / p.name).write_bytes(p.read_bytes())
        code = run("train", "--mode", "supervised", "--data", data, "--out", tmp_path / "o", "--steps", 2, *SMALL)
        assert code == cli.EXIT_DATA
        assert "label_0000.pgm" in capsys.readouterr().err

    def test_supervised_writes_both(self, tmp_path, dataset):
        assert run("train", "--mode", "supervised", "--data", dataset, "--out", tmp_path, "--steps", 3, *SMALL) == 0
        assert nn.load_checkpoint(tmp_path / "seg.ckpt").head == "sigmoid"
        assert nn.load_checkpoint(tmp_path / "denoiser.ckpt").head == "residual"

    def test_unsupervised_needs_frozen_branch(self, tmp_path, dataset, capsys):
        base = ["train", "--mode", "unsupervised", "--data", dataset, "--steps", 2, *SMALL]
        assert run(*base, "--out", tmp_path / "a") == cli.EXIT_DATA
        assert "frozen" in capsys.readouterr().err
        assert run(*base, "--out", tmp_path / "b", "--seg", tmp_path / "missing.ckpt") == cli.EXIT_DATA

        live = nn.build_unet(1, 1, 2, 4, "sigmoid", seed=0)
        nn.save_checkpoint(live, tmp_path / "live.ckpt")
        assert run(*base, "--out", tmp_path / "c", "--seg", tmp_path / "live.ckpt") == cli.EXIT_DATA

        assert run("train", "--mode", "pretrain-seg", "--data", dataset, "--out", tmp_path / "seg",
                   "--steps", 3, *SMALL) == 0
        seg_ckpt = tmp_path / "seg" / "seg.ckpt"
        before = seg_ckpt.read_bytes()
        assert run(*base, "--out", tmp_path / "d", "--seg", seg_ckpt) == 0
        assert seg_ckpt.read_bytes() == before

    def test_nan_exit_code(self, tmp_path, dataset, monkeypatch):
        def boom(*a, **k):
            raise FloatingPointError("non-finite loss at step 0")
        monkeypatch.setattr(P, "train_n2v", boom)
        assert run("train", "--mode", "n2v", "--data", dataset, "--out", tmp_path, *SMALL) == cli.EXIT_NUMERIC

    def test_missing_dataset(self, tmp_path):
        assert run("train", "--mode", "n2v", "--data", tmp_path / "nowhere", "--out", tmp_path / "o") == cli.EXIT_DATA

    def test_usage_errors(self, tmp_path, dataset):
        assert run("train", "--data", dataset, "--out", tmp_path) == cli.EXIT_USAGE
        assert run("train", "--mode", "n2v", "--data", dataset, "--out", tmp_path / "o", "--set", "lr=5") == 2
        assert run("frobnicate") == cli.EXIT_USAGE


class TestDenoise:
    def test_empty_dir(self, tmp_path):
        nn.save_checkpoint(nn.build_unet(1, 1, 2, 4, "residual", seed=0), tmp_path / "dn.ckpt")
        (tmp_path / "in").mkdir()
        assert run("denoise", "--model", tmp_path / "dn.ckpt", "--in", tmp_path / "in", "--out", tmp_path / "out") == 0
        assert list((tmp_path / "out").iterdir()) == []

    def test_identity_model(self, tmp_path, dataset):
        nn.save_checkpoint(nn.build_unet(1, 1, 2, 4, "residual", seed=0), tmp_path / "dn.ckpt")
        assert run("denoise", "--model", tmp_path / "dn.ckpt", "--in", dataset, "--out", tmp_path / "out") == 0
        inputs = sorted(p.name for p in dataset.glob("*.pgm"))
        assert sorted(p.name for p in (tmp_path / "out").iterdir()) == inputs
        for name in inputs:
            diff = np.abs(load_pgm(tmp_path / "out" / name) - load_pgm(dataset / name))
            assert diff.max() <= 1 / 510

    def test_wrong_architecture(self, tmp_path, dataset):
        nn.save_checkpoint(nn.build_unet(1, 1, 2, 4, "sigmoid", seed=0), tmp_path / "seg.ckpt")
        assert run("denoise", "--model", tmp_path / "seg.ckpt", "--in", dataset, "--out", tmp_path / "o") == 3

    def test_corrupt_checkpoint(self, tmp_path, dataset):
        data = nn.checkpoint_bytes(nn.build_unet(1, 1, 2, 4, "residual", seed=0))
        (tmp_path / "bad.ckpt").write_bytes(data[:-5])
        assert run("denoise", "--model", tmp_path / "bad.ckpt", "--in", dataset, "--out", tmp_path / "o") == 3

    def test_indivisible_image(self, tmp_path):
        nn.save_checkpoint(nn.build_unet(1, 1, 2, 4, "residual", seed=0), tmp_path / "dn.ckpt")
        (tmp_path / "in").mkdir()
        save_pgm(np.zeros((10, 10)), tmp_path / "in" / "odd.pgm")
        assert run("denoise", "--model", tmp_path / "dn.ckpt", "--in", tmp_path / "in", "--out", tmp_path / "o") == 3


class TestEval:
    def test_csv_mean_row(self, tmp_path, dataset):
        nn.save_checkpoint(nn.build_unet(1, 1, 2, 4, "residual", seed=0), tmp_path / "dn.ckpt")
        nn.save_checkpoint(nn.build_unet(1, 1, 2, 4, "sigmoid", seed=1), tmp_path / "seg.ckpt")
        assert run("eval", "--denoiser", tmp_path / "dn.ckpt", "--seg", tmp_path / "seg.ckpt", "--data", dataset,
                   "--out", tmp_path / "m.csv") == 0
        with open(tmp_path / "m.csv") as fh:
            rows = list(csv.reader(fh))
        assert rows[0] == ["image_id", "psnr", "ssim", "iou", "f1"] and rows[-1][0] == "mean"
        body = rows[1:-1]
        assert len(body) == 4
        for col in range(1, 5):
            vals = [float(r[col]) for r in body]
            assert abs(float(rows[-1][col]) - sum(vals) / len(vals)) <= 1e-9

    def test_without_seg(self, tmp_path, dataset):
        nn.save_checkpoint(nn.build_unet(1, 1, 2, 4, "residual", seed=0), tmp_path / "dn.ckpt")
        assert run("eval", "--denoiser", tmp_path / "dn.ckpt", "--data", dataset, "--out", tmp_path / "m.csv") == 0
        _, mean = read_metrics_csv(tmp_path / "m.csv")
        assert mean.iou is None and mean.psnr > 0


class TestMaskStudy:
    def test_bookkeeping_and_recompute(self, tmp_path, dataset):
        out = tmp_path / "study.csv"
        assert run("mask-study", "--data", dataset, "--mask-counts", "1", "--replicates", 2, "--steps", 10,
                   "--out", out, "--set", "base_width=4") == 0
        with open(out) as fh:
            rows = list(csv.DictReader(fh))
        loss_rows = [r for r in rows if r["kind"] == "loss"]
        summary = [r for r in rows if r["kind"] == "summary"]
        assert len(loss_rows) == 20 and len(summary) == 1
        traj = np.zeros((2, 10))
        for r in loss_rows:
            traj[int(r["replicate"]), int(r["step"])] = float(r["loss"])
        tail = traj[:, 7:].mean(axis=1)
        assert abs(float(summary[0]["tail_variance"]) - np.var(tail)) <= 1e-15
        per_step = [np.var(traj[:, s]) for s in range(10)]
        assert abs(float(summary[0]["step_variance"]) - np.mean(per_step)) <= 1e-15
        assert not np.array_equal(traj[0], traj[1])  # replicates use distinct seeds

    def test_parallel_matches_serial(self, tmp_path, dataset):
        args = ["mask-study", "--data", dataset, "--mask-counts", "1,4", "--replicates", 2, "--steps", 3,
                "--set", "base_width=4"]
        assert run(*args, "--out", tmp_path / "a.csv") == 0
        assert run(*args, "--out", tmp_path / "b.csv", "--workers", 2) == 0
        assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()

    def test_rejections(self, tmp_path, dataset):
        base = ["mask-study", "--data", dataset, "--steps", 2, "--out", tmp_path / "s.csv"]
        assert run(*base, "--mask-counts", "1", "--replicates", 1) == cli.EXIT_USAGE
        assert run(*base, "--mask-counts", "200", "--replicates", 2) == cli.EXIT_USAGE


def test_module_entry_point(tmp_path):
    res = subprocess.run([sys.executable, "-m", "jointdn", "gen-data", "--out", str(tmp_path), "--count", "1",
                          "--size", "16"], capture_output=True, text=True)
    assert res.returncode == 0, res.stderr
    res = subprocess.run([sys.executable, "-m", "jointdn", "gen-data", "--out", str(tmp_path)],
                         capture_output=True, text=True)
    assert res.returncode == 2 and "not empty" in res.stderr
