import csv
import io

import numpy as np
import pytest

from voxdae import model as M
from voxdae.cli import run
from voxdae.mesh import box_mesh, read_voxg, write_off

TINY = ["--per-class", "1", "--test-per-class", "1"]


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    ckpt = tmp_path_factory.mktemp("cli") / "dae.vcda"
    assert run(["train", "--out", str(ckpt), "--epochs", "1", "--batch-size", "2", "--init", "he", *TINY]) == 0
    return ckpt


def _err(capsys):
    return capsys.readouterr().err.strip().splitlines()[0]


@pytest.mark.parametrize("argv", [["frobnicate"], [], ["denoise"], ["train", "--out", "x", "--epochs", "0"],
                                  ["denoise", "--checkpoint", "x", "--noise", "gauss:1"],
                                  ["denoise", "--checkpoint", "x", "--threshold", "2"],
                                  ["train", "--out", "x", "--precision", "16"],
                                  ["interpolate", "--checkpoint", "x", "--out", "d", "--steps", "1"]])
def test_usage_errors_exit_1(argv, capsys):
    assert run(argv) == 1
    assert _err(capsys).startswith("voxdae-error: 1: ")


def test_help_exits_0(capsys):
    assert run(["train", "--help"]) == 0
    assert "--batch-size" in capsys.readouterr().out


def test_missing_checkpoint_exits_2(tmp_path, capsys):
    assert run(["denoise", "--checkpoint", str(tmp_path / "none.vcda"), *TINY]) == 2
    assert _err(capsys).startswith("voxdae-error: 2: cannot read checkpoint")


def test_missing_dataset_exits_2(trained, tmp_path, capsys):
    assert run(["embed", "--checkpoint", str(trained), "--dataset", str(tmp_path / "nowhere"),
                "--out", str(tmp_path / "e.npz")]) == 2
    assert "dataset directory not found" in _err(capsys)


def test_bad_config_line_is_usage_error(tmp_path, capsys):
    cfg = tmp_path / "c.cfg"
    cfg.write_text("epochs: 3\n")
    assert run(["train", "--out", str(tmp_path / "m"), "--config", str(cfg)]) == 1


def test_non_finite_loss_exits_3(tmp_path, capsys):
    m = M.init_model(M.ModelSpec(), 0)
    m.params["deconv2.bias"][:] = np.nan
    M.save_checkpoint(m, tmp_path / "nan.vcda", include_velocity=False)
    del m
    code = run(["train", "--checkpoint", str(tmp_path / "nan.vcda"), "--out", str(tmp_path / "o.vcda"),
                "--epochs", "1", *TINY])
    assert code == 3
    assert _err(capsys).startswith("voxdae-error: 3: non-finite loss")


def test_voxelize(tmp_path, capsys):
    off = tmp_path / "box.off"
    off.write_text(write_off(box_mesh((0, 0, 0), (2, 1, 1))))
    assert run(["voxelize", str(off), "--out", str(tmp_path / "box.voxg"), "--label", "3"]) == 0
    g = read_voxg(tmp_path / "box.voxg")
    assert g.label == 3 and g.padding_is_empty() and g.count > 0
    assert run(["voxelize", str(off), "--out", str(tmp_path / "rot" / "box.voxg"), "--rotations"]) == 0
    assert len(list((tmp_path / "rot").glob("box_r*.voxg"))) == 12
    (tmp_path / "bad.off").write_text("OFF\n3 1 0\n")
    assert run(["voxelize", str(tmp_path / "bad.off"), "--out", str(tmp_path / "b.voxg")]) == 2


def test_synth_dir_and_env_fallback(trained, tmp_path, monkeypatch, capsys):
    root = tmp_path / "synth"
    assert run(["synth", "--out", str(root), *TINY]) == 0
    assert len(list((root / "train").glob("*.voxg"))) == 4
    assert (root / "classes.txt").read_text().split() == ["box", "cylinder", "cross", "l-shape"]
    monkeypatch.setenv("VOXDAE_DATA", str(root))
    out = tmp_path / "rep.csv"
    assert run(["denoise", "--checkpoint", str(trained), "--out", str(out)]) == 0
    rows = [r for r in csv.reader(io.StringIO(out.read_text())) if r and not r[0].startswith("#")]
    assert [r[0] for r in rows] == ["class", "box", "cylinder", "cross", "l-shape", "mean"]


def test_config_values_and_flag_override(tmp_path):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("# tiny\nepochs = 2\nper-class = 1\ntest-per-class = 1\nbatch-size = 4\n")
    out = tmp_path / "m.vcda"
    assert run(["train", "--config", str(cfg), "--out", str(out), "--epochs", "1"]) == 0
    lines = out.with_suffix(".history.csv").read_text().splitlines()
    assert lines[0] == "epoch,loss" and len(lines) == 2
    assert M.load_checkpoint(out).meta["epoch"] == 1


def test_reports_and_outputs(trained, tmp_path, capsys):
    ck = str(trained)
    rep = tmp_path / "complete.csv"
    assert run(["complete", "--checkpoint", ck, "--out", str(rep), *TINY]) == 0
    text = rep.read_text()
    assert "# noise: slice:0.3" in text and "\nmean," in text
    assert run(["complete", "--checkpoint", ck, "--out", str(tmp_path / "again.csv"), *TINY]) == 0
    assert (tmp_path / "again.csv").read_text() == text

    assert run(["interpolate", "--checkpoint", ck, "--source", "0", "--target", "2", "--out",
                str(tmp_path / "interp"), *TINY]) == 0
    assert len(list((tmp_path / "interp").glob("step_*.voxg"))) == 10
    assert np.load(tmp_path / "interp" / "probabilities.npy").shape == (10, 30, 30, 30)
    assert run(["interpolate", "--checkpoint", ck, "--source", "9", "--out", str(tmp_path / "i2"), *TINY]) == 2

    for phase in ("train", "test"):
        assert run(["embed", "--checkpoint", ck, "--phase", phase, "--out", str(tmp_path / f"{phase}.npz"),
                    *TINY]) == 0
    assert run(["probe", "--train-embeddings", str(tmp_path / "train.npz"), "--test-embeddings",
                str(tmp_path / "test.npz"), "--epochs", "5"]) == 0
    assert "linear probe accuracy" in capsys.readouterr().out
    assert run(["probe"]) == 1

    assert run(["finetune", "--checkpoint", ck, "--epochs", "1", *TINY]) == 0
    assert run(["bench", "--checkpoint", ck, "-n", "1"]) == 0
    assert "ms per completion" in capsys.readouterr().out

    assert run(["synth", "--out", str(tmp_path / "s"), *TINY]) == 0
    grid = sorted((tmp_path / "s" / "test").glob("*.voxg"))[0]
    assert run(["render", str(grid), "--out", str(tmp_path / "img" / "g"), "--checkpoint", ck,
                "--noise", "random:0.5"]) == 0
    assert (tmp_path / "img" / "g_montage.ppm").exists() and (tmp_path / "img" / "g.obj").exists()
