import os
from pathlib import Path

import numpy as np
import pytest

from specfield import cli, hsio

FIX = Path(__file__).parent / "fixtures" / "help"

TINY = """bands = 5
endmembers = 2
resolution = 6
n_train = 3
n_test = 2
image_size = 12
n_samples = 16
seed = 5
primitive = sphere center=-0.35,0,0 radius=0.4 material=0
primitive = box center=0.4,0,0 size=0.3,0.3,0.3 material=1 tint=0.3 specular=0.5
"""


def run(capsys, *argv):
    code = cli.main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    (root / "tiny.scene").write_text(TINY)
    assert cli.main(["synth", "--spec", str(root / "tiny.scene"), "--out", str(root / "data")]) == 0
    return root


@pytest.mark.parametrize("name", sorted(p.stem for p in FIX.glob("*.txt")))
def test_help_matches_golden(name, monkeypatch):
    monkeypatch.setenv("COLUMNS", "80")
    parser = cli.build_parser()
    if name != "specfield":
        sub = next(a for a in parser._actions if a.__class__.__name__ == "_SubParsersAction")
        parser = sub.choices[name]
    text = parser.format_help()
    assert text == (FIX / f"{name}.txt").read_text()
    for action in parser._actions:
        for flag in action.option_strings:
            assert flag in text


def test_help_goldens_cover_every_subcommand():
    parser = cli.build_parser()
    sub = next(a for a in parser._actions if a.__class__.__name__ == "_SubParsersAction")
    assert {p.stem for p in FIX.glob("*.txt")} == set(sub.choices) | {"specfield"}


def test_exit_codes(capsys, tmp_path):
    assert run(capsys, "--help")[0] == 0
    assert run(capsys, "train", "--bogus")[0] == 2
    assert run(capsys)[0] == 2
    (tmp_path / "k0.scene").write_text(TINY.replace("endmembers = 2", "endmembers = 0"))
    code, _, err = run(capsys, "synth", "--spec", tmp_path / "k0.scene", "--out", tmp_path / "o")
    assert code == 2 and "endmembers" in err
    code, _, err = run(capsys, "render", "--ckpt", tmp_path / "missing.umf", "--poses", tmp_path / "p.txt",
                       "--out", tmp_path / "r")
    assert code == 4 and "missing.umf" in err
    code, _, err = run(capsys, "synth", "--spec", "no-such-scene", "--out", tmp_path / "o")
    assert code == 2 and "no-such-scene" in err


def test_gradcheck_command(capsys):
    code, out, _ = run(capsys, "gradcheck", "--n-params", 20)
    assert code == 0
    assert "# resolved configuration" in out and "max rel err" in out
    code, _, err = run(capsys, "gradcheck", "--n-params", 20, "--tolerance", 1e-12)
    assert code == 3 and "exceeds tolerance" in err


def test_synth_same_seed_identical_manifests(tmp_path, dataset):
    assert cli.main(["synth", "--spec", str(dataset / "tiny.scene"), "--out", str(tmp_path / "b")]) == 0
    a = (dataset / "data" / "manifest.txt").read_bytes()
    assert a == (tmp_path / "b" / "manifest.txt").read_bytes()
    assert cli.main(["synth", "--spec", str(dataset / "tiny.scene"), "--out", str(tmp_path / "c"),
                     "--seed", "99"]) == 0
    assert a != (tmp_path / "c" / "manifest.txt").read_bytes()


def test_pipeline_end_to_end(capsys, tmp_path, dataset):
    data = dataset / "data"
    ck = tmp_path / "f.umf"
    code, out, _ = run(capsys, "train", "--data", data, "--out", ck, "--iterations", 4, "--set", "resolution=6",
                       "--rays-per-batch", 64, "--n-samples", 16, "--set", "log_every=0", "--save-adam",
                       "--threads", 1)
    assert code == 0, out
    assert "resolution = 6" in out and "iterations = 4" in out
    hist = (tmp_path / "f.umf.loss.txt").read_text().splitlines()
    assert [int(line.split()[0]) for line in hist] == [0, 1, 2, 3]
    assert Path(str(ck) + ".adam.npz").exists()

    # resume picks up at the saved iteration
    code, _, _ = run(capsys, "train", "--data", data, "--out", tmp_path / "g.umf", "--iterations", 6,
                     "--set", "resolution=6", "--rays-per-batch", 64, "--n-samples", 16, "--set", "log_every=0",
                     "--resume", ck, "--threads", 1)
    assert code == 0
    assert (tmp_path / "g.umf.loss.txt").read_text().split()[0] == "4"

    code, out, _ = run(capsys, "init-endmembers", "--data", data, "--k", 2, "--out", tmp_path / "E.txt")
    assert code == 0 and hsio.read_matrix(tmp_path / "E.txt").shape == (5, 2)

    # rendering the ground-truth field reproduces the test views exactly
    poses = data / "poses_test.txt"
    code, _, _ = run(capsys, "render", "--ckpt", data / "gt_field.umf", "--poses", poses, "--out",
                     tmp_path / "r", "--n-samples", 16)
    assert code == 0
    for stem in ("000", "001"):
        for suffix in (".hsc", ".ppm", "_opacity.pgm", "_abundance0.pgm", "_abundance1.pgm"):
            assert (tmp_path / "r" / f"{stem}{suffix}").exists()
    code, out, _ = run(capsys, "eval", "--pred", tmp_path / "r", "--gt", data / "test", "--out", tmp_path / "ev")
    assert code == 0
    assert '"psnr": 99' in (tmp_path / "ev" / "report.json").read_text()
    assert (tmp_path / "ev" / "000_mrae.pgm").exists()

    code, out, _ = run(capsys, "segment", "--ckpt", data / "gt_field.umf", "--poses", poses, "--out",
                       tmp_path / "s", "--n-samples", 16, "--gt-dir", data / "test", "--use-abundance")
    assert code == 0 and "miou = " in out
    assert hsio.read_labels(tmp_path / "s" / "000.seg").shape == (12, 12)

    # editing with the endmember's own spectrum leaves renders byte-identical
    E = hsio.read_field(data / "gt_field.umf").endmembers
    (tmp_path / "e0.txt").write_text(" ".join(repr(float(v)) for v in E[:, 0]) + "\n")
    code, _, _ = run(capsys, "edit", "--ckpt", data / "gt_field.umf", "--k", 0, "--spectrum",
                     tmp_path / "e0.txt", "--out", tmp_path / "same.umf")
    assert code == 0
    run(capsys, "render", "--ckpt", tmp_path / "same.umf", "--poses", poses, "--out", tmp_path / "r2",
        "--n-samples", 16)
    assert (tmp_path / "r" / "000.hsc").read_bytes() == (tmp_path / "r2" / "000.hsc").read_bytes()
    code, _, err = run(capsys, "edit", "--ckpt", data / "gt_field.umf", "--k", 7, "--spectrum",
                       tmp_path / "e0.txt", "--out", tmp_path / "bad.umf")
    assert code == 2 and "7" in err


def test_train_divergence_exits_3(capsys, tmp_path, dataset):
    code, _, err = run(capsys, "train", "--data", dataset / "data", "--out", tmp_path / "x.umf",
                       "--iterations", 3, "--set", "resolution=6", "--lr", 1e308, "--set", "lr_final=1e308",
                       "--set", "log_every=0", "--threads", 1)
    assert code == 3 and "at iteration " in err
    assert not (tmp_path / "x.umf").exists()


def test_threads_env_fallback(monkeypatch):
    monkeypatch.setenv("SPECFIELD_THREADS", "3")
    assert cli.default_threads() == 3
    monkeypatch.delenv("SPECFIELD_THREADS")
    assert cli.default_threads() == (os.cpu_count() or 1)
