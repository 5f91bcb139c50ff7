import csv

import numpy as np
import pytest

from dmreg import cli, io
from dmreg.config import desk_config, toy_config
from dmreg.metrics import dice
from dmreg.model import DMRNet


def run(capsys, *argv):
    code = cli.main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


@pytest.fixture
def pair_dir(tmp_path, capsys):
    d = tmp_path / "pair"
    assert run(capsys, "synth", "--seed", 3, "--out-dir", d)[0] == 0
    return d


@pytest.fixture
def zero_ckpt(tmp_path):
    net = DMRNet(desk_config())
    path = tmp_path / "zero.dmrc"
    io.save_checkpoint(path, net.config, net.state_tensors())
    return path


def tiny_config_file(tmp_path, **kw):
    cfg = toy_config().replace(**{"dtype": "float32", "batch_size": 1, "encoder.norm": "instance", **kw})
    path = tmp_path / "tiny.cfg"
    path.write_text("# desk test setup\n" + cfg.to_text(), encoding="utf-8")
    return path


# -- synth ----------------------------------------------------------------------------------

def test_synth_manifest_and_determinism(tmp_path, capsys):
    code, out, _ = run(capsys, "synth", "--seed", 1, "--size", 16, "--max-disp", 2, "--out-dir", tmp_path / "a")
    assert code == 0
    lines = out.strip().splitlines()
    assert [l.split(",")[0] for l in lines] == ["fixed", "moving", "fixed_labels", "moving_labels", "u_gt"]
    run(capsys, "synth", "--seed", 1, "--size", 16, "--max-disp", 2, "--out-dir", tmp_path / "b")
    for role in cli.PAIR_FILES:
        assert (tmp_path / "a" / f"{role}.dmrv").read_bytes() == (tmp_path / "b" / f"{role}.dmrv").read_bytes()
    assert io.read_volume(tmp_path / "a" / "u_gt.dmrv").shape == (3, 16, 16, 16)


def test_synth_zero_displacement(tmp_path, capsys):
    assert run(capsys, "synth", "--max-disp", 0, "--out-dir", tmp_path)[0] == 0
    assert (tmp_path / "moving.dmrv").read_bytes() == (tmp_path / "fixed.dmrv").read_bytes()


@pytest.mark.parametrize("argv", [
    ["synth", "--max-disp", "9", "--out-dir", "x"],
    ["synth", "--size", "8", "--out-dir", "x"],
    ["synth"],
    ["frobnicate"],
    [],
    ["train", "--iterations", "3"],
])
def test_usage_errors(argv, capsys):
    code, _, err = run(capsys, *argv)
    assert code == cli.EXIT_USAGE
    assert "usage error" in err


# -- register / evaluate --------------------------------------------------------------------

def test_register_zero_model(tmp_path, pair_dir, zero_ckpt, capsys):
    out_dir = tmp_path / "reg"
    code, out, _ = run(capsys, "register", "--ckpt", zero_ckpt, "--moving", pair_dir / "moving.dmrv",
                       "--fixed", pair_dir / "fixed.dmrv", "--labels", pair_dir / "moving_labels.dmrv",
                       "--out-dir", out_dir)
    assert code == 0
    assert np.all(io.read_volume(out_dir / "field.dmrv") == 0)
    assert (out_dir / "warped.dmrv").read_bytes() == (pair_dir / "moving.dmrv").read_bytes()
    assert (out_dir / "warped_labels.dmrv").read_bytes() == (pair_dir / "moving_labels.dmrv").read_bytes()
    with open(out_dir / "registration.csv", newline="") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 1 and float(rows[0]["wall_time_s"]) > 0


def _manifest(tmp_path, pair_dirs):
    path = tmp_path / "pairs.csv"
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(cli.MANIFEST_COLUMNS)
        for i, d in enumerate(pair_dirs):
            rel = d.relative_to(tmp_path)
            w.writerow([f"p{i}", rel / "moving.dmrv", rel / "fixed.dmrv", rel / "moving_labels.dmrv",
                        rel / "fixed_labels.dmrv"])
    return path


def test_evaluate_zero_model_is_identity_baseline(tmp_path, zero_ckpt, capsys):
    dirs = []
    for seed in (4, 5):
        d = tmp_path / f"pair{seed}"
        run(capsys, "synth", "--seed", seed, "--out-dir", d)
        dirs.append(d)
    out_csv = tmp_path / "metrics.csv"
    code, out, _ = run(capsys, "evaluate", "--ckpt", zero_ckpt, "--pairs-manifest", _manifest(tmp_path, dirs),
                       "--out", out_csv)
    assert code == 0
    with open(out_csv, newline="") as fh:
        reader = csv.DictReader(fh, strict=True)
        rows = list(reader)
    assert reader.fieldnames == ["pair_id", "mean_dice", "dice_1", "dice_2", "dice_3", "dice_4", "dice_5",
                                 "pct_nonpos_jac", "std_jac", "wall_time_s"]
    for row, d in zip(rows, dirs):
        base = dice(io.read_volume(d / "moving_labels.dmrv"), io.read_volume(d / "fixed_labels.dmrv"))[1]
        assert float(row["mean_dice"]) == pytest.approx(base, abs=1e-6)
        assert float(row["pct_nonpos_jac"]) == 0.0


def test_data_errors(tmp_path, pair_dir, zero_ckpt, capsys):
    junk = tmp_path / "junk.dmrv"
    junk.write_bytes(b"garbage")
    base = ["register", "--ckpt", zero_ckpt, "--fixed", pair_dir / "fixed.dmrv", "--out-dir", tmp_path / "r"]
    assert run(capsys, *base, "--moving", junk)[0] == cli.EXIT_DATA
    assert run(capsys, *base, "--moving", tmp_path / "missing.dmrv")[0] == cli.EXIT_DATA
    bad_manifest = tmp_path / "m.csv"
    bad_manifest.write_text("pair_id,moving\nx,y\n")
    code, _, err = run(capsys, "evaluate", "--ckpt", zero_ckpt, "--pairs-manifest", bad_manifest,
                       "--out", tmp_path / "o.csv")
    assert code == cli.EXIT_DATA and "lacks columns" in err


# -- train -----------------------------------------------------------------------------------

def test_train_from_config_file(tmp_path, capsys):
    data = tmp_path / "data"
    for seed in (0, 1):
        run(capsys, "synth", "--seed", seed, "--size", 16, "--max-disp", 2, "--out-dir", data / f"s{seed}")
    cfg = tiny_config_file(tmp_path, iterations=2)
    code, out, _ = run(capsys, "train", "--config", cfg, "--data-dir", data, "--out-dir", tmp_path / "run")
    assert code == 0
    assert (tmp_path / "run" / "final.dmrc").exists()
    with open(tmp_path / "run" / "train_log.csv", newline="") as fh:
        assert len(list(csv.DictReader(fh))) == 2
    code, _, _ = run(capsys, "train", "--config", cfg, "--data-dir", data, "--out-dir", tmp_path / "run",
                     "--iterations", 3, "--resume", tmp_path / "run" / "final.dmrc")
    assert code == 0


def test_train_divergence_exit_code(tmp_path, capsys):
    data = tmp_path / "flat"
    data.mkdir()
    rng = np.random.default_rng(0)
    for i in range(2):
        v = rng.random((16, 16, 16)).astype(np.float32)
        v[2, 2, 2] = np.nan
        io.write_volume(v, data / f"v{i}.dmrv")
    cfg = tiny_config_file(tmp_path, iterations=2)
    code, _, err = run(capsys, "train", "--config", cfg, "--data-dir", data, "--out-dir", tmp_path / "run")
    assert code == cli.EXIT_NUMERIC and "numerical failure" in err


def test_bad_config_file(tmp_path, capsys):
    path = tmp_path / "bad.cfg"
    path.write_text("deformer.heads=two\n", encoding="utf-8")
    assert run(capsys, "train", "--config", path, "--data-dir", tmp_path, "--out-dir", tmp_path)[0] == cli.EXIT_DATA


# -- gradcheck --------------------------------------------------------------------------------

def _two_level_config(tmp_path):
    cfg = toy_config().replace(**{"encoder.levels": 2, "encoder.channels": (4, 8), "loss.betas": (1.0, 1.0),
                                  "active_scales": (True, True),
                                  "refiner.embed_kernels": ((3, 3, 3), (3, 3, 3))})
    path = tmp_path / "two.cfg"
    path.write_text(cfg.to_text(), encoding="utf-8")
    return path


def test_gradcheck_passes(tmp_path, capsys):
    code, out, _ = run(capsys, "gradcheck", "--config", _two_level_config(tmp_path), "--dtype", "64", "--size", 8)
    assert code == cli.EXIT_OK
    groups = {l.split(",")[0] for l in out.splitlines()}
    assert {"tensor_engine", "warp", "objectives", "deformer"} <= groups
    assert any(g.startswith("model.") for g in groups)
    assert out.strip().splitlines()[-1].endswith(",pass")


def test_gradcheck_failure_exits_nonzero(tmp_path, capsys, monkeypatch):
    monkeypatch.setitem(cli.THRESHOLDS, "float64", 0.0)
    code, out, _ = run(capsys, "gradcheck", "--config", _two_level_config(tmp_path), "--size", 8)
    assert code == cli.EXIT_NUMERIC
    assert out.strip().endswith("FAIL")
