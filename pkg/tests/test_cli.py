"""End-to-end command tests through real subprocesses."""

import subprocess
import sys

import numpy as np
import pytest

from mgsr import data
from mgsr.checkpoint import load_checkpoint, unpack_model
from mgsr.ppm import read_ppm, write_ppm

TRAIN_INI = """
[data]
size = 16

[model]
widths = 4,8
embed_dim = 8
raw_embed_dim = 8
mlp_hidden = 4
time_dim = 8
t_steps = 50

[train]
steps = 4
batch_size = 2
log_every = 1

[eval]
sample_steps = 2
"""


def run_cli(*args, check=True):
    proc = subprocess.run([sys.executable, "-m", "mgsr.cli", *map(str, args)],
                          capture_output=True, text=True)
    if check and proc.returncode != 0:
        raise AssertionError(f"command failed ({proc.returncode}):\n"
                             f"{proc.stdout}\n{proc.stderr}")
    return proc


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    (root / "train.ini").write_text(TRAIN_INI)
    run_cli("gen-data", "--out", root / "corpus", "--count", 3,
            "--seed", 7, "--size", 16)
    run_cli("train", "--config", root / "train.ini", "--data", root / "corpus",
            "--out", root / "run", "--seed", 11)
    return root


def test_gen_data_is_byte_reproducible(workdir):
    run_cli("gen-data", "--out", workdir / "corpus2", "--count", 3,
            "--seed", 7, "--size", 16)
    a = sorted((workdir / "corpus").iterdir())
    b = sorted((workdir / "corpus2").iterdir())
    assert [p.name for p in a] == [p.name for p in b]
    for pa, pb in zip(a, b):
        assert pa.read_bytes() == pb.read_bytes()


def test_gen_data_rejects_nonempty_and_bad_count(workdir):
    proc = run_cli("gen-data", "--out", workdir / "corpus", "--count", 3,
                   check=False)
    assert proc.returncode == 1
    assert "--force" in proc.stderr
    proc = run_cli("gen-data", "--out", workdir / "c0", "--count", 0,
                   check=False)
    assert proc.returncode == 2
    assert "usage" in proc.stderr


def test_train_writes_artifacts_and_logs_config(workdir):
    run = workdir / "run"
    assert (run / "checkpoint.mgsr").exists()
    cfg_text = (run / "config.ini").read_text()
    assert "steps = 4" in cfg_text and "lr = 0.00025" in cfg_text
    lines = (run / "loss.log").read_text().splitlines()
    assert len(lines) == 4
    assert lines[0].startswith("step 0 loss ")


def test_train_is_reproducible_and_resumable(workdir):
    run_cli("train", "--config", workdir / "train.ini", "--data",
            workdir / "corpus", "--out", workdir / "runB", "--seed", 11)
    assert (workdir / "runB" / "loss.log").read_text() == \
        (workdir / "run" / "loss.log").read_text()
    assert (workdir / "runB" / "checkpoint.mgsr").read_bytes() == \
        (workdir / "run" / "checkpoint.mgsr").read_bytes()
    # halfway run + resume lands on the same bytes
    run_cli("train", "--config", workdir / "train.ini", "--data",
            workdir / "corpus", "--out", workdir / "runC", "--seed", 11,
            "--steps", 2)
    run_cli("train", "--config", workdir / "train.ini", "--data",
            workdir / "corpus", "--out", workdir / "runC", "--seed", 11,
            "--resume", workdir / "runC" / "checkpoint.mgsr")
    assert (workdir / "runC" / "checkpoint.mgsr").read_bytes() == \
        (workdir / "run" / "checkpoint.mgsr").read_bytes()
    assert (workdir / "runC" / "loss.log").read_text() == \
        (workdir / "run" / "loss.log").read_text()


def test_train_rejects_unknown_config_key(workdir, tmp_path):
    bad = tmp_path / "bad.ini"
    bad.write_text("[train]\nmomentum = 0.9\n")
    proc = run_cli("train", "--config", bad, "--data", workdir / "corpus",
                   "--out", tmp_path / "r", check=False)
    assert proc.returncode == 1
    assert "unknown key" in proc.stderr


def test_infer_scene_is_reproducible(workdir):
    args = ("infer", "--model", workdir / "run" / "checkpoint.mgsr",
            "--scene", workdir / "corpus" / "scene_0001.msc",
            "--steps", 2, "--seed", 5)
    run_cli(*args, "--out", workdir / "sr_a.ppm")
    run_cli(*args, "--out", workdir / "sr_b.ppm")
    assert (workdir / "sr_a.ppm").read_bytes() == (workdir / "sr_b.ppm").read_bytes()
    img = read_ppm(workdir / "sr_a.ppm")
    assert img.shape == (3, 16, 16)


def test_infer_ppm_input_uses_neutral_guidance(workdir):
    scene = data.make_scene_pair(123, size=16)
    write_ppm(workdir / "lr.ppm", scene.lr)
    run_cli("infer", "--model", workdir / "run" / "checkpoint.mgsr",
            "--lr-image", workdir / "lr.ppm", "--steps", 2, "--seed", 5,
            "--out", workdir / "sr_ppm.ppm")
    assert read_ppm(workdir / "sr_ppm.ppm").shape == (3, 16, 16)
    # wrong input size is a validation failure
    write_ppm(workdir / "big.ppm", np.zeros((3, 16, 16), dtype=np.float32))
    proc = run_cli("infer", "--model", workdir / "run" / "checkpoint.mgsr",
                   "--lr-image", workdir / "big.ppm", "--steps", 2,
                   "--out", workdir / "no.ppm", check=False)
    assert proc.returncode == 1


def test_eval_reports_table_and_csv(workdir):
    proc = run_cli("eval", "--model", workdir / "run" / "checkpoint.mgsr",
                   "--data", workdir / "corpus", "--steps", 2,
                   "--csv", workdir / "eval.csv")
    out = proc.stdout
    assert "psnr_sr" in out and "mean" in out and "delta over bicubic" in out
    rows = (workdir / "eval.csv").read_text().splitlines()
    assert rows[0] == "scene,psnr_sr,psnr_bicubic,ssim_sr,ssim_bicubic"
    assert len(rows) == 4


def test_rank_signals_report(workdir):
    proc = run_cli("rank-signals", "--model", workdir / "run" / "checkpoint.mgsr",
                   "--data", workdir / "corpus", "--steps", 2,
                   "--csv", workdir / "wins.csv")
    assert proc.stdout.splitlines()[0].split() == ["signal", "success",
                                                   "failure", "rank"]
    header = (workdir / "wins.csv").read_text().splitlines()[0]
    assert header == "hed,depth,seg"


def test_probe_blocks_report(workdir):
    proc = run_cli("probe-blocks", "--model", workdir / "run" / "checkpoint.mgsr",
                   "--data", workdir / "corpus", "--steps", 2,
                   "--p1", "red disc", "--p2", "blue box")
    assert "P1+P2" in proc.stdout and "P2+P1" in proc.stdout


def test_gate_report(workdir):
    proc = run_cli("gate-report", "--model", workdir / "run" / "checkpoint.mgsr")
    lines = proc.stdout.splitlines()
    assert lines[0].split() == ["index", "block", "width", "mean_abs_gate"]
    assert len(lines) == 6  # 5 blocks for a 2-level backbone
    assert lines[1].split()[1] == "enc0"


def test_checkpoint_loads_back_into_model(workdir):
    model = unpack_model(load_checkpoint(workdir / "run" / "checkpoint.mgsr"))
    assert model.cfg.size == 16 and model.cfg.widths == (4, 8)
    assert model.opt.t == 4


def test_train_extractor_command(workdir):
    proc = run_cli("train-extractor", "--task", "edge", "--data",
                   workdir / "corpus", "--out", workdir / "edge.mgsr",
                   "--teacher-steps", 5, "--steps", 5, "--width", 8, "--seed", 2)
    assert "edge extractor (full)" in proc.stdout
    assert (workdir / "edge.mgsr").read_bytes()[:4] == b"MGSR"
