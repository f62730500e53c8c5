import json
from pathlib import Path

import pytest

from shortcutdiff.cli import main
from shortcutdiff.checkpoint import load_checkpoint
from shortcutdiff.config import (ConfigError, load_config, parse_config_text,
                                 resolve_section, resolved_text)
from shortcutdiff.reporting import csv_without_timing, hash_artifact

TINY_TRAIN = """
[train]
dataset = gaussian-mixture-ring
dataset_seed = 1
modes = 4
radius = 0.8
noise = 0.1
n_steps = 6
hidden = 6
steps = 30
batch = 8
lr = 0.002
seed = 7
checkpoint = tiny.ckpt
"""


def write_cfg(tmp_path, text, name="exp.cfg"):
    p = tmp_path / name
    p.write_text(text, encoding="utf-8")
    return p


@pytest.fixture(scope="module")
def tiny_ckpt(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("tinymodel")
    cfg = write_cfg(tmp, TINY_TRAIN)
    assert main(["train", "--config", str(cfg), "--out", str(tmp / "out"),
                 "--quiet"]) == 0
    return tmp / "out" / "tiny.ckpt"


# ------------------------------------------------------------------ config

def test_parse_sections_and_comments():
    text = "# comment\n[train]\nsteps = 5  # trailing\n\n[bench]\ndraws = 2\n"
    sections = parse_config_text(text)
    assert sections == {"train": {"steps": "5"}, "bench": {"draws": "2"}}


def test_unknown_key_rejected_by_name():
    with pytest.raises(ConfigError, match="optimizer_momentum"):
        resolve_section("train", {"dataset": "two-moons",
                                  "optimizer_momentum": "0.9"})


def test_missing_required_key_named():
    with pytest.raises(ConfigError, match="dataset"):
        resolve_section("train", {"steps": "5"})
    with pytest.raises(ConfigError, match="checkpoint"):
        resolve_section("bench", {})


def test_duplicate_key_rejected():
    with pytest.raises(ConfigError, match="duplicate key"):
        parse_config_text("[train]\nsteps = 1\nsteps = 2\n")


def test_resolved_text_reparses_identically(tmp_path):
    cfg = resolve_section("train", {"dataset": "two-moons", "steps": "12"})
    text = resolved_text("train", cfg)
    again = resolve_section("train", parse_config_text(text)["train"])
    assert again == cfg


def test_load_config_missing_section(tmp_path):
    p = write_cfg(tmp_path, "[train]\ndataset = two-moons\n")
    with pytest.raises(ConfigError, match="no \\[bench\\] section"):
        load_config(p, "bench")


# --------------------------------------------------------------------- cli

def test_train_is_deterministic(tmp_path):
    cfg = write_cfg(tmp_path, TINY_TRAIN)
    out1, out2 = tmp_path / "a", tmp_path / "b"
    assert main(["train", "--config", str(cfg), "--out", str(out1), "--quiet"]) == 0
    assert main(["train", "--config", str(cfg), "--out", str(out2), "--quiet"]) == 0
    assert (out1 / "tiny.ckpt").read_bytes() == (out2 / "tiny.ckpt").read_bytes()
    assert (out1 / "loss.csv").read_bytes() == (out2 / "loss.csv").read_bytes()


def test_train_loss_csv_ends_with_final_loss(tmp_path):
    cfg = write_cfg(tmp_path, TINY_TRAIN)
    out = tmp_path / "out"
    assert main(["train", "--config", str(cfg), "--out", str(out), "--quiet"]) == 0
    lines = (out / "loss.csv").read_text().strip().splitlines()
    assert lines[0] == "step,loss"
    assert len(lines) == 31
    assert lines[-1].startswith("29,")


def test_train_seed_flag_overrides(tmp_path):
    cfg = write_cfg(tmp_path, TINY_TRAIN)
    out1, out2 = tmp_path / "a", tmp_path / "b"
    assert main(["train", "--config", str(cfg), "--out", str(out1),
                 "--seed", "7", "--quiet"]) == 0
    assert main(["train", "--config", str(cfg), "--out", str(out2),
                 "--seed", "8", "--quiet"]) == 0
    assert (out1 / "tiny.ckpt").read_bytes() != (out2 / "tiny.ckpt").read_bytes()


def test_unknown_config_key_exit_code(tmp_path):
    cfg = write_cfg(tmp_path, "[train]\ndataset = two-moons\nwidth = 3\n")
    assert main(["train", "--config", str(cfg), "--out",
                 str(tmp_path / "o"), "--quiet"]) == 2


def test_missing_dataset_key_exit_code(tmp_path):
    cfg = write_cfg(tmp_path, "[train]\nsteps = 5\n")
    assert main(["train", "--config", str(cfg), "--out",
                 str(tmp_path / "o"), "--quiet"]) == 2


def test_verify_builtin_passes(tmp_path):
    cfg = write_cfg(tmp_path, "[verify]\n")
    out = tmp_path / "out"
    assert main(["verify", "--config", str(cfg), "--out", str(out),
                 "--quiet"]) == 0
    report = (out / "verify_report.csv").read_text().splitlines()
    assert report[0] == "check,value,threshold,status"
    assert all(",FAIL" not in line for line in report)


def test_verify_checkpoint_and_corruption(tmp_path, tiny_ckpt):
    cfg = write_cfg(tmp_path, f"[verify]\ncheckpoint = {tiny_ckpt}\nn_steps = 6\n")
    out = tmp_path / "ok"
    assert main(["verify", "--config", str(cfg), "--out", str(out),
                 "--quiet"]) == 0
    text = (out / "verify_report.csv").read_text()
    assert "fixed-point-checkpoint" in text

    broken = tmp_path / "broken.ckpt"
    raw = bytearray(Path(tiny_ckpt).read_bytes())
    raw[2] ^= 0x55
    broken.write_bytes(bytes(raw))
    cfg2 = write_cfg(tmp_path, f"[verify]\ncheckpoint = {broken}\n", "b.cfg")
    assert main(["verify", "--config", str(cfg2), "--out",
                 str(tmp_path / "bad"), "--quiet"]) == 2


def test_bench_outputs_and_determinism(tmp_path, tiny_ckpt):
    cfg = write_cfg(tmp_path, f"""
[bench]
checkpoint = {tiny_ckpt}
n_list = 3,6
estimators = bptt,sdo
draws = 2
reps = 1
""")
    out1, out2 = tmp_path / "b1", tmp_path / "b2"
    for out in (out1, out2):
        assert main(["bench", "--config", str(cfg), "--out", str(out),
                     "--quiet"]) == 0
    text = (out1 / "bench.csv").read_text()
    assert text.splitlines()[0] == "N,estimator,grad_l2,tape_nodes,wall_time_s,finite,seed"
    assert len(text.strip().splitlines()) == 1 + 2 * 2 * 2
    assert hash_artifact(out1 / "bench.csv") == hash_artifact(out2 / "bench.csv")
    assert (out1 / "bench_norms.svg").exists()
    assert (out1 / "bench_nodes.svg").exists()
    assert (out1 / "bench_norms.svg").read_bytes() == (out2 / "bench_norms.svg").read_bytes()


def test_optimize_zero_steps_and_determinism(tmp_path, tiny_ckpt):
    cfg = write_cfg(tmp_path, f"""
[optimize]
checkpoint = {tiny_ckpt}
objective = quadratic-target
target = 0.3,0.3
steps = 0
""")
    out = tmp_path / "o1"
    assert main(["optimize", "--config", str(cfg), "--out", str(out),
                 "--quiet"]) == 0
    summary = (out / "summary.csv").read_text().strip().splitlines()
    initial, final, best = summary[1].split(",")
    assert initial == final == best
    runlog = (out / "runlog.csv").read_text().strip().splitlines()
    assert len(runlog) == 1  # header only: no steps taken

    cfg2 = write_cfg(tmp_path, f"""
[optimize]
checkpoint = {tiny_ckpt}
objective = quadratic-target
target = 0.3,0.3
steps = 5
lr = 0.1
""", "o2.cfg")
    outs = []
    for name in ("o2a", "o2b"):
        out = tmp_path / name
        assert main(["optimize", "--config", str(cfg2), "--out", str(out),
                     "--quiet"]) == 0
        outs.append(out)
    assert hash_artifact(outs[0] / "runlog.csv") == hash_artifact(outs[1] / "runlog.csv")
    assert (outs[0] / "trajectory.csv").read_bytes() == (outs[1] / "trajectory.csv").read_bytes()


def test_finetune_outputs_and_determinism(tmp_path, tiny_ckpt):
    cfg = write_cfg(tmp_path, f"""
[finetune]
checkpoint = {tiny_ckpt}
objective = rbf-reward
center = 0.5,0.0
width = 0.6
estimator = sdo
batch = 2
steps = 3
lr = 0.001
eval_every = 3
eval_batch = 4
""")
    outs = []
    for name in ("f1", "f2"):
        out = tmp_path / name
        assert main(["finetune", "--config", str(cfg), "--out", str(out),
                     "--quiet"]) == 0
        outs.append(out)
    assert (outs[0] / "finetuned.ckpt").read_bytes() == (outs[1] / "finetuned.ckpt").read_bytes()
    assert hash_artifact(outs[0] / "heldout.csv") == hash_artifact(outs[1] / "heldout.csv")
    heldout = (outs[0] / "heldout.csv").read_text().strip().splitlines()
    assert heldout[0] == "step,mean_objective"
    assert heldout[1].startswith("0,")
    denoiser, _ = load_checkpoint(outs[0] / "finetuned.ckpt")
    assert denoiser.hidden == (6,)


def test_manifest_written_with_hashes(tmp_path, tiny_ckpt):
    cfg = write_cfg(tmp_path, "[verify]\n")
    out = tmp_path / "out"
    assert main(["verify", "--config", str(cfg), "--out", str(out),
                 "--quiet"]) == 0
    lines = (out / "manifest.jsonl").read_text().strip().splitlines()
    entry = json.loads(lines[-1])
    assert entry["subcommand"] == "verify"
    assert "verify_report.csv" in entry["artifacts"]
    assert len(entry["config_hash"]) == 64


def test_resolved_config_written_and_reusable(tmp_path, tiny_ckpt):
    cfg = write_cfg(tmp_path, f"""
[optimize]
checkpoint = {tiny_ckpt}
steps = 2
""")
    out1 = tmp_path / "r1"
    assert main(["optimize", "--config", str(cfg), "--out", str(out1),
                 "--quiet"]) == 0
    resolved = out1 / "optimize_resolved.cfg"
    assert resolved.exists()
    out2 = tmp_path / "r2"
    assert main(["optimize", "--config", str(resolved), "--out", str(out2),
                 "--quiet"]) == 0
    assert hash_artifact(out1 / "runlog.csv") == hash_artifact(out2 / "runlog.csv")


def test_csv_without_timing_zeroes_columns():
    text = "step,loss_or_reward,grad_l2,estimator,elapsed_s\n1,0.5,0.1,sdo,0.123\n"
    cleaned = csv_without_timing(text)
    assert cleaned.splitlines()[1] == "1,0.5,0.1,sdo,0"
