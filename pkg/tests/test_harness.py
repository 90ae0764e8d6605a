"""CLI plumbing: config loading, run manifests, and end-to-end subcommand
smoke runs at micro scale."""

import json

import numpy as np
import pytest

from visuolang.harness import (FullConfig, cli, dump_config, load_config,
                               load_manifest, write_manifest, MANIFEST_NAME)
from visuolang.learnplan import InferenceBudget, TrainRunConfig
from visuolang.model import ModelConfig

MICRO_CFG = """
image_size = 8
image_channels = 3
conv_channels = 2,2,2
lstm_sizes = 4,4,4
d_dim = 6
z_dim = 2
joints = 4
head_hidden = 8
epochs = 2
lr = 0.001
iterations = 1
samples_per_iteration = 1
"""

WORLD_FLAGS = ["--image-size", "8", "--grid", "10", "--test-grid", "8",
               "--arm-joints", "4", "--t-base", "4", "--t-jitter", "0",
               "--per-combo-train", "1", "--per-combo-test", "1"]


# -- config loading -------------------------------------------------------------------

def test_empty_config_gives_defaults(tmp_path):
    path = tmp_path / "empty.cfg"
    path.write_text("")
    cfg = load_config(path)
    assert cfg.model == ModelConfig()
    assert cfg.run == TrainRunConfig()
    assert cfg.budget == InferenceBudget()
    assert cfg.run.lr == 5e-4 and cfg.run.clip == 0.2
    assert cfg.model.w == 0.05 and cfg.model.binding_k == 100.0
    assert (cfg.budget.iterations, cfg.budget.samples_per_iteration) == (50, 5)


def test_config_rejects_unknown_key(tmp_path):
    path = tmp_path / "bad.cfg"
    path.write_text("frobnicate = 3\n")
    with pytest.raises(ValueError, match="unknown config key"):
        load_config(path)


def test_config_rejects_invalid_value(tmp_path):
    path = tmp_path / "bad.cfg"
    path.write_text("w = -1\n")
    with pytest.raises(ValueError, match="w"):
        load_config(path)


def test_config_round_trip(tmp_path):
    path = tmp_path / "mix.cfg"
    path.write_text("z_dim = 7\nlr = 0.01\niterations = 9\nseeds = 1,2\n")
    cfg = load_config(path)
    assert cfg.model.z_dim == 7
    assert cfg.run.lr == 0.01 and cfg.run.seeds == (1, 2)
    assert cfg.budget.iterations == 9
    canonical = dump_config(cfg)
    path2 = tmp_path / "canon.cfg"
    path2.write_text(canonical)
    assert dump_config(load_config(path2)) == canonical


# -- manifests ------------------------------------------------------------------------

def test_manifest_round_trip_and_uniqueness(tmp_path):
    out = tmp_path / "run"
    m = write_manifest(out, "train", config_text="a = 1\n", seeds=[0, 5])
    assert (out / MANIFEST_NAME).exists()
    back = load_manifest(out)
    assert back.command == "train"
    assert back.seeds == [0, 5]
    assert back.config_digest == m.config_digest
    with pytest.raises(FileExistsError):
        write_manifest(out, "train")


def test_manifest_digest_tracks_inputs(tmp_path):
    data = tmp_path / "data.bin"
    data.write_bytes(b"payload")
    a = write_manifest(tmp_path / "r1", "eval", dataset_path=data)
    data.write_bytes(b"different payload")
    b = write_manifest(tmp_path / "r2", "eval", dataset_path=data)
    assert a.dataset_digest != b.dataset_digest


# -- CLI ------------------------------------------------------------------------------

def test_cli_usage_errors_exit_1(capsys):
    assert cli(["no-such-command"]) == 1
    assert cli(["train", "--no-such-flag", "x"]) == 1
    assert cli([]) == 1


def test_cli_help_exits_0(capsys):
    assert cli(["--help"]) == 0
    assert "usage" in capsys.readouterr().out


def test_cli_runtime_errors_exit_2(tmp_path, capsys):
    assert cli(["train", "--data", str(tmp_path / "missing"),
                "--out", str(tmp_path / "out")]) == 2
    assert "error:" in capsys.readouterr().err


def test_full_pipeline_micro(tmp_path, capsys):
    cfg = tmp_path / "micro.cfg"
    cfg.write_text(MICRO_CFG)
    data = tmp_path / "data"
    run = tmp_path / "run"

    assert cli(["gen-data", "--group", "D", "--ratio", "3", "--seed", "0",
                "--out", str(data)] + WORLD_FLAGS) == 0
    assert (data / "manifest.tsv").exists()
    assert (data / MANIFEST_NAME).exists()

    assert cli(["train", "--data", str(data), "--config", str(cfg),
                "--seed", "0", "--out", str(run)]) == 0
    assert (run / "model.ckpt").exists()
    assert (run / "trace.tsv").exists()

    episode = next((data / "uc").glob("*.ep"))
    plan_out = tmp_path / "plan"
    assert cli(["plan", "--ckpt", str(run), "--goal", "grasp red .",
                "--episode", str(episode), "--out", str(plan_out),
                "--iterations", "1", "--samples", "1"]) == 0
    out = capsys.readouterr().out
    assert "vp_error" in out
    assert (plan_out / "plan.npz").exists()

    assert cli(["infer-lang", "--ckpt", str(run), "--episode", str(episode),
                "--iterations", "1", "--samples", "1"]) == 0
    words = capsys.readouterr().out.strip().split()
    assert 1 <= len(words) <= 5

    eval_out = tmp_path / "eval"
    assert cli(["eval", "--ckpt", str(run), "--data", str(data),
                "--condition", "D3", "--out", str(eval_out),
                "--iterations", "1", "--samples", "1"]) == 0
    metrics = (eval_out / "metrics.tsv").read_text().splitlines()
    assert metrics[0].split("\t") == ["condition", "seed", "split", "metric",
                                      "value"]
    assert len(metrics) > 1

    kpca_out = tmp_path / "kpca"
    assert cli(["kpca", "--ckpt", str(run), "--out", str(kpca_out)]) == 0
    assert (kpca_out / "kpca.tsv").read_text().startswith("index\tpc1\tpc2")


def test_ttest_command(tmp_path, capsys):
    from visuolang.evalkit import write_dsv
    rows = []
    for cond, base in (("A1", 0.1), ("D1", 0.6)):
        for seed in range(3):
            rows.append({"condition": cond, "seed": seed, "split": "U-C",
                         "metric": "vp_error", "value": base + 0.01 * seed})
    table = tmp_path / "metrics.tsv"
    write_dsv(table, rows)
    assert cli(["ttest", "--table", str(table)]) == 0
    out = capsys.readouterr().out
    assert out.splitlines()[0].startswith("group_1")
    assert "A1\tD1" in out


def test_ablate_command_micro(tmp_path):
    cfg = tmp_path / "micro.cfg"
    cfg.write_text(MICRO_CFG)
    out = tmp_path / "ablate"
    assert cli(["ablate", "--group", "D", "--ratio", "3", "--seed", "0",
                "--config", str(cfg), "--out", str(out),
                "--iterations", "1", "--samples", "1"] + WORLD_FLAGS) == 0
    text = (out / "ablation.tsv").read_text()
    for name in ("full", "no-vwm1", "no-vwm2", "no-attention",
                 "no-vwm-no-attention"):
        assert name in text


def test_train_rejects_mismatched_dataset(tmp_path):
    data = tmp_path / "data"
    assert cli(["gen-data", "--group", "D", "--ratio", "3", "--seed", "0",
                "--out", str(data)] + WORLD_FLAGS) == 0
    cfg = tmp_path / "big.cfg"
    cfg.write_text("image_size = 16\nepochs = 1\n")  # data is 8x8
    assert cli(["train", "--data", str(data), "--config", str(cfg),
                "--out", str(tmp_path / "run")]) == 2
