"""
Tests for the tvts command line
"""

import json

import numpy as np
import pandas as pd
import pytest
import yaml

from tvts import numerics as nx
from tvts.cli import (
    EXIT_CHECKPOINT,
    EXIT_CONFIG,
    EXIT_GRAD_CHECK,
    EXIT_IO,
    EXIT_OK,
    main,
    nest_encoder_keys,
    parse_assignments,
)
from tvts.evalkit import EmbeddingIndex

TINY_GEN_FLAGS = ["--count", "10", "--duration", "8", "--fps", "2", "--res", "16x16"]

TINY_TRAIN = {
    "num_transcripts": 3, "window_seconds": 2.0, "batch_size": 4, "steps": 2, "warmup_steps": 0,
    "checkpoint_every": 0, "holdout_fraction": 0.5, "progress": False, "eval_batches": 1,
    "hidden_dim": 8, "depth": 1, "text_depth": 1, "heads": 2, "patch": 8, "frames": 4,
    "height": 16, "width": 16, "max_text_len": 6, "common_dim": 4,
}


@pytest.fixture
def config_file(tmp_path):
    path = tmp_path / "tiny.yaml"
    path.write_text(yaml.safe_dump(TINY_TRAIN))
    return path


def manifest_hash(output: str) -> str:
    return next(line.split(": ")[1] for line in output.splitlines() if line.startswith("manifest sha256"))


def write_metrics(path, steps=100):
    with open(path, "w") as f:
        for step in range(steps):
            f.write(json.dumps({"step": step, "L_align": 2.0 / (step + 1), "L_sort": 1.0, "L_total": 4.0,
                                "sort_acc": 0.25 + step / 400, "wallclock_ms": 10.0 + step, "lr": 1e-3,
                                "grad_norm": 1.0, "grad_norm_align": None, "grad_norm_sort": None,
                                "phase": "pretrain"}) + "\n")


@pytest.mark.parametrize("command", [[], ["gen-data"], ["pretrain"], ["eval"], ["grad-check"], ["plot"], ["sweep"], ["ablate"]])
def test_help_exits_cleanly(command, capsys):
    assert main(command + ["--help"]) == EXIT_OK
    assert "usage" in capsys.readouterr().out


def test_gen_data_is_reproducible(tmp_path, capsys):
    assert main(["gen-data", "--out", str(tmp_path / "a"), "--seed", "7"] + TINY_GEN_FLAGS) == EXIT_OK
    first = manifest_hash(capsys.readouterr().out)
    assert main(["gen-data", "--out", str(tmp_path / "b"), "--seed", "7"] + TINY_GEN_FLAGS) == EXIT_OK
    out = capsys.readouterr().out
    assert manifest_hash(out) == first
    assert "# resolved GenConfig" in out


def test_gen_data_needs_out(capsys):
    assert main(["gen-data", "--count", "3"]) == EXIT_CONFIG
    assert "--out" in capsys.readouterr().err


def test_gen_data_rejects_resolution_off_the_patch_grid(tmp_path, capsys):
    assert main(["gen-data", "--out", str(tmp_path / "x"), "--res", "33x32"]) == EXIT_CONFIG
    assert "divisible by patch size" in capsys.readouterr().err
    assert main(["gen-data", "--out", str(tmp_path / "x"), "--res", "32"]) == EXIT_CONFIG


def test_assignments_and_encoder_nesting():
    values = parse_assignments(["steps=3", "mask_ratio=0.5", "progress=false", "proxy=pair"])
    assert values == {"steps": 3, "mask_ratio": 0.5, "progress": False, "proxy": "pair"}
    nested = nest_encoder_keys({"steps": 3, "hidden_dim": 8, "encoder": {"depth": 1}})
    assert nested == {"steps": 3, "encoder": {"depth": 1, "hidden_dim": 8}}


def test_pretrain_zero_steps(corpus_dir, config_file, tmp_path, capsys):
    run = tmp_path / "run"
    code = main(["pretrain", "--config", str(config_file), "--corpus", str(corpus_dir),
                 "--run-dir", str(run), "--steps", "0"])
    assert code == EXIT_OK
    out = capsys.readouterr().out
    assert "# resolved TrainConfig" in out and "steps: 0" in out
    assert (run / "final.tvts").exists()


def test_pretrain_reads_the_config_from_the_environment(corpus_dir, config_file, tmp_path, monkeypatch, capsys):
    monkeypatch.setenv("TVTS_CONFIG", str(config_file))
    code = main(["pretrain", "--corpus", str(corpus_dir), "--run-dir", str(tmp_path / "run"),
                 "--set", "steps=1", "--proxy", "none"])
    assert code == EXIT_OK
    out = capsys.readouterr().out
    assert "proxy: none" in out and "hidden_dim: 8" in out
    assert len((tmp_path / "run" / "metrics.jsonl").read_text().splitlines()) == 1


def test_pretrain_rejects_unknown_keys(corpus_dir, config_file, tmp_path):
    code = main(["pretrain", "--config", str(config_file), "--corpus", str(corpus_dir),
                 "--run-dir", str(tmp_path / "run"), "--set", "learning_rate=0.1"])
    assert code == EXIT_CONFIG


def test_pretrain_on_a_missing_corpus(config_file, tmp_path):
    code = main(["pretrain", "--config", str(config_file), "--corpus", str(tmp_path / "none"),
                 "--run-dir", str(tmp_path / "run")])
    assert code == EXIT_IO


def test_eval_on_a_toy_index(tmp_path, capsys):
    ids = [f"v{i}" for i in range(6)]
    labels = ["a", "a", "b", "b", "c", "c"]
    index = EmbeddingIndex(ids, labels, np.eye(3)[[0, 0, 1, 1, 2, 2]]).save(tmp_path / "toy.npz")
    out = tmp_path / "report.json"
    assert main(["eval", "--index", str(index), "--task", "zeroshot", "--out", str(out)]) == EXIT_OK
    assert json.loads(out.read_text())["zeroshot"]["r_at_1"] == 1.0
    assert "R@1 1.000" in capsys.readouterr().out


def test_eval_probe_reports_the_frozen_encoder(corpus_dir, config_file, tmp_path, capsys):
    run = tmp_path / "run"
    assert main(["pretrain", "--config", str(config_file), "--corpus", str(corpus_dir),
                 "--run-dir", str(run), "--steps", "0"]) == EXIT_OK
    out = tmp_path / "report.json"
    code = main(["eval", "--checkpoint", str(run / "final.tvts"), "--task", "probe", "--task", "sort",
                 "--probe-epochs", "2", "--out", str(out)])
    assert code == EXIT_OK
    assert "encoder hash unchanged" in capsys.readouterr().out
    report = json.loads(out.read_text())
    assert report["probe"] is not None and report["sort_accuracy"] is not None


def test_eval_on_a_bad_checkpoint(tmp_path, capsys):
    bad = tmp_path / "bad.tvts"
    bad.write_bytes(b"garbage")
    assert main(["eval", "--checkpoint", str(bad), "--task", "probe"]) == EXIT_CHECKPOINT
    assert main(["eval", "--checkpoint", str(tmp_path / "missing.tvts")]) == EXIT_CHECKPOINT
    assert "CheckpointError" in capsys.readouterr().err


def test_eval_without_sources_is_a_config_error():
    assert main(["eval", "--task", "probe"]) == EXIT_CONFIG


def test_plot_empty_log(tmp_path):
    log = tmp_path / "metrics.jsonl"
    log.write_text("")
    assert main(["plot", "--metrics", str(log)]) == EXIT_IO
    assert main(["plot", "--metrics", str(tmp_path / "missing.jsonl")]) == EXIT_IO


def test_plot_writes_one_image_per_metric(tmp_path):
    log = tmp_path / "metrics.jsonl"
    write_metrics(log)
    assert main(["plot", "--metrics", str(log), "--out", str(tmp_path / "a")]) == EXIT_OK
    assert main(["plot", "--metrics", str(log), "--out", str(tmp_path / "b")]) == EXIT_OK
    images = sorted(p.name for p in (tmp_path / "a").glob("*.png"))
    assert images == sorted(f"{m}.png" for m in ("L_total", "L_align", "L_sort", "sort_acc", "lr", "grad_norm"))
    for name in images:
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_plot_default_directory(tmp_path):
    log = tmp_path / "run" / "metrics.jsonl"
    log.parent.mkdir()
    write_metrics(log, steps=5)
    assert main(["plot", "--metrics", str(log)]) == EXIT_OK
    assert (tmp_path / "run" / "plots" / "L_total.png").exists()


def test_grad_check_names_the_broken_op(monkeypatch, capsys):
    monkeypatch.setattr(nx, "_gelu_bwd", lambda g, x: 0.5 * g)
    assert main(["grad-check", "--seeds", "1", "--model-seeds", "0"]) == EXIT_GRAD_CHECK
    out = capsys.readouterr().out
    assert "Gradient check failed" in out and "gelu" in out.split("Gradient check failed")[1]


def test_grad_check_passes():
    assert main(["grad-check", "--seeds", "1", "--model-seeds", "1"]) == EXIT_OK


def test_sweep_over_mask_ratio(corpus_dir, config_file, tmp_path, capsys):
    out = tmp_path / "sweep"
    code = main(["sweep", "--config", str(config_file), "--corpus", str(corpus_dir), "--set", "steps=1",
                 "--set", "checkpoint_every=0", "--key", "mask_ratio", "--values", "0.5,0.75", "--out", str(out)])
    assert code == EXIT_OK
    assert (out / "sweep.csv").read_text().count("\n") == 3
    assert (out / "sweep_mask_ratio.png").exists()


def test_ablate_runs_every_arm(corpus_dir, config_file, tmp_path, capsys):
    out = tmp_path / "ablation"
    code = main(["ablate", "--config", str(config_file), "--corpus", str(corpus_dir), "--set", "steps=1",
                 "--arms", "kway,videosort,random", "--seeds", "0", "--out", str(out)])
    assert code == EXIT_OK
    runs = pd.read_csv(out / "ablation.csv")
    assert list(runs["arm"]) == ["kway", "videosort", "random"]
    assert runs["probe_top1"].between(0, 1).all()
    assert runs["sort_accuracy"].isna().tolist() == [False, False, True]
    assert (out / "ablation_summary.csv").exists() and (out / "ablation.png").exists()
    assert "random" in capsys.readouterr().out


@pytest.mark.parametrize("flags", [["--arms", "kway,shuffle"], ["--seeds", "zero"]])
def test_ablate_rejects_bad_lists(corpus_dir, config_file, tmp_path, flags):
    code = main(["ablate", "--config", str(config_file), "--corpus", str(corpus_dir), "--out", str(tmp_path / "a")]
                + flags)
    assert code == EXIT_CONFIG
