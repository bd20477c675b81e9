"""End-to-end CLI smoke runs on a synthetic corpus."""

import json

import pytest

from ifseg.cli import main

from conftest import make_synthetic_corpus


@pytest.fixture()
def corpus_root(tmp_path):
    make_synthetic_corpus(tmp_path, n_per_class=3, classes=(1, 2), h=40, w=48)
    return tmp_path


def test_build_index(corpus_root, tmp_path):
    manifest = tmp_path / "manifest.jsonl"
    main([
        "build-index", "--data-root", str(corpus_root), "--out", str(manifest),
    ])
    lines = manifest.read_text().splitlines()
    assert len(lines) == 6


def test_train_then_evaluate(corpus_root, tmp_path, capsys):
    out = tmp_path / "run"
    main([
        "train", "--data-root", str(corpus_root), "--fold", "3",
        "--epochs", "1", "--batch", "2", "--lr", "0.01", "--seed", "1",
        "--channels", "16", "--patch", "64", "--backbone", "resnet18",
        "--no-augment", "--out", str(out),
    ])
    ckpt = out / "checkpoint_final.pt"
    assert ckpt.exists()

    eval_out = tmp_path / "eval"
    main([
        "evaluate", "--data-root", str(corpus_root), "--checkpoint", str(ckpt),
        "--fold", "0", "--shots", "1", "--queries", "1", "--episodes", "1",
        "--budget", "2", "--seed", "0", "--out", str(eval_out),
    ])
    report = json.loads((eval_out / "report.json").read_text())
    assert report["episodes_per_class"] == {"1": 1, "2": 1}
    assert len(report["interactive_miou_curve"]) == 2


def test_config_file_supplies_flags(corpus_root, tmp_path):
    cfg = tmp_path / "train.json"
    cfg.write_text(json.dumps({
        "epochs": 1, "batch": 2, "lr": 0.01, "channels": 16, "patch": 64,
        "backbone": "resnet18", "no_augment": True, "fold": 3,
    }))
    out = tmp_path / "run"
    main([
        "train", "--data-root", str(corpus_root), "--config", str(cfg),
        "--out", str(out),
    ])
    assert (out / "checkpoint_final.pt").exists()
