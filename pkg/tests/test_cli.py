import csv
import json
import subprocess
import sys

import pytest

from ivt.cli import main

CFG = """
data:
  corpus_dir: {corpus}
train:
  total_steps: 8
  batch_size: 8
  checkpoint_every: 4
model:
  depth: 1
  width: 16
  heads: 2
output_dir: {out}
"""


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("corpus") / "c"
    assert main(["generate-corpus", "--ids", "12", "--seed", "7", "--out", str(root)]) == 0
    return root


@pytest.fixture(scope="module")
def trained(corpus, tmp_path_factory):
    tmp = tmp_path_factory.mktemp("run")
    cfg = tmp / "cfg.yaml"
    cfg.write_text(CFG.format(corpus=corpus, out=tmp / "run"))
    assert main(["train", "--config", str(cfg)]) == 0
    return tmp, cfg


def test_generate_corpus_summary_and_idempotence(corpus, tmp_path, capsys):
    assert main(["generate-corpus", "--ids", "12", "--seed", "7", "--out", str(tmp_path / "again")]) == 0
    line = capsys.readouterr().out.strip()
    assert "train" in line and "test" in line and "ids" in line
    for f in sorted(corpus.rglob("*")):
        if f.is_file():
            assert f.read_bytes() == (tmp_path / "again" / f.relative_to(corpus)).read_bytes(), f


def test_generate_corpus_rejects_two_ids(tmp_path, capsys):
    assert main(["generate-corpus", "--ids", "2", "--out", str(tmp_path / "x")]) == 2
    assert "n_identities ≥ 4" in capsys.readouterr().err


def test_bad_arguments_exit_2(capsys):
    assert main(["train", "--stop-at", "soon"]) == 2
    assert main(["no-such-command"]) == 2


def test_train_writes_provenance(trained):
    tmp, _ = trained
    run = tmp / "run"
    for name in ["config.resolved.yaml", "VERSION", "final.ckpt", "metrics.jsonl", "vocab.txt", "step_000004.ckpt"]:
        assert (run / name).exists(), name
    assert (run / "VERSION").read_text().startswith("ivt ")
    assert len((run / "metrics.jsonl").read_text().splitlines()) == 8


def test_train_missing_key_exit_2(tmp_path, capsys):
    cfg = tmp_path / "c.yaml"
    cfg.write_text("train:\n  total_steps: 3\n")
    assert main(["train", "--config", str(cfg)]) == 2
    assert "output_dir" in capsys.readouterr().err
    assert main(["train", "--config", str(cfg), "--set", "output_dir=o", "--set", "train.totl_steps=3"]) == 2
    assert "train.totl_steps" in capsys.readouterr().err


def test_train_non_finite_exit_3(corpus, tmp_path, capsys):
    code = main(["train", "--set", f"data.corpus_dir={corpus}", "--set", f"output_dir={tmp_path / 'r'}",
                 "--set", "train.base_lr=1e30", "--set", "train.warmup_steps=0", "--set", "train.grad_clip=0",
                 "--set", "train.total_steps=20", "--set", "model.depth=1"])
    assert code == 3
    assert (tmp_path / "r" / "abort.json").exists()


def test_resume_matches_uninterrupted(trained, corpus, tmp_path):
    tmp, cfg = trained
    out = tmp_path / "r2"
    assert main(["train", "--config", str(cfg), "--set", f"output_dir={out}", "--stop-at", "4"]) == 0
    assert main(["train", "--config", str(cfg), "--set", f"output_dir={out}", "--resume", str(out / "step_000004.ckpt")]) == 0
    assert (out / "final.ckpt").read_bytes() == (tmp / "run" / "final.ckpt").read_bytes()


def test_evaluate_outputs(trained, corpus, tmp_path):
    tmp, _ = trained
    args = ["evaluate", "--checkpoint", str(tmp / "run" / "final.ckpt"), "--corpus", str(corpus)]
    assert main(args + ["--out", str(tmp_path / "a")]) == 0
    assert main(args + ["--out", str(tmp_path / "b")]) == 0
    metrics = json.loads((tmp_path / "a" / "metrics.json").read_text())
    assert set(metrics) == {"R1", "R5", "R10", "mAP", "Q", "G", "config_hash"}
    assert (tmp_path / "a" / "metrics.json").read_bytes() == (tmp_path / "b" / "metrics.json").read_bytes()
    assert (tmp_path / "a" / "report.html").exists() and (tmp_path / "a" / "report.json").exists()


def test_evaluate_oracle_is_perfect(corpus, tmp_path):
    assert main(["evaluate", "--oracle", "--corpus", str(corpus), "--out", str(tmp_path)]) == 0
    assert json.loads((tmp_path / "metrics.json").read_text())["R1"] == 1.0


def test_evaluate_needs_checkpoint(corpus, tmp_path):
    assert main(["evaluate", "--corpus", str(corpus), "--out", str(tmp_path)]) == 2


def test_heatmap_command(trained, corpus, tmp_path):
    tmp, _ = trained
    assert main(["heatmap", "--checkpoint", str(tmp / "run" / "final.ckpt"), "--corpus", str(corpus), "--out", str(tmp_path), "--limit", "3"]) == 0
    grids = json.loads((tmp_path / "heatmap.json").read_text())
    assert len(grids) == 3 and len(list(tmp_path.glob("*.png"))) == 3


def test_ablate_mask_ratio(trained, tmp_path):
    _, cfg = trained
    assert main(["ablate-mask-ratio", "--config", str(cfg), "--ratios", "0.3", "0.0", "--out", str(tmp_path)]) == 0
    rows = list(csv.DictReader(open(tmp_path / "ablation.csv")))
    assert [float(r["ratio"]) for r in rows] == [0.0, 0.3]
    assert set(rows[0]) == {"ratio", "R1", "mAP"}
    assert (tmp_path / "ablation.png").exists()
    assert main(["ablate-mask-ratio", "--config", str(cfg), "--ratios", "1.0", "--out", str(tmp_path / "x")]) == 2


def test_timing(trained, capsys):
    tmp, _ = trained
    ckpt = str(tmp / "run" / "final.ckpt")
    assert main(["timing", "--checkpoint", ckpt, "--gallery-size", "0"]) == 2
    assert main(["timing", "--checkpoint", ckpt, "--gallery-size", "16", "--queries", "4"]) == 0
    report = json.loads(capsys.readouterr().out)
    assert {"encode_gallery_s", "encode_queries_s", "similarity_rank_s"} <= set(report)


def test_gallery_encoding_time_scales_linearly(trained):
    from ivt.pipeline import time_retrieval

    tmp, _ = trained
    ckpt = tmp / "run" / "final.ckpt"
    time_retrieval(ckpt, 256, 4)  # warm up
    small = time_retrieval(ckpt, 1024, 4, repeats=5)["encode_gallery_s"]
    large = time_retrieval(ckpt, 2048, 4, repeats=5)["encode_gallery_s"]
    assert 1.0 <= large / small <= 3.0


def test_console_script_entry_point():
    out = subprocess.run([sys.executable, "-m", "ivt.cli", "--help"], capture_output=True, text=True)
    assert out.returncode == 0 and "generate-corpus" in out.stdout
