import json

import pytest

from cfmn.cli import main
from cfmn.episodes import load_dataset


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = {
        "model": {"filters": 8, "dtype": "float64"},
        "train": {"way": 3, "shot": 1, "queries": 3, "val_every": 5, "val_episodes": 4,
                  "plateau_window": 10, "stop_window": 20},
    }
    (root / "cfg.json").write_text(json.dumps(cfg))
    assert main(["gen-glyphs", "--classes", "12", "--per-class", "20", "--val", "3", "--test", "3",
                 "--out", str(root / "glyphs")]) == 0
    assert main(["train", "--config", str(root / "cfg.json"), "--data", str(root / "glyphs"),
                 "--episodes", "10", "--out", str(root / "run")]) == 0
    return root


def test_train_writes_artifacts(workspace):
    run = workspace / "run"
    for name in ("best.ckpt", "last.ckpt", "train_log.jsonl", "model_config.json"):
        assert (run / name).exists()
    log = [json.loads(l) for l in (run / "train_log.jsonl").read_text().splitlines()]
    assert [r["episode"] for r in log] == list(range(1, 11))
    assert set(log[0]) == {"episode", "loss", "train_acc", "val_acc", "lr", "event"}


def test_eval_report(workspace):
    args = ["eval", "--ckpt", str(workspace / "run" / "best.ckpt"), "--data", str(workspace / "glyphs"),
            "--way", "3", "--shot", "1", "--queries", "2", "--episodes", "6", "--reps", "2",
            "--out", str(workspace / "ev")]
    assert main(args) == 0
    rep = json.loads((workspace / "ev" / "report.json").read_text())
    assert rep["classifications_per_rep"] == [36, 36]
    assert rep["protocol"]["split"] == "test"
    assert {"ci95", "ci95_pooled", "mean", "per_rep"} <= set(rep)
    assert main(args[:-2] + ["--workers", "3", "--out", str(workspace / "ev3")]) == 0
    assert json.loads((workspace / "ev3" / "report.json").read_text()) == rep


def test_eval_multilabel_runs(workspace):
    assert main(["eval-multilabel", "--ckpt", str(workspace / "run" / "best.ckpt"),
                 "--data", str(workspace / "glyphs"), "--way", "3", "--shot", "1", "--queries", "2",
                 "--episodes", "3", "--reps", "1", "--threshold", "0.4", "--out", str(workspace / "ml")]) == 0
    rep = json.loads((workspace / "ml" / "report.json").read_text())
    assert 0 <= rep["precision"] <= 1 and 0 <= rep["f1"] <= 1


def test_viz_attention(workspace):
    g = workspace / "glyphs" / "g0000"
    out = workspace / "viz"
    assert main(["viz-attention", "--ckpt", str(workspace / "run" / "best.ckpt"), "--query", str(g / "0000.pgm"),
                 "--support", str(g / "0001.pgm"), "--pos", "1,2", "--k", "3", "--out", str(out)]) == 0
    rec = json.loads((out / "attention.json").read_text())
    assert len(rec["topk"]) == 3 and len(rec["marks"]) == 4
    assert (out / "query_overlay.ppm").exists() and (out / "support_overlay.ppm").exists()
    assert main(["viz-attention", "--ckpt", str(workspace / "run" / "best.ckpt"), "--query", str(g / "0000.pgm"),
                 "--support", str(g / "0001.pgm"), "--pos", "9,9"]) == 2
    assert main(["viz-attention", "--ckpt", str(workspace / "run" / "best.ckpt"), "--query", str(g / "0000.pgm"),
                 "--support", str(g / "0001.pgm"), "--pos", "x"]) == 1


def test_gen_variations_count(tmp_path):
    assert main(["gen-glyphs", "--classes", "10", "--per-class", "20", "--out", str(tmp_path / "g")]) == 0
    assert main(["gen-variations", "--data", str(tmp_path / "g"), "--kind", "all", "--copies", "10",
                 "--out", str(tmp_path / "v")]) == 0
    v = load_dataset(tmp_path / "v")
    assert len(v) == 2000 and v.image(0).shape == (1, 56, 56)


def test_grad_check_command(capsys):
    assert main(["grad-check", "--seed", "7"]) == 0
    out = capsys.readouterr().out
    assert "matching_block" in out and "FAIL" not in out


def test_exit_codes(tmp_path, capsys):
    assert main(["grad-check", "--frobnicate"]) == 1
    assert "usage" in capsys.readouterr().err
    assert main([]) == 1
    assert main(["eval", "--ckpt", str(tmp_path / "x.ckpt"), "--data", str(tmp_path)]) == 2
    (tmp_path / "bad.json").write_text("{not json")
    assert main(["train", "--config", str(tmp_path / "bad.json"), "--data", str(tmp_path)]) == 2
    assert main(["gen-glyphs", "--classes", "1", "--out", str(tmp_path / "g")]) == 2
