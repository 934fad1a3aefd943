import csv
import json

import numpy as np
import pytest

from tggat import trainer
from tggat.checkpoint import load_checkpoint
from tggat.cli import main


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    out = tmp_path_factory.mktemp("data") / "d"
    assert main(["gen", "--worlds", "2", "--episodes", "12", "--seed", "3", "--out", str(out)]) == 0
    return out


@pytest.fixture
def small_cfg(tmp_path):
    path = tmp_path / "small.cfg"
    path.write_text("d_model = 16\nn_heads = 2\nn_text_layers = 1\nffn_mult = 2\nbatch_size = 2\n"
                    "max_iterations = 2\neval_interval = 2\neval_episodes = 2\n")
    return path


def test_gen_with_paraphrases(tmp_path):
    out = tmp_path / "p"
    assert main(["gen", "--worlds", "2", "--episodes", "10", "--seed", "1", "--out", str(out), "--paraphrase"]) == 0
    lines = (out / "episodes.jsonl").read_text().splitlines()
    assert len(lines) == 60
    meta = json.loads((out / "dataset.json").read_text())
    assert meta["paraphrase"] and meta["records"] == 60
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["command"] == "gen" and str(out / "episodes.jsonl") in manifest["hashes"]


def test_gen_is_reproducible(tmp_path):
    for name in ("a", "b"):
        assert main(["gen", "--worlds", "2", "--episodes", "5", "--seed", "8", "--out", str(tmp_path / name)]) == 0
    for rel in ["episodes.jsonl", "dataset.json"] + [f"worlds/{p.name}" for p in (tmp_path / "a" / "worlds").iterdir()]:
        assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes()


@pytest.mark.parametrize("argv", [["gen", "--worlds", "0", "--episodes", "3", "--out", "x"],
                                  ["gen", "--worlds", "1", "--episodes", "-2", "--out", "x"],
                                  ["gen", "--episodes", "3", "--out", "x"],
                                  ["frobnicate"], []])
def test_usage_errors(argv, tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    assert main(argv) == 64


def test_oracle_and_random_eval(dataset, tmp_path):
    out = tmp_path / "oracle.json"
    assert main(["eval", "--data", str(dataset), "--out", str(out), "--oracle"]) == 0
    rec = json.loads(out.read_text())
    assert rec["sr"] == 100.0 and rec["spl"] == 100.0
    assert (tmp_path / "oracle.json.manifest.json").is_file()
    r1, r2 = tmp_path / "r1.json", tmp_path / "r2.json"
    for p in (r1, r2):
        assert main(["eval", "--data", str(dataset), "--out", str(p), "--random", "--seed", "4"]) == 0
    assert json.loads(r1.read_text()) == json.loads(r2.read_text())


def test_eval_without_checkpoint_is_usage_error(dataset, tmp_path):
    assert main(["eval", "--data", str(dataset), "--out", str(tmp_path / "e.json")]) == 64
    assert main(["eval", "--data", str(dataset), "--out", str(tmp_path / "e.json"), "--oracle", "--random"]) == 64


def test_eval_missing_data(tmp_path):
    assert main(["eval", "--data", str(tmp_path / "none"), "--out", str(tmp_path / "e.json"), "--oracle"]) == 2


def test_train_resume_eval_report(dataset, small_cfg, tmp_path, capsys):
    run = tmp_path / "run"
    assert main(["train", "--config", str(small_cfg), "--data", str(dataset), "--out", str(run)]) == 0
    last, best = load_checkpoint(run / "last.ckpt"), load_checkpoint(run / "best.ckpt")
    # loss weights were not set in the file, so the defaults apply
    assert last.config.weights.kappas == (1.0, 3.0, 1.5) and last.config.weights.lambdas == (0.2, 0.1, 0.25)
    assert last.iteration == 2 and best.iteration == 2
    assert main(["train", "--config", str(small_cfg), "--data", str(dataset), "--out", str(run),
                 "--resume", str(run / "last.ckpt"), "--iterations", "1"]) == 0
    assert load_checkpoint(run / "last.ckpt").iteration == 3
    records = [json.loads(line) for line in (run / "metrics.jsonl").read_text().splitlines()]
    assert [r["iteration"] for r in records] == [2, 3]
    assert all(0.0 <= r["sr"] <= 100.0 for r in records)

    ev = tmp_path / "eval.json"
    assert main(["eval", "--checkpoint", str(run / "best.ckpt"), "--data", str(dataset), "--out", str(ev)]) == 0
    assert "SPL" in capsys.readouterr().out
    csv_path = tmp_path / "table.csv"
    assert main(["report", "--runs", str(ev), str(run), "--out", str(csv_path)]) == 0
    rows = list(csv.reader(csv_path.open()))
    assert rows[0] == ["run", "SPL", "SR", "GP"]
    assert rows[1][0] == str(ev) and rows[2][0] == str(run)
    assert float(rows[1][2]) == json.loads(ev.read_text())["sr"]
    assert main(["report", "--runs", str(ev), str(tmp_path / "ghost"), "--out", str(csv_path)]) == 2


def test_config_mismatch_and_bad_checkpoint(dataset, small_cfg, tmp_path):
    run = tmp_path / "run"
    assert main(["train", "--config", str(small_cfg), "--data", str(dataset), "--out", str(run),
                 "--iterations", "1"]) == 0
    wide = tmp_path / "wide.cfg"
    wide.write_text("d_model = 32\n")
    ck = str(run / "last.ckpt")
    assert main(["eval", "--checkpoint", ck, "--data", str(dataset), "--out", str(tmp_path / "e"),
                 "--config", str(wide)]) == 4
    assert main(["train", "--config", str(wide), "--data", str(dataset), "--out", str(tmp_path / "r2"),
                 "--resume", ck]) == 4
    junk = tmp_path / "junk.ckpt"
    junk.write_bytes(b"not a checkpoint")
    assert main(["eval", "--checkpoint", str(junk), "--data", str(dataset), "--out", str(tmp_path / "e")]) == 4
    assert main(["eval", "--checkpoint", str(tmp_path / "absent"), "--data", str(dataset),
                 "--out", str(tmp_path / "e")]) == 2


def test_divergence_exits_3_with_dump(dataset, small_cfg, tmp_path, monkeypatch):
    real = trainer.episode_loss

    def poisoned(*args, **kwargs):
        el = real(*args, **kwargs)
        el.total.values[...] = np.nan
        return el

    monkeypatch.setattr(trainer, "episode_loss", poisoned)
    run = tmp_path / "run"
    assert main(["train", "--config", str(small_cfg), "--data", str(dataset), "--out", str(run)]) == 3
    dump = json.loads((run / "diverged.json").read_text())
    assert dump["iteration"] == 0
    assert not (run / "last.ckpt").exists()


def test_gradcheck_detects_a_corrupted_component(tmp_path):
    out = tmp_path / "gc.json"
    assert main(["gradcheck", "--seed", "1", "--out", str(out), "--corrupt", "L_giou"]) == 5
    rec = json.loads(out.read_text())
    assert not rec["passed"] and not rec["components"]["L_giou"]["passed"]
    assert rec["components"]["L_l1"]["passed"]
    assert main(["gradcheck", "--out", str(out), "--corrupt", "nothing"]) == 64
