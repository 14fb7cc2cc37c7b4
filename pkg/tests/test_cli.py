import json
import os
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from hopgraph.harness.cli import COMMANDS, decay_schedule, main, parse_cells, shipped
from hopgraph.io import load_checkpoint, read_tsv

GOLDEN = Path(__file__).parent / "golden" / "weaksg"
TINY_MODEL = ["--hidden", "16", "--heads", "2", "--layers", "1"]


def tree(root: Path) -> dict:
    """File contents under ``root``; the manifest is compared without its timing and argv."""
    out = {}
    for p in sorted(root.rglob("*")):
        if not p.is_file():
            continue
        if p.name == "manifest.json":
            doc = json.loads(p.read_text())
            doc.pop("wall_seconds")
            doc.pop("argv")
            out[str(p.relative_to(root))] = doc
        else:
            out[str(p.relative_to(root))] = p.read_bytes()
    return out


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    out = tmp_path_factory.mktemp("data")
    assert main(["gen-data", "--samples", "16", "--seed", "3", "--out", str(out)]) == 0
    return out / "corpus.jsonl"


@pytest.fixture(scope="module")
def pretrained(tmp_path_factory, corpus):
    out = tmp_path_factory.mktemp("pre")
    assert main(["pretrain", "--corpus", str(corpus), "--epochs", "2", *TINY_MODEL, "--out", str(out)]) == 0
    return out


def test_gen_data_twice_gives_identical_trees(tmp_path):
    for name in ("a", "b"):
        assert main(["gen-data", "--seed", "7", "--samples", "25", "--choices", "5", "--out", str(tmp_path / name)]) == 0
    a, b = tree(tmp_path / "a"), tree(tmp_path / "b")
    assert a == b
    assert set(a) == {"corpus.jsonl", "corpus.vocab.txt", "choices.jsonl", "manifest.json"}


def test_manifest_records_config_seed_and_hashes(tmp_path):
    assert main(["gen-data", "--seed", "7", "--samples", "5", "--out", str(tmp_path)]) == 0
    m = json.loads((tmp_path / "manifest.json").read_text())
    assert m["command"] == "gen-data" and m["seed"] == 7 and m["status"] == "ok"
    assert m["config"]["samples"] == 5
    assert {"numpy", "numba", "python", "hopgraph", "backend"} <= set(m["versions"])
    assert m["wall_seconds"] >= 0
    assert {o["path"] for o in m["outputs"]} == {"corpus.jsonl", "corpus.vocab.txt"}
    assert all(len(o["sha256"]) == 64 for o in m["outputs"])


def test_unknown_flag_exits_1(capsys):
    assert main(["pretrain", "--no-such-flag", "3"]) == 1
    assert "usage" in capsys.readouterr().err


def test_missing_config_names_the_path(tmp_path, capsys):
    missing = tmp_path / "nowhere" / "run.cfg"
    assert main(["gen-data", "--config", str(missing), "--out", str(tmp_path / "o")]) == 1
    assert str(missing) in capsys.readouterr().err


def test_no_command_is_a_usage_error(capsys):
    assert main([]) == 1
    assert "usage" in capsys.readouterr().err


def test_bad_values_exit_1(tmp_path, capsys):
    assert main(["gen-data", "--samples", "many", "--out", str(tmp_path)]) == 1
    assert main(["ablate-hops", "--cells", "0:rq", "--out", str(tmp_path)]) == 1
    assert main(["pretrain", "--corpus", str(tmp_path / "absent.jsonl"), "--out", str(tmp_path)]) == 1
    assert "absent.jsonl" in capsys.readouterr().err


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_numeric_failure_exits_2_and_leaves_a_manifest(tmp_path, corpus, capsys):
    out = tmp_path / "boom"
    code = main(["pretrain", "--corpus", str(corpus), "--epochs", "3", *TINY_MODEL, "--lr", "1e9",
                 "--clip-norm", "0", "--out", str(out)])
    assert code == 2
    assert "numeric failure" in capsys.readouterr().err
    assert json.loads((out / "manifest.json").read_text())["status"].startswith("numeric failure")


def test_config_file_and_flag_precedence(tmp_path):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("# toy\nsamples = 4\nseed = 11\nfeature_dim = 3\n")
    assert main(["gen-data", "--config", str(cfg), "--samples", "6", "--out", str(tmp_path / "o")]) == 0
    m = json.loads((tmp_path / "o" / "manifest.json").read_text())
    assert m["seed"] == 11 and m["config"]["samples"] == 6 and m["config"]["feature_dim"] == 3
    assert len((tmp_path / "o" / "corpus.jsonl").read_text().splitlines()) == 6


def test_unknown_config_key_is_rejected(tmp_path, capsys):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("sample = 4\n")
    assert main(["gen-data", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 1
    assert "sample" in capsys.readouterr().err


def test_output_dir_from_environment(tmp_path, monkeypatch):
    monkeypatch.setenv("HOPGRAPH_OUT", str(tmp_path / "envout"))
    assert main(["gen-data", "--samples", "3"]) == 0
    assert (tmp_path / "envout" / "gen-data" / "manifest.json").is_file()


def test_pretrain_outputs(pretrained):
    rows = read_tsv(pretrained / "metrics.tsv")
    assert [r["epoch"] for r in rows] == ["1", "2"]
    assert {"L_MNM", "L_sbj", "L_obj", "L_rel", "acc_sbj", "val_acc_rel"} <= set(rows[0])
    params, meta = load_checkpoint(pretrained / "checkpoint.npz")
    assert meta["stage"] == "pretrain" and "head.rel.w" in params


def test_pretrain_is_repeatable(tmp_path, corpus):
    for name in ("a", "b"):
        assert main(["pretrain", "--corpus", str(corpus), "--epochs", "1", *TINY_MODEL, "--seed", "4",
                     "--out", str(tmp_path / name)]) == 0
    assert tree(tmp_path / "a") == tree(tmp_path / "b")


def test_train_then_eval(tmp_path, pretrained):
    tr = tmp_path / "train"
    common = ["--samples", "6", "--val-samples", "4", "--epochs", "1", "--data-seed", "3"]
    assert main(["train", *common, "--checkpoint", str(pretrained / "checkpoint.npz"), *TINY_MODEL, "--out", str(tr)]) == 0
    train_eval = read_tsv(tr / "eval.tsv")
    ev = tmp_path / "eval"
    assert main(["eval", "--checkpoint", str(tr / "checkpoint.npz"), "--samples", "4", "--data-seed", "3", "--out", str(ev)]) == 0
    assert read_tsv(ev / "eval.tsv")[0]["accuracy"] == train_eval[0]["accuracy"]


def test_eval_needs_a_trained_scorer(tmp_path, pretrained, capsys):
    assert main(["eval", "--checkpoint", str(pretrained / "checkpoint.npz"), "--out", str(tmp_path)]) == 1
    assert main(["eval", "--out", str(tmp_path)]) == 1


def test_ablate_hops_small_grid(tmp_path):
    args = ["ablate-hops", "--seeds", "0", "--cells", "none:off,1:gaussian", "--samples", "12", "--epochs", "1",
            "--hidden", "8", "--heads", "2", "--layers", "1", "--out", str(tmp_path)]
    assert main(args) == 0
    table = (tmp_path / "table.tsv").read_text().splitlines()
    assert table[0] == "hops\tidentity\tgaussian\trq"
    assert len(read_tsv(tmp_path / "runs.tsv")) == 2


def test_longtail_command(tmp_path):
    assert main(["longtail", "--seeds", "0,1", "--epochs", "3", "--out", str(tmp_path)]) == 0
    names = [r["loss"] for r in read_tsv(tmp_path / "table.tsv")]
    assert names == ["CE", "focal", "CE+CB", "focal+CB"]
    assert len(read_tsv(tmp_path / "runs.tsv")) == 8


def test_extract_sg_reproduces_goldens(tmp_path):
    args = ["extract-sg", "--config", str(shipped("toy_filter.cfg")), "--out", str(tmp_path)]
    assert main(args) == 0
    for p in GOLDEN.rglob("*"):
        if p.is_file():
            assert (tmp_path / p.relative_to(GOLDEN)).read_bytes() == p.read_bytes(), p.name


def test_dump_kernels(tmp_path, pretrained):
    assert main(["dump-kernels", "--checkpoint", str(pretrained / "checkpoint.npz"), "--out", str(tmp_path)]) == 0
    rows = read_tsv(tmp_path / "kernels.tsv")
    assert len(rows) == 1 * 2 * 2  # layers x heads x roles
    for r in rows:
        assert float(r["F1"]) == pytest.approx(1.0)
        assert float(r["F2"]) <= 1.0 and float(r["alpha"]) > 0 and float(r["l"]) > 0


def test_dump_attention(tmp_path, pretrained, corpus):
    args = ["dump-attention", "--checkpoint", str(pretrained / "checkpoint.npz"), "--corpus", str(corpus),
            "--sample", "2", "--out", str(tmp_path)]
    assert main(args) == 0
    rows = read_tsv(tmp_path / "attention.tsv")
    tokens = read_tsv(tmp_path / "tokens.tsv")
    n = len(tokens)
    assert len(rows) == 2 * n * n
    sums = {}
    for r in rows:
        key = (r["head"], r["query"])
        sums[key] = sums.get(key, 0.0) + float(r["weight"])
        if int(r["distance"]) > 3:
            assert float(r["weight"]) == 0.0
    np.testing.assert_allclose(list(sums.values()), 1.0, atol=1e-6)


def test_every_command_has_options_and_help():
    assert set(COMMANDS) == {"gen-data", "pretrain", "train", "eval", "ablate-hops", "longtail", "extract-sg",
                             "dump-kernels", "dump-attention"}
    proc = subprocess.run([sys.executable, "-m", "hopgraph", "--help"], capture_output=True, text=True)
    assert proc.returncode == 0
    for name in COMMANDS:
        assert name in proc.stdout


def test_thread_override_is_accepted(tmp_path):
    env = {**os.environ, "HOPGRAPH_THREADS": "1"}
    proc = subprocess.run([sys.executable, "-m", "hopgraph", "gen-data", "--samples", "2", "--out", str(tmp_path)],
                          capture_output=True, text=True, env=env)
    assert proc.returncode == 0, proc.stderr


def test_cell_parsing_and_decay_defaults():
    cells = parse_cells(("none:off", "3:rq"))
    assert [c.label for c in cells] == ["no-hop", "h=3/rq"]
    assert len(parse_cells(("all",))) == 10
    assert decay_schedule({"decay_epochs": None, "epochs": 20}) == (14, 18)
    assert decay_schedule({"decay_epochs": None, "epochs": 2}) == (1,)
    assert decay_schedule({"decay_epochs": (5,), "epochs": 20}) == (5,)


def test_global_flags_before_or_after_the_command(tmp_path):
    assert main(["--seed", "9", "--out", str(tmp_path / "a"), "gen-data", "--samples", "3"]) == 0
    assert main(["gen-data", "--samples", "3", "--seed", "9", "--out", str(tmp_path / "b")]) == 0
    assert main(["--seed", "1", "gen-data", "--samples", "3", "--seed", "9", "--out", str(tmp_path / "c")]) == 0
    a, b, c = (tree(tmp_path / n) for n in "abc")
    assert a == b == c
    assert a["manifest.json"]["seed"] == 9
