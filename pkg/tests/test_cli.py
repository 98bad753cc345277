import json
from pathlib import Path

import pytest
import yaml

from ppked.cli import main
from ppked.data import read_jsonl
from ppked.prke import RetrievalIndex


def write_config(tmp_path: Path, name="cfg.yaml", workdir="run", **train):
    cfg = {
        "model": {"d": 16, "n_heads": 2, "n_patches": 8, "feature_dim": 32, "n_retrieved": 6,
                  "dropout": 0.1, "max_len": 30},
        "train": {"lr": 1e-3, "batch_size": 16, "epochs": 3, "patience": 5, "seed": 0, **train},
        "data": {"num_records": 60},
        "paths": {"workdir": str(tmp_path / workdir)},
    }
    path = tmp_path / name
    path.write_text(yaml.safe_dump(cfg))
    return str(path)


def run(*argv):
    return main(list(argv))


@pytest.fixture
def prepared(tmp_path):
    cfg = write_config(tmp_path)
    assert run("synth", "--config", cfg) == 0
    assert run("index", "--config", cfg) == 0
    return tmp_path, cfg


def test_synth_creates_missing_dir_and_is_byte_identical(tmp_path):
    a = write_config(tmp_path, "a.yaml", workdir="deep/a")
    b = write_config(tmp_path, "b.yaml", workdir="deep/b")
    assert run("synth", "--config", a) == 0
    assert run("synth", "--config", b) == 0
    for name in ("corpus.jsonl", "features.bin", "embeddings.bin", "manifest.json"):
        assert (tmp_path / "deep/a" / name).read_bytes() == (tmp_path / "deep/b" / name).read_bytes()


def test_seed_flag_changes_the_corpus(tmp_path):
    a = write_config(tmp_path, "a.yaml", workdir="a")
    b = write_config(tmp_path, "b.yaml", workdir="b")
    run("synth", "--config", a)
    run("synth", "--config", b, "--seed", "7")
    assert (tmp_path / "a/corpus.jsonl").read_bytes() != (tmp_path / "b/corpus.jsonl").read_bytes()


def test_index_excludes_held_out_splits(prepared):
    tmp_path, _ = prepared
    index = RetrievalIndex.load(tmp_path / "run/index.bin")
    manifest = json.loads((tmp_path / "run/manifest.json").read_text())
    assert set(index.ids) == set(manifest["train"])


def test_full_pipeline(prepared, capsys):
    tmp_path, cfg = prepared
    assert run("train", "--config", cfg) == 0
    rows = read_jsonl(tmp_path / "run/train_log.jsonl")
    train_rows = [r for r in rows if r["stage"] == "train"]
    assert [r["epoch"] for r in train_rows] == [0, 1, 2]
    assert all({"train_loss", "val_loss", "val_metrics", "wall_time"} <= set(r) for r in train_rows)
    losses = [r["train_loss"] for r in train_rows]
    assert losses[0] > losses[1] > losses[2]
    assert (tmp_path / "run/checkpoints/best.npz").exists()
    assert (tmp_path / "run/checkpoints/last.npz").exists()

    assert run("generate", "--config", cfg, "--split", "test") == 0
    gens = read_jsonl(tmp_path / "run/generations.jsonl")
    manifest = json.loads((tmp_path / "run/manifest.json").read_text())
    assert [g["id"] for g in gens] == manifest["test"]
    for g in gens:
        assert {"id", "text", "token_ids", "per_step_gates", "log_prob"} <= set(g)
        assert len(g["per_step_gates"]) == len(g["token_ids"])
        assert all(len(step) == 2 for step in g["per_step_gates"])

    capsys.readouterr()
    out_json = tmp_path / "metrics.json"
    assert run("evaluate", "--config", cfg, "--split", "test", "--out", str(out_json)) == 0
    printed = capsys.readouterr().out
    assert "METEOR: not implemented" in printed
    scores = json.loads(out_json.read_text())
    assert {"bleu1", "bleu2", "bleu3", "bleu4", "rouge_l", "cider"} <= set(scores)

    assert run("gates", "--config", cfg) == 0
    assert "lambda1" in capsys.readouterr().out


def test_generate_is_deterministic(prepared):
    tmp_path, cfg = prepared
    assert run("train", "--config", cfg) == 0
    run("generate", "--config", cfg, "--split", "val", "--out", str(tmp_path / "g1.jsonl"))
    run("generate", "--config", cfg, "--split", "val", "--out", str(tmp_path / "g2.jsonl"))
    assert (tmp_path / "g1.jsonl").read_bytes() == (tmp_path / "g2.jsonl").read_bytes()


def test_resume_reproduces_following_epochs(tmp_path):
    full = write_config(tmp_path, "full.yaml", workdir="full", epochs=4)
    part = write_config(tmp_path, "part.yaml", workdir="part", epochs=2)
    rest = write_config(tmp_path, "rest.yaml", workdir="part", epochs=4)
    for cfg in (full, part):
        run("synth", "--config", cfg)
        run("index", "--config", cfg)
    assert run("train", "--config", full) == 0
    assert run("train", "--config", part) == 0
    assert run("train", "--config", rest, "--checkpoint", str(tmp_path / "part/checkpoints/last.npz")) == 0
    a = [r["train_loss"] for r in read_jsonl(tmp_path / "full/train_log.jsonl") if r["stage"] == "train"]
    b = [r["train_loss"] for r in read_jsonl(tmp_path / "part/train_log.jsonl") if r["stage"] == "train"]
    assert b == pytest.approx(a, rel=1e-12, abs=0)


def test_checkpoint_mismatch_is_refused_with_diff(prepared, capsys):
    tmp_path, cfg = prepared
    run("train", "--config", cfg)
    other = yaml.safe_load(Path(cfg).read_text())
    other["model"]["d"] = 32
    other_path = tmp_path / "other.yaml"
    other_path.write_text(yaml.safe_dump(other))
    capsys.readouterr()
    code = run("generate", "--config", str(other_path), "--checkpoint", str(tmp_path / "run/checkpoints/best.npz"))
    assert code == 2
    assert "d: checkpoint=16 config=32" in capsys.readouterr().err


def test_leakage_guard_blocks_generation(prepared, capsys):
    tmp_path, cfg = prepared
    run("train", "--config", cfg)
    index = RetrievalIndex.load(tmp_path / "run/index.bin")
    manifest = json.loads((tmp_path / "run/manifest.json").read_text())
    leaked = manifest["test"][0]
    index.add([(leaked, index.image_embeddings[0], index.report_embeddings[0])])
    index.save(tmp_path / "run/index.bin")
    capsys.readouterr()
    assert run("generate", "--config", cfg, "--split", "test") == 3
    assert leaked in capsys.readouterr().err


def test_evaluate_identical_files_gives_bleu_one(tmp_path, capsys):
    rows = [{"id": f"r{i}", "text": f"the heart is normal . case {w} ."} for i, w in enumerate("abcdef")]
    path = tmp_path / "same.jsonl"
    path.write_text("".join(json.dumps(r) + "\n" for r in rows))
    assert run("evaluate", "--generations", str(path), "--references", str(path)) == 0
    scores = json.loads(capsys.readouterr().out.splitlines()[0])
    assert scores["bleu4"] == pytest.approx(1.0) and scores["rouge_l"] == pytest.approx(1.0)


def test_evaluate_lists_missing_ids(tmp_path, capsys):
    gens = tmp_path / "g.jsonl"
    refs = tmp_path / "r.jsonl"
    gens.write_text('{"id": "a", "text": "x"}\n{"id": "zz", "text": "y"}\n')
    refs.write_text('{"id": "a", "report": "x"}\n')
    assert run("evaluate", "--generations", str(gens), "--references", str(refs)) == 3
    assert "zz" in capsys.readouterr().err


def test_gates_report_has_both_classes(tmp_path, capsys):
    gens = tmp_path / "g.jsonl"
    row = {"id": "a", "text": "lungs are clear . small effusion .",
           "per_step_gates": [[0.1, 0.2]] * 4 + [[0.5, 0.6]] * 3}
    gens.write_text(json.dumps(row) + "\n")
    assert run("gates", "--generations", str(gens)) == 0
    lines = capsys.readouterr().out.splitlines()
    assert [line.split()[0] for line in lines[1:]] == ["normality", "abnormality"]


def test_exit_codes(tmp_path, capsys):
    bad = tmp_path / "bad.yaml"
    bad.write_text("model: {d: 10, n_heads: 3}\n")
    assert run("synth", "--config", str(bad)) == 2
    assert run("index", "--config", str(tmp_path / "missing.yaml")) == 2
    cfg = write_config(tmp_path)
    assert run("index", "--config", cfg) == 3
    assert "ppked synth" in capsys.readouterr().err


def test_too_few_training_records_for_nk(tmp_path, capsys):
    cfg = yaml.safe_load(Path(write_config(tmp_path)).read_text())
    cfg["model"]["n_retrieved"] = 100
    path = tmp_path / "big_nk.yaml"
    path.write_text(yaml.safe_dump(cfg))
    run("synth", "--config", str(path))
    assert run("index", "--config", str(path)) == 2
    assert "n_retrieved" in capsys.readouterr().err
