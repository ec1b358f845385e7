import json

import pytest

from rumorssl.cli import ConfigError, RunConfig, load_config, resolve_config, run_command
from rumorssl.training import TrainConfig

FAST = {"hidden_dim": 8, "disc_dim": 8, "pretrain_epochs": 1, "finetune_epochs": 2, "batch_size": 16,
        "labeled_per_batch": 8, "unlabeled_per_batch": 8, "split_ratios": [0.6, 0.2, 0.2], "d_x": 32}


@pytest.fixture(scope="module")
def corpus_file(tmp_path_factory):
    path = tmp_path_factory.mktemp("data") / "corpus.jsonl"
    assert run_command(["synth", "--n-labeled", "30", "--n-unlabeled", "30", "--avg-posts", "5",
                        "--seed", "7", "--out", str(path)]) == 0
    return path


@pytest.fixture()
def fast_config(tmp_path):
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(FAST))
    return path


# ------------------------------------------------------------------ config


def test_empty_config_is_all_defaults(tmp_path):
    path = tmp_path / "empty.json"
    path.write_text("{}")
    cfg = load_config(path)
    assert cfg.train == TrainConfig() and cfg.n_splits == 10 and cfg.d_x == 128
    assert cfg.to_dict() == RunConfig().to_dict()


def test_resolved_config_round_trips():
    cfg = resolve_config({"method": "joao", "lam": 2.5, "k_values": [10, 20], "split_ratios": [0.5, 0.25, 0.25]})
    again = resolve_config(json.loads(json.dumps(cfg.to_dict())))
    assert again == cfg and again.to_dict() == cfg.to_dict()


@pytest.mark.parametrize("values, key", [
    ({"alpha": -1}, "alpha"),
    ({"colour": "red"}, "colour"),
    ({"seed": "7"}, "seed"),
    ({"use_unlabeled": 1}, "use_unlabeled"),
    ({"split_ratios": 0.8}, "split_ratios"),
])
def test_bad_config_values_name_the_key(values, key):
    with pytest.raises(ConfigError, match=key):
        resolve_config(values)


def test_flags_override_file(tmp_path):
    path = tmp_path / "c.json"
    path.write_text(json.dumps({"alpha": 0.7, "seed": 3}))
    cfg = load_config(path, {"alpha": 0.1, "beta": None})
    assert cfg.train.alpha == 0.1 and cfg.train.seed == 3 and cfg.train.beta == 0.3


# ------------------------------------------------------------ exit codes


@pytest.mark.parametrize("argv", [
    ["frobnicate"],
    ["semi", "--method", "infograph", "--bogus"],
    ["semi", "--method", "infograph", "--corpus", "/nonexistent.jsonl"],
    ["semi", "--method", "infograph", "--alpha", "-1", "--corpus", "/nonexistent.jsonl"],
    ["eval", "--corpus", "/nonexistent.jsonl"],
    [],
])
def test_validation_failures_exit_one(argv, capsys):
    assert run_command(argv) == 1
    assert "error" in capsys.readouterr().err


def test_alpha_minus_one_in_config_exits_one(corpus_file, tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"alpha": -1}))
    assert run_command(["semi", "--method", "graphmae", "--corpus", str(corpus_file), "--config", str(bad)]) == 1
    assert "alpha" in capsys.readouterr().err


def test_unknown_key_in_config_exits_one(corpus_file, tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"alhpa": 0.3}))
    assert run_command(["semi", "--method", "graphmae", "--corpus", str(corpus_file), "--config", str(bad)]) == 1
    assert "alhpa" in capsys.readouterr().err


def test_missing_unlabeled_pool_exits_one(tmp_path, fast_config):
    path = tmp_path / "lab.jsonl"
    assert run_command(["synth", "--n-labeled", "30", "--n-unlabeled", "0", "--out", str(path)]) == 0
    assert run_command(["semi", "--method", "graphmae", "--corpus", str(path), "--config", str(fast_config)]) == 1


def test_malformed_corpus_exits_one(tmp_path, capsys):
    path = tmp_path / "bad.jsonl"
    path.write_text('{"claim_id": "x", "label": "rumor", "posts": []}\n')
    assert run_command(["ingest", "--input", str(path)]) == 1
    assert "x" in capsys.readouterr().err


# -------------------------------------------------------------- pipelines


def test_synth_is_deterministic(tmp_path):
    a, b = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
    for p in (a, b):
        assert run_command(["synth", "--n-labeled", "20", "--n-unlabeled", "20", "--seed", "7", "--out", str(p)]) == 0
    assert a.read_bytes() == b.read_bytes()


def test_ingest_round_trip(corpus_file, tmp_path, capsys):
    out = tmp_path / "canon.jsonl"
    assert run_command(["ingest", "--input", str(corpus_file), "--out", str(out)]) == 0
    assert out.read_bytes() == corpus_file.read_bytes()
    assert json.loads(capsys.readouterr().out)["claims"] == 30


def test_semi_writes_ten_split_results_and_replays(corpus_file, fast_config, tmp_path, capsys):
    out = tmp_path / "run"
    argv = ["semi", "--method", "infograph", "--corpus", str(corpus_file), "--config", str(fast_config),
            "--out-dir", str(out)]
    assert run_command(argv) == 0
    doc = json.loads((out / "results.json").read_text())
    assert len(doc["runs"]) == 10
    cell = doc["aggregate"]["accuracy"]["cell"]
    mean, std = cell.split("±")
    assert len(mean.split(".")[1]) == 3 and len(std.split(".")[1]) == 3
    assert doc["config"]["method"] == "infograph" and doc["config"]["hidden_dim"] == 8
    assert len(doc["corpus"]["hash"]) == 40 and doc["std"] == "population"
    assert resolve_config(doc["config"]).to_dict() == doc["config"]
    csv_lines = (out / "results.csv").read_text().splitlines()
    assert len(csv_lines) == 12 and csv_lines[-1].startswith("mean±std")
    log_lines = (out / "train_log.jsonl").read_text().splitlines()
    assert all({"epoch", "l_sup", "l_unsup", "val_acc"} <= set(json.loads(x)) for x in log_lines)
    assert (out / "split-0.ckpt").is_file()
    capsys.readouterr()
    assert run_command(["eval", "--corpus", str(corpus_file), "--replay", str(out / "results.json")]) == 0
    assert json.loads(capsys.readouterr().out)["identical"] is True


def test_pretrain_then_finetune_from_checkpoint(corpus_file, fast_config, tmp_path, capsys):
    pre = tmp_path / "pre"
    assert run_command(["pretrain", "--method", "joao", "--corpus", str(corpus_file), "--config", str(fast_config),
                        "--out-dir", str(pre)]) == 0
    assert (pre / "encoder.ckpt").is_file() and (pre / "policy.csv").is_file()
    fin = tmp_path / "fin"
    assert run_command(["finetune", "--method", "joao", "--corpus", str(corpus_file), "--config", str(fast_config),
                        "--checkpoint", str(pre / "encoder.ckpt"), "--splits", "2", "--out-dir", str(fin)]) == 0
    doc = json.loads((fin / "results.json").read_text())
    assert doc["encoder_checkpoint"] and len(doc["runs"]) == 2
    capsys.readouterr()
    assert run_command(["eval", "--corpus", str(corpus_file), "--config", str(fast_config), "--method", "joao",
                        "--checkpoint", str(fin / "split-0.ckpt")]) == 0
    assert 0.0 <= json.loads(capsys.readouterr().out)["accuracy"] <= 1.0


def test_fewshot_reports_each_k(corpus_file, fast_config, tmp_path):
    out = tmp_path / "fs"
    assert run_command(["fewshot", "--method", "graphmae", "--corpus", str(corpus_file), "--config",
                        str(fast_config), "--k-values", "2,6", "--seeds", "2", "--out-dir", str(out)]) == 0
    doc = json.loads((out / "results.json").read_text())
    assert set(doc["per_k"]) == {"2", "6"} and all(len(v["runs"]) == 2 for v in doc["per_k"].values())


def test_gradcheck_command(capsys):
    assert run_command(["gradcheck", "--batches", "2"]) == 0
    out = capsys.readouterr().out
    assert "all passed" in out and "graphmae_sce" in out
