import csv
import json

import pytest
import torch
import yaml

from blockrec import cli
from blockrec.attention import ConfigError
from blockrec.diffengine import NumericalError
from blockrec.model import PRESETS

SMALL = ["model.d=16", "model.heads=2", "model.head_dim=8", "model.mlp_hidden=32", "model.num_layers=2",
         "model.recurrent_layers=[1]", "model.window=8", "model.segment=16", "model.num_states=4",
         "steps=3", "batch=2", "schedule.warmup_steps=2"]


@pytest.fixture
def corpus(tmp_path):
    path = tmp_path / "train.txt"
    path.write_bytes(b"pack my box with five dozen liquor jugs. " * 6 + b"\n\x1e\n" + b"sphinx of black quartz " * 5)
    return path


def _args(*items):
    return [x for item in items for x in ("--override", item)]


def test_preset_expanded_before_overrides():
    run = cli.parse_config(None, ["scale=paper", "window=512"], preset="xl")
    assert run.model.window == run.model.segment == 512
    run = cli.parse_config(None, ["model.num_states=16"], preset="rec-lstm-dual")
    assert run.model.gate_type == "lstm" and run.model.num_states == 16


def test_config_file_then_cli_overrides(tmp_path):
    path = tmp_path / "c.yaml"
    path.write_text(yaml.safe_dump({"preset": "slide12", "steps": 7, "model": {"window": 16, "segment": 64}}))
    run = cli.parse_config(path, ["steps=9"], seed=11)
    assert (run.steps, run.seed, run.model.window, run.model.segment) == (9, 11, 16, 64)
    assert run.model.recurrent_layers == []


@pytest.mark.parametrize("raw,where", [
    ({"stpes": 3}, "config"),
    ({"model": {"windw": 8}}, "model"),
    ({"schedule": {"rate": 1.0}}, "schedule"),
    ({"data": {"trian": "x"}}, "data"),
])
def test_unknown_keys_rejected(raw, where):
    with pytest.raises(ConfigError, match=where):
        cli.build_run_config(raw)


def test_indivisible_segment_names_both_values(capsys):
    assert cli.main(["train", "--override", "window=100", "--override", "segment=250"]) == 2
    err = capsys.readouterr().err
    assert "250" in err and "100" in err


def test_unknown_preset_lists_valid_names(capsys):
    assert cli.main(["train", "--preset", "rec-gru"]) == 2
    err = capsys.readouterr().err
    assert all(name in err for name in PRESETS)


@pytest.mark.parametrize("override", ["steps=0", "batch=0", "schedule.warmup_steps=0", "nonsense"])
def test_bad_values_exit_two(override):
    assert cli.main(["train", "--override", override]) == 2


def test_missing_inputs_exit_two(tmp_path):
    assert cli.main(["train", "--config", str(tmp_path / "absent.yaml")]) == 2
    assert cli.main(["eval", "--checkpoint", str(tmp_path), "--data", "x"]) == 2
    assert cli.main(["train", "--out", str(tmp_path / "o")] + _args(*SMALL)) == 2  # no training data


def test_snapshot_round_trips(tmp_path):
    run = cli.parse_config(None, SMALL + ["data.train=/x"], preset="rec-fixed-dual", seed=4, out=str(tmp_path))
    path = cli.write_snapshot(run, tmp_path)
    again = cli.parse_config(path)
    assert again == run


def _metrics(path):
    with open(path) as f:
        return [{k: v for k, v in row.items() if k != "wall_ms"} for row in csv.DictReader(f)]


def test_train_snapshot_reproduces_metrics(tmp_path, corpus, monkeypatch):
    monkeypatch.setenv("BLOCKREC_DETERMINISTIC", "1")
    a, b = tmp_path / "a", tmp_path / "b"
    argv = ["train", "--seed", "5", "--out", str(a)] + _args(*SMALL, f"data.train={corpus}", "checkpoint_every=2")
    assert cli.main(argv) == 0
    assert torch.get_num_threads() == 1
    assert cli.main(["train", "--config", str(a / "config.yaml"), "--out", str(b)]) == 0
    ra, rb = _metrics(a / "metrics.csv"), _metrics(b / "metrics.csv")
    assert len(ra) == 3 and ra == rb
    assert [int(r["tokens_seen"]) for r in ra] == [32, 64, 96]
    # the seed travels with every artefact
    assert yaml.safe_load((a / "config.yaml").read_text())["seed"] == 5
    manifest = json.loads((a / "checkpoint" / "manifest.json").read_text())
    assert manifest["extra"] == {"step": 3, "seed": 5}

    out = tmp_path / "ev"
    assert cli.main(["eval", "--checkpoint", str(a / "checkpoint"), "--data", str(corpus), "--seed", "5",
                     "--out", str(out)]) == 0
    report = json.loads((out / "eval.json").read_text())
    assert report["seed"] == 5 and 0 < report["bits_per_token"] < 9

    doc = tmp_path / "doc.txt"
    doc.write_bytes(corpus.read_bytes()[:50])
    assert cli.main(["diff", "--checkpoint", str(a / "checkpoint"), "--checkpoint-b", str(b / "checkpoint"),
                     "--document", str(doc), "--out", str(tmp_path / "d")]) == 0
    rows = (tmp_path / "d" / "token_diff.csv").read_text().splitlines()
    assert len(rows) == 50 and all(r.endswith(",0") for r in rows[1:])
    assert cli.main(["curve", "--checkpoint", str(a / "checkpoint"), "--data", str(corpus),
                     "--out", str(tmp_path / "c")]) == 0
    assert cli.main(["clearstate", "--checkpoint", str(a / "checkpoint"), "--document", str(doc),
                     "--out", str(tmp_path / "s")]) == 0


def test_gentask_writes_corpus_and_answers(tmp_path):
    spec = "{num_docs: 2, seq_len: 400, num_pairs: 2, d_min: 50, d_max: 150}"
    assert cli.main(["gentask", "--seed", "8", "--out", str(tmp_path)] + _args(f"data.recall={spec}")) == 0
    meta = json.loads((tmp_path / "retrievals.json").read_text())
    assert meta["seed"] == 8 and [len(r) for r in meta["retrievals"]] == [2, 2]
    assert len((tmp_path / "recall.bin").read_bytes()) == 2 * 400 + 3


def test_numerical_failure_exits_three(monkeypatch, capsys, tmp_path, corpus):
    monkeypatch.setattr(cli, "gradcheck_suite", lambda tol: {"op:matmul": 0.5})
    assert cli.main(["gradcheck"]) == 3
    assert "op:matmul" in capsys.readouterr().err

    def explode(*a, **k):
        raise NumericalError("non-finite loss at step 1")

    monkeypatch.setattr(cli, "fit", explode)
    assert cli.main(["train", "--out", str(tmp_path / "o")] + _args(*SMALL, f"data.train={corpus}")) == 3


@pytest.mark.slow
def test_gradcheck_command_passes(capsys):
    assert cli.main(["gradcheck"]) == 0
    out = capsys.readouterr().out
    assert "FAIL" not in out and "segment:two-block" in out
