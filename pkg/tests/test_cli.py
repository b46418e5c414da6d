import csv
import io
import json

import numpy as np
import pytest
import yaml

from ebseqgan import cli
from ebseqgan.data_io import load_checkpoint, read_metrics
from ebseqgan.gan_trainer import METRIC_FIELDS


def _run(capsys, *argv):
    code = cli.main(list(argv))
    out, err = capsys.readouterr()
    return code, out, err


@pytest.fixture
def synthetic(tmp_path, capsys):
    data = tmp_path / "data"
    code, _, _ = _run(capsys, "make-synthetic", "--out", str(data), "--vocab-size", "3", "--horizon", "4",
                      "--n-demos", "40", "--n-heldout", "10", "--seed", "1")
    assert code == 0
    return data


def test_unknown_command_prints_usage(capsys):
    code, out, err = _run(capsys, "train-everything")
    assert code != 0
    assert "usage:" in err and "train-everything" in err


def test_no_command(capsys):
    code, _, err = _run(capsys)
    assert code != 0 and "usage:" in err


def test_missing_margin_is_named(capsys, synthetic, tmp_path):
    code, _, err = _run(capsys, "train-gan", "--data", str(synthetic / "demos.txt"), "--out", str(tmp_path / "r"))
    assert code != 0
    assert "margin" in err
    assert len(err.strip().splitlines()) == 1


def test_unknown_config_key(capsys, tmp_path):
    cfg = tmp_path / "c.yaml"
    cfg.write_text("margin: 1.0\nlearning_rate: 3\n")
    code, _, err = _run(capsys, "check-equivalence", "--config", str(cfg), "--out", str(tmp_path / "r"))
    assert code != 0 and "learning_rate" in err


def test_invalid_value_names_key(capsys, tmp_path):
    code, _, err = _run(capsys, "make-synthetic", "--vocab-size", "many", "--out", str(tmp_path / "r"))
    assert code != 0 and "vocab_size" in err


def test_missing_file_names_path(capsys, tmp_path):
    missing = tmp_path / "nope.txt"
    code, _, err = _run(capsys, "pretrain", "--data", str(missing), "--out", str(tmp_path / "r"))
    assert code != 0 and "nope.txt" in err


def test_precedence_defaults_file_flags(tmp_path):
    cfg = tmp_path / "c.yaml"
    cfg.write_text("epochs: 7\nlr_g: 0.5\n")
    resolved = cli.resolve_config("train-gan", str(cfg), {"lr_g": "0.25", "margin": "2"})
    assert resolved["epochs"] == 7
    assert resolved["lr_g"] == 0.25
    assert resolved["margin"] == 2.0
    assert resolved["batch_size"] == 32


def test_pipeline_smoke(capsys, synthetic, tmp_path):
    run = tmp_path / "run"
    code, _, err = _run(capsys, "train-gan", "--data", str(synthetic / "demos.txt"),
                        "--oracle", str(synthetic / "oracle.json"), "--out", str(run), "--margin", "1.0",
                        "--epochs", "2", "--batch-size", "4", "--n-rollouts", "2", "--horizon", "4",
                        "--gen-kind", "recurrent", "--embed-dim", "2", "--hidden-dim", "3")
    assert code == 0, err
    with open(run / "metrics.csv", newline="") as fh:
        rows = list(csv.reader(fh))
    assert tuple(rows[0]) == METRIC_FIELDS
    assert len(rows) == 3 and all(len(r) == len(METRIC_FIELDS) for r in rows)
    assert [r["iteration"] for r in read_metrics(run / "metrics.csv")] == [1, 2]
    resolved = yaml.safe_load((run / "config.yaml").read_text())
    assert resolved["margin"] == 1.0 and resolved["command"] == "train-gan"

    code, out, err = _run(capsys, "eval", "--checkpoint", str(run / "generator.json"),
                          "--oracle", str(synthetic / "oracle.json"), "--heldout", str(synthetic / "heldout.txt"),
                          "--out", str(tmp_path / "ev"), "--k", "2")
    assert code == 0, err
    report = json.loads(out)
    assert {"oracle_nll_forward", "oracle_nll_reverse", "hit_at_2", "heldout_nll"} <= set(report)


def test_same_seed_same_files(capsys, synthetic, tmp_path):
    args = ["--data", str(synthetic / "demos.txt"), "--margin", "1.0", "--epochs", "3", "--batch-size", "4",
            "--n-rollouts", "2", "--horizon", "4"]
    for name in ("a", "b"):
        assert _run(capsys, "train-gan", "--out", str(tmp_path / name), *args)[0] == 0
    for f in ("metrics.csv", "generator.json", "energy.json"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()


def test_pretrain_generate_recommend(capsys, synthetic, tmp_path):
    run = tmp_path / "pre"
    assert _run(capsys, "pretrain", "--data", str(synthetic / "demos.txt"), "--out", str(run), "--horizon", "4",
                "--pretrain-epochs", "20")[0] == 0
    ck = load_checkpoint(run / "generator.json")
    code, out, _ = _run(capsys, "generate", "--checkpoint", str(run / "generator.json"), "--n-generate", "5")
    assert code == 0
    lines = out.strip().splitlines()
    assert len(lines) == 5 and all(len(line.split()) == 4 for line in lines)
    assert all(tok in ck.vocab.tokens for line in lines for tok in line.split())

    code, out, _ = _run(capsys, "recommend", "--checkpoint", str(run / "generator.json"), "--prefix", "i0,i1",
                        "--k", "3")
    assert code == 0
    probs = [float(line.split("\t")[1]) for line in out.strip().splitlines()]
    assert len(probs) == 3 and probs == sorted(probs, reverse=True)

    code, _, err = _run(capsys, "recommend", "--checkpoint", str(run / "generator.json"), "--prefix", "i0,zz")
    assert code != 0 and "zz" in err


def test_recommend_reads_stdin(capsys, synthetic, tmp_path, monkeypatch):
    run = tmp_path / "pre"
    assert _run(capsys, "pretrain", "--data", str(synthetic / "demos.txt"), "--out", str(run),
                "--horizon", "4")[0] == 0
    monkeypatch.setattr("sys.stdin", io.StringIO("i2\n"))
    code, out, _ = _run(capsys, "recommend", "--checkpoint", str(run / "generator.json"), "--k", "1")
    assert code == 0 and len(out.strip().splitlines()) == 1


def test_train_il(capsys, synthetic, tmp_path):
    code, out, err = _run(capsys, "train-il", "--data", str(synthetic / "demos.txt"), "--out", str(tmp_path / "il"),
                          "--il-max-rounds", "50")
    assert code == 0, err
    ck = load_checkpoint(tmp_path / "il" / "cost.json")
    assert np.all(np.isfinite(ck.model.params))


def test_check_equivalence_exits_zero(capsys, tmp_path):
    code, out, _ = _run(capsys, "check-equivalence", "--n-instances", "5", "--out", str(tmp_path / "eq"))
    assert code == 0
    assert out.count("ok") == 5
    with open(tmp_path / "eq" / "equivalence.csv", newline="") as fh:
        assert len(list(csv.DictReader(fh))) == 5


def test_session_csv_input(capsys, tmp_path):
    data = tmp_path / "s.csv"
    data.write_text("user_id,timestamp,item_id\n" + "".join(f"u{t % 2},{t},song{t % 3}\n" for t in range(20)))
    code, _, err = _run(capsys, "pretrain", "--data", str(data), "--horizon", "3", "--out", str(tmp_path / "p"))
    assert code == 0, err
    assert set(load_checkpoint(tmp_path / "p" / "generator.json").vocab.tokens) == {"song0", "song1", "song2"}
