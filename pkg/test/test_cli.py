__copyright__ = "Copyright (C) 2024 fedpriv contributors"
__license__ = "MIT, see LICENSE"

import csv
import json

import pytest

from fedpriv.checkpoint import (
    checkpoint_contains_private,
    load_client_store,
    read_metrics_csv,
)
from fedpriv.cli import main, train_experiment
from fedpriv.config import ExperimentConfig
from fedpriv.data import Example
from fedpriv.errors import ContractError


SMALL_DATA = {"n_users": 6, "examples_per_user": 20}


def _write_config(tmp_path, mode, **run):
    doc = {
        "model": {"hash_dim": 32, "embed_dim": 3, "hidden_dims": [8],
            "head_dims": [8]},
        "run": {"mode": mode, "users_per_round": 3, "rounds": 3, "epochs": 2,
            "batch_size": 4, **run},
        "data": SMALL_DATA,
        }
    path = tmp_path / f"{mode}.json"
    path.write_text(json.dumps(doc), encoding="utf-8")
    return str(path)


def _gen_data(tmp_path, name="data"):
    spec = tmp_path / "spec.json"
    spec.write_text(json.dumps(SMALL_DATA), encoding="utf-8")
    (tmp_path / name).mkdir()
    out = tmp_path / name / "data.jsonl"
    assert main(["gen-data", "--spec", str(spec), "--out", str(out)]) == 0
    return out


# {{{ gen-data

def test_gen_data_deterministic(tmp_path, capsys):
    first = _gen_data(tmp_path, "a")
    second = _gen_data(tmp_path, "b")

    assert first.read_bytes() == second.read_bytes()
    assert (tmp_path / "a" / "clusters.json").read_bytes() \
            == (tmp_path / "b" / "clusters.json").read_bytes()
    assert "users=6 samples=120 mean_per_user=20.00" in capsys.readouterr().out


def test_gen_data_invalid_spec(tmp_path):
    spec = tmp_path / "spec.json"
    spec.write_text(json.dumps({"n_users": 0}), encoding="utf-8")
    assert main(["gen-data", "--spec", str(spec),
        "--out", str(tmp_path / "data.jsonl")]) == 2

    spec.write_text(json.dumps({"users": 5}), encoding="utf-8")
    assert main(["gen-data", "--spec", str(spec),
        "--out", str(tmp_path / "data.jsonl")]) == 2

# }}}


# {{{ train

def test_train_zero_rounds(tmp_path):
    config = _write_config(tmp_path, "global_fl", rounds=0)
    out = tmp_path / "run"
    assert main(["train", "--config", config, "--out", str(out)]) == 0

    records = read_metrics_csv(out / "metrics.csv")
    assert records
    assert {rec.round for rec in records} == {0}
    assert {rec.split for rec in records} == {"eval"}
    assert not (out / "clients").exists()
    assert not (out / "embeddings.csv").exists()
    assert set(json.loads((out / "test_metrics.json").read_text())) \
            == {"accuracy", "loss"}


def test_train_personalized_fl(tmp_path, capsys):
    data = _gen_data(tmp_path)
    config = _write_config(tmp_path, "personalized_fl")
    out = tmp_path / "run"
    assert main(["train", "--config", config, "--data", str(data),
        "--out", str(out)]) == 0

    store = load_client_store(out / "clients")
    assert len(store) >= 3
    assert not checkpoint_contains_private(out / "checkpoint.json", store)
    assert (out / "embeddings.csv").is_file()

    rounds = [rec.round for rec in read_metrics_csv(out / "metrics.csv")]
    assert sorted(set(rounds)) == [0, 1, 2, 3]
    assert "final test accuracy=" in capsys.readouterr().out


def test_train_rerun_identical(tmp_path):
    config = _write_config(tmp_path, "personalized_fl")
    for name in ("first", "second"):
        assert main(["train", "--config", config, "--seed", "5",
            "--out", str(tmp_path / name)]) == 0

    for filename in ("metrics.csv", "checkpoint.json", "embeddings.csv"):
        assert (tmp_path / "first" / filename).read_bytes() \
                == (tmp_path / "second" / filename).read_bytes()

    doc = json.loads((tmp_path / "first" / "checkpoint.json").read_text())
    assert doc["config"]["run"]["seed"] == 5


def test_train_personalized_server(tmp_path):
    config = _write_config(tmp_path, "personalized_server")
    out = tmp_path / "run"
    assert main(["train", "--config", config, "--out", str(out)]) == 0

    doc = json.loads((out / "checkpoint.json").read_text())
    assert doc["round"] == 2
    assert not (out / "clients").exists()
    with open(out / "embeddings.csv", encoding="utf-8") as inf:
        assert len(list(csv.reader(inf))) == 1 + 6


def test_train_bad_config(tmp_path):
    path = tmp_path / "config.json"
    path.write_text(json.dumps({"run": {"mode": "fedsgd"}}), encoding="utf-8")
    assert main(["train", "--config", str(path)]) == 2

    config = _write_config(tmp_path, "personalized_fl", users_per_round=7)
    assert main(["train", "--config", config,
        "--out", str(tmp_path / "run")]) == 2


def test_train_missing_data_file(tmp_path):
    config = _write_config(tmp_path, "global_fl")
    assert main(["train", "--config", config,
        "--data", str(tmp_path / "missing.jsonl"),
        "--out", str(tmp_path / "run")]) == 1


def test_train_class_count_mismatch(tmp_path, capsys):
    path = tmp_path / "config.json"
    path.write_text(json.dumps({"data": {"n_clusters": 5}}), encoding="utf-8")
    assert main(["train", "--config", str(path),
        "--out", str(tmp_path / "run")]) == 2
    assert "n_clusters" in capsys.readouterr().err
    assert not (tmp_path / "run").exists()


def test_train_labels_out_of_range():
    config = ExperimentConfig.from_dict({"model": {"num_classes": 3}})
    examples = [Example("u0", "text", label) for label in (0, 1, 3)]
    with pytest.raises(ContractError, match="out of range"):
        train_experiment(config, examples)


def test_train_prints_last_evaluation(tmp_path, capsys):
    config = _write_config(tmp_path, "global_fl", rounds=3, eval_every=2)
    out = tmp_path / "run"
    assert main(["train", "--config", config, "--out", str(out)]) == 0

    rounds = {rec.round for rec in read_metrics_csv(out / "metrics.csv")}
    assert rounds == {0, 2}
    printed = capsys.readouterr().out
    assert "final eval accuracy=" in printed
    assert "final test accuracy=" in printed


def test_train_benchmark_excludes_config(tmp_path):
    config = _write_config(tmp_path, "global_fl")
    with pytest.raises(SystemExit) as excinfo:
        main(["train", "--config", config, "--benchmark", "global_fl"])
    assert excinfo.value.code == 2

    with pytest.raises(SystemExit) as excinfo:
        main(["train", "--benchmark", "fedsgd"])
    assert excinfo.value.code == 2

# }}}


# {{{ verify

def test_verify(capsys):
    assert main(["verify", "--seed", "1"]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert len(lines) == 3
    assert all(line.startswith("CHECK ") and line.endswith(" PASS")
            for line in lines)


def test_verify_detects_leak(capsys):
    assert main(["verify", "--inject-private-leak"]) == 1
    out = capsys.readouterr().out
    assert "CHECK aggregation_independence" in out
    assert "FAIL" in out

# }}}


# {{{ report and analyze

def test_report(tmp_path):
    run_dirs = []
    for mode in ("global_server", "personalized_server", "global_fl",
            "personalized_fl"):
        out = tmp_path / mode
        assert main(["train", "--config", _write_config(tmp_path, mode),
            "--out", str(out)]) == 0
        run_dirs.append(str(out))

    merged = tmp_path / "merged.csv"
    assert main(["report", "--runs", *run_dirs, "--out", str(merged)]) == 0

    with open(tmp_path / "merged_final.csv", encoding="utf-8") as inf:
        rows = list(csv.DictReader(inf))
    assert [row["run"] for row in rows] == [
        "global_server", "personalized_server", "global_fl", "personalized_fl"]
    assert [row["round"] for row in rows] == ["2", "2", "3", "3"]
    assert all(row["accuracy"] for row in rows)

    with open(merged, encoding="utf-8") as inf:
        assert next(csv.reader(inf))[0] == "run"


def test_report_errors(tmp_path):
    assert main(["report", "--runs", str(tmp_path),
        "--out", str(tmp_path / "merged.csv")]) == 2

    with pytest.raises(SystemExit) as excinfo:
        main(["report", "--runs", "--out", str(tmp_path / "merged.csv")])
    assert excinfo.value.code == 2


def test_analyze(tmp_path, capsys):
    data = _gen_data(tmp_path)
    config = _write_config(tmp_path, "personalized_server")
    out = tmp_path / "run"
    assert main(["train", "--config", config, "--data", str(data),
        "--out", str(out)]) == 0

    assert main(["analyze", "--run", str(out),
        "--clusters", str(data.with_name("clusters.json")), "--k", "2"]) == 0

    report = json.loads((out / "analysis.json").read_text())
    assert report["mode"] == "personalized_server"
    assert report["n_users"] == 6
    assert -1 <= report["ari"] <= 1
    assert (out / "projection.csv").read_text().startswith("user_id,p0,p1\n")
    assert "ARI=" in capsys.readouterr().out

# }}}


if __name__ == "__main__":
    import sys
    if len(sys.argv) > 1:
        exec(sys.argv[1])
    else:
        pytest.main([__file__])

# vim: fdm=marker
