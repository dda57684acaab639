__copyright__ = "Copyright (C) 2024 fedpriv contributors"
__license__ = "MIT, see LICENSE"

import json

import numpy as np
import pytest

from fedpriv.checkpoint import (
    checkpoint_contains_private,
    load_client_store,
    load_server_checkpoint,
    read_metrics_csv,
    save_client_store,
    save_server_checkpoint,
    write_metrics_csv,
)
from fedpriv.config import ExperimentConfig
from fedpriv.engine import ClientStore, MetricRecord, RunConfig, run_fl
from fedpriv.errors import DataFormatError
from fedpriv.verify import tiny_instance


def _trained(tmp_path):
    model, train = tiny_instance(0)
    cfg = RunConfig(users_per_round=2, rounds=2, batch_size=4)
    state, store, _ = run_fl(model, train, cfg)
    config = ExperimentConfig(model=model.config, run=cfg)

    path = tmp_path / "checkpoint.json"
    save_server_checkpoint(path, state, config)
    return path, state, store, config


def test_server_checkpoint_roundtrip(tmp_path):
    path, state, _, config = _trained(tmp_path)
    loaded, config_doc = load_server_checkpoint(path)

    assert loaded.round == 2
    assert loaded.w_f.layout == state.w_f.layout
    assert loaded.w_f.max_abs_difference(state.w_f) == 0
    assert ExperimentConfig.from_dict(config_doc) == config

    doc = json.loads(path.read_text())
    assert doc["config_hash"] == config.config_hash()
    assert set(doc) == {"format_version", "config", "config_hash", "round",
            "federated"}


def test_checkpoint_holds_no_private_state(tmp_path):
    path, _, store, _ = _trained(tmp_path)
    assert len(store) > 0
    assert not checkpoint_contains_private(path, store)

    doc = json.loads(path.read_text())
    (user_id, *_) = store
    doc["federated"]["leak"] = {"shape": [3],
            "values": store.get(user_id).embedding.tolist()}
    path.write_text(json.dumps(doc))
    assert checkpoint_contains_private(path, store)

    doc = json.loads(path.read_text())
    del doc["federated"]["leak"]
    doc["federated"]["user_embedding.table"] = {"shape": [1], "values": [0.0]}
    path.write_text(json.dumps(doc))
    assert checkpoint_contains_private(path, store)


def test_checkpoint_format_version(tmp_path):
    path, _, _, _ = _trained(tmp_path)
    doc = json.loads(path.read_text())
    doc["format_version"] = 99
    path.write_text(json.dumps(doc))
    with pytest.raises(DataFormatError):
        load_server_checkpoint(path)


def test_client_store_roundtrip(tmp_path):
    store = ClientStore()
    store.put("u001", np.array([0.1, -0.2, 0.3]), 4)
    store.put("u000", np.array([1e-300, 2.0, -0.0]), 1)

    save_client_store(tmp_path / "clients", store)
    assert sorted(p.name for p in (tmp_path / "clients").iterdir()) == [
        "u000.json", "u001.json"]

    loaded = load_client_store(tmp_path / "clients")
    assert list(loaded) == ["u000", "u001"]
    for user_id in store:
        assert np.array_equal(loaded.get(user_id).embedding,
                store.get(user_id).embedding)
        assert loaded.get(user_id).last_round == store.get(user_id).last_round


def test_client_store_malformed(tmp_path):
    (tmp_path / "u.json").write_text('{"user_id": "u"}', encoding="utf-8")
    with pytest.raises(DataFormatError):
        load_client_store(tmp_path)


def test_metrics_csv(tmp_path):
    records = [
        MetricRecord(0, "global_fl", "eval", "accuracy", 0.25),
        MetricRecord(1, "global_fl", "eval", "loss", 1/3),
        ]
    path = tmp_path / "metrics.csv"
    write_metrics_csv(path, records)

    assert path.read_text().splitlines()[0] == "round,mode,split,metric,value"
    assert read_metrics_csv(path) == records

    path.write_text("round,mode,split,metric,value\n1,a,b,c\n", encoding="utf-8")
    with pytest.raises(DataFormatError, match="line 2"):
        read_metrics_csv(path)

    path.write_text("something else\n", encoding="utf-8")
    with pytest.raises(DataFormatError):
        read_metrics_csv(path)


def test_empty_store_writes_directory(tmp_path):
    save_client_store(tmp_path / "clients", ClientStore())
    assert (tmp_path / "clients").is_dir()
    assert len(load_client_store(tmp_path / "clients")) == 0


if __name__ == "__main__":
    import sys
    if len(sys.argv) > 1:
        exec(sys.argv[1])
    else:
        pytest.main([__file__])

# vim: fdm=marker
