__copyright__ = "Copyright (C) 2024 fedpriv contributors"
__license__ = "MIT, see LICENSE"

import json

import pytest

from fedpriv.config import (
    ExperimentConfig,
    benchmark_config,
    describe_config_keys,
    load_config,
)
from fedpriv.data import SyntheticSpec
from fedpriv.engine import MODES, RunConfig
from fedpriv.errors import ContractError


def test_defaults():
    config = load_config(None)
    assert config == ExperimentConfig()
    assert config.run.mode == "personalized_fl"
    assert config.run.private_update == "retain"
    assert config.model.personalized


def test_personalized_follows_mode():
    config = ExperimentConfig.from_dict({"run": {"mode": "global_server"}})
    assert not config.model.personalized
    assert config.run.epochs == 40

    with pytest.raises(ContractError):
        ExperimentConfig.from_dict({
            "run": {"mode": "global_fl"}, "model": {"personalized": True}})


@pytest.mark.parametrize("doc", [
    {"run": {"learning_rate": 0.1}},
    {"training": {}},
    {"model": {"embed_dim": "four", "extra": 1}},
    {"run": "fast"},
    [],
    ])
def test_invalid_documents(doc):
    with pytest.raises(ContractError):
        ExperimentConfig.from_dict(doc)


@pytest.mark.parametrize("run", [
    {"mode": "federated"},
    {"lr": -0.1},
    {"users_per_round": 0},
    {"private_update": "mean"},
    {"batch_size": 0},
    ])
def test_invalid_run_values(run):
    with pytest.raises(ContractError):
        ExperimentConfig.from_dict({"run": run})


def test_zero_learning_rate_allowed():
    assert RunConfig(lr=0).lr == 0


def test_roundtrip_and_hash(tmp_path):
    doc = {
        "model": {"hidden_dims": [16, 8], "embed_dim": 2},
        "run": {"mode": "personalized_fl", "rounds": 5, "seed": 3},
        "data": {"n_users": 20},
        }
    path = tmp_path / "config.json"
    path.write_text(json.dumps(doc), encoding="utf-8")
    config = load_config(path)

    assert config.model.hidden_dims == (16, 8)
    assert ExperimentConfig.from_dict(config.to_dict()) == config
    assert ExperimentConfig.from_dict(
        json.loads(config.canonical_json())).config_hash() == config.config_hash()

    other = config.replace(run=RunConfig(rounds=6, seed=3))
    assert other.config_hash() != config.config_hash()


def test_canonical_json_is_key_order_independent():
    a = ExperimentConfig.from_dict({"run": {"rounds": 2, "seed": 1}})
    b = ExperimentConfig.from_dict({"run": {"seed": 1, "rounds": 2}})
    assert a.canonical_json() == b.canonical_json()


def test_invalid_json(tmp_path):
    path = tmp_path / "config.json"
    path.write_text("{not json", encoding="utf-8")
    with pytest.raises(ContractError):
        load_config(path)


def test_describe_config_keys():
    text = describe_config_keys()
    assert "  run.mode = \"personalized_fl\"" in text
    assert "  model.personalized = follows run.mode" in text
    assert "  model.hidden_dims = [64]" in text


def test_synthetic_class_count():
    ExperimentConfig().check_synthetic_data()
    ExperimentConfig.from_dict({
        "model": {"num_classes": 1}, "data": {"n_clusters": 2},
        }).check_synthetic_data()

    with pytest.raises(ContractError, match="n_clusters"):
        ExperimentConfig.from_dict(
                {"data": {"n_clusters": 5}}).check_synthetic_data()
    with pytest.raises(ContractError):
        ExperimentConfig.from_dict(
                {"model": {"num_classes": 1}}).check_synthetic_data()


@pytest.mark.parametrize("mode", MODES)
def test_benchmark_config(mode):
    config = benchmark_config(mode, seed=2)
    config.check_synthetic_data()

    assert config.run.mode == mode
    assert config.run.seed == 2
    assert config.model.personalized == mode.startswith("personalized")
    assert config.data == SyntheticSpec()
    if config.run.is_federated:
        assert config.run.rounds == 400
        assert config.run.users_per_round == 10
    else:
        assert config.run.epochs == 40


def test_benchmark_config_unknown_mode():
    with pytest.raises(ContractError):
        benchmark_config("fedsgd")


if __name__ == "__main__":
    import sys
    if len(sys.argv) > 1:
        exec(sys.argv[1])
    else:
        pytest.main([__file__])

# vim: fdm=marker
