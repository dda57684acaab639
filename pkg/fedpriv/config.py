"""
Experiment configuration
------------------------

An experiment is described by one JSON document with four sections::

    {
        "model": {...},     # ModelConfig
        "run": {...},       # RunConfig
        "data": {...},      # SyntheticSpec
        "paths": {...}      # PathsConfig
    }

Every section and key is optional; omitted keys take their defaults.
Unknown sections or keys are rejected. ``model.personalized`` follows from
``run.mode`` unless given explicitly, in which case the two must agree.

.. autoclass:: PathsConfig
.. autoclass:: ExperimentConfig

.. autofunction:: load_config
.. autofunction:: benchmark_config
.. autofunction:: describe_config_keys
"""

from __future__ import annotations


__copyright__ = "Copyright (C) 2024 fedpriv contributors"
__license__ = "MIT, see LICENSE"

import dataclasses
import hashlib
import json
import logging
from collections.abc import Mapping
from dataclasses import dataclass, field
from os import PathLike
from pathlib import Path
from typing import Any

from constantdict import constantdict

from fedpriv.data import SyntheticSpec
from fedpriv.engine import RunConfig
from fedpriv.errors import ContractError
from fedpriv.model import ModelConfig


logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class PathsConfig:
    """
    .. attribute:: data

        A JSON Lines dataset. If empty, a synthetic dataset is generated
        from the ``data`` section.

    .. attribute:: out

        Output directory of a run.
    """

    data: str = ""
    out: str = "run"


SECTIONS: Mapping[str, type] = constantdict({
    "model": ModelConfig,
    "run": RunConfig,
    "data": SyntheticSpec,
    "paths": PathsConfig,
    })


def _build_section(name: str, cls: type, values: Any) -> Any:
    if not isinstance(values, Mapping):
        raise ContractError(f"config section '{name}' must be an object")

    known = {f.name for f in dataclasses.fields(cls)}
    unknown = set(values) - known
    if unknown:
        raise ContractError(
            f"unknown keys in config section '{name}': {sorted(unknown)}")

    try:
        return cls(**values)
    except TypeError as err:
        raise ContractError(f"invalid value in config section '{name}': {err}"
                ) from err


@dataclass(frozen=True)
class ExperimentConfig:
    """
    .. attribute:: model
    .. attribute:: run
    .. attribute:: data
    .. attribute:: paths

    .. automethod:: from_dict
    .. automethod:: to_dict
    .. automethod:: canonical_json
    .. automethod:: config_hash
    .. automethod:: check_synthetic_data
    """

    model: ModelConfig = field(default_factory=ModelConfig)
    run: RunConfig = field(default_factory=RunConfig)
    data: SyntheticSpec = field(default_factory=SyntheticSpec)
    paths: PathsConfig = field(default_factory=PathsConfig)

    def __post_init__(self) -> None:
        if self.model.personalized != self.run.is_personalized:
            raise ContractError(
                f"model.personalized={self.model.personalized} contradicts "
                f"run.mode='{self.run.mode}'")

    def check_synthetic_data(self) -> None:
        """Raise :exc:`~fedpriv.errors.ContractError` unless the model can
        represent every label of the synthetic data described by ``data``.
        """
        if self.data.num_classes != self.model.label_count:
            raise ContractError(
                f"synthetic data has {self.data.num_classes} classes "
                f"(data.n_clusters), the model predicts {self.model.label_count} "
                "(model.num_classes)")

    @classmethod
    def from_dict(cls, doc: Any) -> ExperimentConfig:
        if not isinstance(doc, Mapping):
            raise ContractError("config must be a JSON object")

        unknown = set(doc) - set(SECTIONS)
        if unknown:
            raise ContractError(f"unknown config sections: {sorted(unknown)}")

        run = _build_section("run", RunConfig, doc.get("run", {}))

        model_values = dict(doc.get("model", {}))
        model_values.setdefault("personalized", run.is_personalized)

        return cls(
            model=_build_section("model", ModelConfig, model_values),
            run=run,
            data=_build_section("data", SyntheticSpec, doc.get("data", {})),
            paths=_build_section("paths", PathsConfig, doc.get("paths", {})))

    def to_dict(self) -> dict[str, Any]:
        def convert(value: Any) -> Any:
            return list(value) if isinstance(value, tuple) else value

        return {
            name: {k: convert(v)
                for k, v in dataclasses.asdict(getattr(self, name)).items()}
            for name in SECTIONS}

    def canonical_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    def config_hash(self) -> str:
        """SHA-256 of :meth:`canonical_json`, recorded in checkpoints."""
        return hashlib.sha256(self.canonical_json().encode("utf-8")).hexdigest()

    def replace(self, **sections: Any) -> ExperimentConfig:
        return dataclasses.replace(self, **sections)


def load_config(path: str | PathLike[str] | None) -> ExperimentConfig:
    """Read an :class:`ExperimentConfig` from a JSON file, or return the
    defaults if *path* is *None*.
    """
    if path is None:
        return ExperimentConfig()

    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as err:
        raise ContractError(f"config '{path}' is not valid JSON: {err}") from err

    config = ExperimentConfig.from_dict(doc)
    logger.debug("loaded config '%s' (hash %s)", path, config.config_hash())
    return config


# {{{ synthetic benchmark

BENCHMARK_SERVER_RUN: Mapping[str, Any] = constantdict({
    "epochs": 40,
    "lr": 0.5,
    "batch_size": 32,
    })

BENCHMARK_FL_RUN: Mapping[str, Any] = constantdict({
    "rounds": 400,
    "users_per_round": 10,
    "local_epochs": 5,
    "lr": 0.5,
    "batch_size": 16,
    })


def benchmark_config(mode: str, seed: int = 0) -> ExperimentConfig:
    """The configuration the default synthetic dataset is measured with in
    *mode*: default model and data, and the run settings of
    :data:`BENCHMARK_SERVER_RUN` or :data:`BENCHMARK_FL_RUN`.

    Each client is sampled in about 40 of the 400 rounds and makes five
    passes over its 48 training examples each time.
    """
    settings = (BENCHMARK_FL_RUN if RunConfig(mode=mode).is_federated
            else BENCHMARK_SERVER_RUN)
    return ExperimentConfig.from_dict(
            {"run": {"mode": mode, "seed": seed, **settings}})

# }}}


def describe_config_keys() -> str:
    """One line per config key with its default, for ``--help``."""
    lines = ["config keys (JSON sections):"]
    for name, cls in SECTIONS.items():
        for f in dataclasses.fields(cls):
            if name == "model" and f.name == "personalized":
                default = "follows run.mode"
            else:
                default = json.dumps(f.default)
            lines.append(f"  {name}.{f.name} = {default}")
    return "\n".join(lines)
