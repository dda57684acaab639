"""Federated training with per-user embeddings that never leave the
device."""

from __future__ import annotations


__copyright__ = "Copyright (C) 2024 fedpriv contributors"
__license__ = "MIT, see LICENSE"

from fedpriv.engine import (
    ClientStore,
    ClientUpdate,
    GlobalState,
    RunConfig,
    run_centralized,
    run_fl,
)
from fedpriv.model import ModelConfig, PersonalizedClassifier
from fedpriv.params import ParamSet


__all__ = [
    "ClientStore",
    "ClientUpdate",
    "GlobalState",
    "ModelConfig",
    "ParamSet",
    "PersonalizedClassifier",
    "RunConfig",
    "run_centralized",
    "run_fl",
]
