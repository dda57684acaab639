"""
Checkpoints and result files
----------------------------

Server and client state live in separate places, mirroring where they
live in deployment:

* the server checkpoint ``checkpoint.json`` holds the federated parameters,
  the round and the experiment config, and nothing private;
* the client store ``clients/<user_id>.json`` holds one embedding per
  device;
* ``metrics.csv`` holds the evaluation history, one metric per row.

All files are written deterministically, so identical runs produce
byte-identical files.

.. autofunction:: save_server_checkpoint
.. autofunction:: load_server_checkpoint
.. autofunction:: save_client_store
.. autofunction:: load_client_store
.. autofunction:: write_metrics_csv
.. autofunction:: read_metrics_csv
.. autofunction:: checkpoint_contains_private
"""

from __future__ import annotations


__copyright__ = "Copyright (C) 2024 fedpriv contributors"
__license__ = "MIT, see LICENSE"

import csv
import json
import logging
from collections.abc import Iterable
from os import PathLike
from pathlib import Path
from typing import Any

import numpy as np

from fedpriv.config import ExperimentConfig
from fedpriv.engine import ClientRecord, ClientStore, GlobalState, MetricRecord
from fedpriv.errors import DataFormatError
from fedpriv.model import PRIVATE_PARAM_NAME
from fedpriv.params import ParamSet


logger = logging.getLogger(__name__)

FORMAT_VERSION = 1
METRICS_HEADER = ("round", "mode", "split", "metric", "value")


def _dump_json(path: Path, doc: Any) -> None:
    path.write_text(json.dumps(doc, indent=1) + "\n", encoding="utf-8")


# {{{ server checkpoint

def save_server_checkpoint(path: str | PathLike[str], state: GlobalState,
        config: ExperimentConfig) -> None:
    _dump_json(Path(path), {
        "format_version": FORMAT_VERSION,
        "config": config.to_dict(),
        "config_hash": config.config_hash(),
        "round": state.round,
        "federated": {
            name: {"shape": list(ary.shape), "values": ary.ravel().tolist()}
            for name, ary in state.w_f.items()},
        })
    logger.debug("wrote server checkpoint '%s' at round %d", path, state.round)


def load_server_checkpoint(path: str | PathLike[str]
        ) -> tuple[GlobalState, dict[str, Any]]:
    """
    :returns: the server state and the config document it was trained with.
    """
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    if doc.get("format_version") != FORMAT_VERSION:
        raise DataFormatError(
            f"'{path}': unsupported checkpoint format "
            f"{doc.get('format_version')!r}")

    arrays = {
        name: np.array(entry["values"], dtype=np.float64).reshape(entry["shape"])
        for name, entry in doc["federated"].items()}
    return GlobalState(ParamSet(arrays), int(doc["round"])), doc["config"]

# }}}


# {{{ client store

def save_client_store(directory: str | PathLike[str], store: ClientStore) -> None:
    """Write one file per user into *directory*, creating it if needed."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for user_id in store:
        record = store.get(user_id)
        _dump_json(directory / f"{user_id}.json", {
            "user_id": user_id,
            "embedding": record.embedding.tolist(),
            "last_round": record.last_round,
            })


def load_client_store(directory: str | PathLike[str]) -> ClientStore:
    records = {}
    for path in sorted(Path(directory).glob("*.json")):
        doc = json.loads(path.read_text(encoding="utf-8"))
        try:
            user_id = doc["user_id"]
            embedding = np.array(doc["embedding"], dtype=np.float64)
            last_round = int(doc["last_round"])
        except (KeyError, TypeError) as err:
            raise DataFormatError(f"'{path}': malformed client record") from err

        embedding.setflags(write=False)
        records[user_id] = ClientRecord(embedding, last_round)

    return ClientStore(records)

# }}}


# {{{ metrics

def write_metrics_csv(path: str | PathLike[str],
        records: Iterable[MetricRecord]) -> None:
    with open(path, "w", encoding="utf-8", newline="") as outf:
        writer = csv.writer(outf, lineterminator="\n")
        writer.writerow(METRICS_HEADER)
        for rec in records:
            writer.writerow(
                (rec.round, rec.mode, rec.split, rec.metric, repr(rec.value)))


def read_metrics_csv(path: str | PathLike[str]) -> list[MetricRecord]:
    with open(path, encoding="utf-8", newline="") as inf:
        reader = csv.reader(inf)
        header = next(reader, None)
        if header is None or tuple(header) != METRICS_HEADER:
            raise DataFormatError(f"'{path}' is not a metrics file")

        records = []
        for lineno, row in enumerate(reader, start=2):
            try:
                round_, mode, split, metric, value = row
                records.append(
                    MetricRecord(int(round_), mode, split, metric, float(value)))
            except ValueError as err:
                raise DataFormatError(f"'{path}': malformed row", lineno) from err

    return records

# }}}


# {{{ privacy scan

def _iter_numbers(doc: Any) -> Iterable[float]:
    if isinstance(doc, dict):
        for value in doc.values():
            yield from _iter_numbers(value)
    elif isinstance(doc, list):
        for value in doc:
            yield from _iter_numbers(value)
    elif isinstance(doc, float):
        yield doc


def _iter_keys(doc: Any) -> Iterable[str]:
    if isinstance(doc, dict):
        for key, value in doc.items():
            yield key
            yield from _iter_keys(value)
    elif isinstance(doc, list):
        for value in doc:
            yield from _iter_keys(value)


def checkpoint_contains_private(path: str | PathLike[str],
        store: ClientStore) -> bool:
    """Scan a server checkpoint for private state.

    Reports *True* if any key names a private parameter, or if every
    nonzero coordinate of some stored embedding occurs among the
    checkpoint's numbers.
    """
    doc = json.loads(Path(path).read_text(encoding="utf-8"))

    if any(PRIVATE_PARAM_NAME in key for key in _iter_keys(doc)):
        return True

    numbers = set(_iter_numbers(doc))
    for user_id in store:
        nonzero = [v for v in store.get(user_id).embedding.tolist() if v != 0]
        if nonzero and all(v in numbers for v in nonzero):
            logger.warning("checkpoint '%s' contains the embedding of '%s'",
                    path, user_id)
            return True

    return False

# }}}

# vim: foldmethod=marker
