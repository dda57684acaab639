"""
Embedding structure
-------------------

Quantitative checks that users with similar behavior end up with similar
embeddings: k-means on the learned embeddings compared against the latent
clusters by Adjusted Rand Index, a silhouette score, and a PCA projection
for plotting.

.. autoclass:: AnalysisReport

.. autofunction:: export_embeddings
.. autofunction:: load_embeddings
.. autofunction:: pca_project
.. autofunction:: write_projection
.. autofunction:: cluster_agreement
.. autofunction:: compare_partitions
.. autofunction:: cluster_silhouette
.. autofunction:: analyze_embeddings
"""

from __future__ import annotations


__copyright__ = "Copyright (C) 2024 fedpriv contributors"
__license__ = "MIT, see LICENSE"

import csv
import json
import logging
from collections.abc import Mapping, Sequence
from dataclasses import asdict, dataclass
from os import PathLike
from pathlib import Path
from warnings import warn

import numpy as np
from sklearn.cluster import KMeans
from sklearn.metrics import adjusted_rand_score, silhouette_score

from fedpriv.errors import ContractError, DataFormatError, DegenerateClusteringWarning


logger = logging.getLogger(__name__)

KMEANS_RESTARTS = 20


def _as_matrix(embeddings: Mapping[str, np.ndarray]
        ) -> tuple[list[str], np.ndarray]:
    user_ids = sorted(embeddings)
    if not user_ids:
        return [], np.zeros((0, 0))
    return user_ids, np.array([embeddings[uid] for uid in user_ids],
            dtype=np.float64)


# {{{ files

def export_embeddings(embeddings: Mapping[str, np.ndarray],
        path: str | PathLike[str]) -> None:
    """Write ``user_id,e0,...,e{D-1}``, one row per user, sorted by user id.
    Values are written with full precision.
    """
    user_ids, matrix = _as_matrix(embeddings)
    if not user_ids:
        raise ContractError("no embeddings to export")

    with open(path, "w", encoding="utf-8", newline="") as outf:
        writer = csv.writer(outf, lineterminator="\n")
        writer.writerow(["user_id", *(f"e{i}" for i in range(matrix.shape[1]))])
        for user_id, row in zip(user_ids, matrix, strict=True):
            writer.writerow([user_id, *(repr(v) for v in row.tolist())])


def load_embeddings(path: str | PathLike[str]) -> dict[str, np.ndarray]:
    with open(path, encoding="utf-8", newline="") as inf:
        reader = csv.reader(inf)
        header = next(reader, None)
        if not header or header[0] != "user_id":
            raise DataFormatError(f"'{path}' is not an embeddings file")

        result = {}
        for lineno, row in enumerate(reader, start=2):
            if len(row) != len(header):
                raise DataFormatError(
                    f"'{path}': expected {len(header)} columns", lineno)
            try:
                result[row[0]] = np.array([float(v) for v in row[1:]])
            except ValueError as err:
                raise DataFormatError(f"'{path}': {err}", lineno) from err

    return result


def write_projection(path: str | PathLike[str], user_ids: Sequence[str],
        coords: np.ndarray) -> None:
    with open(path, "w", encoding="utf-8", newline="") as outf:
        writer = csv.writer(outf, lineterminator="\n")
        writer.writerow(["user_id", *(f"p{i}" for i in range(coords.shape[1]))])
        for user_id, row in zip(user_ids, coords, strict=True):
            writer.writerow([user_id, *(repr(v) for v in row.tolist())])

# }}}


# {{{ projection

def pca_project(embeddings: np.ndarray, out_dim: int) -> np.ndarray:
    """Center the columns of *embeddings* and project onto the top *out_dim*
    right singular vectors. Each direction is oriented so that its
    largest-magnitude component is positive.
    """
    embeddings = np.asarray(embeddings, dtype=np.float64)
    if embeddings.ndim != 2:
        raise ContractError(f"expected a matrix, got shape {embeddings.shape}")
    nusers, dim = embeddings.shape
    if not 1 <= out_dim <= min(nusers, dim):
        raise ContractError(
            f"cannot project {nusers}x{dim} embeddings onto {out_dim} dimensions")

    centered = embeddings - np.mean(embeddings, axis=0)
    _, _, vt = np.linalg.svd(centered, full_matrices=False)
    components = vt[:out_dim]

    pivots = np.argmax(np.abs(components), axis=1)
    signs = np.sign(components[np.arange(out_dim), pivots])
    components = components * signs[:, np.newaxis]

    return centered @ components.T

# }}}


# {{{ clustering

def _kmeans_labels(matrix: np.ndarray, k: int, seed: int) -> np.ndarray:
    return KMeans(n_clusters=k, n_init=KMEANS_RESTARTS, random_state=seed
            ).fit_predict(matrix)


def _is_degenerate(matrix: np.ndarray) -> bool:
    return bool(np.all(matrix == matrix[0]))


def cluster_agreement(embeddings: Mapping[str, np.ndarray],
        true_clusters: Mapping[str, int], k: int, seed: int) -> float:
    """Run k-means (best of :data:`KMEANS_RESTARTS` seeded restarts) on the
    embeddings and return the Adjusted Rand Index against *true_clusters*.

    If all embeddings coincide there is no structure to recover; this
    warns with :class:`~fedpriv.errors.DegenerateClusteringWarning` and
    returns 0.
    """
    user_ids, matrix = _as_matrix(embeddings)
    if k < 2:
        raise ContractError(f"need k >= 2, got {k}")
    if len(user_ids) < k:
        raise ContractError(f"cannot form {k} clusters from {len(user_ids)} users")

    missing = [uid for uid in user_ids if uid not in true_clusters]
    if missing:
        raise ContractError(f"no true cluster for users {missing[:5]}")

    if _is_degenerate(matrix):
        logger.warning("all %d embeddings are identical", len(user_ids))
        warn("all embeddings are identical, reporting ARI 0",
                DegenerateClusteringWarning, stacklevel=2)
        return 0.0

    predicted = _kmeans_labels(matrix, k, seed)
    return float(adjusted_rand_score(
        [true_clusters[uid] for uid in user_ids], predicted))


def compare_partitions(a: Mapping[str, np.ndarray], b: Mapping[str, np.ndarray],
        k: int, seed: int) -> float:
    """ARI between the k-means partitions of two embedding sets over their
    common users, e.g. server-trained against federated embeddings.
    """
    common = sorted(set(a) & set(b))
    if len(common) < k:
        raise ContractError(
            f"{len(common)} common users are too few for {k} clusters")

    _, matrix_a = _as_matrix({uid: a[uid] for uid in common})
    _, matrix_b = _as_matrix({uid: b[uid] for uid in common})
    return float(adjusted_rand_score(
        _kmeans_labels(matrix_a, k, seed), _kmeans_labels(matrix_b, k, seed)))


def cluster_silhouette(embeddings: Mapping[str, np.ndarray],
        true_clusters: Mapping[str, int]) -> float | None:
    """Silhouette of the true clusters in embedding space, or *None* where
    it is undefined (fewer than two clusters, or one user per cluster).
    """
    user_ids, matrix = _as_matrix(embeddings)
    labels = [true_clusters[uid] for uid in user_ids]
    if not 2 <= len(set(labels)) <= len(user_ids) - 1:
        return None
    return float(silhouette_score(matrix, labels))

# }}}


# {{{ report

@dataclass(frozen=True)
class AnalysisReport:
    mode: str
    ari: float
    silhouette: float | None
    n_users: int

    def write(self, path: str | PathLike[str]) -> None:
        Path(path).write_text(json.dumps(asdict(self), indent=2) + "\n",
                encoding="utf-8")


def analyze_embeddings(embeddings: Mapping[str, np.ndarray],
        true_clusters: Mapping[str, int], *,
        mode: str, k: int, seed: int) -> AnalysisReport:
    ari = cluster_agreement(embeddings, true_clusters, k, seed)
    silhouette = cluster_silhouette(embeddings, true_clusters)
    logger.info("%s: ARI %.4f over %d users", mode, ari, len(embeddings))
    return AnalysisReport(mode, ari, silhouette, len(embeddings))

# }}}

# vim: foldmethod=marker
