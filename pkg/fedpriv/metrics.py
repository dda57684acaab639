"""
Metrics
-------

.. autoclass:: EvalResult

.. autofunction:: auc
.. autofunction:: accuracy
"""

from __future__ import annotations


__copyright__ = "Copyright (C) 2024 fedpriv contributors"
__license__ = "MIT, see LICENSE"

from collections.abc import Sequence
from dataclasses import dataclass

import numpy as np
from scipy.stats import rankdata

from fedpriv.errors import ContractError, UndefinedMetricError


@dataclass(frozen=True)
class EvalResult:
    """
    .. attribute:: metric

        One of ``"auc"``, ``"accuracy"``, ``"loss"``.

    .. attribute:: value
    .. attribute:: split
    .. attribute:: n_examples
    """

    metric: str
    value: float
    split: str
    n_examples: int

    def __post_init__(self) -> None:
        if self.metric in ("auc", "accuracy") and not 0 <= self.value <= 1:
            raise ContractError(
                f"{self.metric} must lie in [0, 1], got {self.value}")


def auc(scores: Sequence[float] | np.ndarray,
        labels: Sequence[int] | np.ndarray) -> float:
    """Area under the ROC curve, i.e. the probability that a randomly chosen
    positive is scored above a randomly chosen negative, with ties counting
    one half. Computed as the normalized Mann-Whitney :math:`U` statistic
    from average ranks.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.shape != labels.shape or scores.ndim != 1:
        raise ContractError(
            f"scores of shape {scores.shape} do not match labels of shape "
            f"{labels.shape}")
    if not np.all((labels == 0) | (labels == 1)):
        raise ContractError("AUC labels must be 0 or 1")

    positive = labels == 1
    n_pos = int(np.count_nonzero(positive))
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError(
            f"AUC needs both classes, got {n_pos} positive and "
            f"{n_neg} negative examples")

    ranks = rankdata(scores, method="average")
    u_statistic = np.sum(ranks[positive]) - n_pos*(n_pos + 1)/2
    return float(u_statistic / (n_pos*n_neg))


def accuracy(predictions: Sequence[int] | np.ndarray,
        labels: Sequence[int] | np.ndarray) -> float:
    """Fraction of *predictions* exactly equal to *labels*."""
    predictions = np.asarray(predictions)
    labels = np.asarray(labels)
    if predictions.shape != labels.shape:
        raise ContractError(
            f"{predictions.size} predictions for {labels.size} labels")
    if labels.size == 0:
        raise ContractError("accuracy of an empty set")

    return int(np.count_nonzero(predictions == labels)) / labels.size
