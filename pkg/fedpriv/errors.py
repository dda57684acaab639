"""
Exceptions
----------

.. autoexception:: FedprivError
.. autoexception:: DimensionError
.. autoexception:: BoundsError
.. autoexception:: ContractError
.. autoexception:: AggregationError
.. autoexception:: UndefinedMetricError
.. autoexception:: DataFormatError

Warnings
--------

.. autoexception:: EmptyClientWarning
.. autoexception:: DegenerateClusteringWarning
.. autoexception:: MetricSkippedWarning
"""

from __future__ import annotations


__copyright__ = "Copyright (C) 2024 fedpriv contributors"
__license__ = "MIT, see LICENSE"


class FedprivError(Exception):
    """Base class of all errors raised by :mod:`fedpriv`."""


class DimensionError(FedprivError, ValueError):
    """Operand shapes do not conform."""


class BoundsError(FedprivError, IndexError):
    """An index (embedding row, class id) is out of range."""


class ContractError(FedprivError, ValueError):
    """A precondition of an operation was violated."""


class AggregationError(FedprivError, ArithmeticError):
    """Client updates cannot be combined, e.g. because their total weight
    is zero.
    """


class UndefinedMetricError(FedprivError, ValueError):
    """A metric is not defined on the given input (e.g. AUC on a single
    class).
    """


class DataFormatError(FedprivError, ValueError):
    """A dataset file could not be parsed.

    .. attribute:: lineno

        1-based line number of the offending record, or *None*.
    """

    def __init__(self, message: str, lineno: int | None = None) -> None:
        if lineno is not None:
            message = f"line {lineno}: {message}"
        super().__init__(message)
        self.lineno = lineno


class EmptyClientWarning(UserWarning):
    """A sampled client had no training data and was skipped."""


class DegenerateClusteringWarning(UserWarning):
    """Embeddings carry no cluster structure (all identical)."""


class MetricSkippedWarning(UserWarning):
    """A metric was not computed because it is undefined on the data."""

# vim: foldmethod=marker
