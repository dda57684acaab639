"""
Parameter sets
--------------

A :class:`ParamSet` is the carrier of every block of model weights that
moves between server and clients: the federated parameters, client deltas,
and gradients. Its *layout*, the ordered sequence of ``(name, shape)``
pairs, is fixed at construction time and all arithmetic between two
parameter sets requires identical layouts.

.. autoclass:: ParamSet
.. autofunction:: check_same_layout
"""

from __future__ import annotations


__copyright__ = "Copyright (C) 2024 fedpriv contributors"
__license__ = "MIT, see LICENSE"

from collections.abc import Callable, Iterator, Mapping
from typing import TypeAlias

import numpy as np

from constantdict import constantdict
from pytools import product, single_valued

from fedpriv.errors import ContractError, DimensionError


Layout: TypeAlias = tuple[tuple[str, tuple[int, ...]], ...]


def _frozen_copy(ary: np.ndarray) -> np.ndarray:
    result = np.array(ary, dtype=np.float64, copy=True)
    result.setflags(write=False)
    return result


class ParamSet(Mapping[str, np.ndarray]):
    """An immutable, ordered mapping from parameter names to
    :class:`numpy.ndarray` instances of dtype :class:`numpy.float64`.

    Entries are copied on construction and marked read-only, so a
    :class:`ParamSet` handed to a client cannot be changed by it.

    .. autoattribute:: layout
    .. automethod:: zeros_like
    .. automethod:: copy_arrays
    .. automethod:: add
    .. automethod:: subtract
    .. automethod:: map
    .. automethod:: flatten
    .. automethod:: unflatten
    .. automethod:: is_finite
    .. automethod:: max_abs_difference
    .. automethod:: with_entry
    """

    def __init__(self, arrays: Mapping[str, np.ndarray]) -> None:
        self._arrays: constantdict[str, np.ndarray] = constantdict({
            name: _frozen_copy(ary) for name, ary in arrays.items()})

    # {{{ mapping interface

    def __getitem__(self, name: str) -> np.ndarray:
        return self._arrays[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self._arrays)

    def __len__(self) -> int:
        return len(self._arrays)

    def __repr__(self) -> str:
        entries = ", ".join(f"{name}: {shape}" for name, shape in self.layout)
        return f"ParamSet({entries})"

    # }}}

    @property
    def layout(self) -> Layout:
        return tuple((name, ary.shape) for name, ary in self._arrays.items())

    @property
    def size(self) -> int:
        """Total number of scalar entries."""
        return sum(product(shape) for _, shape in self.layout)

    def zeros_like(self) -> ParamSet:
        return ParamSet({name: np.zeros_like(ary) for name, ary in self.items()})

    def copy_arrays(self) -> dict[str, np.ndarray]:
        """Return writable copies of all entries, in layout order."""
        return {name: ary.copy() for name, ary in self.items()}

    # {{{ arithmetic

    def map(self, f: Callable[[np.ndarray], np.ndarray]) -> ParamSet:
        return ParamSet({name: f(ary) for name, ary in self.items()})

    def add(self, other: ParamSet) -> ParamSet:
        check_same_layout(self, other)
        return ParamSet({name: ary + other[name] for name, ary in self.items()})

    def subtract(self, other: ParamSet) -> ParamSet:
        check_same_layout(self, other)
        return ParamSet({name: ary - other[name] for name, ary in self.items()})

    __add__ = add
    __sub__ = subtract

    # }}}

    # {{{ flat vectors

    def flatten(self) -> np.ndarray:
        """Concatenate all entries in layout order (row-major)."""
        if not self._arrays:
            return np.zeros(0)
        return np.concatenate([ary.ravel() for ary in self.values()])

    def unflatten(self, vec: np.ndarray) -> ParamSet:
        """Inverse of :meth:`flatten`, using this set's layout."""
        if vec.shape != (self.size,):
            raise DimensionError(
                f"flat vector of shape {vec.shape} does not match "
                f"parameter set of size {self.size}")

        result = {}
        offset = 0
        for name, shape in self.layout:
            n = product(shape)
            result[name] = vec[offset:offset+n].reshape(shape)
            offset += n

        return ParamSet(result)

    # }}}

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(ary)) for ary in self.values())

    def max_abs_difference(self, other: ParamSet) -> float:
        check_same_layout(self, other)
        return max(
            (float(np.max(np.abs(ary - other[name]), initial=0.0))
                for name, ary in self.items()),
            default=0.0)

    def with_entry(self, name: str, value: np.ndarray) -> ParamSet:
        """Return a copy with *name* replaced, or appended if absent."""
        arrays = dict(self._arrays)
        arrays[name] = value
        return ParamSet(arrays)


def check_same_layout(*param_sets: ParamSet) -> Layout:
    """Return the common layout of *param_sets*.

    :raises ContractError: if the layouts differ in names, shapes or order.
    """
    try:
        return single_valued(ps.layout for ps in param_sets)
    except (ValueError, AssertionError):
        layouts = "; ".join(repr(ps) for ps in param_sets)
        raise ContractError(f"parameter layouts differ: {layouts}") from None

# vim: foldmethod=marker
