"""
.. autofunction:: central_difference_gradient
.. autofunction:: fnv1a_64
.. autofunction:: derive_seed
"""

from __future__ import annotations


__copyright__ = "Copyright (C) 2024 fedpriv contributors"
__license__ = "MIT, see LICENSE"

from collections.abc import Callable

import numpy as np

from fedpriv.errors import ContractError
from fedpriv.params import ParamSet


# {{{ central_difference_gradient

def central_difference_gradient(
        f: Callable[[ParamSet], float],
        base_state: ParamSet,
        stepsize: float) -> ParamSet:
    """Returns the gradient of the scalar function *f* at *base_state*,
    determined by a central finite difference approximation with *stepsize*,
    :math:`(f(w + h e_i) - f(w - h e_i)) / (2h)` for each coordinate.

    Coordinates that *f* does not depend on yield exactly zero, since both
    evaluations then perform identical arithmetic.

    :arg f: a callable taking a :class:`~fedpriv.params.ParamSet` with the
        layout of *base_state*.
    :returns: a :class:`~fedpriv.params.ParamSet` with the layout of
        *base_state*.
    """
    if not stepsize > 0:
        raise ContractError(f"stepsize must be positive, got {stepsize}")

    flat_base_state = base_state.flatten()
    n, = flat_base_state.shape

    grad = np.empty(n, dtype=np.float64)
    for i in range(n):
        plus = flat_base_state.copy()
        plus[i] += stepsize
        minus = flat_base_state.copy()
        minus[i] -= stepsize

        grad[i] = (
                f(base_state.unflatten(plus)) - f(base_state.unflatten(minus))
                ) / (2*stepsize)

    return base_state.unflatten(grad)

# }}}


# {{{ hashing and seeding

_FNV_OFFSET = 0xcbf29ce484222325
_FNV_PRIME = 0x100000001b3
_MASK_64 = (1 << 64) - 1


def fnv1a_64(text: str) -> int:
    """64-bit FNV-1a hash of the UTF-8 encoding of *text*."""
    h = _FNV_OFFSET
    for byte in text.encode("utf-8"):
        h ^= byte
        h = (h * _FNV_PRIME) & _MASK_64
    return h


def derive_seed(*keys: int | str) -> np.random.SeedSequence:
    """Return a :class:`numpy.random.SeedSequence` determined by *keys*.

    String keys (user ids) are hashed with :func:`fnv1a_64`, so seeds do not
    depend on Python's per-process string hash randomization.
    """
    entropy = []
    for key in keys:
        if isinstance(key, str):
            entropy.append(fnv1a_64(key))
        elif key < 0:
            raise ContractError(f"seed keys must be nonnegative, got {key}")
        else:
            entropy.append(int(key))
    return np.random.SeedSequence(entropy)

# }}}

# vim: foldmethod=marker
