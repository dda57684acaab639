__copyright__ = "Copyright (C) 2024 fedpriv contributors"
__license__ = "MIT, see LICENSE"

import numpy as np
import pytest

from fedpriv.errors import ContractError, DimensionError
from fedpriv.params import ParamSet, check_same_layout


def _make(rng):
    return ParamSet({
        "encoder.weight": rng.normal(size=(3, 2)),
        "encoder.bias": rng.normal(size=3),
        })


def test_layout_and_size():
    ps = _make(np.random.default_rng(0))
    assert ps.layout == (("encoder.weight", (3, 2)), ("encoder.bias", (3,)))
    assert ps.size == 9
    assert list(ps) == ["encoder.weight", "encoder.bias"]


def test_entries_are_frozen_copies():
    ary = np.ones(3)
    ps = ParamSet({"b": ary})
    ary[0] = 5
    assert ps["b"][0] == 1

    with pytest.raises(ValueError):
        ps["b"][0] = 2

    copies = ps.copy_arrays()
    copies["b"][0] = 7
    assert ps["b"][0] == 1


def test_flatten_unflatten():
    ps = _make(np.random.default_rng(1))
    flat = ps.flatten()
    assert flat.shape == (9,)
    assert ps.unflatten(flat).max_abs_difference(ps) == 0

    with pytest.raises(DimensionError):
        ps.unflatten(np.zeros(8))


def test_arithmetic():
    rng = np.random.default_rng(2)
    a, b = _make(rng), _make(rng)

    diff = a - b
    assert (diff + b).max_abs_difference(a) < 1e-14
    assert a.zeros_like().max_abs_difference(a.map(lambda x: 0*x)) == 0
    assert a.is_finite()
    assert not a.with_entry("bad", np.array([np.inf])).is_finite()


def test_layout_mismatch():
    rng = np.random.default_rng(3)
    a = _make(rng)
    b = ParamSet({"encoder.weight": a["encoder.weight"]})

    with pytest.raises(ContractError):
        check_same_layout(a, b)
    with pytest.raises(ContractError):
        a.add(b)

    reordered = ParamSet({
        "encoder.bias": a["encoder.bias"],
        "encoder.weight": a["encoder.weight"]})
    with pytest.raises(ContractError):
        check_same_layout(a, reordered)


def test_with_entry():
    ps = _make(np.random.default_rng(4))
    extended = ps.with_entry("table", np.zeros((2, 2)))
    assert extended.layout[:-1] == ps.layout
    assert extended.layout[-1] == ("table", (2, 2))

    replaced = extended.with_entry("table", np.ones((2, 2)))
    assert replaced.layout == extended.layout
    assert np.array_equal(extended["table"], np.zeros((2, 2)))


if __name__ == "__main__":
    import sys
    if len(sys.argv) > 1:
        exec(sys.argv[1])
    else:
        pytest.main([__file__])

# vim: fdm=marker
