"""
Reverse-mode differentiation
----------------------------

A deliberately small tape-based differentiation engine over dense
:class:`numpy.float64` arrays. It supports exactly the operations needed by
the personalized classifier in :mod:`fedpriv.model` and by its tests.

Every operation records a node on the :class:`Graph` of its operands. The
order of :attr:`Graph.nodes` is the evaluation order and therefore a valid
topological order; :func:`backward` walks it in reverse, visiting every
node once, and accumulates gradients in a fixed order so that repeated
evaluations are bitwise reproducible. There is no broadcasting: operand
shapes must conform exactly.

.. autoclass:: Tensor
.. autoclass:: Graph

Operations
^^^^^^^^^^

.. autofunction:: affine
.. autofunction:: relu
.. autofunction:: embedding_lookup
.. autofunction:: concat
.. autofunction:: add
.. autofunction:: multiply
.. autofunction:: sum
.. autofunction:: mean
.. autofunction:: bce_with_logits
.. autofunction:: cross_entropy

Gradients
^^^^^^^^^

.. autofunction:: backward
.. autofunction:: grad_check
"""

from __future__ import annotations


__copyright__ = "Copyright (C) 2024 fedpriv contributors"
__license__ = "MIT, see LICENSE"

from collections.abc import Callable, Mapping, Sequence
from typing import TypeAlias

import numpy as np

from fedpriv.errors import BoundsError, ContractError, DimensionError
from fedpriv.params import ParamSet


VJP: TypeAlias = Callable[[np.ndarray], Sequence[np.ndarray | None]]


# {{{ tensors and graphs

class Tensor:
    """A value recorded on a :class:`Graph`.

    .. attribute:: value

        A read-only :class:`numpy.ndarray` of dtype :class:`numpy.float64`.

    .. autoattribute:: shape
    .. autoattribute:: data
    """

    __slots__ = ("graph", "index", "inputs", "name", "value", "vjp")

    def __init__(self, graph: Graph, index: int, value: np.ndarray,
            inputs: tuple[Tensor, ...] = (),
            vjp: VJP | None = None,
            name: str | None = None) -> None:
        value = np.asarray(value, dtype=np.float64)
        value.setflags(write=False)

        self.graph = graph
        self.index = index
        self.value = value
        self.inputs = inputs
        self.vjp = vjp
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def data(self) -> np.ndarray:
        """The entries as a flat array in row-major order."""
        return self.value.ravel()

    def __repr__(self) -> str:
        label = f" '{self.name}'" if self.name is not None else ""
        return f"<Tensor{label} #{self.index} shape={self.shape}>"


class Graph:
    """Records operations in evaluation order.

    A graph is meant to be used from a single thread. Distinct graphs share
    no state.

    .. attribute:: nodes
    .. attribute:: leaves

        A :class:`dict` mapping parameter names to their leaf
        :class:`Tensor`, in declaration order.

    .. automethod:: parameter
    .. automethod:: constant
    """

    def __init__(self) -> None:
        self.nodes: list[Tensor] = []
        self.leaves: dict[str, Tensor] = {}

    def _record(self, value: np.ndarray,
            inputs: tuple[Tensor, ...] = (),
            vjp: VJP | None = None,
            name: str | None = None) -> Tensor:
        node = Tensor(self, len(self.nodes), value, inputs, vjp, name)
        self.nodes.append(node)
        return node

    def parameter(self, name: str, value: np.ndarray) -> Tensor:
        """Declare a differentiable leaf named *name*."""
        if name in self.leaves:
            raise ContractError(f"parameter '{name}' declared twice")
        value = np.array(value, dtype=np.float64, copy=True)
        if not np.all(np.isfinite(value)):
            raise ContractError(f"parameter '{name}' has non-finite entries")

        node = self._record(value, name=name)
        self.leaves[name] = node
        return node

    def constant(self, value: np.ndarray) -> Tensor:
        """Record a value that receives no gradient."""
        return self._record(np.array(value, dtype=np.float64, copy=True))


def _common_graph(*operands: Tensor) -> Graph:
    graph = operands[0].graph
    for operand in operands[1:]:
        if operand.graph is not graph:
            raise ContractError("operands live on different graphs")
    return graph

# }}}


# {{{ operations

def affine(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Return :math:`W x + b` for a vector *x* of length *n*, a matrix *w*
    of shape ``(m, n)`` and a vector *b* of length *m*.
    """
    graph = _common_graph(x, w, b)

    if (len(w.shape) != 2
            or x.shape != (w.shape[1],)
            or b.shape != (w.shape[0],)):
        raise DimensionError(
            f"affine: cannot apply W of shape {w.shape} to x of shape "
            f"{x.shape} with b of shape {b.shape}")

    x_val, w_val = x.value, w.value

    def vjp(grad: np.ndarray) -> Sequence[np.ndarray]:
        return (w_val.T @ grad, np.outer(grad, x_val), grad)

    return graph._record(w_val @ x_val + b.value, (x, w, b), vjp)


def relu(x: Tensor) -> Tensor:
    """Elementwise :math:`\\max(0, x)`. The gradient at 0 is taken to be 0."""
    mask = x.value > 0

    def vjp(grad: np.ndarray) -> Sequence[np.ndarray]:
        return (np.where(mask, grad, 0.0),)

    return x.graph._record(np.where(mask, x.value, 0.0), (x,), vjp)


def embedding_lookup(table: Tensor, index: int) -> Tensor:
    """Return row *index* of the two-dimensional *table*.

    The gradient with respect to *table* is exactly zero in every row other
    than *index*.
    """
    if len(table.shape) != 2:
        raise DimensionError(
            f"embedding table must be two-dimensional, got shape {table.shape}")

    nrows = table.shape[0]
    if not 0 <= index < nrows:
        raise BoundsError(f"row {index} out of range for a table of {nrows} rows")

    table_shape = table.shape

    def vjp(grad: np.ndarray) -> Sequence[np.ndarray]:
        result = np.zeros(table_shape)
        result[index] = grad
        return (result,)

    return table.graph._record(table.value[index].copy(), (table,), vjp)


def concat(a: Tensor, b: Tensor) -> Tensor:
    """Concatenate two vectors."""
    graph = _common_graph(a, b)
    if len(a.shape) != 1 or len(b.shape) != 1:
        raise DimensionError(
            f"concat expects vectors, got shapes {a.shape} and {b.shape}")

    n = a.shape[0]

    def vjp(grad: np.ndarray) -> Sequence[np.ndarray]:
        return (grad[:n], grad[n:])

    return graph._record(np.concatenate([a.value, b.value]), (a, b), vjp)


def add(a: Tensor, b: Tensor) -> Tensor:
    graph = _common_graph(a, b)
    if a.shape != b.shape:
        raise DimensionError(f"add: shapes {a.shape} and {b.shape} differ")

    def vjp(grad: np.ndarray) -> Sequence[np.ndarray]:
        return (grad, grad)

    return graph._record(a.value + b.value, (a, b), vjp)


def multiply(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product."""
    graph = _common_graph(a, b)
    if a.shape != b.shape:
        raise DimensionError(f"multiply: shapes {a.shape} and {b.shape} differ")

    a_val, b_val = a.value, b.value

    def vjp(grad: np.ndarray) -> Sequence[np.ndarray]:
        return (grad * b_val, grad * a_val)

    return graph._record(a_val * b_val, (a, b), vjp)


def sum(x: Tensor) -> Tensor:  # noqa: A001
    """Sum of all entries, as a scalar."""
    shape = x.shape

    def vjp(grad: np.ndarray) -> Sequence[np.ndarray]:
        return (np.full(shape, float(grad)),)

    return x.graph._record(np.array(np.sum(x.value)), (x,), vjp)


def mean(terms: Sequence[Tensor]) -> Tensor:
    """Mean of scalar *terms*, summed in the given order."""
    if not terms:
        raise ContractError("mean of an empty sequence")
    graph = _common_graph(*terms)
    for term in terms:
        if term.shape != ():
            raise DimensionError(f"mean expects scalars, got shape {term.shape}")

    n = len(terms)
    total = 0.0
    for term in terms:
        total += float(term.value)

    def vjp(grad: np.ndarray) -> Sequence[np.ndarray]:
        return [grad / n for _ in range(n)]

    return graph._record(np.array(total / n), tuple(terms), vjp)


def _sigmoid(z: float) -> float:
    if z >= 0:
        return 1.0 / (1.0 + np.exp(-z))
    ez = np.exp(z)
    return ez / (1.0 + ez)


def bce_with_logits(logit: Tensor, label: int) -> Tensor:
    """Binary cross-entropy of a single logit against *label* in
    :math:`\\{0, 1\\}`, evaluated as
    :math:`\\max(z, 0) - z y + \\log(1 + e^{-|z|})`.
    """
    if logit.shape != (1,):
        raise DimensionError(f"expected a single logit, got shape {logit.shape}")
    if label not in (0, 1):
        raise ContractError(f"binary label must be 0 or 1, got {label!r}")

    z = float(logit.value[0])
    loss = max(z, 0.0) - z*label + np.log1p(np.exp(-abs(z)))
    dz = _sigmoid(z) - label

    def vjp(grad: np.ndarray) -> Sequence[np.ndarray]:
        return (np.array([float(grad) * dz]),)

    return logit.graph._record(np.array(loss), (logit,), vjp)


def cross_entropy(logits: Tensor, cls: int) -> Tensor:
    """Return :math:`-\\log \\operatorname{softmax}(\\text{logits})_{cls}`,
    using max-subtraction for stability.
    """
    if len(logits.shape) != 1:
        raise DimensionError(f"expected a logit vector, got shape {logits.shape}")
    nclasses = logits.shape[0]
    if not 0 <= cls < nclasses:
        raise BoundsError(f"class {cls} out of range for {nclasses} classes")

    shifted = logits.value - np.max(logits.value)
    exps = np.exp(shifted)
    total = np.sum(exps)
    loss = np.log(total) - shifted[cls]

    softmax = exps / total
    softmax[cls] -= 1.0

    def vjp(grad: np.ndarray) -> Sequence[np.ndarray]:
        return (float(grad) * softmax,)

    return logits.graph._record(np.array(loss), (logits,), vjp)

# }}}


# {{{ gradients

def backward(loss: Tensor) -> dict[str, np.ndarray]:
    """Return the gradient of the scalar *loss* with respect to every
    parameter leaf of its graph, keyed by leaf name in declaration order.
    Leaves that *loss* does not depend on receive zeros.
    """
    if loss.shape != ():
        raise ContractError(
            f"backward needs a scalar root, got shape {loss.shape}")

    graph = loss.graph
    grads: list[np.ndarray | None] = [None] * len(graph.nodes)
    grads[loss.index] = np.ones(())

    for node in reversed(graph.nodes[:loss.index + 1]):
        grad = grads[node.index]
        if grad is None or node.vjp is None:
            continue

        for operand, operand_grad in zip(node.inputs, node.vjp(grad), strict=True):
            if operand_grad is None:
                continue
            prev = grads[operand.index]
            grads[operand.index] = (
                    operand_grad if prev is None else prev + operand_grad)

    result = {}
    for name, leaf in graph.leaves.items():
        grad = grads[leaf.index]
        result[name] = (
                np.zeros(leaf.shape) if grad is None
                else np.array(grad, dtype=np.float64).reshape(leaf.shape))

    return result


LossBuilder: TypeAlias = Callable[[Graph, Mapping[str, Tensor]], Tensor]


def evaluate_loss(build_loss: LossBuilder, params: ParamSet) -> tuple[
        Graph, Tensor]:
    """Build a fresh graph with one leaf per entry of *params* and return it
    with the loss produced by *build_loss*.
    """
    graph = Graph()
    leaves = {name: graph.parameter(name, ary) for name, ary in params.items()}
    return graph, build_loss(graph, leaves)


def grad_check(build_loss: LossBuilder, params: ParamSet,
        eps: float = 1e-6) -> float:
    """Compare :func:`backward` against central differences.

    :arg build_loss: called as ``build_loss(graph, leaves)`` and returns a
        scalar :class:`Tensor`. It is called once per perturbed coordinate.
    :returns: the largest relative error over all coordinates, with
        denominator ``max(|analytic|, |numeric|, 1e-8)``.
    """
    if not eps > 0:
        raise ContractError(f"finite-difference step must be positive, got {eps}")

    from fedpriv.tools import central_difference_gradient

    _, loss = evaluate_loss(build_loss, params)
    analytic = ParamSet(backward(loss)).flatten()

    def f(p: ParamSet) -> float:
        return float(evaluate_loss(build_loss, p)[1].value)

    numeric = central_difference_gradient(f, params, eps).flatten()

    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return float(np.max(np.abs(analytic - numeric) / denom, initial=0.0))

# }}}

# vim: foldmethod=marker
