__copyright__ = "Copyright (C) 2024 fedpriv contributors"
__license__ = "MIT, see LICENSE"

import logging

import numpy as np
import pytest

import fedpriv.autodiff as ad
from fedpriv.errors import BoundsError, ContractError, DimensionError
from fedpriv.model import ModelConfig, PersonalizedClassifier, featurize
from fedpriv.params import ParamSet


logger = logging.getLogger(__name__)


# {{{ forward operations

@pytest.mark.parametrize(("w", "b", "x", "expected"), [
    ([[1, 0], [0, 1]], [0, 0], [5, -1], [5, -1]),
    ([[1, 2], [3, 4]], [0.5, -0.5], [1, 1], [3.5, 6.5]),
    ])
def test_affine(w, b, x, expected):
    graph = ad.Graph()
    y = ad.affine(graph.constant(np.array(x, dtype=np.float64)),
            graph.parameter("w", np.array(w, dtype=np.float64)),
            graph.parameter("b", np.array(b, dtype=np.float64)))

    assert np.array_equal(y.value, expected)
    assert y.shape == (2,)


def test_affine_dimension_mismatch():
    graph = ad.Graph()
    with pytest.raises(DimensionError):
        ad.affine(graph.constant(np.ones(3)),
                graph.parameter("w", np.eye(2)),
                graph.parameter("b", np.zeros(2)))


def test_relu():
    graph = ad.Graph()
    assert np.array_equal(
        ad.relu(graph.constant(np.array([-1.0, 0.0, 2.0]))).value, [0, 0, 2])
    assert np.array_equal(
        ad.relu(graph.constant(-np.ones(4))).value, np.zeros(4))

    x = graph.parameter("x", np.array([-1.0, 2.0]))
    grads = ad.backward(ad.sum(ad.relu(x)))
    assert np.array_equal(grads["x"], [0, 1])

    # gradient at the kink is zero
    graph = ad.Graph()
    x = graph.parameter("x", np.array([0.0]))
    assert np.array_equal(ad.backward(ad.sum(ad.relu(x)))["x"], [0])


def test_embedding_lookup():
    graph = ad.Graph()
    table = graph.parameter("table", np.array([[1.0, 2.0], [3.0, 4.0]]))
    row = ad.embedding_lookup(table, 1)
    assert np.array_equal(row.value, [3, 4])

    grads = ad.backward(ad.sum(row))
    assert np.array_equal(grads["table"], [[0, 0], [1, 1]])

    with pytest.raises(BoundsError):
        ad.embedding_lookup(table, 2)
    with pytest.raises(BoundsError):
        ad.embedding_lookup(table, -1)


def test_lookup_leaves_other_rows_exactly_zero():
    rng = np.random.default_rng(17)
    graph = ad.Graph()
    table = graph.parameter("table", rng.normal(size=(5, 3)))
    w = graph.parameter("w", rng.normal(size=(2, 3)))
    b = graph.parameter("b", rng.normal(size=2))

    loss = ad.cross_entropy(ad.affine(ad.embedding_lookup(table, 3), w, b), 1)
    grad = ad.backward(loss)["table"]

    assert np.any(grad[3] != 0)
    for row in (0, 1, 2, 4):
        assert np.array_equal(grad[row], np.zeros(3))

# }}}


# {{{ losses

def test_bce_with_logits():
    graph = ad.Graph()
    z = graph.parameter("z", np.array([0.0]))
    loss = ad.bce_with_logits(z, 1)
    assert abs(float(loss.value) - np.log(2)) < 1e-15
    assert ad.backward(loss)["z"][0] == -0.5

    graph = ad.Graph()
    loss = ad.bce_with_logits(graph.constant(np.array([100.0])), 1)
    assert np.isfinite(loss.value)
    assert float(loss.value) < 1e-10

    graph = ad.Graph()
    loss = ad.bce_with_logits(graph.constant(np.array([-100.0])), 1)
    assert abs(float(loss.value) - 100) < 1e-10


def test_cross_entropy():
    graph = ad.Graph()
    logits = graph.parameter("logits", np.full(4, 0.7))
    loss = ad.cross_entropy(logits, 2)
    assert abs(float(loss.value) - np.log(4)) < 1e-12
    assert abs(np.sum(ad.backward(loss)["logits"])) < 1e-15

    graph = ad.Graph()
    loss = ad.cross_entropy(graph.constant(np.array([10.0, 0, 0, 0])), 0)
    assert float(loss.value) < 1e-3

    graph = ad.Graph()
    with pytest.raises(BoundsError):
        ad.cross_entropy(graph.constant(np.zeros(4)), 4)


def test_cross_entropy_large_logits_finite():
    graph = ad.Graph()
    logits = graph.parameter("logits", np.array([1000.0, -1000.0, 0.0]))
    loss = ad.cross_entropy(logits, 1)
    assert np.isfinite(loss.value)
    assert np.all(np.isfinite(ad.backward(loss)["logits"]))

# }}}


# {{{ backward

def test_backward_square():
    graph = ad.Graph()
    w = graph.parameter("w", np.array([3.0]))
    grads = ad.backward(ad.sum(ad.multiply(w, w)))
    assert grads["w"][0] == 6


def test_backward_unused_leaf_is_zero():
    graph = ad.Graph()
    w = graph.parameter("w", np.array([3.0, 1.0]))
    graph.parameter("p", np.ones((2, 2)))
    grads = ad.backward(ad.sum(w))

    assert list(grads) == ["w", "p"]
    assert np.array_equal(grads["p"], np.zeros((2, 2)))


def test_backward_needs_scalar():
    graph = ad.Graph()
    w = graph.parameter("w", np.ones(2))
    with pytest.raises(ContractError):
        ad.backward(w)


def test_duplicate_and_nonfinite_parameters():
    graph = ad.Graph()
    graph.parameter("w", np.ones(2))
    with pytest.raises(ContractError):
        graph.parameter("w", np.ones(2))
    with pytest.raises(ContractError):
        graph.parameter("v", np.array([np.nan]))


def test_backward_deterministic():
    rng = np.random.default_rng(3)
    params = ParamSet({"w": rng.normal(size=(3, 4)), "b": rng.normal(size=3)})
    x = rng.normal(size=4)

    def build_loss(graph, leaves):
        return ad.cross_entropy(
            ad.relu(ad.affine(graph.constant(x), leaves["w"], leaves["b"])), 0)

    first = ad.backward(ad.evaluate_loss(build_loss, params)[1])
    second = ad.backward(ad.evaluate_loss(build_loss, params)[1])
    for name in first:
        assert np.array_equal(first[name], second[name])

# }}}


# {{{ gradient checks

def test_grad_check_quadratic():
    params = ParamSet({"w": np.array([1.5])})

    def build_loss(graph, leaves):
        return ad.sum(ad.multiply(leaves["w"], leaves["w"]))

    assert ad.grad_check(build_loss, params) < 1e-8


def test_grad_check_composite_affine_relu_bce():
    rng = np.random.default_rng(5)
    params = ParamSet({
        "w1": rng.uniform(-1, 1, size=(4, 3)),
        "b1": rng.uniform(-1, 1, size=4),
        "w2": rng.uniform(-1, 1, size=(1, 4)),
        "b2": rng.uniform(-1, 1, size=1),
        })
    x = np.array([0.5, -1.0, 2.0])

    def build_loss(graph, leaves):
        h = ad.relu(ad.affine(graph.constant(x), leaves["w1"], leaves["b1"]))
        return ad.bce_with_logits(ad.affine(h, leaves["w2"], leaves["b2"]), 1)

    _, loss = ad.evaluate_loss(build_loss, params)
    analytic = ParamSet(ad.backward(loss)).flatten()

    from fedpriv.tools import central_difference_gradient

    numeric = central_difference_gradient(
        lambda p: float(ad.evaluate_loss(build_loss, p)[1].value),
        params, 1e-6).flatten()
    assert np.allclose(analytic, numeric, rtol=1e-5, atol=1e-9)


def test_grad_check_rejects_bad_step():
    params = ParamSet({"w": np.array([1.0])})
    with pytest.raises(ContractError):
        ad.grad_check(lambda graph, leaves: ad.sum(leaves["w"]), params, eps=0)


def _classifier_loss_builder(model, batch):
    from fedpriv.model import PRIVATE_PARAM_NAME

    def build_loss(graph, leaves):
        return model.batch_loss(leaves, leaves[PRIVATE_PARAM_NAME], batch)

    return build_loss


@pytest.mark.parametrize("seed", range(10))
def test_grad_check_linear_classifier(seed):
    rng = np.random.default_rng(seed)
    config = ModelConfig(hash_dim=16, embed_dim=3,
            hidden_dims=(), head_dims=(), num_classes=4)
    model = PersonalizedClassifier(config)

    params = model.init_federated(seed).with_entry(
            "user_embedding", rng.uniform(-1, 1, 3))
    batch = [(featurize(f"topic{seed} w{seed}a", config), int(rng.integers(4)))]

    assert ad.grad_check(_classifier_loss_builder(model, batch), params) <= 1e-5


@pytest.mark.parametrize("seed", range(10))
def test_grad_check_hidden_layer_classifier(seed):
    rng = np.random.default_rng(seed)
    config = ModelConfig(hash_dim=16, embed_dim=3,
            hidden_dims=(5,), head_dims=(4,), num_classes=4)
    model = PersonalizedClassifier(config)

    params = model.init_federated(seed).with_entry(
            "user_embedding", rng.uniform(-0.5, 0.5, 3))
    batch = [
        (featurize(text, config), int(rng.integers(4)))
        for text in (f"topic{seed} w{seed}a w{seed}b", "topic9 w9a w9b", "hello")]

    assert ad.grad_check(_classifier_loss_builder(model, batch), params) <= 1e-5


@pytest.mark.parametrize("num_classes", [1, 4])
def test_gradients_full_classifier(num_classes):
    from fedpriv.tools import central_difference_gradient

    rng = np.random.default_rng(num_classes)
    config = ModelConfig(hash_dim=16, embed_dim=3,
            hidden_dims=(5,), head_dims=(4,), num_classes=num_classes)
    model = PersonalizedClassifier(config)

    params = model.init_federated(7).with_entry(
            "user_embedding", rng.uniform(-0.5, 0.5, 3))
    batch = [
        (featurize(text, config), int(rng.integers(config.label_count)))
        for text in ("topic1 w1a w1b", "topic2 w2a w2b", "hello")]
    build_loss = _classifier_loss_builder(model, batch)

    analytic = ParamSet(ad.backward(ad.evaluate_loss(build_loss, params)[1]))
    numeric = central_difference_gradient(
        lambda p: float(ad.evaluate_loss(build_loss, p)[1].value), params, 1e-6)

    assert np.allclose(analytic.flatten(), numeric.flatten(),
            rtol=1e-5, atol=1e-8)

# }}}


# You can test individual routines by typing
# $ python test_autodiff.py 'test_routine()'

if __name__ == "__main__":
    import sys
    if len(sys.argv) > 1:
        exec(sys.argv[1])
    else:
        pytest.main([__file__])

# vim: fdm=marker
