"""
Personalized document classifier
--------------------------------

Text is encoded into a hashed character n-gram vector and passed through
an MLP encoder. The resulting representation is concatenated with a user
embedding and fed to an MLP head producing logits::

    logits = head(encoder(featurize(text)) ++ user_embedding)

All encoder and head weights are *federated* parameters, shared by every
user. The user embedding is the *private* parameter of its user.

.. autoclass:: ModelConfig
.. autoclass:: ParameterPartition
.. autoclass:: PersonalizedClassifier

.. autofunction:: featurize
.. autofunction:: char_ngrams

.. data:: PRIVATE_PARAM_NAME
.. data:: TABLE_PARAM_NAME
"""

from __future__ import annotations


__copyright__ = "Copyright (C) 2024 fedpriv contributors"
__license__ = "MIT, see LICENSE"

from collections.abc import Mapping, Sequence
from dataclasses import dataclass, field
from typing import TypeAlias

import numpy as np

from pytools import memoize_method

import fedpriv.autodiff as ad
from fedpriv.errors import ContractError, DimensionError
from fedpriv.params import Layout, ParamSet
from fedpriv.tools import derive_seed, fnv1a_64


PRIVATE_PARAM_NAME = "user_embedding"
TABLE_PARAM_NAME = "user_embedding.table"

FeatureVector: TypeAlias = np.ndarray
LabeledFeatures: TypeAlias = tuple[FeatureVector, int]

EMBEDDING_INIT_SCALE = 0.05


# {{{ configuration

@dataclass(frozen=True)
class ModelConfig:
    """
    .. attribute:: hash_dim

        Length of the hashed feature vector.

    .. attribute:: ngram_n

        Character n-gram length.

    .. attribute:: embed_dim

        Length of the user embedding.

    .. attribute:: hidden_dims

        Widths of the encoder MLP applied to the hashed features.

    .. attribute:: head_dims

        Widths of the MLP applied to the concatenation of the text
        representation and the user embedding.

    .. attribute:: num_classes

        1 for a binary task with a single logit, :math:`C > 1` for
        multiclass classification.

    .. attribute:: personalized

        If *False*, the embedding input is the zero vector and is not
        trained.
    """

    hash_dim: int = 1024
    ngram_n: int = 2
    embed_dim: int = 4
    hidden_dims: tuple[int, ...] = (64,)
    head_dims: tuple[int, ...] = (64,)
    num_classes: int = 4
    personalized: bool = True

    def __post_init__(self) -> None:
        # JSON configs deliver lists
        object.__setattr__(self, "hidden_dims", tuple(self.hidden_dims))
        object.__setattr__(self, "head_dims", tuple(self.head_dims))

        if self.hash_dim <= 0:
            raise ContractError(f"hash_dim must be positive, got {self.hash_dim}")
        if self.ngram_n <= 0:
            raise ContractError(f"ngram_n must be positive, got {self.ngram_n}")
        if self.embed_dim <= 0:
            raise ContractError(f"embed_dim must be positive, got {self.embed_dim}")
        if self.num_classes < 1:
            raise ContractError(
                f"num_classes must be at least 1, got {self.num_classes}")
        if any(width <= 0 for width in self.hidden_dims + self.head_dims):
            raise ContractError("MLP widths must be positive")

    @property
    def is_binary(self) -> bool:
        return self.num_classes == 1

    @property
    def output_dim(self) -> int:
        return 1 if self.is_binary else self.num_classes

    @property
    def label_count(self) -> int:
        """Number of distinct valid labels."""
        return 2 if self.is_binary else self.num_classes

# }}}


# {{{ featurization

def char_ngrams(text: str, n: int) -> list[str]:
    """Overlapping character n-grams of *text*. Nonempty text shorter than
    *n* yields the text itself as its only gram.
    """
    if not text:
        return []
    if len(text) < n:
        return [text]
    return [text[i:i+n] for i in range(len(text) - n + 1)]


def featurize(text: str, config: ModelConfig) -> FeatureVector:
    """Hash the character n-grams of *text* with 64-bit FNV-1a modulo
    :attr:`ModelConfig.hash_dim`, count them, and scale the counts to unit
    Euclidean norm. Empty text maps to the zero vector.
    """
    counts = np.zeros(config.hash_dim)
    for gram in char_ngrams(text, config.ngram_n):
        counts[fnv1a_64(gram) % config.hash_dim] += 1

    norm = np.linalg.norm(counts)
    if norm > 0:
        counts /= norm

    counts.setflags(write=False)
    return counts

# }}}


# {{{ parameter partition

@dataclass(frozen=True)
class ParameterPartition:
    """The split of all trainable parameters into a shared part and
    per-user parts.

    .. attribute:: federated

        A :class:`~fedpriv.params.ParamSet` shared by all clients.

    .. attribute:: private

        A mapping from user id to that user's embedding.

    .. automethod:: check
    """

    federated: ParamSet
    private: Mapping[str, np.ndarray] = field(default_factory=dict)

    def check(self, model: PersonalizedClassifier) -> None:
        if self.federated.layout != model.federated_layout():
            raise ContractError(
                f"federated layout {self.federated.layout} does not match the "
                f"model's {model.federated_layout()}")

        for user_id, embedding in self.private.items():
            if embedding.shape != (model.config.embed_dim,):
                raise DimensionError(
                    f"embedding of user '{user_id}' has shape {embedding.shape}, "
                    f"expected ({model.config.embed_dim},)")

        model.check_partition(
            list(self.federated),
            [PRIVATE_PARAM_NAME] if model.config.personalized else [])

# }}}


# {{{ classifier

class PersonalizedClassifier:
    """
    .. automethod:: federated_layout
    .. automethod:: check_partition
    .. automethod:: init_federated
    .. automethod:: init_private
    .. automethod:: forward
    .. automethod:: predict
    .. automethod:: example_loss
    .. automethod:: batch_loss
    .. automethod:: local_loss
    .. automethod:: predict_batch
    """

    def __init__(self, config: ModelConfig) -> None:
        self.config = config

    def __repr__(self) -> str:
        return f"PersonalizedClassifier({self.config!r})"

    # {{{ layout

    def _layers(self) -> list[tuple[str, int, int]]:
        """(prefix, fan_out, fan_in) for each affine layer, in order."""
        cfg = self.config
        layers = []

        width = cfg.hash_dim
        for i, hidden in enumerate(cfg.hidden_dims):
            layers.append((f"encoder.{i}", hidden, width))
            width = hidden

        width += cfg.embed_dim
        for i, hidden in enumerate(cfg.head_dims):
            layers.append((f"head.{i}", hidden, width))
            width = hidden

        layers.append(("head.out", cfg.output_dim, width))
        return layers

    @memoize_method
    def federated_layout(self) -> Layout:
        layout: list[tuple[str, tuple[int, ...]]] = []
        for prefix, fan_out, fan_in in self._layers():
            layout.append((f"{prefix}.weight", (fan_out, fan_in)))
            layout.append((f"{prefix}.bias", (fan_out,)))
        return tuple(layout)

    def check_partition(self,
            federated_names: Sequence[str],
            private_names: Sequence[str]) -> None:
        """Check that every trainable parameter belongs to exactly one of
        the two groups.
        """
        federated = set(federated_names)
        private = set(private_names)

        overlap = federated & private
        if overlap:
            raise ContractError(
                f"parameters both federated and private: {sorted(overlap)}")

        expected = {name for name, _ in self.federated_layout()}
        if self.config.personalized:
            expected.add(PRIVATE_PARAM_NAME)

        missing = expected - (federated | private)
        extra = (federated | private) - expected
        if missing or extra:
            raise ContractError(
                f"partition mismatch: missing {sorted(missing)}, "
                f"unknown {sorted(extra)}")

    # }}}

    # {{{ initialization

    def init_federated(self, seed: int) -> ParamSet:
        """Uniform weights in :math:`\\pm 1/\\sqrt{\\text{fan-in}}`, zero
        biases.
        """
        rng = np.random.default_rng(derive_seed(seed, "federated"))
        arrays: dict[str, np.ndarray] = {}
        for prefix, fan_out, fan_in in self._layers():
            bound = 1/np.sqrt(fan_in)
            arrays[f"{prefix}.weight"] = rng.uniform(-bound, bound, (fan_out, fan_in))
            arrays[f"{prefix}.bias"] = np.zeros(fan_out)
        return ParamSet(arrays)

    def init_private(self, user_id: str, seed: int) -> np.ndarray:
        """The default embedding of *user_id*, used the first time the user
        trains or for inference before that. Zero for non-personalized
        models.
        """
        if not self.config.personalized:
            return np.zeros(self.config.embed_dim)

        rng = np.random.default_rng(derive_seed(seed, "private", user_id))
        return rng.uniform(
                -EMBEDDING_INIT_SCALE, EMBEDDING_INIT_SCALE, self.config.embed_dim)

    # }}}

    # {{{ graph construction

    def forward(self,
            federated: Mapping[str, ad.Tensor],
            user_vec: ad.Tensor,
            x: FeatureVector) -> ad.Tensor:
        """Record the logits for features *x* on the graph of *user_vec*.

        :arg federated: leaves (or constants) for every federated parameter.
        :arg user_vec: the user embedding, either a leaf, a row obtained by
            :func:`~fedpriv.autodiff.embedding_lookup`, or a constant.
        """
        cfg = self.config
        if x.shape != (cfg.hash_dim,):
            raise DimensionError(
                f"feature vector has shape {x.shape}, expected ({cfg.hash_dim},)")
        if user_vec.shape != (cfg.embed_dim,):
            raise DimensionError(
                f"user embedding has shape {user_vec.shape}, "
                f"expected ({cfg.embed_dim},)")

        h = user_vec.graph.constant(x)
        for i in range(len(cfg.hidden_dims)):
            h = ad.relu(ad.affine(
                h, federated[f"encoder.{i}.weight"], federated[f"encoder.{i}.bias"]))

        h = ad.concat(h, user_vec)
        for i in range(len(cfg.head_dims)):
            h = ad.relu(ad.affine(
                h, federated[f"head.{i}.weight"], federated[f"head.{i}.bias"]))

        return ad.affine(h, federated["head.out.weight"], federated["head.out.bias"])

    def example_loss(self, logits: ad.Tensor, label: int) -> ad.Tensor:
        if self.config.is_binary:
            return ad.bce_with_logits(logits, label)
        return ad.cross_entropy(logits, label)

    def batch_loss(self,
            federated: Mapping[str, ad.Tensor],
            user_vec: ad.Tensor,
            batch: Sequence[LabeledFeatures]) -> ad.Tensor:
        """Mean example loss of *batch* for a single user."""
        if not batch:
            raise ContractError("loss of an empty batch")
        return ad.mean([
            self.example_loss(self.forward(federated, user_vec, x), label)
            for x, label in batch])

    def _user_graph(self, w_f: Mapping[str, np.ndarray], w_p_i: np.ndarray) -> tuple[
            ad.Graph, dict[str, ad.Tensor], ad.Tensor]:
        graph = ad.Graph()
        federated = {name: graph.parameter(name, ary) for name, ary in w_f.items()}
        if self.config.personalized:
            user_vec = graph.parameter(PRIVATE_PARAM_NAME, w_p_i)
        else:
            user_vec = graph.constant(np.zeros(self.config.embed_dim))
        return graph, federated, user_vec

    def predict(self, w_f: Mapping[str, np.ndarray], w_p_i: np.ndarray, x: FeatureVector
            ) -> ad.Tensor:
        """Record the logits of one example on a fresh graph whose leaves
        are *w_f* and (for personalized models) *w_p_i*. Call
        :func:`~fedpriv.autodiff.backward` on a loss built from the result to
        obtain gradients for both.
        """
        _, federated, user_vec = self._user_graph(w_f, w_p_i)
        return self.forward(federated, user_vec, x)

    def local_loss(self, w_f: Mapping[str, np.ndarray], w_p_i: np.ndarray,
            batch: Sequence[LabeledFeatures]) -> ad.Tensor:
        """The local training loss of one user. Only that user's embedding
        is part of the graph, so the loss is independent of every other
        user's private parameters by construction.
        """
        _, federated, user_vec = self._user_graph(w_f, w_p_i)
        return self.batch_loss(federated, user_vec, batch)

    # }}}

    # {{{ vectorized inference

    def predict_batch(self, w_f: ParamSet, embeddings: np.ndarray,
            features: np.ndarray) -> np.ndarray:
        """Logits for many examples at once, without recording a graph.

        :arg embeddings: shape ``(nexamples, embed_dim)``, the embedding of
            each example's user.
        :arg features: shape ``(nexamples, hash_dim)``.
        :returns: shape ``(nexamples, output_dim)``.
        """
        cfg = self.config
        if not cfg.personalized:
            embeddings = np.zeros_like(embeddings)

        h = features
        for i in range(len(cfg.hidden_dims)):
            h = np.maximum(
                h @ w_f[f"encoder.{i}.weight"].T + w_f[f"encoder.{i}.bias"], 0)

        h = np.concatenate([h, embeddings], axis=1)
        for i in range(len(cfg.head_dims)):
            h = np.maximum(h @ w_f[f"head.{i}.weight"].T + w_f[f"head.{i}.bias"], 0)

        return h @ w_f["head.out.weight"].T + w_f["head.out.bias"]

    # }}}

# }}}

# vim: foldmethod=marker
