"""
Datasets
--------

Labeled text records keyed by user, a synthetic generator in which the
label depends jointly on the text and on a latent per-user cluster, JSON
Lines ingestion, and the per-user train/eval/test split.

.. autoclass:: Example
.. autoclass:: SyntheticSpec
.. autoclass:: DatasetSplit
.. autoclass:: DatasetStats

.. autofunction:: generate_synthetic
.. autofunction:: assign_clusters
.. autofunction:: topic_text
.. autofunction:: split_dataset
.. autofunction:: load_jsonl
.. autofunction:: write_jsonl
.. autofunction:: load_clusters
.. autofunction:: write_clusters
.. autofunction:: dataset_stats
.. autofunction:: split_stats
.. autofunction:: featurize_examples
"""

from __future__ import annotations


__copyright__ = "Copyright (C) 2024 fedpriv contributors"
__license__ = "MIT, see LICENSE"

import json
import logging
from collections.abc import Iterable, Mapping, Sequence
from dataclasses import dataclass
from os import PathLike
from pathlib import Path
from typing import NamedTuple

import numpy as np

from fedpriv.errors import ContractError, DataFormatError
from fedpriv.model import LabeledFeatures, ModelConfig, featurize
from fedpriv.tools import derive_seed


logger = logging.getLogger(__name__)

MIN_EXAMPLES_PER_USER = 10


# {{{ records

@dataclass(frozen=True)
class Example:
    """
    .. attribute:: user_id
    .. attribute:: text
    .. attribute:: label
    """

    user_id: str
    text: str
    label: int


def group_by_user(examples: Iterable[Example]) -> dict[str, list[Example]]:
    """Group *examples* by user, keeping their order. Users appear in
    order of first occurrence.
    """
    result: dict[str, list[Example]] = {}
    for ex in examples:
        result.setdefault(ex.user_id, []).append(ex)
    return result

# }}}


# {{{ synthetic data

@dataclass(frozen=True)
class SyntheticSpec:
    """Parameters of the synthetic non-IID generator.

    Each user belongs to one of :attr:`n_clusters` latent clusters. Each
    example is about one of :attr:`n_topics` topics and its label is
    ``(topic + cluster) mod n_clusters``, so the text alone reveals nothing
    about the label, while text and user identity together determine it up
    to label noise.

    .. attribute:: topic_skew

        If positive, each user draws topics from a Zipf distribution with
        this exponent over a user-specific topic ranking instead of
        uniformly.
    """

    n_users: int = 100
    n_clusters: int = 4
    examples_per_user: int = 60
    n_topics: int = 16
    label_noise: float = 0.05
    topic_skew: float = 0.0
    seed: int = 0

    def __post_init__(self) -> None:
        if self.n_users < 1:
            raise ContractError(f"n_users must be positive, got {self.n_users}")
        if self.n_clusters < 2:
            raise ContractError(
                f"n_clusters must be at least 2, got {self.n_clusters}")
        if self.n_topics < self.n_clusters:
            raise ContractError(
                f"n_topics ({self.n_topics}) must be at least the number of "
                f"classes ({self.n_clusters})")
        if self.examples_per_user < MIN_EXAMPLES_PER_USER:
            raise ContractError(
                f"examples_per_user must be at least {MIN_EXAMPLES_PER_USER}, "
                f"got {self.examples_per_user}")
        if not 0 <= self.label_noise < 1:
            raise ContractError(
                f"label_noise must lie in [0, 1), got {self.label_noise}")
        if self.topic_skew < 0:
            raise ContractError(
                f"topic_skew must be nonnegative, got {self.topic_skew}")
        if self.seed < 0:
            raise ContractError(f"seed must be nonnegative, got {self.seed}")

    @property
    def num_classes(self) -> int:
        return self.n_clusters

    def user_ids(self) -> list[str]:
        width = max(3, len(str(self.n_users - 1)))
        return [f"u{i:0{width}d}" for i in range(self.n_users)]


def topic_text(topic: int) -> str:
    return f"topic{topic} w{topic}a w{topic}b"


def assign_clusters(spec: SyntheticSpec) -> dict[str, int]:
    """Draw each user's latent cluster uniformly. This is the ground truth
    for embedding-structure analysis and is never seen by training.
    """
    rng = np.random.default_rng(derive_seed(spec.seed, "clusters"))
    clusters = rng.integers(spec.n_clusters, size=spec.n_users)
    return {
        user_id: int(cluster)
        for user_id, cluster in zip(spec.user_ids(), clusters, strict=True)}


def _topic_distribution(spec: SyntheticSpec, rng: np.random.Generator
        ) -> np.ndarray | None:
    if spec.topic_skew == 0:
        return None

    ranking = rng.permutation(spec.n_topics)
    weights = 1 / np.arange(1, spec.n_topics + 1)**spec.topic_skew
    probs = np.empty(spec.n_topics)
    probs[ranking] = weights / np.sum(weights)
    return probs


def generate_synthetic(spec: SyntheticSpec) -> list[Example]:
    """Generate ``n_users * examples_per_user`` examples, grouped by user in
    :meth:`SyntheticSpec.user_ids` order. With probability
    :attr:`SyntheticSpec.label_noise` the label is replaced by one of the
    other labels, chosen uniformly. The result depends only on *spec*.
    """
    clusters = assign_clusters(spec)
    rng = np.random.default_rng(derive_seed(spec.seed, "examples"))
    nclasses = spec.num_classes

    examples = []
    for user_id in spec.user_ids():
        cluster = clusters[user_id]
        probs = _topic_distribution(spec, rng)

        for _ in range(spec.examples_per_user):
            if probs is None:
                topic = int(rng.integers(spec.n_topics))
            else:
                topic = int(rng.choice(spec.n_topics, p=probs))

            label = (topic + cluster) % nclasses

            # always draw both, so the stream does not depend on the outcome
            flip = rng.random() < spec.label_noise
            offset = int(rng.integers(nclasses - 1))
            if flip:
                label = (label + 1 + offset) % nclasses

            examples.append(Example(user_id, topic_text(topic), label))

    logger.info("generated %d examples for %d users",
            len(examples), spec.n_users)
    return examples

# }}}


# {{{ splitting

@dataclass(frozen=True)
class DatasetSplit:
    """Per-user example lists.

    .. attribute:: train
    .. attribute:: eval
    .. attribute:: test

    .. automethod:: user_ids
    .. automethod:: by_name
    """

    train: Mapping[str, list[Example]]
    eval: Mapping[str, list[Example]]
    test: Mapping[str, list[Example]]

    def user_ids(self) -> list[str]:
        return sorted(self.train)

    def by_name(self, name: str) -> Mapping[str, list[Example]]:
        if name not in ("train", "eval", "test"):
            raise ContractError(f"unknown split '{name}'")
        return getattr(self, name)


def split_dataset(examples: Iterable[Example],
        min_examples: int = MIN_EXAMPLES_PER_USER) -> DatasetSplit:
    """Split each user's examples, in their given order, into the first
    80%, the next 10% and the last 10%. The eval and test shares are rounded
    down; the remainder goes to train.
    """
    train, eval_, test = {}, {}, {}
    for user_id, user_examples in group_by_user(examples).items():
        n = len(user_examples)
        if n < min_examples:
            raise ContractError(
                f"user '{user_id}' has {n} examples, at least {min_examples} "
                "are needed for a train/eval/test split")

        n_holdout = n // 10
        n_train = n - 2*n_holdout
        train[user_id] = user_examples[:n_train]
        eval_[user_id] = user_examples[n_train:n_train + n_holdout]
        test[user_id] = user_examples[n_train + n_holdout:]

    return DatasetSplit(train=train, eval=eval_, test=test)

# }}}


# {{{ file formats

def load_jsonl(path: str | PathLike[str],
        num_labels: int | None = None) -> list[Example]:
    """Read one :class:`Example` per nonblank line of a JSON Lines file.
    Each line must be an object with keys ``user_id``, ``text`` and
    ``label``.

    :arg num_labels: if given, labels must lie in ``[0, num_labels)``.
    :raises DataFormatError: naming the offending line.
    """
    examples = []
    with open(path, encoding="utf-8") as inf:
        for lineno, line in enumerate(inf, start=1):
            if not line.strip():
                continue

            try:
                record = json.loads(line)
            except json.JSONDecodeError as err:
                raise DataFormatError(f"invalid JSON: {err.msg}", lineno) from err

            if not isinstance(record, dict):
                raise DataFormatError("expected a JSON object", lineno)

            for key in ("user_id", "text", "label"):
                if key not in record:
                    raise DataFormatError(f"missing key '{key}'", lineno)

            user_id, text, label = record["user_id"], record["text"], record["label"]
            if not isinstance(user_id, str) or not isinstance(text, str):
                raise DataFormatError("'user_id' and 'text' must be strings", lineno)
            if isinstance(label, bool) or not isinstance(label, int):
                raise DataFormatError(f"label must be an integer, got {label!r}",
                        lineno)
            if num_labels is not None and not 0 <= label < num_labels:
                raise DataFormatError(
                    f"label {label} out of range [0, {num_labels})", lineno)

            examples.append(Example(user_id, text, label))

    return examples


def write_jsonl(examples: Iterable[Example], path: str | PathLike[str]) -> None:
    with open(path, "w", encoding="utf-8") as outf:
        for ex in examples:
            outf.write(json.dumps(
                {"user_id": ex.user_id, "text": ex.text, "label": ex.label}))
            outf.write("\n")


def write_clusters(clusters: Mapping[str, int], path: str | PathLike[str]) -> None:
    Path(path).write_text(
            json.dumps(dict(sorted(clusters.items())), indent=2) + "\n",
            encoding="utf-8")


def load_clusters(path: str | PathLike[str]) -> dict[str, int]:
    data = json.loads(Path(path).read_text(encoding="utf-8"))
    if not isinstance(data, dict):
        raise DataFormatError(f"'{path}' does not hold a user-to-cluster object")
    return {str(user_id): int(cluster) for user_id, cluster in data.items()}

# }}}


# {{{ statistics

class DatasetStats(NamedTuple):
    n_users: int
    n_samples: int
    mean_samples_per_user: float


def dataset_stats(examples: Iterable[Example]) -> DatasetStats:
    counts = [len(exs) for exs in group_by_user(examples).values()]
    if not counts:
        return DatasetStats(0, 0, 0.0)
    return DatasetStats(len(counts), sum(counts), sum(counts)/len(counts))


def split_stats(split: DatasetSplit) -> dict[str, DatasetStats]:
    """Sample and user counts of each split. Users with no example in a
    split are not counted for it.
    """
    return {
        name: dataset_stats(
            ex for exs in split.by_name(name).values() for ex in exs)
        for name in ("train", "eval", "test")}

# }}}


def featurize_examples(
        by_user: Mapping[str, Sequence[Example]],
        config: ModelConfig) -> dict[str, list[LabeledFeatures]]:
    """Featurize every example once. Identical texts share one (read-only)
    feature vector.
    """
    cache: dict[str, np.ndarray] = {}

    def features(text: str) -> np.ndarray:
        try:
            return cache[text]
        except KeyError:
            result = cache[text] = featurize(text, config)
            return result

    return {
        user_id: [(features(ex.text), ex.label) for ex in exs]
        for user_id, exs in by_user.items()}

# vim: foldmethod=marker
