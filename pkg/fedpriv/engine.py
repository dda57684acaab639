"""
Federated and centralized training
----------------------------------

Federated training alternates two steps. In *local training*, each sampled
client copies the current federated parameters and its own private
embedding and runs minibatch SGD on its training data. In *global
aggregation*, the server combines the federated deltas of all participants
by example-weighted averaging (Federated Averaging), while each private
delta is applied on its own client and never leaves it.

Training configurations
^^^^^^^^^^^^^^^^^^^^^^^

.. data:: MODES

    ``global_server``, ``personalized_server``, ``global_fl``,
    ``personalized_fl``: with or without user embeddings, trained centrally
    or federated.

.. data:: PRIVATE_UPDATE_RULES

.. autoclass:: RunConfig

State
^^^^^

.. autoclass:: ClientUpdate
.. autoclass:: FederatedUpload
.. autoclass:: ClientRecord
.. autoclass:: ClientStore
.. autoclass:: GlobalState
.. autoclass:: MetricRecord

Operations
^^^^^^^^^^

.. autofunction:: local_train
.. autofunction:: aggregate_federated
.. autofunction:: update_private
.. autofunction:: sample_clients
.. autofunction:: run_fl_round
.. autofunction:: run_fl
.. autofunction:: run_centralized
.. autofunction:: evaluate
.. autofunction:: client_embeddings
"""

from __future__ import annotations


__copyright__ = "Copyright (C) 2024 fedpriv contributors"
__license__ = "MIT, see LICENSE"

import logging
from collections.abc import Callable, Iterator, Mapping, Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import TypeAlias
from warnings import warn

import numpy as np

from pytools import ProcessLogger

import fedpriv.autodiff as ad
from fedpriv.errors import (
    AggregationError,
    ContractError,
    DimensionError,
    EmptyClientWarning,
    MetricSkippedWarning,
    UndefinedMetricError,
)
from fedpriv.metrics import EvalResult, accuracy, auc
from fedpriv.model import (
    PRIVATE_PARAM_NAME,
    TABLE_PARAM_NAME,
    LabeledFeatures,
    ParameterPartition,
    PersonalizedClassifier,
)
from fedpriv.params import ParamSet, check_same_layout
from fedpriv.tools import derive_seed


logger = logging.getLogger(__name__)

ClientData: TypeAlias = Mapping[str, Sequence[LabeledFeatures]]

MODES = ("global_server", "personalized_server", "global_fl", "personalized_fl")
PRIVATE_UPDATE_RULES = ("scaled", "retain")


# {{{ configuration

@dataclass(frozen=True)
class RunConfig:
    """
    .. attribute:: mode

        One of :data:`MODES`.

    .. attribute:: users_per_round

        Clients sampled per federated round.

    .. attribute:: local_epochs

        Passes over its data each client makes per round.

    .. attribute:: rounds

        Number of federated rounds (federated modes).

    .. attribute:: epochs

        Number of passes over the pooled training data (server modes).

    .. attribute:: lr
    .. attribute:: batch_size

    .. attribute:: private_update

        ``"retain"`` keeps each client's locally trained embedding,
        ``"scaled"`` applies its delta scaled by the client's share of the
        round's examples, as Federated Averaging would if the embedding
        were a federated parameter.

    .. attribute:: eval_every

        Evaluate after every this many rounds (or epochs).

    .. attribute:: seed
    """

    mode: str = "personalized_fl"
    users_per_round: int = 10
    local_epochs: int = 1
    rounds: int = 400
    epochs: int = 40
    lr: float = 0.5
    batch_size: int = 32
    private_update: str = "retain"
    eval_every: int = 1
    seed: int = 0

    def __post_init__(self) -> None:
        if self.mode not in MODES:
            raise ContractError(f"unknown mode '{self.mode}'")
        if self.private_update not in PRIVATE_UPDATE_RULES:
            raise ContractError(
                f"unknown private update rule '{self.private_update}'")
        if not self.lr >= 0:
            raise ContractError(f"lr must be nonnegative, got {self.lr}")
        if self.users_per_round < 1:
            raise ContractError(
                f"users_per_round must be positive, got {self.users_per_round}")
        for name in ("local_epochs", "batch_size", "eval_every"):
            if getattr(self, name) < 1:
                raise ContractError(f"{name} must be positive")
        if self.rounds < 0 or self.epochs < 0:
            raise ContractError("rounds and epochs must be nonnegative")
        if self.seed < 0:
            raise ContractError(f"seed must be nonnegative, got {self.seed}")

    @property
    def is_federated(self) -> bool:
        return self.mode.endswith("_fl")

    @property
    def is_personalized(self) -> bool:
        return self.mode.startswith("personalized")

# }}}


# {{{ state

@dataclass(frozen=True)
class FederatedUpload:
    """What a client sends to the server: its federated delta and example
    count, nothing else.
    """

    client_id: str
    delta_federated: ParamSet
    num_examples: int


@dataclass(frozen=True)
class ClientUpdate:
    """Result of one client's local training.

    .. attribute:: client_id
    .. attribute:: delta_federated
    .. attribute:: delta_private

        Stays on the client.

    .. attribute:: num_examples

    .. automethod:: upload
    """

    client_id: str
    delta_federated: ParamSet
    delta_private: np.ndarray
    num_examples: int

    def upload(self) -> FederatedUpload:
        return FederatedUpload(
            self.client_id, self.delta_federated, self.num_examples)


@dataclass(frozen=True)
class ClientRecord:
    """What a device keeps between rounds."""

    embedding: np.ndarray
    last_round: int


class ClientStore:
    """Per-device storage of private embeddings, keyed by user id. Only
    clients write to it; nothing in it reaches the server.

    .. automethod:: get
    .. automethod:: embedding
    .. automethod:: put
    .. automethod:: embeddings
    """

    def __init__(self, records: Mapping[str, ClientRecord] | None = None) -> None:
        self._records: dict[str, ClientRecord] = dict(records or {})

    def __contains__(self, user_id: object) -> bool:
        return user_id in self._records

    def __len__(self) -> int:
        return len(self._records)

    def __iter__(self) -> Iterator[str]:
        return iter(sorted(self._records))

    def get(self, user_id: str) -> ClientRecord:
        return self._records[user_id]

    def embedding(self, user_id: str, default: Callable[[], np.ndarray]
            ) -> np.ndarray:
        """The stored embedding of *user_id*, or ``default()`` if the user
        has not trained yet.
        """
        record = self._records.get(user_id)
        if record is None:
            return default()
        return record.embedding

    def put(self, user_id: str, embedding: np.ndarray, last_round: int) -> None:
        embedding = np.array(embedding, dtype=np.float64, copy=True)
        embedding.setflags(write=False)
        self._records[user_id] = ClientRecord(embedding, last_round)

    def embeddings(self) -> dict[str, np.ndarray]:
        """All stored embeddings, sorted by user id."""
        return {uid: self._records[uid].embedding for uid in self}


@dataclass(frozen=True)
class GlobalState:
    """Server-side state: the federated parameters after :attr:`round`
    rounds.
    """

    w_f: ParamSet
    round: int


@dataclass(frozen=True)
class MetricRecord:
    """One row of a metrics table. *round* is the federated round or the
    centralized epoch.
    """

    round: int
    mode: str
    split: str
    metric: str
    value: float

# }}}


# {{{ local training

def _sgd_step(arrays: dict[str, np.ndarray], grads: Mapping[str, np.ndarray],
        lr: float) -> None:
    for name, ary in arrays.items():
        ary -= lr * grads[name]


def local_train(
        model: PersonalizedClassifier,
        w_f: ParamSet,
        w_p_i: np.ndarray,
        data_i: Sequence[LabeledFeatures],
        cfg: RunConfig, *,
        round_: int = 0,
        client_id: str = "") -> ClientUpdate | None:
    """Run :attr:`RunConfig.local_epochs` passes of minibatch SGD on one
    client, starting from *w_f* and *w_p_i*. Each pass visits the data in
    an order drawn from ``(seed, round_, client_id)``.

    :returns: the deltas of both parameter groups, or *None* if *data_i* is
        empty (the client is skipped with an :class:`EmptyClientWarning`).
    """
    if not data_i:
        logger.warning("client '%s' has no training data, skipping", client_id)
        warn(f"client '{client_id}' has no training data, skipping",
                EmptyClientWarning, stacklevel=2)
        return None

    u_f = w_f.copy_arrays()
    u_p = np.array(w_p_i, dtype=np.float64, copy=True)
    personalized = model.config.personalized

    rng = np.random.default_rng(derive_seed(cfg.seed, round_, client_id))
    n = len(data_i)

    for _ in range(cfg.local_epochs):
        order = rng.permutation(n)
        for start in range(0, n, cfg.batch_size):
            batch = [data_i[k] for k in order[start:start + cfg.batch_size]]
            grads = ad.backward(model.local_loss(u_f, u_p, batch))

            _sgd_step(u_f, grads, cfg.lr)
            if personalized:
                u_p -= cfg.lr * grads[PRIVATE_PARAM_NAME]

    return ClientUpdate(
        client_id=client_id,
        delta_federated=ParamSet(u_f).subtract(w_f),
        delta_private=u_p - w_p_i,
        num_examples=n)

# }}}


# {{{ aggregation

def aggregate_federated(w_f: ParamSet,
        uploads: Sequence[FederatedUpload]) -> ParamSet:
    """Federated Averaging in delta form,
    :math:`w + \\sum_i c_i d_i / \\sum_i c_i`.

    Uploads are summed in ascending client id order, whatever order they
    arrived in, so the result is bitwise independent of arrival order.

    :raises AggregationError: if the example counts sum to zero.
    :raises ContractError: if a delta's layout differs from *w_f*'s.
    """
    if not uploads:
        raise ContractError("nothing to aggregate")

    uploads = sorted(uploads, key=lambda upload: upload.client_id)
    check_same_layout(w_f, *(upload.delta_federated for upload in uploads))

    total_weight = sum(upload.num_examples for upload in uploads)
    if total_weight == 0:
        raise AggregationError("client example counts sum to zero")

    result = {}
    for name, w in w_f.items():
        weighted_sum = np.zeros_like(w)
        for upload in uploads:
            weighted_sum = weighted_sum + upload.delta_federated[name]*upload.num_examples
        result[name] = w + weighted_sum / total_weight

    new_w_f = ParamSet(result)
    if not new_w_f.is_finite():
        raise AggregationError("aggregated parameters are not finite")
    return new_w_f


def update_private(w_p_i: np.ndarray, delta: np.ndarray,
        c_i: int, c_total: int, rule: str) -> np.ndarray:
    """Apply a client's private delta on the client.

    ``"scaled"`` computes :math:`w + (d c_i) / c_\\text{total}`, which is what
    Federated Averaging over a shared embedding table would produce for
    this user's row, since no other client changes it. ``"retain"`` computes
    :math:`w + d`, i.e. keeps the locally trained value.
    """
    if not c_total >= c_i >= 1:
        raise ContractError(
            f"need c_total >= c_i >= 1, got c_i={c_i}, c_total={c_total}")
    if w_p_i.shape != delta.shape:
        raise DimensionError(
            f"embedding of shape {w_p_i.shape} and delta of shape "
            f"{delta.shape} differ")

    if rule == "scaled":
        return w_p_i + (delta * c_i) / c_total
    elif rule == "retain":
        return w_p_i + delta
    else:
        raise ContractError(f"unknown private update rule '{rule}'")

# }}}


# {{{ federated rounds

def sample_clients(n_users: int, k: int, round_: int, seed: int) -> list[int]:
    """Draw *k* distinct user ordinals out of *n_users* uniformly without
    replacement, determined by *(seed, round_)*, in ascending order.
    """
    if not 1 <= k <= n_users:
        raise ContractError(
            f"cannot sample {k} clients out of {n_users} users")

    rng = np.random.default_rng(derive_seed(seed, "sample", round_))
    return sorted(int(i) for i in rng.choice(n_users, size=k, replace=False))


def client_embeddings(model: PersonalizedClassifier, store: ClientStore,
        user_ids: Sequence[str], seed: int) -> dict[str, np.ndarray]:
    """The embedding each of *user_ids* would use for inference on its
    device: the stored one, or the default one for users that never
    trained.
    """
    return {
        user_id: store.embedding(
            user_id, lambda user_id=user_id: model.init_private(user_id, seed))
        for user_id in user_ids}


def run_fl_round(
        model: PersonalizedClassifier,
        state: GlobalState,
        store: ClientStore,
        train: ClientData,
        cfg: RunConfig, *,
        threads: int = 1) -> tuple[GlobalState, list[ClientUpdate]]:
    """Run federated round ``state.round + 1``. Updates *store* in place
    for personalized models.
    """
    round_ = state.round + 1
    user_ids = sorted(train)
    participants = [
        user_ids[i]
        for i in sample_clients(len(user_ids), cfg.users_per_round, round_, cfg.seed)]
    logger.debug("round %d: participants %s", round_, participants)

    def train_client(user_id: str) -> ClientUpdate | None:
        w_p_i = store.embedding(
                user_id, lambda: model.init_private(user_id, cfg.seed))
        return local_train(model, state.w_f, w_p_i, train[user_id], cfg,
                round_=round_, client_id=user_id)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as executor:
            results = list(executor.map(train_client, participants))
    else:
        results = [train_client(user_id) for user_id in participants]

    updates = [update for update in results if update is not None]
    if not updates:
        logger.warning("round %d: no client trained", round_)
        return GlobalState(state.w_f, round_), []

    # {{{ server side

    w_f = aggregate_federated(state.w_f, [update.upload() for update in updates])

    # }}}

    # {{{ client side

    if model.config.personalized:
        c_total = sum(update.num_examples for update in updates)
        for update in updates:
            w_p_i = store.embedding(
                update.client_id,
                lambda update=update: model.init_private(update.client_id, cfg.seed))
            store.put(
                update.client_id,
                update_private(w_p_i, update.delta_private,
                    update.num_examples, c_total, cfg.private_update),
                round_)

    # }}}

    return GlobalState(w_f, round_), updates


def run_fl(
        model: PersonalizedClassifier,
        train: ClientData,
        cfg: RunConfig, *,
        eval_data: ClientData | None = None,
        threads: int = 1,
        on_round_end: Callable[[GlobalState, ClientStore], None] | None = None,
        ) -> tuple[GlobalState, ClientStore, list[MetricRecord]]:
    """Run :attr:`RunConfig.rounds` federated rounds from the initial
    parameters drawn from :attr:`RunConfig.seed`.

    :arg eval_data: if given, evaluated every :attr:`RunConfig.eval_every`
        rounds; each evaluation adds one :class:`MetricRecord` per metric to
        the returned history.
    :arg on_round_end: called after each round with the new state and the
        client store.
    """
    if not cfg.is_federated:
        raise ContractError(f"mode '{cfg.mode}' is not a federated mode")
    if cfg.is_personalized != model.config.personalized:
        raise ContractError(
            f"mode '{cfg.mode}' does not match a model with "
            f"personalized={model.config.personalized}")
    if cfg.users_per_round > len(train):
        raise ContractError(
            f"users_per_round={cfg.users_per_round} exceeds the "
            f"{len(train)} available users")

    state = GlobalState(model.init_federated(cfg.seed), 0)
    store = ClientStore()
    history: list[MetricRecord] = []

    n_train = sum(len(exs) for exs in train.values())
    processed = 0

    with ProcessLogger(logger, f"{cfg.mode}: {cfg.rounds} rounds"):
        for _ in range(cfg.rounds):
            state, updates = run_fl_round(
                    model, state, store, train, cfg, threads=threads)
            processed += cfg.local_epochs * sum(u.num_examples for u in updates)

            if eval_data is not None and state.round % cfg.eval_every == 0:
                embeddings = client_embeddings(
                        model, store, sorted(eval_data), cfg.seed)
                results = evaluate(model, state.w_f, embeddings, eval_data, "eval")
                history.extend(to_metric_records(results, state.round, cfg.mode))
                logger.info("round %d (epoch %.2f): %s", state.round,
                        processed / max(n_train, 1), _format_results(results))

            if on_round_end is not None:
                on_round_end(state, store)

    ParameterPartition(state.w_f, store.embeddings()).check(model)
    return state, store, history

# }}}


# {{{ centralized training

def run_centralized(
        model: PersonalizedClassifier,
        train: ClientData,
        cfg: RunConfig, *,
        eval_data: ClientData | None = None,
        ) -> tuple[ParamSet, dict[str, np.ndarray], list[MetricRecord]]:
    """Minibatch SGD over the pooled training data of all users for
    :attr:`RunConfig.epochs` epochs. Personalized models train the whole
    embedding table jointly with the shared weights; otherwise every
    embedding stays zero.

    :returns: the trained shared parameters, the embedding table as a
        mapping from user id, and the evaluation history (one evaluation
        per :attr:`RunConfig.eval_every` epochs).
    """
    if cfg.is_federated:
        raise ContractError(f"mode '{cfg.mode}' is not a centralized mode")
    if cfg.is_personalized != model.config.personalized:
        raise ContractError(
            f"mode '{cfg.mode}' does not match a model with "
            f"personalized={model.config.personalized}")

    user_ids = sorted(train)
    personalized = model.config.personalized
    embed_dim = model.config.embed_dim

    w_f = model.init_federated(cfg.seed).copy_arrays()
    table = np.array(
            [model.init_private(user_id, cfg.seed) for user_id in user_ids],
            dtype=np.float64).reshape(len(user_ids), embed_dim)

    pooled = [
        (ordinal, x, label)
        for ordinal, user_id in enumerate(user_ids)
        for x, label in train[user_id]]

    history: list[MetricRecord] = []

    with ProcessLogger(logger, f"{cfg.mode}: {cfg.epochs} epochs"):
        for epoch in range(1, cfg.epochs + 1):
            rng = np.random.default_rng(derive_seed(cfg.seed, "epoch", epoch))
            order = rng.permutation(len(pooled))

            for start in range(0, len(pooled), cfg.batch_size):
                batch = [pooled[k] for k in order[start:start + cfg.batch_size]]

                graph = ad.Graph()
                federated = {name: graph.parameter(name, ary)
                        for name, ary in w_f.items()}
                if personalized:
                    table_leaf = graph.parameter(TABLE_PARAM_NAME, table)
                zero = graph.constant(np.zeros(embed_dim))

                losses = []
                for ordinal, x, label in batch:
                    user_vec = (ad.embedding_lookup(table_leaf, ordinal)
                            if personalized else zero)
                    losses.append(model.example_loss(
                        model.forward(federated, user_vec, x), label))

                grads = ad.backward(ad.mean(losses))
                _sgd_step(w_f, grads, cfg.lr)
                if personalized:
                    table -= cfg.lr * grads[TABLE_PARAM_NAME]

            if eval_data is not None and epoch % cfg.eval_every == 0:
                embeddings = {
                    user_id: table[ordinal]
                    for ordinal, user_id in enumerate(user_ids)}
                results = evaluate(
                        model, ParamSet(w_f), _with_defaults(
                            model, embeddings, eval_data, cfg.seed),
                        eval_data, "eval")
                history.extend(to_metric_records(results, epoch, cfg.mode))
                logger.info("epoch %d: %s", epoch, _format_results(results))

    final_table = {
        user_id: table[ordinal].copy() for ordinal, user_id in enumerate(user_ids)}
    ParameterPartition(ParamSet(w_f), final_table).check(model)
    return ParamSet(w_f), final_table, history


def _with_defaults(model: PersonalizedClassifier,
        embeddings: Mapping[str, np.ndarray],
        data: ClientData, seed: int) -> dict[str, np.ndarray]:
    result = dict(embeddings)
    for user_id in data:
        if user_id not in result:
            result[user_id] = model.init_private(user_id, seed)
    return result

# }}}


# {{{ evaluation

def evaluate(
        model: PersonalizedClassifier,
        w_f: ParamSet,
        embeddings: Mapping[str, np.ndarray],
        data: ClientData,
        split: str) -> list[EvalResult]:
    """Micro-averaged metrics over all examples in *data*, each predicted
    with its own user's embedding.

    Binary models report ``auc``, ``accuracy`` and ``loss``; multiclass
    models report ``accuracy`` and ``loss``. AUC is skipped with a
    :class:`~fedpriv.errors.MetricSkippedWarning` if only one class occurs.
    """
    user_ids = sorted(data)
    rows = [(user_id, x, label) for user_id in user_ids for x, label in data[user_id]]
    if not rows:
        return []

    features = np.array([x for _, x, _ in rows])
    user_vecs = np.array([embeddings[user_id] for user_id, _, _ in rows])
    labels = np.array([label for _, _, label in rows])
    n = len(rows)

    logits = model.predict_batch(w_f, user_vecs, features)

    results = []
    if model.config.is_binary:
        z = logits[:, 0]
        losses = np.maximum(z, 0) - z*labels + np.log1p(np.exp(-np.abs(z)))
        try:
            results.append(EvalResult("auc", auc(z, labels), split, n))
        except UndefinedMetricError as err:
            warn(f"{split}: {err}", MetricSkippedWarning, stacklevel=2)
        predictions = (z > 0).astype(int)
    else:
        shifted = logits - np.max(logits, axis=1, keepdims=True)
        log_norm = np.log(np.sum(np.exp(shifted), axis=1))
        losses = log_norm - shifted[np.arange(n), labels]
        predictions = np.argmax(logits, axis=1)

    results.append(EvalResult("accuracy", accuracy(predictions, labels), split, n))
    results.append(EvalResult("loss", float(np.mean(losses)), split, n))
    return results


def to_metric_records(results: Sequence[EvalResult], round_: int, mode: str
        ) -> list[MetricRecord]:
    return [MetricRecord(round_, mode, r.split, r.metric, r.value) for r in results]


def _format_results(results: Sequence[EvalResult]) -> str:
    return ", ".join(f"{r.split} {r.metric}={r.value:.4f}" for r in results)

# }}}

# vim: foldmethod=marker
