"""
Constraint checks
-----------------

Keeping the user embeddings on the devices changes nothing about training
as long as two conditions hold: a user's local loss does not depend on any
other user's embedding, and the aggregation step does not mix the private
parameters of different users. The checks in this module test both
conditions and, end to end, compare split training against Federated
Averaging over a model whose shared parameters include the whole
embedding table.

.. autoclass:: VerificationReport

.. autofunction:: table_gradients
.. autofunction:: check_zero_cross_gradient
.. autofunction:: check_aggregation_independence
.. autofunction:: split_equivalence_oracle
.. autofunction:: measure_retain_deviation
.. autofunction:: run_verification_suite
"""

from __future__ import annotations


__copyright__ = "Copyright (C) 2024 fedpriv contributors"
__license__ = "MIT, see LICENSE"

import logging
from collections.abc import Mapping, Sequence
from dataclasses import dataclass, replace

import numpy as np

from pytools import ProcessLogger

import fedpriv.autodiff as ad
from fedpriv.data import SyntheticSpec, featurize_examples, generate_synthetic, split_dataset
from fedpriv.engine import (
    ClientStore,
    ClientUpdate,
    FederatedUpload,
    GlobalState,
    RunConfig,
    aggregate_federated,
    client_embeddings,
    run_fl,
    run_fl_round,
    sample_clients,
    update_private,
)
from fedpriv.errors import ContractError
from fedpriv.model import (
    TABLE_PARAM_NAME,
    LabeledFeatures,
    ModelConfig,
    PersonalizedClassifier,
)
from fedpriv.params import ParamSet
from fedpriv.tools import central_difference_gradient, derive_seed


logger = logging.getLogger(__name__)

EQUIVALENCE_TOLERANCE = 1e-12
FINITE_DIFFERENCE_STEP = 1e-6


@dataclass(frozen=True)
class VerificationReport:
    """
    .. attribute:: name
    .. attribute:: max_abs_deviation
    .. attribute:: tolerance
    .. attribute:: details
    .. attribute:: passed
    """

    name: str
    max_abs_deviation: float
    tolerance: float
    details: str = ""

    @property
    def passed(self) -> bool:
        return self.max_abs_deviation <= self.tolerance

    def format_line(self) -> str:
        return (f"CHECK {self.name} max_dev={self.max_abs_deviation:.3e} "
                f"{'PASS' if self.passed else 'FAIL'}")


# {{{ instances

def tiny_instance(seed: int, n_users: int = 3, examples_per_user: int = 10
        ) -> tuple[PersonalizedClassifier, dict[str, list[LabeledFeatures]]]:
    """A small personalized model with featurized training data."""
    spec = SyntheticSpec(n_users=n_users, n_clusters=3,
            examples_per_user=examples_per_user, n_topics=6,
            label_noise=0.05, seed=seed)
    model = PersonalizedClassifier(ModelConfig(
        hash_dim=32, ngram_n=2, embed_dim=3,
        hidden_dims=(8,), head_dims=(8,), num_classes=spec.num_classes))
    split = split_dataset(generate_synthetic(spec))
    return model, featurize_examples(split.train, model.config)


def _embedding_table(model: PersonalizedClassifier, user_ids: Sequence[str],
        seed: int) -> np.ndarray:
    return np.array([model.init_private(uid, seed) for uid in user_ids])

# }}}


# {{{ independent local training

def table_gradients(
        model: PersonalizedClassifier,
        train: Mapping[str, Sequence[LabeledFeatures]],
        i: str, seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Gradients of user *i*'s local loss with respect to the entire
    embedding table, one row per user in sorted order, at the initial
    parameters drawn from *seed*.

    :returns: the reverse-mode gradient and a central-difference gradient
        with step :data:`FINITE_DIFFERENCE_STEP`.
    """
    if i not in train:
        raise ContractError(f"unknown user '{i}'")

    user_ids = sorted(train)
    row_i = user_ids.index(i)
    w_f = model.init_federated(seed)
    table = _embedding_table(model, user_ids, seed)

    def build_loss(graph: ad.Graph, leaves: Mapping[str, ad.Tensor]) -> ad.Tensor:
        user_vec = ad.embedding_lookup(leaves[TABLE_PARAM_NAME], row_i)
        return model.batch_loss(leaves, user_vec, train[i])

    _, loss = ad.evaluate_loss(build_loss, w_f.with_entry(TABLE_PARAM_NAME, table))
    analytic = ad.backward(loss)[TABLE_PARAM_NAME]

    def table_loss(p: ParamSet) -> float:
        return float(ad.evaluate_loss(
            build_loss, w_f.with_entry(TABLE_PARAM_NAME, p[TABLE_PARAM_NAME])
            )[1].value)

    numeric = central_difference_gradient(
            table_loss, ParamSet({TABLE_PARAM_NAME: table}),
            FINITE_DIFFERENCE_STEP)[TABLE_PARAM_NAME]

    return analytic, numeric


def check_zero_cross_gradient(
        model: PersonalizedClassifier,
        train: Mapping[str, Sequence[LabeledFeatures]],
        i: str, j: str, seed: int = 0) -> VerificationReport:
    """Differentiate user *i*'s local loss, with the entire embedding table
    as a leaf, and report the largest entry in user *j*'s row of either the
    reverse-mode or the central-difference gradient. Both must be exactly
    zero.
    """
    if i == j:
        raise ContractError(f"need two distinct users, got '{i}' twice")
    for uid in (i, j):
        if uid not in train:
            raise ContractError(f"unknown user '{uid}'")

    user_ids = sorted(train)
    row_i, row_j = user_ids.index(i), user_ids.index(j)
    analytic, numeric = table_gradients(model, train, i, seed)

    cross = float(np.max(np.abs(analytic[row_j])))
    fd_cross = float(np.max(np.abs(numeric[row_j])))
    return VerificationReport(
        "zero_cross_gradient", max(cross, fd_cross), 0.0,
        details=(f"users {i}->{j}: cross max |grad| {cross:.3e}, "
            f"finite-difference cross max {fd_cross:.3e}, own-row max |grad| "
            f"{np.max(np.abs(analytic[row_i])):.3e}"))

# }}}


# {{{ independent aggregation

def _random_updates(rng: np.random.Generator, layout: Sequence[tuple[str, tuple[int, ...]]],
        user_ids: Sequence[str], embed_dim: int) -> list[ClientUpdate]:
    return [
        ClientUpdate(
            client_id=uid,
            delta_federated=ParamSet({
                name: rng.normal(size=shape) for name, shape in layout}),
            delta_private=rng.normal(size=embed_dim),
            num_examples=int(rng.integers(1, 50)))
        for uid in user_ids]


def _leaky_upload(update: ClientUpdate) -> FederatedUpload:
    leak = float(np.sum(update.delta_private))
    return FederatedUpload(
        update.client_id,
        update.delta_federated.map(lambda ary: ary + leak),
        update.num_examples)


def _private_round(embeddings: Mapping[str, np.ndarray],
        updates: Sequence[ClientUpdate], rule: str) -> dict[str, np.ndarray]:
    c_total = sum(u.num_examples for u in updates)
    return {
        u.client_id: update_private(embeddings[u.client_id], u.delta_private,
            u.num_examples, c_total, rule)
        for u in updates}


def check_aggregation_independence(seed: int, *,
        leak_private: bool = False) -> VerificationReport:
    """Two sub-checks on a random instance, both exact:

    * perturbing one client's private delta leaves the aggregated
      federated parameters bitwise unchanged;
    * perturbing every other user's embedding, private delta and federated
      delta leaves a user's private update bitwise unchanged.

    Each sub-check is paired with its inversion: perturbing the client's
    federated delta must change the aggregate, and perturbing the user's
    own private delta must change their private update. If an inversion
    does not hold, the reported deviation is infinite.

    :arg leak_private: fold private deltas into the uploads. The first
        sub-check then fails; this is a negative control for the check
        itself.
    """
    rng = np.random.default_rng(derive_seed(seed, "aggregation"))
    layout = (("layer.weight", (3, 2)), ("layer.bias", (3,)))
    embed_dim = 3
    user_ids = ["a", "b", "c", "d"]

    w_f = ParamSet({name: rng.normal(size=shape) for name, shape in layout})
    updates = _random_updates(rng, layout, user_ids, embed_dim)
    embeddings = {uid: rng.normal(size=embed_dim) for uid in user_ids}

    upload = _leaky_upload if leak_private else ClientUpdate.upload

    # {{{ federated aggregate vs. one client's private delta

    j = 1
    perturbed = list(updates)
    perturbed[j] = replace(updates[j],
            delta_private=updates[j].delta_private + rng.normal(size=embed_dim))

    agg = aggregate_federated(w_f, [upload(u) for u in updates])
    agg_perturbed = aggregate_federated(w_f, [upload(u) for u in perturbed])
    dev_federated = agg.max_abs_difference(agg_perturbed)

    inverted = list(updates)
    inverted[j] = replace(updates[j],
            delta_federated=updates[j].delta_federated.map(lambda ary: ary + 1))
    sensitivity_federated = agg.max_abs_difference(
            aggregate_federated(w_f, [upload(u) for u in inverted]))

    # }}}

    # {{{ private update vs. everyone else's private values

    i = user_ids[0]
    new = _private_round(embeddings, updates, "scaled")

    others_embeddings = {
        uid: emb if uid == i else emb + rng.normal(size=embed_dim)
        for uid, emb in embeddings.items()}
    others_updates = [
        u if u.client_id == i else replace(u,
            delta_private=u.delta_private + rng.normal(size=embed_dim),
            delta_federated=u.delta_federated.map(lambda ary: ary + 1))
        for u in updates]
    new_perturbed = _private_round(others_embeddings, others_updates, "scaled")

    dev_private = float(np.max(np.abs(new[i] - new_perturbed[i])))

    own_updates = [
        replace(u, delta_private=u.delta_private + 1) if u.client_id == i else u
        for u in updates]
    sensitivity_private = float(np.max(np.abs(
        new[i] - _private_round(embeddings, own_updates, "scaled")[i])))

    # }}}

    deviation = max(dev_federated, dev_private)
    if sensitivity_federated == 0 or sensitivity_private == 0:
        deviation = float("inf")

    return VerificationReport(
        "aggregation_independence", deviation, 0.0,
        details=(f"federated aggregate {dev_federated:.3e} "
            f"(own federated delta moves it by {sensitivity_federated:.3e}), "
            f"private update {dev_private:.3e} "
            f"(own private delta moves it by {sensitivity_private:.3e})"))

# }}}


# {{{ split equivalence

def _local_train_full_table(
        model: PersonalizedClassifier,
        params: ParamSet,
        ordinal: int,
        data_i: Sequence[LabeledFeatures],
        cfg: RunConfig, round_: int, client_id: str) -> FederatedUpload:
    # same shuffle and batches as engine.local_train
    arrays = params.copy_arrays()
    rng = np.random.default_rng(derive_seed(cfg.seed, round_, client_id))
    n = len(data_i)

    for _ in range(cfg.local_epochs):
        order = rng.permutation(n)
        for start in range(0, n, cfg.batch_size):
            batch = [data_i[k] for k in order[start:start + cfg.batch_size]]

            graph = ad.Graph()
            leaves = {name: graph.parameter(name, ary)
                    for name, ary in arrays.items()}
            user_vec = ad.embedding_lookup(leaves[TABLE_PARAM_NAME], ordinal)
            grads = ad.backward(model.batch_loss(leaves, user_vec, batch))

            for name, ary in arrays.items():
                ary -= cfg.lr * grads[name]

    return FederatedUpload(client_id, ParamSet(arrays).subtract(params), n)


def _full_table_round(model: PersonalizedClassifier, params: ParamSet,
        train: Mapping[str, Sequence[LabeledFeatures]],
        cfg: RunConfig, round_: int) -> ParamSet:
    user_ids = sorted(train)
    uploads = [
        _local_train_full_table(model, params, ordinal, train[user_ids[ordinal]],
            cfg, round_, user_ids[ordinal])
        for ordinal in sample_clients(
            len(user_ids), cfg.users_per_round, round_, cfg.seed)]
    return aggregate_federated(params, uploads)


def _split_vs_full_deviation(model: PersonalizedClassifier, state: GlobalState,
        store: ClientStore, full: ParamSet, user_ids: Sequence[str],
        seed: int) -> float:
    embeddings = client_embeddings(model, store, user_ids, seed)
    split_params = state.w_f.with_entry(
            TABLE_PARAM_NAME, np.array([embeddings[uid] for uid in user_ids]))
    return split_params.max_abs_difference(full)


def split_equivalence_oracle(cfg: RunConfig, seed: int, *,
        n_users: int = 3, examples_per_user: int = 10) -> VerificationReport:
    """Train :attr:`RunConfig.rounds` rounds twice from the same
    initialization: once with embeddings kept on the clients and updated
    with the ``scaled`` rule, once with Federated Averaging over a model
    whose shared parameters include the full embedding table. Reports the
    largest parameter difference observed after any round.

    :arg seed: determines the training data; *cfg* determines training.
    """
    if cfg.private_update != "scaled":
        raise ContractError(
            f"the '{cfg.private_update}' rule is not expected to match "
            "Federated Averaging over the full embedding table: 'retain' "
            "applies each private delta unscaled, i.e. deviates by the factor "
            "c_i / sum(c) that averaging would apply. Use 'scaled'.")

    model, train = tiny_instance(seed, n_users, examples_per_user)
    cfg = replace(cfg, mode="personalized_fl")
    user_ids = sorted(train)

    w_f = model.init_federated(cfg.seed)
    full = w_f.with_entry(
            TABLE_PARAM_NAME, _embedding_table(model, user_ids, cfg.seed))
    deviations = [_split_vs_full_deviation(
            model, GlobalState(w_f, 0), ClientStore(), full, user_ids, cfg.seed)]

    def compare_with_full_table(state: GlobalState, store: ClientStore) -> None:
        nonlocal full
        full = _full_table_round(model, full, train, cfg, state.round)
        deviations.append(_split_vs_full_deviation(
            model, state, store, full, user_ids, cfg.seed))
        logger.debug("round %d: split vs. full-table deviation %.3e",
                state.round, deviations[-1])

    run_fl(model, train, cfg, on_round_end=compare_with_full_table)

    return VerificationReport(
        "split_equivalence", max(deviations), EQUIVALENCE_TOLERANCE,
        details=(f"{n_users} users, {cfg.rounds} rounds, "
            f"{cfg.users_per_round} users/round"))


def measure_retain_deviation(cfg: RunConfig, seed: int, *,
        n_users: int = 3, examples_per_user: int = 10) -> VerificationReport:
    """Run one round with the ``retain`` rule and one round of full-table
    Federated Averaging. Each participant's embeddings should then differ
    by exactly :math:`(1 - z_i) d_i` with :math:`z_i = c_i / \\sum c`;
    the report holds the largest departure from that.
    """
    model, train = tiny_instance(seed, n_users, examples_per_user)
    cfg = replace(cfg, mode="personalized_fl", private_update="retain")
    user_ids = sorted(train)

    state = GlobalState(model.init_federated(cfg.seed), 0)
    store = ClientStore()
    full = state.w_f.with_entry(
            TABLE_PARAM_NAME, _embedding_table(model, user_ids, cfg.seed))

    state, updates = run_fl_round(model, state, store, train, cfg)
    full = _full_table_round(model, full, train, cfg, 1)

    c_total = sum(u.num_examples for u in updates)
    gap = 0.0
    departure = 0.0
    for u in updates:
        row = full[TABLE_PARAM_NAME][user_ids.index(u.client_id)]
        observed = store.get(u.client_id).embedding - row
        expected = (1 - u.num_examples / c_total) * u.delta_private
        gap = max(gap, float(np.max(np.abs(observed))))
        departure = max(departure, float(np.max(np.abs(observed - expected))))

    return VerificationReport(
        "retain_deviation", departure, EQUIVALENCE_TOLERANCE,
        details=f"retain vs. full-table embedding gap {gap:.3e}")

# }}}


def run_verification_suite(seed: int, *,
        leak_private: bool = False) -> list[VerificationReport]:
    """Run the zero cross-gradient, aggregation independence and split
    equivalence checks on small instances drawn from *seed*.
    """
    with ProcessLogger(logger, f"verification suite (seed {seed})"):
        model, train = tiny_instance(seed)
        i, j = sorted(train)[:2]

        return [
            check_zero_cross_gradient(model, train, i, j, seed),
            check_aggregation_independence(seed, leak_private=leak_private),
            split_equivalence_oracle(
                RunConfig(mode="personalized_fl", users_per_round=2, rounds=2,
                    lr=0.1, batch_size=4, private_update="scaled", seed=seed),
                seed),
            ]

# vim: foldmethod=marker
