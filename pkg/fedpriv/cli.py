"""
Command line
------------

``fedpriv`` (or ``python -m fedpriv``) drives an experiment end to end:

* ``gen-data`` writes a synthetic dataset, its latent clusters and prints
  its statistics;
* ``train`` runs one of the four training modes and writes the server
  checkpoint, the client store, the metrics history and the embeddings;
* ``verify`` runs the constraint checks;
* ``report`` merges the metrics of several runs;
* ``analyze`` measures how well a run's embeddings recover the latent
  clusters.

Exit status is 0 on success, 1 if a check fails or a run errors out, and 2
for usage and configuration errors.

.. autofunction:: main
.. autofunction:: train_experiment
.. autofunction:: merge_reports
"""

from __future__ import annotations


__copyright__ = "Copyright (C) 2024 fedpriv contributors"
__license__ = "MIT, see LICENSE"

import argparse
import csv
import dataclasses
import json
import logging
import sys
from collections.abc import Mapping, Sequence
from dataclasses import dataclass
from os import PathLike
from pathlib import Path

import numpy as np

from fedpriv.analysis import (
    analyze_embeddings,
    export_embeddings,
    load_embeddings,
    pca_project,
    write_projection,
)
from fedpriv.checkpoint import (
    load_server_checkpoint,
    read_metrics_csv,
    save_client_store,
    save_server_checkpoint,
    write_metrics_csv,
)
from fedpriv.config import (
    ExperimentConfig,
    benchmark_config,
    describe_config_keys,
    load_config,
)
from fedpriv.data import (
    Example,
    SyntheticSpec,
    assign_clusters,
    dataset_stats,
    featurize_examples,
    generate_synthetic,
    load_clusters,
    load_jsonl,
    split_dataset,
    split_stats,
    write_clusters,
    write_jsonl,
)
from fedpriv.engine import (
    MODES,
    ClientStore,
    GlobalState,
    MetricRecord,
    client_embeddings,
    evaluate,
    run_centralized,
    run_fl,
    to_metric_records,
)
from fedpriv.errors import ContractError, FedprivError
from fedpriv.metrics import EvalResult
from fedpriv.model import PersonalizedClassifier
from fedpriv.verify import run_verification_suite


logger = logging.getLogger(__name__)

EXIT_FAILURE = 1
EXIT_USAGE = 2


# {{{ training

@dataclass(frozen=True)
class TrainResult:
    """
    .. attribute:: history

        Evaluation-split metrics, starting with the untrained model at
        round 0.

    .. attribute:: test

        Test-split metrics of the final model.
    """

    state: GlobalState
    store: ClientStore
    embeddings: Mapping[str, np.ndarray]
    history: list[MetricRecord]
    test: list[EvalResult]


def train_experiment(config: ExperimentConfig, examples: Sequence[Example], *,
        threads: int = 1) -> TrainResult:
    """Split *examples*, train in the mode selected by ``config.run`` and
    evaluate the result on the test split.
    """
    run = config.run
    model = PersonalizedClassifier(config.model)

    label_count = config.model.label_count
    bad = [ex for ex in examples if not 0 <= ex.label < label_count]
    if bad:
        raise ContractError(
            f"label {bad[0].label} of user '{bad[0].user_id}' is out of range "
            f"[0, {label_count}) for model.num_classes={config.model.num_classes}")

    split = split_dataset(examples)
    for name, stats in split_stats(split).items():
        logger.info("%s: %d users, %d samples", name, stats.n_users, stats.n_samples)

    train = featurize_examples(split.train, config.model)
    eval_data = featurize_examples(split.eval, config.model)
    test_data = featurize_examples(split.test, config.model)

    def default_embeddings(
            embeddings: Mapping[str, np.ndarray], user_ids: Sequence[str]
            ) -> dict[str, np.ndarray]:
        return {
            uid: embeddings[uid] if uid in embeddings
            else model.init_private(uid, run.seed)
            for uid in user_ids}

    initial = evaluate(model, model.init_federated(run.seed),
            client_embeddings(model, ClientStore(), sorted(eval_data), run.seed),
            eval_data, "eval")
    history = to_metric_records(initial, 0, run.mode)

    if run.is_federated:
        state, store, fl_history = run_fl(
                model, train, run, eval_data=eval_data, threads=threads)
        history.extend(fl_history)
        embeddings: Mapping[str, np.ndarray] = (
                store.embeddings() if model.config.personalized else {})
    else:
        w_f, table, server_history = run_centralized(
                model, train, run, eval_data=eval_data)
        history.extend(server_history)
        state = GlobalState(w_f, run.epochs)
        store = ClientStore()
        embeddings = table if model.config.personalized else {}

    test = evaluate(model, state.w_f,
            default_embeddings(embeddings, sorted(test_data)), test_data, "test")

    return TrainResult(state, store, embeddings, history, test)

# }}}


# {{{ reports

def merge_reports(run_dirs: Sequence[str | PathLike[str]],
        out: str | PathLike[str]) -> Path:
    """Write the metrics of all *run_dirs* to *out* in long format with a
    leading ``run`` column, and a table with each run's last evaluation to
    ``<out stem>_final.csv``.

    :returns: the path of the final-metrics table.
    """
    if not run_dirs:
        raise ContractError("no runs to report")

    merged = []
    for run_dir in run_dirs:
        path = Path(run_dir) / "metrics.csv"
        if not path.is_file():
            raise ContractError(f"no metrics.csv in '{run_dir}'")
        merged.append((Path(run_dir).name, read_metrics_csv(path)))

    out = Path(out)
    with open(out, "w", encoding="utf-8", newline="") as outf:
        writer = csv.writer(outf, lineterminator="\n")
        writer.writerow(["run", "round", "mode", "split", "metric", "value"])
        for name, records in merged:
            for rec in records:
                writer.writerow(
                    [name, rec.round, rec.mode, rec.split, rec.metric, repr(rec.value)])

    metric_names = sorted({rec.metric for _, records in merged for rec in records})
    final_path = out.with_name(f"{out.stem}_final.csv")
    with open(final_path, "w", encoding="utf-8", newline="") as outf:
        writer = csv.writer(outf, lineterminator="\n")
        writer.writerow(["run", "mode", "round", *metric_names])
        for name, records in merged:
            if not records:
                writer.writerow([name, "", "", *("" for _ in metric_names)])
                continue
            last_round = max(rec.round for rec in records)
            last = {rec.metric: rec.value
                    for rec in records if rec.round == last_round}
            writer.writerow([name, records[-1].mode, last_round,
                *(repr(last[m]) if m in last else "" for m in metric_names)])

    return final_path

# }}}


# {{{ commands

def _load_spec(path: str | None, seed: int | None) -> SyntheticSpec:
    values = {}
    if path is not None:
        try:
            values = json.loads(Path(path).read_text(encoding="utf-8"))
        except json.JSONDecodeError as err:
            raise ContractError(f"'{path}' is not valid JSON: {err}") from err
        if not isinstance(values, dict):
            raise ContractError(f"'{path}' must hold a JSON object")
        unknown = set(values) - {f.name for f in dataclasses.fields(SyntheticSpec)}
        if unknown:
            raise ContractError(f"unknown dataset keys: {sorted(unknown)}")
    if seed is not None:
        values["seed"] = seed
    try:
        return SyntheticSpec(**values)
    except TypeError as err:
        raise ContractError(f"invalid dataset spec: {err}") from err


def cmd_gen_data(args: argparse.Namespace) -> int:
    spec = _load_spec(args.spec, args.seed)
    out = Path(args.out)
    clusters_path = (Path(args.clusters) if args.clusters
            else out.with_name("clusters.json"))

    examples = generate_synthetic(spec)
    write_jsonl(examples, out)
    write_clusters(assign_clusters(spec), clusters_path)

    stats = dataset_stats(examples)
    print(f"users={stats.n_users} samples={stats.n_samples} "
            f"mean_per_user={stats.mean_samples_per_user:.2f}")
    return 0


def cmd_train(args: argparse.Namespace) -> int:
    if args.benchmark is not None:
        config = benchmark_config(args.benchmark)
    else:
        config = load_config(args.config)
    if args.seed is not None:
        config = config.replace(run=dataclasses.replace(config.run, seed=args.seed))

    data_path = args.data or config.paths.data
    if data_path:
        examples = load_jsonl(data_path, num_labels=config.model.label_count)
    else:
        config.check_synthetic_data()
        examples = generate_synthetic(config.data)

    result = train_experiment(config, examples, threads=args.threads)

    out = Path(args.out or config.paths.out)
    out.mkdir(parents=True, exist_ok=True)
    save_server_checkpoint(out / "checkpoint.json", result.state, config)
    if config.run.is_federated and config.model.personalized:
        save_client_store(out / "clients", result.store)
    write_metrics_csv(out / "metrics.csv", result.history)
    (out / "test_metrics.json").write_text(json.dumps(
        {r.metric: r.value for r in result.test}, indent=2) + "\n",
        encoding="utf-8")
    if result.embeddings:
        export_embeddings(result.embeddings, out / "embeddings.csv")

    if result.history:
        last_round = max(rec.round for rec in result.history)
        for rec in result.history:
            if rec.round == last_round:
                print(f"final {rec.split} {rec.metric}={rec.value:.4f}")
    for r in result.test:
        print(f"final {r.split} {r.metric}={r.value:.4f}")
    return 0


def cmd_verify(args: argparse.Namespace) -> int:
    all_passed = True
    for seed in range(args.seed, args.seed + args.sweep):
        for report in run_verification_suite(
                seed, leak_private=args.inject_private_leak):
            print(report.format_line())
            logger.info("%s: %s", report.name, report.details)
            all_passed = all_passed and report.passed

    return 0 if all_passed else EXIT_FAILURE


def cmd_report(args: argparse.Namespace) -> int:
    final_path = merge_reports(args.runs, args.out)
    print(f"wrote {args.out} and {final_path}")
    return 0


def cmd_analyze(args: argparse.Namespace) -> int:
    run_dir = Path(args.run)
    embeddings = load_embeddings(run_dir / "embeddings.csv")
    _, config_doc = load_server_checkpoint(run_dir / "checkpoint.json")

    report = analyze_embeddings(
            embeddings, load_clusters(args.clusters),
            mode=config_doc["run"]["mode"], k=args.k, seed=args.seed)
    report.write(Path(args.out) if args.out else run_dir / "analysis.json")

    user_ids = sorted(embeddings)
    matrix = [embeddings[uid] for uid in user_ids]
    out_dim = min(2, len(user_ids), len(matrix[0]))
    write_projection(run_dir / "projection.csv", user_ids,
            pca_project(matrix, out_dim))

    silhouette = ("n/a" if report.silhouette is None
            else f"{report.silhouette:.4f}")
    print(f"ARI={report.ari:.4f} silhouette={silhouette} users={report.n_users}")
    return 0

# }}}


# {{{ argument parsing

def make_parser() -> argparse.ArgumentParser:
    from fedpriv.version import VERSION_TEXT

    parser = argparse.ArgumentParser(prog="fedpriv",
            description="Federated training with private user embeddings.")
    parser.add_argument("--version", action="version",
            version=f"%(prog)s {VERSION_TEXT}")
    parser.add_argument("-v", "--verbose", action="count", default=0,
            help="-v for progress, -vv for per-round detail")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write a synthetic dataset")
    p.add_argument("--spec", help="JSON file with dataset parameters")
    p.add_argument("--out", required=True, help="output JSON Lines file")
    p.add_argument("--clusters",
            help="latent cluster file (default: clusters.json next to --out)")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train in one of the four modes",
            epilog=describe_config_keys(),
            formatter_class=argparse.RawDescriptionHelpFormatter)
    source = p.add_mutually_exclusive_group()
    source.add_argument("--config", help="JSON experiment config")
    source.add_argument("--benchmark", choices=MODES, metavar="MODE",
            help="use the synthetic benchmark settings for MODE")
    p.add_argument("--data", help="JSON Lines dataset (default: synthetic)")
    p.add_argument("--out", help="output directory")
    p.add_argument("--seed", type=int, help="override run.seed")
    p.add_argument("--threads", type=int, default=1,
            help="train the clients of a round in parallel")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("verify", help="run the constraint checks")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--sweep", type=int, default=1,
            help="check this many consecutive seeds")
    p.add_argument("--inject-private-leak", action="store_true",
            help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("report", help="merge the metrics of several runs")
    p.add_argument("--runs", nargs="+", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("analyze", help="cluster structure of a run's embeddings")
    p.add_argument("--run", required=True)
    p.add_argument("--clusters", required=True)
    p.add_argument("--k", type=int, default=4)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help="report file (default: <run>/analysis.json)")
    p.set_defaults(func=cmd_analyze)

    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = make_parser()
    args = parser.parse_args(argv)

    logging.basicConfig(
            level=(logging.WARNING, logging.INFO, logging.DEBUG)[min(args.verbose, 2)],
            format="%(levelname)s %(name)s: %(message)s")

    try:
        return args.func(args)
    except ContractError as err:
        print(f"fedpriv: error: {err}", file=sys.stderr)
        return EXIT_USAGE
    except (FedprivError, OSError) as err:
        print(f"fedpriv: error: {err}", file=sys.stderr)
        return EXIT_FAILURE

# }}}

# vim: foldmethod=marker
