"""Command-line entry point.

Subcommands cover the whole pipeline: synthesize-and-train, validate
trajectory files, compute the correlation matrix and scores, select a
coreset, report influencers, run the two evaluation protocols, and
print the overhead model. Machine-readable output goes to stdout,
diagnostics to stderr.

Exit codes: 0 success, 1 usage error, 2 data/validation error,
3 internal error.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
import traceback
from pathlib import Path

import numpy as np

from ltckit import cost_model, evaluation, ltc, selection, trainer, trajectory_store
from ltckit.errors import DataError, LtckitError

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_INTERNAL = 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    """argparse maps its own errors to exit 2; we need exit 1."""

    def error(self, message):
        raise UsageError(message)


def _workers_default() -> int:
    raw = os.environ.get("MUSE_WORKERS", "1")
    try:
        value = int(raw)
    except ValueError:
        raise UsageError(f"MUSE_WORKERS must be an integer, got {raw!r}")
    if value < 1:
        raise UsageError(f"MUSE_WORKERS must be positive, got {value}")
    return value


def parse_config(path: str) -> dict[str, str]:
    """key=value lines; blank lines and # comments ignored."""
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise UsageError(f"cannot read config {path}: {exc}")
    values: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected key=value, got {line!r}")
        key, _, value = line.partition("=")
        values[key.strip()] = value.strip()
    return values


def _emit(doc) -> None:
    sys.stdout.write(json.dumps(doc, sort_keys=True) + "\n")


def _note(message: str) -> None:
    sys.stderr.write(message + "\n")


def _file_digest(path) -> str:
    # not crc32: the binary formats end in their own CRC32 trailer, and a
    # whole-file crc over such data collapses to a constant residue
    return "sha256:" + hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _add_train_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--model", default="softmax", choices=["softmax", "mlp"],
                   help="model family to train")
    p.add_argument("--hidden-units", type=int, default=16, help="mlp hidden width")
    p.add_argument("--learning-rate", type=float, default=0.1, help="SGD step size")
    p.add_argument("--epochs", type=int, default=20, help="training epochs")
    p.add_argument("--batch-size", type=int, default=32, help="minibatch size")
    p.add_argument("--weight-decay", type=float, default=0.0, help="L2 penalty on weights")
    p.add_argument("--init-scale", type=float, default=1.0,
                   help="weight init radius multiplier (0 = zero init)")


def _train_config(args, seed) -> trainer.TrainConfig:
    return trainer.TrainConfig(
        model_kind=args.model,
        hidden_units=args.hidden_units,
        learning_rate=args.learning_rate,
        epochs=args.epochs,
        batch_size=args.batch_size,
        seed=seed,
        weight_init_scale=args.init_scale,
        weight_decay=args.weight_decay,
    )


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="ltckit", description=__doc__,
                     formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)

    p = sub.add_parser("train-toy",
                       help="synthesize data, train, and write trajectory files")
    p.add_argument("--classes", type=int, default=3, help="number of classes")
    p.add_argument("--per-class", type=int, default=100, help="training samples per class")
    p.add_argument("--query-per-class", type=int, default=20, help="query samples per class")
    p.add_argument("--features", type=int, default=10, help="feature dimensionality")
    p.add_argument("--spread", type=float, default=0.5, help="cluster standard deviation")
    p.add_argument("--noise", type=float, default=0.0, help="label noise fraction (train only)")
    p.add_argument("--seed", type=int, default=0, help="master seed")
    _add_train_flags(p)
    p.add_argument("--train-out", required=True, help="output path for the train LTRJ file")
    p.add_argument("--query-out", required=True, help="output path for the query LTRJ file")
    p.add_argument("--train-data-out", help="optional CSV dump of the training samples")
    p.add_argument("--query-data-out", help="optional CSV dump of the query samples")
    p.set_defaults(func=cmd_train_toy)

    p = sub.add_parser("validate",
                       help="check a trajectory file against every format rule")
    p.add_argument("path", help="LTRJ file to validate")
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("ltc",
                       help="correlate train and query trajectories")
    p.add_argument("--train", required=True, help="train LTRJ file")
    p.add_argument("--query", required=True, help="query LTRJ file")
    p.add_argument("--matrix-out", required=True, help="output LTCM matrix file")
    p.add_argument("--scores-out", required=True, help="output per-sample scores CSV")
    p.add_argument("--matrix-csv-out", help="optional CSV dump of the matrix")
    p.add_argument("--workers", type=int, default=None,
                   help="worker threads (default MUSE_WORKERS or 1; results identical)")
    p.set_defaults(func=cmd_ltc)

    p = sub.add_parser("select",
                       help="pick a coreset from a scores CSV")
    p.add_argument("--scores", required=True, help="scores CSV from the ltc step")
    p.add_argument("--k", type=int, required=True, help="coreset size")
    p.add_argument("--policy", default="class-balanced",
                   choices=["global", "class-balanced"], help="selection policy")
    p.add_argument("--classes", type=int, default=None,
                   help="class count (default: max label + 1)")
    p.add_argument("--out", help="also write the manifest to this path")
    p.set_defaults(func=cmd_select)

    p = sub.add_parser("influencers",
                       help="rank training samples for one query")
    p.add_argument("--matrix", required=True, help="LTCM matrix file")
    p.add_argument("--query-id", type=int, required=True, help="query sample id")
    p.add_argument("--count", type=int, default=10, help="how many to list")
    p.add_argument("--direction", default="most-positive",
                   choices=["most-positive", "most-negative"], help="ranking direction")
    p.add_argument("--class-filter", type=int, default=None,
                   help="restrict to one training class (needs --scores for labels)")
    p.add_argument("--scores", help="scores CSV supplying training labels")
    p.set_defaults(func=cmd_influencers)

    p = sub.add_parser("lds",
                       help="linear datamodeling score of an attribution matrix")
    p.add_argument("--train-data", required=True, help="training samples CSV")
    p.add_argument("--query-data", required=True, help="query samples CSV")
    p.add_argument("--matrix", required=True, help="LTCM attribution matrix")
    p.add_argument("--subsets", type=int, default=40, help="number of random subsets")
    p.add_argument("--ratio", type=float, default=0.5, help="subset sampling ratio")
    p.add_argument("--retrains", type=int, default=3, help="retrains per subset")
    p.add_argument("--measurable", default="query_correctness",
                   choices=list(evaluation.MEASURABLES), help="outcome to correlate")
    p.add_argument("--seed", type=int, default=0, help="protocol seed")
    p.add_argument("--random-baseline", action="store_true",
                   help="also score a random attribution on the same retrained models")
    p.add_argument("--out", help="also write the report to this path")
    _add_train_flags(p)
    p.set_defaults(func=cmd_lds)

    p = sub.add_parser("brittleness",
                       help="prediction flips after removing top-scored samples")
    p.add_argument("--train-data", required=True, help="training samples CSV")
    p.add_argument("--query-data", required=True, help="query samples CSV")
    p.add_argument("--scores", required=True, help="scores CSV to rank removals")
    p.add_argument("--k-values", required=True,
                   help="comma-separated removal counts, e.g. 0,10,50")
    p.add_argument("--retrains", type=int, default=5, help="retrains per removal count")
    p.add_argument("--seed", type=int, default=0, help="protocol seed")
    p.add_argument("--flip-basis", default="reference",
                   choices=list(evaluation.FLIP_BASES),
                   help="count flips against the reference model or true labels")
    p.add_argument("--out", help="also write the report to this path")
    _add_train_flags(p)
    p.set_defaults(func=cmd_brittleness)

    p = sub.add_parser("cost",
                       help="closed-form compute/storage overhead table")
    p.add_argument("--set", dest="method_set", default="coreset",
                   choices=["coreset", "tda"], help="which method family")
    p.add_argument("--units", default="engineering", choices=["raw", "engineering"],
                   help="PFLOPs/GB or FLOPs/bytes")
    p.add_argument("--preset", choices=["table4"],
                   help="load the headline ImageNet-1k/ResNet-18 workload")
    p.add_argument("--config", help="key=value file with workload parameters")
    p.add_argument("--param", action="append", default=[], metavar="NAME=VALUE",
                   help="override one workload parameter (repeatable)")
    p.add_argument("--csv-out", help="also write the table as CSV to this path")
    p.set_defaults(func=cmd_cost)

    p = sub.add_parser("pipeline",
                       help="train-toy + ltc + select in one run from a config file")
    p.add_argument("config", help="key=value config file")
    p.set_defaults(func=cmd_pipeline)

    return parser


def cmd_train_toy(args) -> int:
    train, query, result = _synthesize_and_train(
        classes=args.classes, per_class=args.per_class,
        query_per_class=args.query_per_class, features=args.features,
        spread=args.spread, noise=args.noise, seed=args.seed,
        tconfig=_train_config(args, args.seed),
    )
    model, train_traj, query_traj = result
    trajectory_store.write_dataset(train_traj, args.train_out)
    trajectory_store.write_dataset(query_traj, args.query_out)
    doc = {
        "train_path": args.train_out,
        "query_path": args.query_out,
        "n_train": train.n_samples,
        "n_query": query.n_samples,
        "n_snapshots": train_traj.n_snapshots,
        "final_train_accuracy": trainer.accuracy(model, train),
        "final_query_accuracy": trainer.accuracy(model, query),
        "digests": {
            "train": _file_digest(args.train_out),
            "query": _file_digest(args.query_out),
        },
    }
    for path, ds in ((args.train_data_out, train), (args.query_data_out, query)):
        if path:
            trainer.write_dataset_csv(ds, path)
            doc["digests"][path] = _file_digest(path)
    _note(f"trained {args.epochs} epochs; train accuracy {doc['final_train_accuracy']:.3f}")
    _emit(doc)
    return EXIT_OK


def _synthesize_and_train(classes, per_class, query_per_class, features,
                          spread, noise, seed, tconfig):
    train = trainer.make_synthetic(
        classes, per_class, features, cluster_spread=spread,
        label_noise_fraction=noise, seed=seed,
    )
    # query split: clean labels, disjoint ids, independent draws
    query = trainer.make_synthetic(
        classes, query_per_class, features, cluster_spread=spread,
        label_noise_fraction=0.0, seed=seed + 1, id_offset=train.n_samples,
    )
    return train, query, trainer.train_with_logging(train, query, tconfig)


def cmd_validate(args) -> int:
    report = trajectory_store.validate(args.path)
    doc = {
        "ok": report.ok,
        "issues": [
            {"code": i.code, "message": i.message, "offset": i.offset}
            for i in report.issues
        ],
    }
    _emit(doc)
    if not report.ok:
        _note(f"{args.path}: {len(report.issues)} issue(s)")
        return EXIT_DATA
    return EXIT_OK


def cmd_ltc(args) -> int:
    workers = args.workers if args.workers is not None else _workers_default()
    if workers < 1:
        raise UsageError(f"--workers must be positive, got {workers}")
    train_traj = trajectory_store.read_dataset(args.train)
    query_traj = trajectory_store.read_dataset(args.query)
    matrix = ltc.ltc_matrix(
        trajectory_store.compute_deltas(train_traj),
        trajectory_store.compute_deltas(query_traj),
        worker_count=workers,
    )
    scores = ltc.ltc_avg(matrix)
    ltc.write_ltc_matrix(matrix, args.matrix_out)
    ltc.write_scores_csv(scores, train_traj.labels, args.scores_out)
    doc = {
        "n_train": matrix.n_train,
        "n_query": matrix.n_query,
        "n_deltas": train_traj.n_snapshots - 1,
        "degenerate_entries": int(matrix.degenerate_mask.sum()),
        "matrix_path": args.matrix_out,
        "scores_path": args.scores_out,
        "digests": {
            "matrix": _file_digest(args.matrix_out),
            "scores": _file_digest(args.scores_out),
        },
    }
    if args.matrix_csv_out:
        ltc.export_matrix_csv(matrix, args.matrix_csv_out)
        doc["digests"]["matrix_csv"] = _file_digest(args.matrix_csv_out)
    _emit(doc)
    return EXIT_OK


def cmd_select(args) -> int:
    scores, labels = ltc.read_scores_csv(args.scores)
    if args.policy == "global":
        manifest = selection.select_top_k(scores, args.k, labels=labels)
    else:
        classes = args.classes if args.classes is not None else int(labels.max()) + 1
        manifest = selection.select_class_balanced(scores, labels, args.k, classes)
    payload = selection.manifest_to_json(manifest)
    if args.out:
        selection.export_manifest(manifest, args.out)
    sys.stdout.write(payload)
    if manifest.warnings:
        for w in manifest.warnings:
            _note(f"warning: {w}")
    return EXIT_OK


def cmd_influencers(args) -> int:
    matrix = ltc.read_ltc_matrix(args.matrix)
    match = np.nonzero(matrix.query_ids == np.uint64(args.query_id))[0]
    if match.size == 0:
        raise DataError(f"query id {args.query_id} not present in matrix")
    labels = None
    if args.class_filter is not None:
        if not args.scores:
            raise UsageError("--class-filter needs --scores for training labels")
        scores, score_labels = ltc.read_scores_csv(args.scores)
        by_id = {int(i): int(l) for i, l in zip(scores.train_ids, score_labels)}
        try:
            labels = np.array([by_id[int(i)] for i in matrix.train_ids], dtype=np.int64)
        except KeyError as exc:
            raise DataError(f"scores CSV lacks a label for train id {exc.args[0]}")
    ranked = ltc.top_influencers(
        matrix, int(match[0]), train_labels=labels,
        class_filter=args.class_filter, count=args.count, direction=args.direction,
    )
    _emit({
        "query_id": args.query_id,
        "direction": args.direction,
        "influencers": [{"train_id": i, "value": v} for i, v in ranked],
    })
    return EXIT_OK


def _load_eval_inputs(args):
    train = trainer.read_dataset_csv(args.train_data)
    query = trainer.read_dataset_csv(args.query_data)
    return train, query


def cmd_lds(args) -> int:
    train, query = _load_eval_inputs(args)
    attr = evaluation.AttributionMatrix.from_ltcm_file(args.matrix)
    tconfig = _train_config(args, args.seed)
    lconfig = evaluation.LdsConfig(
        n_subsets=args.subsets,
        sampling_ratio=args.ratio,
        retrains_per_subset=args.retrains,
        seed=args.seed,
        measurable=args.measurable,
    )
    subsets = evaluation.draw_subsets(train.n_samples, lconfig)
    outcomes = evaluation.subset_outcomes(train, query, subsets, tconfig, lconfig)
    report = evaluation.run_lds(train, query, attr, tconfig, lconfig, outcomes=outcomes)
    if args.random_baseline:
        baseline_attr = evaluation.make_random_attribution(
            attr.query_ids, attr.train_ids, seed=args.seed
        )
        baseline = evaluation.run_lds(
            train, query, baseline_attr, tconfig, lconfig, outcomes=outcomes
        )
        payload = json.dumps(
            {"attribution": json.loads(report.to_json()),
             "random_baseline": json.loads(baseline.to_json())},
            sort_keys=True,
        ) + "\n"
    else:
        payload = report.to_json()
    if args.out:
        Path(args.out).write_bytes(payload.encode("utf-8"))
    sys.stdout.write(payload)
    return EXIT_OK


def cmd_brittleness(args) -> int:
    train, query = _load_eval_inputs(args)
    scores, _ = ltc.read_scores_csv(args.scores)
    by_id = {int(i): float(s) for i, s in zip(scores.train_ids, scores.scores)}
    try:
        aligned = np.array([by_id[int(i)] for i in train.sample_ids], dtype=np.float64)
    except KeyError as exc:
        raise DataError(f"scores CSV lacks an entry for train id {exc.args[0]}")
    try:
        k_values = [int(v) for v in args.k_values.split(",") if v != ""]
    except ValueError:
        raise UsageError(f"--k-values must be comma-separated integers, got {args.k_values!r}")
    if not k_values:
        raise UsageError("--k-values is empty")
    report = evaluation.run_brittleness(
        train, query, aligned, k_values, _train_config(args, args.seed),
        n_retrains=args.retrains, seed=args.seed, flip_basis=args.flip_basis,
    )
    payload = report.to_json()
    if args.out:
        Path(args.out).write_bytes(payload.encode("utf-8"))
    sys.stdout.write(payload)
    return EXIT_OK


_NUMERIC_PARAMS = {
    "N", "Q", "T", "f", "p", "d", "c", "k", "gamma", "eps", "R",
    "alpha", "p_prime", "b", "bytes_per_param",
}


def cmd_cost(args) -> int:
    values: dict[str, float] = {}
    if args.preset == "table4":
        values.update(cost_model.TABLE4_PRESET)
    if args.config:
        for key, raw in parse_config(args.config).items():
            values[key] = raw
    for item in args.param:
        if "=" not in item:
            raise UsageError(f"--param expects NAME=VALUE, got {item!r}")
        key, _, raw = item.partition("=")
        values[key.strip()] = raw.strip()
    kwargs = {}
    for key, raw in values.items():
        if key not in _NUMERIC_PARAMS:
            raise UsageError(f"unknown workload parameter {key!r}")
        try:
            kwargs[key] = float(raw)
        except (TypeError, ValueError):
            raise UsageError(f"workload parameter {key} must be numeric, got {raw!r}")
    params = cost_model.WorkloadParams(**kwargs)
    params.check()
    table = (
        cost_model.coreset_overheads(params)
        if args.method_set == "coreset"
        else cost_model.tda_overheads(params)
    )
    sys.stdout.write(cost_model.render_report(table, unit_mode=args.units))
    if args.csv_out:
        Path(args.csv_out).write_text(cost_model.render_csv(table), encoding="utf-8")
    return EXIT_OK


_PIPELINE_DEFAULTS = {
    "classes": "3", "per_class": "100", "query_per_class": "20",
    "features": "10", "spread": "0.5", "noise": "0.0", "seed": "0",
    "model": "softmax", "hidden_units": "16", "learning_rate": "0.1",
    "epochs": "20", "batch_size": "32", "weight_decay": "0.0",
    "weight_init_scale": "1.0", "policy": "class-balanced", "workers": "",
    "k": None, "out_dir": None,
}


def cmd_pipeline(args) -> int:
    raw = parse_config(args.config)
    unknown = set(raw) - set(_PIPELINE_DEFAULTS)
    if unknown:
        raise UsageError(f"unknown config keys: {', '.join(sorted(unknown))}")
    cfg = dict(_PIPELINE_DEFAULTS)
    cfg.update(raw)
    for key in ("k", "out_dir"):
        if cfg[key] is None:
            raise UsageError(f"config is missing required key {key}")

    def intval(key):
        try:
            return int(cfg[key])
        except ValueError:
            raise UsageError(f"config key {key} must be an integer, got {cfg[key]!r}")

    def floatval(key):
        try:
            return float(cfg[key])
        except ValueError:
            raise UsageError(f"config key {key} must be a number, got {cfg[key]!r}")

    classes, per_class, k = intval("classes"), intval("per_class"), intval("k")
    n_train = classes * per_class
    if not 1 <= k <= n_train:
        raise UsageError(f"k={k} out of range [1, {n_train}] for this workload")
    if cfg["policy"] not in ("global", "class-balanced"):
        raise UsageError(f"policy must be global or class-balanced, got {cfg['policy']!r}")
    workers = intval("workers") if cfg["workers"] else _workers_default()
    if workers < 1:
        raise UsageError(f"workers must be positive, got {workers}")

    out_dir = Path(cfg["out_dir"])
    out_dir.mkdir(parents=True, exist_ok=True)
    seed = intval("seed")
    tconfig = trainer.TrainConfig(
        model_kind=cfg["model"],
        hidden_units=intval("hidden_units"),
        learning_rate=floatval("learning_rate"),
        epochs=intval("epochs"),
        batch_size=intval("batch_size"),
        seed=seed,
        weight_init_scale=floatval("weight_init_scale"),
        weight_decay=floatval("weight_decay"),
    )

    def stage(name, fn):
        try:
            return fn()
        except LtckitError as exc:
            raise type(exc)(f"{name}: {exc}") from exc

    train, query, (model, train_traj, query_traj) = stage(
        "train-toy",
        lambda: _synthesize_and_train(
            classes=classes, per_class=per_class,
            query_per_class=intval("query_per_class"), features=intval("features"),
            spread=floatval("spread"), noise=floatval("noise"), seed=seed,
            tconfig=tconfig,
        ),
    )
    paths = {
        "train": out_dir / "train.ltrj",
        "query": out_dir / "query.ltrj",
        "matrix": out_dir / "matrix.ltcm",
        "scores": out_dir / "scores.csv",
        "manifest": out_dir / "manifest.json",
    }
    stage("train-toy", lambda: trajectory_store.write_dataset(train_traj, paths["train"]))
    stage("train-toy", lambda: trajectory_store.write_dataset(query_traj, paths["query"]))

    def ltc_stage():
        matrix = ltc.ltc_matrix(
            trajectory_store.compute_deltas(train_traj),
            trajectory_store.compute_deltas(query_traj),
            worker_count=workers,
        )
        scores = ltc.ltc_avg(matrix)
        ltc.write_ltc_matrix(matrix, paths["matrix"])
        ltc.write_scores_csv(scores, train_traj.labels, paths["scores"])
        return scores

    scores = stage("ltc", ltc_stage)

    def select_stage():
        if cfg["policy"] == "global":
            manifest = selection.select_top_k(scores, k, labels=train_traj.labels)
        else:
            manifest = selection.select_class_balanced(
                scores, train_traj.labels, k, classes
            )
        selection.export_manifest(manifest, paths["manifest"])
        return manifest

    manifest = stage("select", select_stage)

    _emit({
        "artifacts": {name: str(p) for name, p in paths.items()},
        "digests": {name: _file_digest(p) for name, p in paths.items()},
        "k": k,
        "policy": manifest.policy,
        "per_class_count": {str(c): n for c, n in sorted(manifest.per_class_count.items())},
        "warnings": manifest.warnings,
        "final_train_accuracy": trainer.accuracy(model, train),
        "final_query_accuracy": trainer.accuracy(model, query),
    })
    return EXIT_OK


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if not getattr(args, "func", None):
            parser.print_usage(sys.stderr)
            _note("error: a subcommand is required")
            return EXIT_USAGE
        return args.func(args)
    except SystemExit as exc:  # argparse --help
        code = exc.code if exc.code is not None else 0
        return int(code)
    except UsageError as exc:
        _note(f"error: {exc}")
        return EXIT_USAGE
    except LtckitError as exc:
        _note(f"error: {exc}")
        return EXIT_DATA
    except BrokenPipeError:
        return EXIT_INTERNAL
    except Exception:
        _note("internal error:")
        traceback.print_exc()
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
