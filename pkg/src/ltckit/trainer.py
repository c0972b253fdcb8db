"""Small classifiers trained with plain SGD, instrumented so that every
sample's loss is recorded at initialization and after each epoch.

Two model families: multinomial logistic regression ("softmax") and a
one-hidden-layer ReLU network ("mlp"). Everything is numpy float64;
randomness flows through seeded Generators keyed by (seed, purpose), so
runs are reproducible bit for bit. No momentum, no LR schedule: the
simplest optimizer that exercises the trajectory pipeline.
"""

from __future__ import annotations

import csv
import io
import zlib
from dataclasses import dataclass

import numpy as np

from ltckit.errors import DataError, FormatError
from ltckit.ioutil import ByteSink, ByteSource, open_sink, read_all
from ltckit.trajectory_store import TrajectoryDataset


@dataclass
class LabeledDataset:
    features: np.ndarray  # (N, d) float64
    labels: np.ndarray  # (N,) uint32
    sample_ids: np.ndarray  # (N,) uint64
    n_classes: int
    noised_ids: np.ndarray | None = None  # ids whose label was corrupted

    @property
    def n_samples(self) -> int:
        return self.features.shape[0]

    @property
    def n_features(self) -> int:
        return self.features.shape[1]

    def check_invariants(self) -> None:
        if self.n_samples == 0:
            raise DataError("empty dataset")
        if not np.all(np.isfinite(self.features)):
            raise DataError("non-finite feature")
        if self.labels.shape[0] != self.n_samples or self.sample_ids.shape[0] != self.n_samples:
            raise DataError("labels/ids length does not match features")
        if np.any(self.labels >= self.n_classes):
            raise DataError("label out of range")
        if np.unique(self.sample_ids).shape[0] != self.n_samples:
            raise DataError("duplicate id")

    def subset_by_indices(self, indices) -> "LabeledDataset":
        return LabeledDataset(
            features=self.features[indices],
            labels=self.labels[indices],
            sample_ids=self.sample_ids[indices],
            n_classes=self.n_classes,
            noised_ids=self.noised_ids,
        )

    def drop_ids(self, ids) -> "LabeledDataset":
        gone = set(int(i) for i in ids)
        keep = np.array([int(i) not in gone for i in self.sample_ids], dtype=bool)
        return self.subset_by_indices(keep)


@dataclass
class TrainConfig:
    model_kind: str = "softmax"  # "softmax" or "mlp"
    hidden_units: int = 16
    learning_rate: float = 0.1
    epochs: int = 20
    batch_size: int = 32
    seed: int = 0
    weight_init_scale: float = 1.0
    weight_decay: float = 0.0

    def check(self) -> None:
        if self.model_kind not in ("softmax", "mlp"):
            raise DataError(f"unknown model kind {self.model_kind!r}")
        if self.model_kind == "mlp" and self.hidden_units < 1:
            raise DataError("hidden_units must be positive")
        # learning_rate 0 is allowed: it freezes the model, a useful probe.
        if self.learning_rate < 0:
            raise DataError("learning_rate must be non-negative")
        if self.epochs < 1:
            raise DataError("epochs must be >= 1")
        if self.batch_size < 1:
            raise DataError("batch_size must be >= 1")
        if self.weight_init_scale < 0 or self.weight_decay < 0:
            raise DataError("scales must be non-negative")


@dataclass
class ToyModel:
    kind: str
    params: dict[str, np.ndarray]
    n_classes: int

    # weight-decay applies to these; biases are left unregularized
    WEIGHT_KEYS = {"softmax": ("W",), "mlp": ("W1", "W2")}

    @property
    def param_count(self) -> int:
        return sum(p.size for p in self.params.values())

    def logits(self, features: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(np.asarray(features, dtype=np.float64))
        if self.kind == "softmax":
            return x @ self.params["W"] + self.params["b"]
        h = np.maximum(x @ self.params["W1"] + self.params["b1"], 0.0)
        return h @ self.params["W2"] + self.params["b2"]


def _seed_int(seed) -> int:
    if isinstance(seed, (bool, float)):
        raise DataError(f"seed must be an integer, got {type(seed).__name__}")
    return int(seed)


def _tag_int(tag: str) -> int:
    """Stable integer from a purpose string, for seed-sequence keying."""
    return zlib.crc32(tag.encode("utf-8")) & 0xFFFFFFFF


def _uniform_layer(rng, fan_in: int, fan_out: int, scale: float) -> np.ndarray:
    radius = scale / np.sqrt(fan_in)
    return rng.uniform(-radius, radius, (fan_in, fan_out))


def init_model(config: TrainConfig, n_features: int, n_classes: int) -> ToyModel:
    """Weights uniform in [-s, +s] with s = weight_init_scale / sqrt(fan_in);
    zero biases. weight_init_scale 0 gives the all-zero model."""
    config.check()
    rng = np.random.default_rng([_seed_int(config.seed), _tag_int("init")])
    if config.model_kind == "softmax":
        params = {
            "W": _uniform_layer(rng, n_features, n_classes, config.weight_init_scale),
            "b": np.zeros(n_classes),
        }
    else:
        h = config.hidden_units
        params = {
            "W1": _uniform_layer(rng, n_features, h, config.weight_init_scale),
            "b1": np.zeros(h),
            "W2": _uniform_layer(rng, h, n_classes, config.weight_init_scale),
            "b2": np.zeros(n_classes),
        }
    return ToyModel(kind=config.model_kind, params=params, n_classes=n_classes)


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def per_sample_loss(model: ToyModel, features, labels) -> np.ndarray:
    """Cross-entropy of each sample, no regularization term."""
    x = np.atleast_2d(np.asarray(features, dtype=np.float64))
    y = np.atleast_1d(np.asarray(labels))
    logp = _log_softmax(model.logits(x))
    return -logp[np.arange(x.shape[0]), y]


def loss_of(model: ToyModel, features, labels, weight_decay: float = 0.0) -> float:
    """Mean cross-entropy over the batch (a single sample is a batch of
    one) plus 0.5 * weight_decay * sum of squared weights."""
    loss = float(per_sample_loss(model, features, labels).mean())
    if weight_decay:
        for key in ToyModel.WEIGHT_KEYS[model.kind]:
            loss += 0.5 * weight_decay * float(np.sum(model.params[key] ** 2))
    return loss


def gradient(model: ToyModel, features, labels,
             weight_decay: float = 0.0) -> dict[str, np.ndarray]:
    """Analytic gradient of loss_of with the same arguments."""
    x = np.atleast_2d(np.asarray(features, dtype=np.float64))
    y = np.atleast_1d(np.asarray(labels))
    n = x.shape[0]
    if n == 0:
        raise DataError("empty batch")
    if model.kind == "softmax":
        p = np.exp(_log_softmax(model.logits(x)))
        p[np.arange(n), y] -= 1.0
        p /= n
        grads = {"W": x.T @ p, "b": p.sum(axis=0)}
    else:
        pre = x @ model.params["W1"] + model.params["b1"]
        h = np.maximum(pre, 0.0)
        logits = h @ model.params["W2"] + model.params["b2"]
        shifted = logits - logits.max(axis=1, keepdims=True)
        p = np.exp(shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True)))
        p[np.arange(n), y] -= 1.0
        p /= n
        dh = p @ model.params["W2"].T
        dh[pre <= 0.0] = 0.0
        grads = {
            "W1": x.T @ dh,
            "b1": dh.sum(axis=0),
            "W2": h.T @ p,
            "b2": p.sum(axis=0),
        }
    if weight_decay:
        for key in ToyModel.WEIGHT_KEYS[model.kind]:
            grads[key] = grads[key] + weight_decay * model.params[key]
    return grads


def grad_check(model: ToyModel, features, labels, weight_decay: float = 0.0,
               step: float = 1e-5) -> float:
    """Max over every parameter coordinate of the relative error between
    the analytic gradient and a central finite difference of loss_of."""
    if step <= 0:
        raise DataError("step must be positive")
    grads = gradient(model, features, labels, weight_decay)
    worst = 0.0
    for key in sorted(model.params):
        tensor = model.params[key]
        flat = tensor.reshape(-1)
        gflat = grads[key].reshape(-1)
        for i in range(flat.shape[0]):
            original = flat[i]
            flat[i] = original + step
            hi = loss_of(model, features, labels, weight_decay)
            flat[i] = original - step
            lo = loss_of(model, features, labels, weight_decay)
            flat[i] = original
            numeric = (hi - lo) / (2.0 * step)
            analytic = float(gflat[i])
            err = abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-12)
            worst = max(worst, err)
    return worst


def predict(model: ToyModel, features) -> np.ndarray:
    """Argmax of logits; ties go to the lowest class index."""
    return np.argmax(model.logits(features), axis=1).astype(np.uint32)


def accuracy(model: ToyModel, dataset: LabeledDataset) -> float:
    return float(np.mean(predict(model, dataset.features) == dataset.labels))


def make_synthetic(n_classes: int, per_class: int, n_features: int,
                   cluster_spread: float = 0.5, label_noise_fraction: float = 0.0,
                   seed: int = 0, id_offset: int = 0) -> LabeledDataset:
    """Gaussian clusters with an exact count of corrupted labels.

    Class means sit on scaled basis vectors (a simplex-like arrangement)
    when they fit, otherwise they are drawn at random on the unit
    sphere's scale. floor(label_noise_fraction * N) samples get a label
    drawn uniformly from the other classes; their ids land in noised_ids.
    """
    if n_classes < 2:
        raise DataError("need at least 2 classes")
    if per_class < 1 or n_features < 1:
        raise DataError("dataset dimensions must be positive")
    if cluster_spread < 0:
        raise DataError("cluster_spread must be non-negative")
    if not 0.0 <= label_noise_fraction < 1.0:
        raise DataError("label_noise_fraction must be in [0, 1)")
    rng = np.random.default_rng([_seed_int(seed), _tag_int("synthetic")])
    if n_classes <= n_features:
        means = np.eye(n_classes, n_features)
    else:
        means = rng.normal(0.0, 1.0, (n_classes, n_features))
        means /= np.linalg.norm(means, axis=1, keepdims=True)
    n_samples = n_classes * per_class
    labels = np.repeat(np.arange(n_classes, dtype=np.uint32), per_class)
    features = means[labels] + cluster_spread * rng.normal(0.0, 1.0, (n_samples, n_features))
    n_noised = int(label_noise_fraction * n_samples)
    if n_noised:
        chosen = rng.choice(n_samples, size=n_noised, replace=False)
        offsets = rng.integers(1, n_classes, size=n_noised).astype(np.uint32)
        labels[chosen] = (labels[chosen] + offsets) % n_classes
        noised_ids = np.sort(chosen.astype(np.uint64) + np.uint64(id_offset))
    else:
        noised_ids = np.empty(0, dtype=np.uint64)
    return LabeledDataset(
        features=features,
        labels=labels,
        sample_ids=np.arange(id_offset, id_offset + n_samples, dtype=np.uint64),
        n_classes=n_classes,
        noised_ids=noised_ids,
    )


def fit(train: LabeledDataset, config: TrainConfig) -> ToyModel:
    """Train without trajectory recording (evaluation retrains use this)."""
    model, _, _ = _train(train, None, config)
    return model


def train_with_logging(train: LabeledDataset, query: LabeledDataset,
                       config: TrainConfig):
    """Train on the train split and record per-sample cross-entropy for
    both splits: snapshot 0 before any update, then one snapshot after
    each epoch, both splits at the same parameters. Returns the model and
    the two trajectory datasets (epochs + 1 snapshots each)."""
    if query.n_features != train.n_features:
        raise DataError("train and query feature dimensions differ")
    if query.n_classes != train.n_classes:
        raise DataError("train and query class counts differ")
    return _train(train, query, config)


def _train(train: LabeledDataset, query: LabeledDataset | None, config: TrainConfig):
    config.check()
    train.check_invariants()
    model = init_model(config, train.n_features, train.n_classes)

    record = query is not None
    train_snaps, query_snaps = [], []

    def snapshot():
        train_snaps.append(per_sample_loss(model, train.features, train.labels))
        query_snaps.append(per_sample_loss(model, query.features, query.labels))

    if record:
        snapshot()
    n = train.n_samples
    for epoch in range(config.epochs):
        rng = np.random.default_rng([_seed_int(config.seed), _tag_int("epoch"), epoch])
        order = rng.permutation(n)
        for start in range(0, n, config.batch_size):
            batch = order[start:start + config.batch_size]
            grads = gradient(
                model, train.features[batch], train.labels[batch], config.weight_decay
            )
            for key, g in grads.items():
                model.params[key] -= config.learning_rate * g
        if record:
            snapshot()

    if not record:
        return model, None, None

    def as_trajectories(ds: LabeledDataset, snaps, tag: str) -> TrajectoryDataset:
        # store at the format's default 32-bit precision so the in-memory
        # dataset equals its on-disk round trip bit for bit
        losses = np.stack(snaps, axis=1).astype("<f4")
        return TrajectoryDataset(
            split_tag=tag,
            n_classes=ds.n_classes,
            sample_ids=ds.sample_ids.copy(),
            labels=ds.labels.astype(np.uint32),
            losses=losses,
            dtype_code=0,
        )

    return (
        model,
        as_trajectories(train, train_snaps, "train"),
        as_trajectories(query, query_snaps, "query"),
    )


_CSV_META = "# n_classes="


def write_dataset_csv(dataset: LabeledDataset, destination: ByteSink) -> int:
    """Columns: id,label,f1..fd; one leading comment line records the
    class count so the file round-trips."""
    buf = io.StringIO()
    buf.write(f"{_CSV_META}{dataset.n_classes}\n")
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["id", "label"] + [f"f{j + 1}" for j in range(dataset.n_features)])
    for i in range(dataset.n_samples):
        writer.writerow(
            [str(int(dataset.sample_ids[i])), str(int(dataset.labels[i]))]
            + [repr(float(v)) for v in dataset.features[i]]
        )
    blob = buf.getvalue().encode("utf-8")
    with open_sink(destination) as fh:
        fh.write(blob)
    return len(blob)


def read_dataset_csv(source: ByteSource) -> LabeledDataset:
    text = read_all(source).decode("utf-8")
    lines = text.splitlines()
    n_classes = None
    if lines and lines[0].startswith(_CSV_META):
        try:
            n_classes = int(lines[0][len(_CSV_META):])
        except ValueError as exc:
            raise FormatError(f"bad class count: {exc}") from exc
        lines = lines[1:]
    reader = csv.reader(io.StringIO("\n".join(lines)))
    header = next(reader, None)
    if not header or header[:2] != ["id", "label"]:
        raise FormatError(f"unexpected dataset CSV header {header!r}")
    d = len(header) - 2
    if d < 1:
        raise FormatError("dataset CSV has no feature columns")
    ids, labels, rows = [], [], []
    for row in reader:
        if not row:
            continue
        if len(row) != d + 2:
            raise FormatError(f"row has {len(row)} fields, expected {d + 2}")
        ids.append(int(row[0]))
        labels.append(int(row[1]))
        rows.append([float(v) for v in row[2:]])
    if not ids:
        raise FormatError("dataset CSV has no rows")
    if n_classes is None:
        n_classes = max(labels) + 1
    ds = LabeledDataset(
        features=np.asarray(rows, dtype=np.float64),
        labels=np.asarray(labels, dtype=np.uint32),
        sample_ids=np.asarray(ids, dtype=np.uint64),
        n_classes=n_classes,
    )
    try:
        ds.check_invariants()
    except DataError as exc:
        raise FormatError(str(exc)) from exc
    return ds
