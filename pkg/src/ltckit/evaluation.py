"""Attribution quality metrics.

Two protocols, both built on retraining the toy models:

* Linear datamodeling score: draw random training subsets, retrain on
  each, and check per query (via Spearman) whether summed attribution
  over a subset predicts the measurable outcome on that query.
* Prediction brittleness: remove the top-k attributed training samples,
  retrain, and count how many query predictions flip against a
  reference model trained on everything.

Outcome computation is split out so several attribution methods can be
scored against one set of retrained models.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, replace

import numpy as np

from ltckit.correlations import spearman
from ltckit.errors import DataError, FormatError
from ltckit.ioutil import ByteSink, ByteSource, crc32_hex, open_sink, read_all
from ltckit.ltc import LtcMatrix, read_ltc_matrix
from ltckit.trainer import (
    LabeledDataset,
    TrainConfig,
    _seed_int,
    _tag_int,
    fit,
    per_sample_loss,
    predict,
)

MEASURABLES = ("query_correctness", "negative_query_loss")
FLIP_BASES = ("reference", "labels")


@dataclass
class AttributionMatrix:
    """tau(query, train) for any attribution method."""

    values: np.ndarray  # (Q, N) float64, finite
    query_ids: np.ndarray  # (Q,) uint64
    train_ids: np.ndarray  # (N,) uint64

    @property
    def n_query(self) -> int:
        return self.values.shape[0]

    @property
    def n_train(self) -> int:
        return self.values.shape[1]

    def check_invariants(self) -> None:
        if not np.all(np.isfinite(self.values)):
            raise DataError("non-finite attribution value")
        if self.query_ids.shape[0] != self.n_query or self.train_ids.shape[0] != self.n_train:
            raise DataError("id lists do not match matrix dimensions")

    @classmethod
    def from_ltc(cls, matrix: LtcMatrix) -> "AttributionMatrix":
        return cls(
            values=matrix.values.copy(),
            query_ids=matrix.query_ids.copy(),
            train_ids=matrix.train_ids.copy(),
        )

    @classmethod
    def from_ltcm_file(cls, source: ByteSource) -> "AttributionMatrix":
        return cls.from_ltc(read_ltc_matrix(source))

    @classmethod
    def from_csv(cls, source: ByteSource) -> "AttributionMatrix":
        """Parse the matrix CSV layout: header query_id,<train ids>."""
        text = read_all(source).decode("utf-8")
        reader = csv.reader(io.StringIO(text))
        header = next(reader, None)
        if not header or header[0] != "query_id" or len(header) < 2:
            raise FormatError(f"unexpected matrix CSV header {header!r}")
        train_ids = np.asarray([int(v) for v in header[1:]], dtype=np.uint64)
        query_ids, rows = [], []
        for row in reader:
            if not row:
                continue
            if len(row) != len(header):
                raise FormatError(f"row has {len(row)} fields, expected {len(header)}")
            query_ids.append(int(row[0]))
            rows.append([float(v) for v in row[1:]])
        if not rows:
            raise FormatError("matrix CSV has no rows")
        matrix = cls(
            values=np.asarray(rows, dtype=np.float64),
            query_ids=np.asarray(query_ids, dtype=np.uint64),
            train_ids=train_ids,
        )
        matrix.check_invariants()
        return matrix


def make_random_attribution(query_ids, train_ids, seed=0) -> AttributionMatrix:
    """Uniform noise in [-1, 1]; the baseline every method must beat."""
    query_ids = np.asarray(query_ids, dtype=np.uint64)
    train_ids = np.asarray(train_ids, dtype=np.uint64)
    rng = np.random.default_rng([_seed_int(seed), _tag_int("random-attribution")])
    return AttributionMatrix(
        values=rng.uniform(-1.0, 1.0, (query_ids.shape[0], train_ids.shape[0])),
        query_ids=query_ids.copy(),
        train_ids=train_ids.copy(),
    )


def group_attribution(attr_row, train_ids, subset_ids) -> float:
    """Sum of one query's attribution over a subset of training ids.

    Empty subset sums to 0; an id absent from train_ids is an error."""
    row = np.asarray(attr_row, dtype=np.float64)
    train_ids = np.asarray(train_ids, dtype=np.uint64)
    if row.shape != train_ids.shape:
        raise DataError("row and train_ids lengths differ")
    id_to_col = {int(t): j for j, t in enumerate(train_ids)}
    total = 0.0
    for i in subset_ids:
        col = id_to_col.get(int(i))
        if col is None:
            raise DataError(f"subset id {int(i)} not among training ids")
        total += row[col]
    return total


def _group_columns(attribution: AttributionMatrix, subset_ids) -> np.ndarray:
    id_to_col = {int(t): j for j, t in enumerate(attribution.train_ids)}
    try:
        cols = np.array([id_to_col[int(i)] for i in subset_ids], dtype=np.int64)
    except KeyError as exc:
        raise DataError(f"subset id {exc.args[0]} not among training ids") from exc
    return attribution.values[:, cols].sum(axis=1, dtype=np.float64)


@dataclass
class LdsConfig:
    n_subsets: int = 40
    sampling_ratio: float = 0.5
    retrains_per_subset: int = 3
    seed: int = 0
    measurable: str = "query_correctness"

    def check(self) -> None:
        if self.n_subsets < 2:
            raise DataError("need at least 2 subsets for a rank correlation")
        if not 0.0 < self.sampling_ratio <= 1.0:
            raise DataError("sampling_ratio must be in (0, 1]")
        if self.retrains_per_subset < 1:
            raise DataError("retrains_per_subset must be positive")
        if self.measurable not in MEASURABLES:
            raise DataError(f"unknown measurable {self.measurable!r}")


@dataclass
class LdsReport:
    mean_lds: float  # mean over non-degenerate queries; nan if none
    per_query: list[float]  # degenerate entries carry 0
    degenerate: list[bool]
    n_excluded: int
    subset_ids: list[list[int]]  # the C sampled id lists, for audit
    subset_size: int
    retrains_per_subset: int
    measurable: str

    def to_json(self) -> str:
        doc = {
            "mean_lds": None if np.isnan(self.mean_lds) else self.mean_lds,
            "per_query": self.per_query,
            "degenerate": self.degenerate,
            "n_excluded": self.n_excluded,
            "subset_ids": self.subset_ids,
            "subset_size": self.subset_size,
            "retrains_per_subset": self.retrains_per_subset,
            "measurable": self.measurable,
        }
        return json.dumps(doc, sort_keys=True) + "\n"


def draw_subsets(n_train: int, config: LdsConfig) -> list[np.ndarray]:
    """C sorted index arrays of size ceil(ratio * N), sampled uniformly
    without replacement from one seeded generator."""
    config.check()
    size = int(np.ceil(config.sampling_ratio * n_train))
    if size < 1 or size > n_train:
        raise DataError(f"subset size {size} out of range")
    rng = np.random.default_rng([_seed_int(config.seed), _tag_int("lds-subsets")])
    return [
        np.sort(rng.choice(n_train, size=size, replace=False))
        for _ in range(config.n_subsets)
    ]


def _measure(model, query: LabeledDataset, measurable: str) -> np.ndarray:
    if measurable == "query_correctness":
        return (predict(model, query.features) == query.labels).astype(np.float64)
    return -per_sample_loss(model, query.features, query.labels)


def _derived_config(base: TrainConfig, entropy: list[int]) -> TrainConfig:
    child = int(np.random.SeedSequence(entropy).generate_state(1)[0])
    return replace(base, seed=child)


def subset_outcomes(train: LabeledDataset, query: LabeledDataset,
                    subsets: list[np.ndarray], tconfig: TrainConfig,
                    lconfig: LdsConfig) -> np.ndarray:
    """(C, Q) measurable outcomes, each averaged over the retrains."""
    lconfig.check()
    out = np.zeros((len(subsets), query.n_samples), dtype=np.float64)
    for j, subset in enumerate(subsets):
        part = train.subset_by_indices(subset)
        for r in range(lconfig.retrains_per_subset):
            cfg = _derived_config(tconfig, [_seed_int(lconfig.seed), j, r])
            out[j] += _measure(fit(part, cfg), query, lconfig.measurable)
    out /= lconfig.retrains_per_subset
    return out


def run_lds(train: LabeledDataset, query: LabeledDataset,
            attr: AttributionMatrix, tconfig: TrainConfig, lconfig: LdsConfig,
            outcomes: np.ndarray | None = None,
            outcome_override=None) -> LdsReport:
    """Score one attribution matrix.

    outcomes: pass the matrix from subset_outcomes (computed with the
    same configs) to reuse retrained models across methods.
    outcome_override(query_index, subset_id_list) -> float replaces
    training entirely; it lets the protocol be tested against an oracle.
    """
    lconfig.check()
    attr.check_invariants()
    if attr.n_train != train.n_samples:
        raise DataError("attribution matrix does not cover the training set")
    if attr.n_query != query.n_samples:
        raise DataError("attribution matrix does not cover the query set")
    subsets = draw_subsets(train.n_samples, lconfig)
    subset_id_lists = [[int(i) for i in train.sample_ids[s]] for s in subsets]
    if outcome_override is not None:
        outcomes = np.array(
            [
                [outcome_override(q, ids) for q in range(query.n_samples)]
                for ids in subset_id_lists
            ],
            dtype=np.float64,
        )
    elif outcomes is None:
        outcomes = subset_outcomes(train, query, subsets, tconfig, lconfig)
    if outcomes.shape != (len(subsets), query.n_samples):
        raise DataError("outcomes shape does not match subsets and queries")

    group = np.stack(
        [_group_columns(attr, train.sample_ids[s]) for s in subsets]
    )  # (C, Q)
    per_query, degenerate = [], []
    for q in range(query.n_samples):
        rho = spearman(outcomes[:, q], group[:, q])
        per_query.append(rho.value)
        degenerate.append(rho.degenerate)
    valid = [v for v, d in zip(per_query, degenerate) if not d]
    return LdsReport(
        mean_lds=float(np.mean(valid)) if valid else float("nan"),
        per_query=per_query,
        degenerate=degenerate,
        n_excluded=sum(degenerate),
        subset_ids=subset_id_lists,
        subset_size=len(subsets[0]),
        retrains_per_subset=lconfig.retrains_per_subset,
        measurable=lconfig.measurable,
    )


@dataclass
class BrittlenessReport:
    k_values: list[int]
    flip_fractions: list[list[float]]  # per k, per retrain
    mean_flip: list[float]
    std_flip: list[float]
    n_retrains: int
    flip_basis: str
    reference_digest: str

    def to_json(self) -> str:
        doc = {
            "k_values": self.k_values,
            "flip_fractions": self.flip_fractions,
            "mean_flip": self.mean_flip,
            "std_flip": self.std_flip,
            "n_retrains": self.n_retrains,
            "flip_basis": self.flip_basis,
            "reference_digest": self.reference_digest,
        }
        return json.dumps(doc, sort_keys=True) + "\n"


def top_scored_ids(scores, train_ids, k: int) -> np.ndarray:
    """ids of the k best scores, ties broken by ascending id."""
    scores = np.asarray(scores, dtype=np.float64)
    train_ids = np.asarray(train_ids, dtype=np.uint64)
    if scores.shape != train_ids.shape:
        raise DataError("scores and ids lengths differ")
    order = np.lexsort((train_ids, -scores))
    return train_ids[order[:k]]


def run_brittleness(train: LabeledDataset, query: LabeledDataset, scores,
                    k_values: list[int], tconfig: TrainConfig,
                    n_retrains: int = 5, seed: int = 0,
                    flip_basis: str = "reference") -> BrittlenessReport:
    """Flip fraction after dropping the top-k scored training samples.

    Flips are counted against the reference model's predictions by
    default; flip_basis="labels" counts disagreement with true labels
    instead. k=0 under the reference basis is 0 by construction: nothing
    is removed, so the counterfactual is the reference run itself."""
    scores = np.asarray(scores, dtype=np.float64)
    if scores.shape[0] != train.n_samples:
        raise DataError("scores length does not match training set")
    if n_retrains < 1:
        raise DataError("n_retrains must be positive")
    if flip_basis not in FLIP_BASES:
        raise DataError(f"unknown flip basis {flip_basis!r}")
    for k in k_values:
        if not 0 <= k < train.n_samples:
            raise DataError(f"k={k} out of range [0, {train.n_samples})")

    ref_cfg = _derived_config(tconfig, [_seed_int(seed), 0])
    reference = fit(train, ref_cfg)
    ref_pred = predict(reference, query.features)
    baseline = ref_pred if flip_basis == "reference" else query.labels

    flip_fractions: list[list[float]] = []
    for k in k_values:
        if k == 0 and flip_basis == "reference":
            flip_fractions.append([0.0] * n_retrains)
            continue
        removed = top_scored_ids(scores, train.sample_ids, k)
        part = train.drop_ids(removed)
        rows = []
        for r in range(n_retrains):
            cfg = _derived_config(tconfig, [_seed_int(seed), k, r])
            model = fit(part, cfg)
            rows.append(float(np.mean(predict(model, query.features) != baseline)))
        flip_fractions.append(rows)

    return BrittlenessReport(
        k_values=list(k_values),
        flip_fractions=flip_fractions,
        mean_flip=[float(np.mean(v)) for v in flip_fractions],
        std_flip=[float(np.std(v)) for v in flip_fractions],
        n_retrains=n_retrains,
        flip_basis=flip_basis,
        reference_digest=crc32_hex(ref_pred.astype("<u4").tobytes()),
    )


def write_report(report, destination: ByteSink) -> int:
    blob = report.to_json().encode("utf-8")
    with open_sink(destination) as fh:
        fh.write(blob)
    return len(blob)
