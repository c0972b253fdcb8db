"""Loss-trajectory correlation: pairwise scores, the full query-by-train
matrix, per-train-sample averages, and top-influencer reports.

The matrix is computed by centering every delta row once, precomputing
its squared norm, and forming each entry as a standardized inner
product, which is algebraically the per-pair Pearson correlation. Work
is partitioned across query rows; every row is produced by the same
single-row kernel regardless of the worker count, so results are
bit-identical for any partitioning.
"""

from __future__ import annotations

import csv
import io
import struct
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from ltckit.correlations import CorrelationResult, pearson
from ltckit.errors import DataError, FormatError
from ltckit.ioutil import ByteSink, ByteSource, open_sink, read_all
from ltckit.trajectory_store import DeltaMatrix

LTCM_MAGIC = b"LTCM"
LTCM_VERSION = 1
_LTCM_HEADER = struct.Struct("<4sHBBQQ")


@dataclass
class LtcMatrix:
    """Query-by-train correlation values with a degeneracy mask."""

    values: np.ndarray  # (Q, N) float64 in [-1, 1]
    degenerate_mask: np.ndarray  # (Q, N) bool; masked entries carry 0
    query_ids: np.ndarray  # (Q,) uint64
    train_ids: np.ndarray  # (N,) uint64

    @property
    def n_query(self) -> int:
        return self.values.shape[0]

    @property
    def n_train(self) -> int:
        return self.values.shape[1]


@dataclass
class LtcScores:
    """Per-train-sample mean correlation against the whole query set."""

    scores: np.ndarray  # (N,) float64
    train_ids: np.ndarray  # (N,) uint64


def ltc_pair(train_deltas, query_deltas) -> CorrelationResult:
    """Correlation between one training and one query delta series."""
    return pearson(train_deltas, query_deltas)


def _center(deltas: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Center rows; return (centered, norms, degenerate row mask).

    A row is degenerate when it is exactly constant (zero variance) or
    its centered sum of squares underflows to zero.
    """
    constant = np.all(deltas == deltas[:, :1], axis=1)
    centered = deltas - deltas.mean(axis=1, keepdims=True)
    ss = np.einsum("ij,ij->i", centered, centered)
    degenerate = constant | (ss == 0.0)
    return centered, np.sqrt(ss), degenerate


def ltc_matrix(train: DeltaMatrix, query: DeltaMatrix, worker_count: int = 1) -> LtcMatrix:
    """All pairwise correlations between query and train delta rows."""
    if worker_count < 1:
        raise DataError("worker_count must be positive")
    t = train.n_deltas
    if query.n_deltas != t:
        raise DataError(
            f"snapshot count mismatch: train has {t} deltas, query has {query.n_deltas}"
        )
    if t < 2:
        raise DataError("at least 2 deltas per trajectory are required")

    tdeltas = np.ascontiguousarray(train.deltas, dtype=np.float64)
    qdeltas = np.ascontiguousarray(query.deltas, dtype=np.float64)
    tc, tnorm, tdeg = _center(tdeltas)
    qc, qnorm, qdeg = _center(qdeltas)
    # Degenerate rows get a unit denominator; their entries are zeroed below.
    tden = np.where(tdeg, 1.0, tnorm)

    n_query, n_train = qdeltas.shape[0], tdeltas.shape[0]
    values = np.empty((n_query, n_train), dtype=np.float64)
    mask = np.empty((n_query, n_train), dtype=bool)

    def fill_row(q: int) -> None:
        row = tc @ qc[q]
        denom = qnorm[q] if not qdeg[q] else 1.0
        row /= tden * denom
        row_mask = tdeg | qdeg[q]
        row[row_mask] = 0.0
        np.clip(row, -1.0, 1.0, out=row)
        values[q] = row
        mask[q] = row_mask

    if worker_count == 1 or n_query == 1:
        for q in range(n_query):
            fill_row(q)
    else:
        with ThreadPoolExecutor(max_workers=worker_count) as pool:
            list(pool.map(fill_row, range(n_query)))

    return LtcMatrix(
        values=values,
        degenerate_mask=mask,
        query_ids=query.sample_ids.copy(),
        train_ids=train.sample_ids.copy(),
    )


def ltc_avg(matrix: LtcMatrix) -> LtcScores:
    """Mean correlation per training sample over all queries.

    Degenerate entries participate as 0, keeping the average total."""
    if matrix.n_query < 1 or matrix.n_train < 1:
        raise DataError("empty matrix")
    return LtcScores(
        scores=matrix.values.mean(axis=0, dtype=np.float64),
        train_ids=matrix.train_ids.copy(),
    )


def top_influencers(
    matrix: LtcMatrix,
    query_index: int,
    train_labels=None,
    class_filter: int | None = None,
    count: int = 10,
    direction: str = "most-positive",
) -> list[tuple[int, float]]:
    """Ranked (train_id, value) list for one query row.

    Sorted by value, descending for most-positive and ascending for
    most-negative; ties break by ascending train id. With class_filter
    the pool is restricted to training samples of that class.
    """
    if not 0 <= query_index < matrix.n_query:
        raise DataError(f"query index {query_index} out of range [0, {matrix.n_query})")
    if count < 1:
        raise DataError("count must be positive")
    if direction not in ("most-positive", "most-negative"):
        raise DataError(f"unknown direction {direction!r}")

    pool = np.arange(matrix.n_train)
    if class_filter is not None:
        if train_labels is None:
            raise DataError("class_filter requires train labels")
        labels = np.asarray(train_labels)
        if labels.shape[0] != matrix.n_train:
            raise DataError("train labels length does not match matrix")
        pool = pool[labels == class_filter]
        if pool.size == 0:
            raise DataError(f"class {class_filter} has no members")

    vals = matrix.values[query_index, pool]
    ids = matrix.train_ids[pool]
    key = -vals if direction == "most-positive" else vals
    order = np.lexsort((ids, key))
    top = order[: min(count, pool.size)]
    return [(int(ids[i]), float(vals[i])) for i in top]


def write_ltc_matrix(matrix: LtcMatrix, destination: ByteSink) -> int:
    """Serialize in the LTCM layout: header, ids, f32 values, packed
    degeneracy bitset (LSB-first), trailing CRC32. Little-endian."""
    body = (
        _LTCM_HEADER.pack(LTCM_MAGIC, LTCM_VERSION, 0, 0, matrix.n_query, matrix.n_train)
        + matrix.query_ids.astype("<u8").tobytes()
        + matrix.train_ids.astype("<u8").tobytes()
        + matrix.values.astype("<f4").tobytes()
        + np.packbits(matrix.degenerate_mask.reshape(-1), bitorder="little").tobytes()
    )
    blob = body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)
    with open_sink(destination) as fh:
        fh.write(blob)
    return len(blob)


def read_ltc_matrix(source: ByteSource) -> LtcMatrix:
    data = read_all(source)
    pos = _LTCM_HEADER.size
    if len(data) < pos + 4:
        raise FormatError("unexpected EOF reading LTCM header")
    magic, version, r0, r1, n_query, n_train = _LTCM_HEADER.unpack(data[:pos])
    if magic != LTCM_MAGIC:
        raise FormatError(f"bad magic {magic!r}")
    if version != LTCM_VERSION:
        raise FormatError(f"unsupported version {version}")
    if r0 != 0 or r1 != 0:
        raise FormatError("reserved bytes must be 0")
    n_mask_bytes = (n_query * n_train + 7) // 8
    expected = pos + 8 * (n_query + n_train) + 4 * n_query * n_train + n_mask_bytes + 4
    if len(data) != expected:
        raise FormatError(f"file is {len(data)} bytes, layout implies {expected}")
    stored_crc = struct.unpack("<I", data[-4:])[0]
    actual_crc = zlib.crc32(data[:-4]) & 0xFFFFFFFF
    if stored_crc != actual_crc:
        raise FormatError(
            f"checksum mismatch: stored {stored_crc:#010x}, computed {actual_crc:#010x}"
        )
    query_ids = np.frombuffer(data, dtype="<u8", count=n_query, offset=pos).copy()
    pos += 8 * n_query
    train_ids = np.frombuffer(data, dtype="<u8", count=n_train, offset=pos).copy()
    pos += 8 * n_train
    values = (
        np.frombuffer(data, dtype="<f4", count=n_query * n_train, offset=pos)
        .astype(np.float64)
        .reshape(n_query, n_train)
    )
    pos += 4 * n_query * n_train
    bits = np.frombuffer(data, dtype=np.uint8, count=n_mask_bytes, offset=pos)
    mask = (
        np.unpackbits(bits, count=n_query * n_train, bitorder="little")
        .astype(bool)
        .reshape(n_query, n_train)
    )
    if np.any(values[mask] != 0.0):
        raise FormatError("degenerate entries must carry value 0")
    if np.any(np.abs(values) > 1.0):
        raise FormatError("correlation values outside [-1, 1]")
    return LtcMatrix(values=values, degenerate_mask=mask, query_ids=query_ids, train_ids=train_ids)


def export_matrix_csv(matrix: LtcMatrix, destination: ByteSink) -> int:
    """Human-readable dump for small matrices: one row per query."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["query_id"] + [str(int(i)) for i in matrix.train_ids])
    for q in range(matrix.n_query):
        writer.writerow(
            [str(int(matrix.query_ids[q]))] + [repr(float(v)) for v in matrix.values[q]]
        )
    blob = buf.getvalue().encode("utf-8")
    with open_sink(destination) as fh:
        fh.write(blob)
    return len(blob)


def write_scores_csv(scores: LtcScores, labels, destination: ByteSink) -> int:
    """Scores CSV consumed by the selection stage: sample_id,label,score."""
    labels = np.asarray(labels)
    if labels.shape[0] != scores.scores.shape[0]:
        raise DataError("labels length does not match scores")
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["sample_id", "label", "score"])
    for i in range(scores.scores.shape[0]):
        writer.writerow(
            [str(int(scores.train_ids[i])), str(int(labels[i])), repr(float(scores.scores[i]))]
        )
    blob = buf.getvalue().encode("utf-8")
    with open_sink(destination) as fh:
        fh.write(blob)
    return len(blob)


def read_scores_csv(source: ByteSource) -> tuple[LtcScores, np.ndarray]:
    """Inverse of write_scores_csv; returns (scores, labels)."""
    text = read_all(source).decode("utf-8")
    reader = csv.reader(io.StringIO(text))
    header = next(reader, None)
    if header != ["sample_id", "label", "score"]:
        raise FormatError(f"unexpected scores CSV header {header!r}")
    ids, labels, scores = [], [], []
    for row in reader:
        if not row:
            continue
        if len(row) != 3:
            raise FormatError(f"malformed scores CSV row {row!r}")
        ids.append(int(row[0]))
        labels.append(int(row[1]))
        scores.append(float(row[2]))
    if not ids:
        raise FormatError("scores CSV has no rows")
    return (
        LtcScores(
            scores=np.asarray(scores, dtype=np.float64),
            train_ids=np.asarray(ids, dtype=np.uint64),
        ),
        np.asarray(labels, dtype=np.uint32),
    )
