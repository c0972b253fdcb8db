"""The LTRJ on-disk format for per-sample loss trajectories.

An LTRJ file decouples the correlation engine from whatever produced
the losses. Layout (all integers little-endian):

    magic        4 bytes  "LTRJ"
    version      u16      currently 1
    dtype code   u8       0 = float32, 1 = float64
    reserved     u8       must be 0
    n_samples    u64
    n_snapshots  u32      snapshot 0 is the pre-training loss
    n_classes    u32
    tag length   u16      byte length of the UTF-8 split tag
    split tag    ...      UTF-8 bytes
    sample_ids   N x u64
    labels       N x u32
    losses       N x S values, sample-major, in the declared dtype
    checksum     u32      CRC32 over every preceding byte

Loss values must be finite but may be negative; the format admits
arbitrary loss functions. Snapshot count must be at least 2 so that at
least one epoch-to-epoch delta is computable.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass, field

import numpy as np

from ltckit.errors import DataError, FormatError
from ltckit.ioutil import ByteSink, ByteSource, open_sink, read_all

MAGIC = b"LTRJ"
VERSION = 1
DTYPE_CODES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_FIXED_HEADER = struct.Struct("<4sHBBQIIH")  # up to and including tag length
_SNAPSHOT_COUNT_OFFSET = 16  # byte offset of the u32 n_snapshots field


@dataclass
class TrajectoryDataset:
    """Per-sample losses across training snapshots, with identities."""

    split_tag: str
    n_classes: int
    sample_ids: np.ndarray  # (N,) uint64
    labels: np.ndarray  # (N,) uint32
    losses: np.ndarray  # (N, S) float32 or float64
    format_version: int = VERSION
    dtype_code: int = 0

    def __post_init__(self) -> None:
        self.sample_ids = np.ascontiguousarray(self.sample_ids, dtype=np.uint64)
        self.labels = np.ascontiguousarray(self.labels, dtype=np.uint32)
        if self.dtype_code not in DTYPE_CODES:
            raise DataError(f"unknown dtype code {self.dtype_code}")
        self.losses = np.ascontiguousarray(self.losses, dtype=DTYPE_CODES[self.dtype_code])

    @property
    def n_samples(self) -> int:
        return self.losses.shape[0]

    @property
    def n_snapshots(self) -> int:
        return self.losses.shape[1]

    def check_invariants(self) -> None:
        if self.losses.ndim != 2 or self.n_samples < 1:
            raise DataError("losses must be a non-empty N x S matrix")
        if self.n_snapshots < 2:
            raise DataError("at least 2 snapshots are required")
        if self.sample_ids.shape != (self.n_samples,):
            raise DataError("sample_ids length does not match losses")
        if self.labels.shape != (self.n_samples,):
            raise DataError("labels length does not match losses")
        if len(np.unique(self.sample_ids)) != self.n_samples:
            raise DataError("duplicate id")
        if self.n_classes < 1:
            raise DataError("n_classes must be positive")
        if np.any(self.labels >= self.n_classes):
            raise DataError("label out of range")
        if not np.all(np.isfinite(self.losses)):
            raise DataError("losses contain a non-finite value")


@dataclass
class DeltaMatrix:
    """Epoch-to-epoch loss changes: deltas[m][t] = loss[m][t+1] - loss[m][t]."""

    sample_ids: np.ndarray  # (N,) uint64
    deltas: np.ndarray  # (N, T) float64

    @property
    def n_samples(self) -> int:
        return self.deltas.shape[0]

    @property
    def n_deltas(self) -> int:
        return self.deltas.shape[1]


@dataclass(frozen=True)
class Issue:
    code: str
    message: str
    offset: int | None = None


@dataclass
class ValidationReport:
    issues: list[Issue] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.issues


def _header_bytes(dataset_like, n_snapshots: int) -> bytes:
    tag = dataset_like.split_tag.encode("utf-8")
    if len(tag) > 0xFFFF:
        raise DataError("split tag exceeds 65535 bytes")
    return (
        _FIXED_HEADER.pack(
            MAGIC,
            VERSION,
            dataset_like.dtype_code,
            0,
            dataset_like.n_samples,
            n_snapshots,
            dataset_like.n_classes,
            len(tag),
        )
        + tag
    )


def _serialize(dataset: TrajectoryDataset) -> bytes:
    body = (
        _header_bytes(dataset, dataset.n_snapshots)
        + dataset.sample_ids.astype("<u8").tobytes()
        + dataset.labels.astype("<u4").tobytes()
        + dataset.losses.astype(DTYPE_CODES[dataset.dtype_code]).tobytes()
    )
    return body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)


def write_dataset(dataset: TrajectoryDataset, destination: ByteSink) -> int:
    """Write a dataset in LTRJ layout; returns the byte count.

    Invariants are checked before any byte reaches the sink.
    """
    dataset.check_invariants()
    blob = _serialize(dataset)
    with open_sink(destination) as fh:
        fh.write(blob)
    return len(blob)


class _Cursor:
    """Byte reader that reports the offset of whatever failed."""

    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.data):
            raise FormatError(f"unexpected EOF reading {what} at offset {self.pos}")
        chunk = self.data[self.pos : self.pos + n]
        self.pos += n
        return chunk


def read_dataset(source: ByteSource) -> TrajectoryDataset:
    """Parse and fully verify an LTRJ byte stream."""
    data = read_all(source)
    cur = _Cursor(data)
    magic, version, dtype_code, reserved, n, s, c, tag_len = _FIXED_HEADER.unpack(
        cur.take(_FIXED_HEADER.size, "header")
    )
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}")
    if version != VERSION:
        raise FormatError(f"unsupported version {version}")
    if dtype_code not in DTYPE_CODES:
        raise FormatError(f"unknown dtype code {dtype_code}")
    if reserved != 0:
        raise FormatError(f"reserved byte is {reserved}, expected 0")
    try:
        tag = cur.take(tag_len, "split tag").decode("utf-8")
    except UnicodeDecodeError as exc:
        raise FormatError(f"split tag is not valid UTF-8: {exc}") from exc
    dtype = DTYPE_CODES[dtype_code]
    ids = np.frombuffer(cur.take(n * 8, "sample ids"), dtype="<u8")
    labels = np.frombuffer(cur.take(n * 4, "labels"), dtype="<u4")
    losses = np.frombuffer(cur.take(n * s * dtype.itemsize, "losses"), dtype=dtype)
    (stored_crc,) = struct.unpack("<I", cur.take(4, "checksum"))
    if cur.pos != len(data):
        raise FormatError(f"{len(data) - cur.pos} trailing bytes after checksum")
    actual_crc = zlib.crc32(data[: cur.pos - 4]) & 0xFFFFFFFF
    if stored_crc != actual_crc:
        raise FormatError(
            f"checksum mismatch: stored {stored_crc:#010x}, computed {actual_crc:#010x}"
        )
    dataset = TrajectoryDataset(
        split_tag=tag,
        n_classes=c,
        sample_ids=ids.copy(),
        labels=labels.copy(),
        losses=losses.reshape(n, s).copy(),
        dtype_code=dtype_code,
    )
    dataset.check_invariants()
    return dataset


def validate(source: ByteSource) -> ValidationReport:
    """Check an LTRJ byte stream, collecting every violated rule.

    Unlike read_dataset this never raises; each problem becomes a
    report entry. A truncation ends the scan early since nothing after
    it is addressable.
    """
    report = ValidationReport()
    try:
        data = read_all(source)
    except OSError as exc:
        report.issues.append(Issue("io-error", str(exc), None))
        return report
    cur = _Cursor(data)
    try:
        header_off = cur.pos
        magic, version, dtype_code, reserved, n, s, c, tag_len = _FIXED_HEADER.unpack(
            cur.take(_FIXED_HEADER.size, "header")
        )
        if magic != MAGIC:
            report.issues.append(Issue("bad-magic", f"bad magic {magic!r}", header_off))
            return report
        if version != VERSION:
            report.issues.append(Issue("bad-version", f"unsupported version {version}", 4))
        dtype = DTYPE_CODES.get(dtype_code)
        if dtype is None:
            report.issues.append(Issue("bad-dtype", f"unknown dtype code {dtype_code}", 6))
            return report
        if reserved != 0:
            report.issues.append(Issue("bad-reserved", f"reserved byte is {reserved}", 7))
        if s < 2:
            report.issues.append(
                Issue("too-few-snapshots", f"{s} snapshots, need at least 2", 16)
            )
        if c < 1:
            report.issues.append(Issue("bad-class-count", "class count must be positive", 20))
        tag_off = cur.pos
        try:
            cur.take(tag_len, "split tag").decode("utf-8")
        except UnicodeDecodeError:
            report.issues.append(Issue("bad-split-tag", "split tag is not valid UTF-8", tag_off))
        ids_off = cur.pos
        ids = np.frombuffer(cur.take(n * 8, "sample ids"), dtype="<u8")
        labels_off = cur.pos
        labels = np.frombuffer(cur.take(n * 4, "labels"), dtype="<u4")
        losses_off = cur.pos
        losses = np.frombuffer(cur.take(n * s * dtype.itemsize, "losses"), dtype=dtype)
        crc_off = cur.pos
        (stored_crc,) = struct.unpack("<I", cur.take(4, "checksum"))
    except FormatError as exc:
        report.issues.append(Issue("unexpected-eof", str(exc), cur.pos))
        return report

    if cur.pos != len(data):
        report.issues.append(
            Issue("trailing-bytes", f"{len(data) - cur.pos} bytes after checksum", cur.pos)
        )
    actual_crc = zlib.crc32(data[:crc_off]) & 0xFFFFFFFF
    if stored_crc != actual_crc:
        report.issues.append(
            Issue(
                "checksum-mismatch",
                f"stored {stored_crc:#010x}, computed {actual_crc:#010x}",
                crc_off,
            )
        )
    if n >= 1 and len(np.unique(ids)) != n:
        report.issues.append(Issue("duplicate-id", "sample ids are not pairwise distinct", ids_off))
    if n < 1:
        report.issues.append(Issue("no-samples", "file declares zero samples", 8))
    bad_labels = np.nonzero(labels >= max(c, 1))[0]
    for idx in bad_labels[:16]:
        report.issues.append(
            Issue(
                "label-out-of-range",
                f"label {int(labels[idx])} at sample {int(idx)} not below {c}",
                labels_off + 4 * int(idx),
            )
        )
    nonfinite = np.nonzero(~np.isfinite(losses))[0]
    for idx in nonfinite[:16]:
        report.issues.append(
            Issue(
                "nonfinite-loss",
                f"non-finite loss at flat index {int(idx)}",
                losses_off + dtype.itemsize * int(idx),
            )
        )
    return report


def compute_deltas(dataset: TrajectoryDataset) -> DeltaMatrix:
    """Differentiate trajectories along the snapshot axis in float64."""
    if dataset.n_snapshots < 2:
        raise DataError("at least 2 snapshots are required to compute deltas")
    losses = dataset.losses.astype(np.float64)
    return DeltaMatrix(
        sample_ids=dataset.sample_ids.copy(),
        deltas=losses[:, 1:] - losses[:, :-1],
    )


class TrajectoryWriter:
    """Incremental LTRJ writer: header up front, snapshots as training
    proceeds, snapshot count back-patched at finalize.

    Snapshots are buffered in memory (the payload is the same O(N*T)
    values the file holds) because the on-disk loss region is
    sample-major while snapshots arrive epoch-major. The finalized file
    is byte-identical to write_dataset of the assembled matrix.
    Single-owner: one writer per file, no concurrent appends.
    """

    def __init__(
        self,
        path,
        sample_ids,
        labels,
        n_classes: int,
        split_tag: str = "train",
        dtype_code: int = 0,
    ):
        self.sample_ids = np.ascontiguousarray(sample_ids, dtype=np.uint64)
        self.labels = np.ascontiguousarray(labels, dtype=np.uint32)
        self.n_classes = int(n_classes)
        self.split_tag = split_tag
        if dtype_code not in DTYPE_CODES:
            raise DataError(f"unknown dtype code {dtype_code}")
        self.dtype_code = dtype_code
        n = self.sample_ids.shape[0]
        if n < 1:
            raise DataError("writer needs at least one sample")
        if self.labels.shape[0] != n:
            raise DataError("labels length does not match sample_ids")
        if len(np.unique(self.sample_ids)) != n:
            raise DataError("duplicate id")
        if np.any(self.labels >= self.n_classes):
            raise DataError("label out of range")
        self._snapshots: list[np.ndarray] = []
        self._path = path
        self._fh = open(path, "wb")
        self._prefix = bytearray(
            _header_bytes(self, 0)
            + self.sample_ids.astype("<u8").tobytes()
            + self.labels.astype("<u4").tobytes()
        )
        self._fh.write(self._prefix)
        self._fh.flush()
        self._finalized = False

    @property
    def n_samples(self) -> int:
        return self.sample_ids.shape[0]

    @property
    def n_snapshots(self) -> int:
        return len(self._snapshots)

    def append_snapshot(self, epoch_losses) -> "TrajectoryWriter":
        if self._finalized:
            raise DataError("writer already finalized")
        arr = np.asarray(epoch_losses, dtype=np.float64)
        if arr.shape != (self.n_samples,):
            raise DataError(
                f"length mismatch: got {arr.shape[0] if arr.ndim == 1 else arr.shape} "
                f"losses for {self.n_samples} samples"
            )
        if not np.all(np.isfinite(arr)):
            raise DataError("losses contain a non-finite value")
        self._snapshots.append(arr.astype(DTYPE_CODES[self.dtype_code]))
        return self

    def finalize(self):
        if self._finalized:
            raise DataError("writer already finalized")
        if self.n_snapshots < 2:
            raise DataError("at least 2 snapshots are required before finalize")
        losses = np.stack(self._snapshots, axis=1)  # epoch-major in, sample-major out
        struct.pack_into("<I", self._prefix, _SNAPSHOT_COUNT_OFFSET, self.n_snapshots)
        body = bytes(self._prefix) + losses.tobytes()
        self._fh.seek(_SNAPSHOT_COUNT_OFFSET)
        self._fh.write(self._prefix[_SNAPSHOT_COUNT_OFFSET : _SNAPSHOT_COUNT_OFFSET + 4])
        self._fh.seek(len(self._prefix))
        self._fh.write(losses.tobytes())
        self._fh.write(struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF))
        self._fh.close()
        self._finalized = True
        return self._path
