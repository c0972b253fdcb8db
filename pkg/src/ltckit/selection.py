"""Coreset selection over per-sample scores, plus the JSON manifest
that records what was picked and why.

Two policies: global-top-k, and a class-balanced variant that fills an
equal per-class quota (remainder spread across the classes whose best
remaining candidate scores highest) and backfills from the global pool
when a class runs short of members.
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass, field

import numpy as np

from ltckit.errors import DataError, FormatError
from ltckit.ioutil import ByteSink, ByteSource, open_sink, read_all
from ltckit.ltc import LtcScores

MANIFEST_VERSION = 1
POLICIES = ("global-top-k", "class-balanced")


@dataclass
class SelectedSample:
    id: int
    score: float
    label: int | None


@dataclass
class CoresetManifest:
    policy: str
    k: int
    selected: list[SelectedSample]
    per_class_count: dict[int, int]
    source_digest: str
    warnings: list[str] = field(default_factory=list)
    version: int = MANIFEST_VERSION

    @property
    def selected_ids(self) -> list[int]:
        return [s.id for s in self.selected]

    def check_invariants(self) -> None:
        if self.policy not in POLICIES:
            raise DataError(f"unknown policy {self.policy!r}")
        if self.k < 1:
            raise DataError("k must be positive")
        if len(self.selected) != self.k:
            raise DataError(f"{len(self.selected)} samples listed but k={self.k}")
        ids = self.selected_ids
        if len(set(ids)) != len(ids):
            raise DataError("duplicate id in selection")


def candidate_digest(scores: LtcScores, labels=None) -> str:
    """CRC32 over the selection inputs: per candidate id u64, label u32
    (0xFFFFFFFF when absent), score f64, little-endian, dataset order."""
    crc = 0
    n = scores.scores.shape[0]
    labels_arr = None if labels is None else np.asarray(labels)
    for i in range(n):
        label = 0xFFFFFFFF if labels_arr is None else int(labels_arr[i])
        crc = zlib.crc32(
            struct.pack("<QId", int(scores.train_ids[i]), label, float(scores.scores[i])), crc
        )
    return f"crc32:{crc & 0xFFFFFFFF:08x}"


def _check_inputs(scores: LtcScores, labels, k: int):
    ids = np.asarray(scores.train_ids, dtype=np.uint64)
    vals = np.asarray(scores.scores, dtype=np.float64)
    if ids.ndim != 1 or vals.ndim != 1 or ids.shape[0] != vals.shape[0]:
        raise DataError("ids and scores must be 1-d and the same length")
    n = ids.shape[0]
    if n == 0:
        raise DataError("no candidates to select from")
    if np.unique(ids).shape[0] != n:
        raise DataError("duplicate id in candidates")
    if not np.all(np.isfinite(vals)):
        raise DataError("non-finite score")
    if not 1 <= k <= n:
        raise DataError(f"k={k} out of range [1, {n}]")
    if labels is not None:
        labels = np.asarray(labels, dtype=np.int64)
        if labels.shape[0] != n:
            raise DataError("labels length does not match scores")
        if np.any(labels < 0):
            raise DataError("negative label")
    return ids, vals, labels


def _ranked_order(vals: np.ndarray, ids: np.ndarray) -> np.ndarray:
    """Indices sorted by score descending, ties by ascending id."""
    return np.lexsort((ids, -vals))


def _make_manifest(policy, k, ids, vals, labels, picked, warnings, digest):
    selected = []
    counts: dict[int, int] = {}
    for i in picked:
        label = int(labels[i]) if labels is not None else None
        selected.append(SelectedSample(id=int(ids[i]), score=float(vals[i]), label=label))
        if label is not None:
            counts[label] = counts.get(label, 0) + 1
    manifest = CoresetManifest(
        policy=policy,
        k=k,
        selected=selected,
        per_class_count=counts,
        source_digest=digest,
        warnings=list(warnings),
    )
    manifest.check_invariants()
    return manifest


def select_top_k(scores: LtcScores, k: int, labels=None) -> CoresetManifest:
    """The k highest-scoring samples; ties break by ascending id."""
    ids, vals, labels = _check_inputs(scores, labels, k)
    picked = _ranked_order(vals, ids)[:k]
    digest = candidate_digest(scores, labels)
    return _make_manifest("global-top-k", k, ids, vals, labels, picked, [], digest)


def select_class_balanced(scores: LtcScores, labels, k: int, n_classes: int) -> CoresetManifest:
    """k samples spread evenly over classes.

    Each class gets floor(k / n_classes) slots; the k mod n_classes
    leftover slots go to distinct classes ranked by their best remaining
    candidate. Classes without enough members surrender their slots to
    the best remaining candidates overall, with a warning per class.
    """
    if labels is None:
        raise DataError("class-balanced selection requires labels")
    ids, vals, labels = _check_inputs(scores, labels, k)
    if n_classes < 1:
        raise DataError("n_classes must be positive")
    if np.any(labels >= n_classes):
        raise DataError("label out of range for n_classes")

    order = _ranked_order(vals, ids)
    by_class = {c: [i for i in order if labels[i] == c] for c in range(n_classes)}

    quota = k // n_classes
    remainder = k % n_classes
    if remainder:
        # Rank classes by the score of their first candidate past the base
        # quota; ties by candidate id. Classes with no spare candidate lose.
        contenders = []
        for c in range(n_classes):
            rest = by_class[c][quota:]
            if rest:
                contenders.append((-vals[rest[0]], ids[rest[0]], c))
        contenders.sort()
        bonus = {c for _, _, c in contenders[:remainder]}
    else:
        bonus = set()

    warnings = []
    picked = []
    taken = np.zeros(ids.shape[0], dtype=bool)
    shortfall = 0
    for c in range(n_classes):
        want = quota + (1 if c in bonus else 0)
        got = by_class[c][:want]
        for i in got:
            taken[i] = True
        picked.extend(got)
        if len(got) < want:
            shortfall += want - len(got)
            warnings.append(
                f"class {c} has {len(by_class[c])} members, wanted {want}; "
                "slots redistributed"
            )
    if shortfall:
        for i in order:
            if shortfall == 0:
                break
            if not taken[i]:
                taken[i] = True
                picked.append(i)
                shortfall -= 1

    picked = sorted(picked, key=lambda i: (-vals[i], ids[i]))
    digest = candidate_digest(scores, labels)
    return _make_manifest("class-balanced", k, ids, vals, labels, picked, warnings, digest)


def manifest_to_json(manifest: CoresetManifest) -> str:
    doc = {
        "version": manifest.version,
        "policy": manifest.policy,
        "k": manifest.k,
        "selected": [
            {"id": s.id, "score": s.score, "label": s.label} for s in manifest.selected
        ],
        "per_class_count": {str(c): n for c, n in sorted(manifest.per_class_count.items())},
        "warnings": manifest.warnings,
        "source_digest": manifest.source_digest,
    }
    return json.dumps(doc, sort_keys=True, ensure_ascii=False) + "\n"


def export_manifest(manifest: CoresetManifest, destination: ByteSink) -> int:
    manifest.check_invariants()
    blob = manifest_to_json(manifest).encode("utf-8")
    with open_sink(destination) as fh:
        fh.write(blob)
    return len(blob)


def load_manifest(source: ByteSource, scores: LtcScores | None = None,
                  labels=None) -> CoresetManifest:
    """Parse and structurally validate a manifest. When the candidate
    scores (and labels, if the manifest was built with them) are given,
    the stored source digest is checked against them."""
    try:
        doc = json.loads(read_all(source).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"manifest is not valid JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise FormatError("manifest root must be an object")
    try:
        version = doc["version"]
        if version != MANIFEST_VERSION:
            raise FormatError(f"unsupported manifest version {version}")
        selected = [
            SelectedSample(id=int(e["id"]), score=float(e["score"]), label=e["label"])
            for e in doc["selected"]
        ]
        manifest = CoresetManifest(
            policy=doc["policy"],
            k=int(doc["k"]),
            selected=selected,
            per_class_count={int(c): int(n) for c, n in doc["per_class_count"].items()},
            source_digest=doc["source_digest"],
            warnings=list(doc["warnings"]),
            version=int(version),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"malformed manifest: {exc}") from exc
    try:
        manifest.check_invariants()
    except DataError as exc:
        raise FormatError(str(exc)) from exc
    if scores is not None:
        actual = candidate_digest(scores, labels)
        if manifest.source_digest != actual:
            raise FormatError(
                f"digest mismatch: manifest has {manifest.source_digest}, "
                f"candidates give {actual}"
            )
    return manifest
