"""Closed-form compute (FLOPs) and storage (bytes) overhead models for
coreset selection and training-data attribution methods.

Conventions baked into the formulas: a backward pass costs twice a
forward pass (so train steps cost 3f per sample), the selection-loop
log term uses base 10, storage charges bytes_per_param per scalar, and
the engineering units are PFLOPs = 1e15 FLOPs and GB = 1e9 bytes.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass

from ltckit.errors import DataError

PFLOPS = 1.0e15
GIGABYTE = 1.0e9

# ImageNet-1k / ResNet-18 workload used for the headline numbers.
TABLE4_PRESET = {
    "N": 1_281_167,
    "Q": 50_000,
    "T": 90,
    "f": 1_818_228_160,
    "p": 11_689_128,
    "d": 224 * 224 * 3,
    "c": 1000,
    "R": 10,
    "gamma": 1.0,
    "eps": 0.01,
    "bytes_per_param": 4,
    # illustrative values for the attribution-method set; the headline
    # table only covers the coreset methods
    "alpha": 0.5,
    "p_prime": 4096,
}


@dataclass
class WorkloadParams:
    """Every field is optional; each method checks for what it needs."""

    N: float | None = None  # training samples
    Q: float | None = None  # query samples
    T: float | None = None  # epochs
    f: float | None = None  # FLOPs per forward pass
    p: float | None = None  # model parameters
    d: float | None = None  # input dimensionality
    c: float | None = None  # classes
    k: float | None = None  # coreset size; defaults to ceil(0.1 N)
    gamma: float | None = None  # selection frequency
    eps: float | None = None  # tolerance
    R: float | None = None  # retrainings / repeats
    alpha: float | None = None  # sampling ratio
    p_prime: float | None = None  # projection dimension
    b: float | None = None  # batch size
    bytes_per_param: float = 4.0

    def check(self) -> None:
        for name in ("N", "Q", "T", "f", "p", "d", "c", "k", "gamma", "R",
                     "alpha", "p_prime", "b", "bytes_per_param"):
            value = getattr(self, name)
            if value is not None and value <= 0:
                raise DataError(f"{name} must be positive, got {value}")
        if self.eps is not None and not 0.0 < self.eps < 1.0:
            raise DataError(f"eps must be in (0, 1), got {self.eps}")
        if self.alpha is not None and self.alpha > 1.0:
            raise DataError(f"alpha must be in (0, 1], got {self.alpha}")

    def require(self, method: str, *names: str) -> list[float]:
        values = []
        for name in names:
            if name == "k":
                values.append(self.effective_k(method))
                continue
            value = getattr(self, name)
            if value is None:
                raise DataError(f"{method} requires parameter {name}")
            values.append(float(value))
        return values

    def effective_k(self, method: str) -> float:
        if self.k is not None:
            return float(self.k)
        (n,) = self.require(method, "N")
        return float(math.ceil(0.1 * n))

    @classmethod
    def table4(cls, **overrides) -> "WorkloadParams":
        merged = dict(TABLE4_PRESET)
        merged.update(overrides)
        params = cls(**merged)
        params.check()
        return params


@dataclass
class OverheadRow:
    method: str
    compute_flops: float
    storage_bytes: float

    @property
    def compute_pflops(self) -> float:
        return self.compute_flops / PFLOPS

    @property
    def storage_gb(self) -> float:
        return self.storage_bytes / GIGABYTE


@dataclass
class OverheadTable:
    rows: list[OverheadRow]

    def row(self, method: str) -> OverheadRow:
        for r in self.rows:
            if r.method == method:
                return r
        raise DataError(f"no row for method {method!r}")


def _ltc_row(params: WorkloadParams) -> OverheadRow:
    n, q, t, f, bpp = params.require("LTC", "N", "Q", "T", "f", "bytes_per_param")
    return OverheadRow("LTC", q * t * f, n * t * bpp)


def coreset_overheads(params: WorkloadParams) -> OverheadTable:
    """One row per coreset selection method."""
    params.check()
    rows = []

    n, q, t, f, gamma, eps, bpp = params.require(
        "Glister", "N", "Q", "T", "f", "gamma", "eps", "bytes_per_param"
    )
    rows.append(OverheadRow("Glister", n * q * t * f / gamma * math.log10(1.0 / eps), q * bpp))

    n, t, bpp = params.require("Forgetting", "N", "T", "bytes_per_param")
    rows.append(OverheadRow("Forgetting", 0.0, n * t * bpp))

    n, k, bpp = params.require("GraphCut", "N", "k", "bytes_per_param")
    rows.append(OverheadRow("GraphCut", n * n * k, n * n * bpp))

    n, q, d, bpp = params.require("Cal", "N", "Q", "d", "bytes_per_param")
    rows.append(OverheadRow("Cal", n * q * d, n * d * bpp))

    n, t, r, f, p, bpp = params.require("GraNd", "N", "T", "R", "f", "p", "bytes_per_param")
    rows.append(OverheadRow("GraNd", 3.0 * n * t * r * f, n * t * r * p * bpp))

    n, t, d, bpp = params.require("Herding", "N", "T", "d", "bytes_per_param")
    rows.append(OverheadRow("Herding", n * t * d, n * d * bpp))

    n, r, f, d, bpp = params.require("Slocurv", "N", "R", "f", "d", "bytes_per_param")
    rows.append(OverheadRow("Slocurv", 3.0 * n * r * f, n * r * d * bpp))

    rows.append(_ltc_row(params))
    return OverheadTable(rows)


def tda_overheads(params: WorkloadParams) -> OverheadTable:
    """One row per training-data attribution method."""
    params.check()
    rows = []

    alpha, n, q, r, t, f, p, bpp = params.require(
        "Infl", "alpha", "N", "Q", "R", "T", "f", "p", "bytes_per_param"
    )
    an = math.ceil(alpha * n)
    rows.append(OverheadRow("Infl", 3.0 * an * q * r * t * f, r * p * bpp))

    alpha, n, r, t, f, bpp = params.require(
        "Datamodels", "alpha", "N", "R", "T", "f", "bytes_per_param"
    )
    an = math.ceil(alpha * n)
    rows.append(OverheadRow("Datamodels", 3.0 * an * r * t * f, r * n * bpp))

    n, r, p, pp, bpp = params.require("TRAK", "N", "R", "p", "p_prime", "bytes_per_param")
    rows.append(OverheadRow("TRAK", 2.0 * n * r * p * pp, n * pp * bpp))

    n, q, p, pp, bpp = params.require("Arnoldi", "N", "Q", "p", "p_prime", "bytes_per_param")
    rows.append(OverheadRow("Arnoldi", 2.0 * n * q * p * pp, n * q * p * bpp))

    n, t, f, p, bpp = params.require("TracIn", "N", "T", "f", "p", "bytes_per_param")
    rows.append(OverheadRow("TracIn", 3.0 * n * t * f, n * t * p * bpp))

    rows.append(_ltc_row(params))
    return OverheadTable(rows)


def _sig3(value: float) -> str:
    # '#' keeps trailing zeros so three significant digits always show
    text = f"{value:#.3g}"
    return text[:-1] if text.endswith(".") else text


def render_report(table: OverheadTable, unit_mode: str = "engineering") -> str:
    """Aligned plain-text table; engineering mode converts to PFLOPs/GB
    at three significant digits, raw mode prints FLOPs/bytes."""
    if unit_mode not in ("raw", "engineering"):
        raise DataError(f"unknown unit mode {unit_mode!r}")
    if unit_mode == "engineering":
        header = ("method", "compute (PFLOPs)", "storage (GB)")
        cells = [
            (r.method, _sig3(r.compute_pflops), _sig3(r.storage_gb)) for r in table.rows
        ]
    else:
        header = ("method", "compute (FLOPs)", "storage (bytes)")
        cells = [
            (r.method, repr(r.compute_flops), repr(r.storage_bytes)) for r in table.rows
        ]
    widths = [
        max(len(header[i]), *(len(row[i]) for row in cells)) if cells else len(header[i])
        for i in range(3)
    ]
    lines = [
        "  ".join(header[i].ljust(widths[i]) for i in range(3)).rstrip(),
        "  ".join("-" * widths[i] for i in range(3)).rstrip(),
    ]
    for row in cells:
        lines.append("  ".join(row[i].ljust(widths[i]) for i in range(3)).rstrip())
    return "\n".join(lines) + "\n"


def render_csv(table: OverheadTable) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["method", "compute_flops", "storage_bytes", "compute_pflops", "storage_gb"])
    for r in table.rows:
        writer.writerow(
            [r.method, repr(r.compute_flops), repr(r.storage_bytes),
             repr(r.compute_pflops), repr(r.storage_gb)]
        )
    return buf.getvalue()
