"""Batch counters, APF arithmetic and rate tables."""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from decimal import ROUND_HALF_UP, Decimal
from typing import Iterable, Sequence

from .errors import NegativeApf


@dataclass(frozen=True)
class SampleResult:
    """Stage outcomes for one sample, as folded from the result log."""

    sha256: str
    pe32: bool
    packed: bool
    static_unpacked: bool = False
    dynamic_unpacked: bool | None = None  # None: dynamic stage never ran
    runtime_ticks: int | None = None
    gate: str | None = None
    batch: str = "batch-1"

    @property
    def corrupt(self) -> bool:
        return self.packed and not self.pe32

    @property
    def in_apf(self) -> bool:
        return self.packed and not self.static_unpacked and not self.corrupt


@dataclass(frozen=True)
class RuntimeStats:
    min: int
    max: int
    mean: float
    total: int


@dataclass(frozen=True)
class BatchReport:
    label: str
    total_files: int
    pe32_files: int
    packed_files: int
    static_unpacked: int
    corrupt_files: int
    apf: int
    dynamic_unpacked: int
    gate_accepted: int = 0
    runtime: RuntimeStats | None = None

    @property
    def static_rate(self) -> float | None:
        return self.static_unpacked / self.packed_files if self.packed_files else None

    @property
    def dynamic_rate(self) -> float | None:
        return self.dynamic_unpacked / self.apf if self.apf else None

    @classmethod
    def from_counts(
        cls,
        packed_files: int,
        static_unpacked: int,
        corrupt_files: int = 0,
        dynamic_unpacked: int = 0,
        total_files: int | None = None,
        pe32_files: int | None = None,
        gate_accepted: int = 0,
        runtime: RuntimeStats | None = None,
        label: str = "batch",
    ) -> "BatchReport":
        """APF is packed minus static successes minus corrupt files."""
        counts = dict(packed_files=packed_files, static_unpacked=static_unpacked,
                      corrupt_files=corrupt_files, dynamic_unpacked=dynamic_unpacked, gate_accepted=gate_accepted)
        for name, v in counts.items():
            if v < 0:
                raise ValueError(f"{name} must be non-negative, got {v}")
        apf = packed_files - static_unpacked - corrupt_files
        if apf < 0:
            raise NegativeApf(
                f"packed {packed_files} - static {static_unpacked} - corrupt {corrupt_files} = {apf}"
            )
        if dynamic_unpacked > apf:
            raise ValueError(f"dynamic_unpacked {dynamic_unpacked} exceeds APF {apf}")
        return cls(
            label=label,
            total_files=packed_files if total_files is None else total_files,
            pe32_files=packed_files - corrupt_files if pe32_files is None else pe32_files,
            packed_files=packed_files,
            static_unpacked=static_unpacked,
            corrupt_files=corrupt_files,
            apf=apf,
            dynamic_unpacked=dynamic_unpacked,
            gate_accepted=gate_accepted,
            runtime=runtime,
        )


def compute_batch_report(
    records: Iterable[SampleResult], label: str = "batch", total_runtime_ticks: int | None = None
) -> BatchReport:
    """Tally per-sample results into a :class:`BatchReport`.

    Only APF members (packed, not statically unpacked, not corrupt) count
    toward ``dynamic_unpacked``.  ``total_runtime_ticks`` is the wall time of
    the parallel run; without it the runtime total is the sum of durations.
    """
    records = list(records)
    apf_members = [r for r in records if r.in_apf]
    runtimes = [r.runtime_ticks for r in records if r.runtime_ticks is not None and r.dynamic_unpacked is not None]
    runtime = None
    if runtimes:
        runtime = RuntimeStats(
            min=min(runtimes),
            max=max(runtimes),
            mean=sum(runtimes) / len(runtimes),
            total=sum(runtimes) if total_runtime_ticks is None else total_runtime_ticks,
        )
    return BatchReport.from_counts(
        label=label,
        total_files=len(records),
        pe32_files=sum(r.pe32 for r in records),
        packed_files=sum(r.packed for r in records),
        static_unpacked=sum(r.packed and r.static_unpacked for r in records),
        corrupt_files=sum(r.corrupt for r in records),
        dynamic_unpacked=sum(bool(r.dynamic_unpacked) for r in apf_members),
        gate_accepted=sum(r.gate == "accepted" for r in records),
        runtime=runtime,
    )


def percent(numerator: int, denominator: int) -> Decimal | None:
    """``100 * numerator / denominator`` rounded half-up to one decimal."""
    if not denominator:
        return None
    value = Decimal(numerator) * 100 / Decimal(denominator)
    return value.quantize(Decimal("0.1"), rounding=ROUND_HALF_UP)


def format_percent(numerator: int, denominator: int) -> str:
    p = percent(numerator, denominator)
    return "n/a" if p is None else f"{p}%"


def format_ticks(ticks: float | None) -> str:
    if ticks is None:
        return "n/a"
    t = int(round(ticks))
    h, rem = divmod(t, 3600)
    m, s = divmod(rem, 60)
    return f"{h}h {m:02d}m {s:02d}s" if h else f"{m}m {s:02d}s"


# (key, table heading) in display order
COLUMNS = (
    ("batch", "Batch"),
    ("total_files", "All Files"),
    ("pe32_files", "PE32 Files"),
    ("packed_files", "Packed Files"),
    ("static_unpacked", "Static Unpacked"),
    ("static_rate", "Static/Packed"),
    ("corrupt_files", "Corrupt"),
    ("apf", "APF"),
    ("dynamic_unpacked", "Unpacked Files"),
    ("dynamic_rate", "Dynamic/APF"),
    ("gate_accepted", "Gate Accepted"),
    ("runtime_min", "Fastest"),
    ("runtime_max", "Slowest"),
    ("runtime_mean", "Average"),
    ("runtime_total", "Complete"),
)


def _row(r: BatchReport, human: bool) -> list[str]:
    rt = r.runtime
    ticks = format_ticks if human else (lambda v: "" if v is None else (f"{v:.1f}" if isinstance(v, float) else str(v)))
    return [
        r.label,
        str(r.total_files),
        str(r.pe32_files),
        str(r.packed_files),
        str(r.static_unpacked),
        format_percent(r.static_unpacked, r.packed_files),
        str(r.corrupt_files),
        str(r.apf),
        str(r.dynamic_unpacked),
        format_percent(r.dynamic_unpacked, r.apf),
        str(r.gate_accepted),
        ticks(rt.min if rt else None),
        ticks(rt.max if rt else None),
        ticks(rt.mean if rt else None),
        ticks(rt.total if rt else None),
    ]


def render_report(reports: BatchReport | Sequence[BatchReport], format: str = "table") -> str:
    """Render one row per batch.  ``table`` is aligned text; ``csv`` is machine-readable."""
    if isinstance(reports, BatchReport):
        reports = [reports]
    if format == "csv":
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow([key for key, _ in COLUMNS])
        for r in reports:
            w.writerow(_row(r, human=False))
        return buf.getvalue()
    if format != "table":
        raise ValueError(f"unknown report format {format!r}")
    rows = [[heading for _, heading in COLUMNS]] + [_row(r, human=True) for r in reports]
    widths = [max(len(row[i]) for row in rows) for i in range(len(COLUMNS))]
    lines = []
    for n, row in enumerate(rows):
        lines.append("  ".join(cell.rjust(w) if i else cell.ljust(w) for i, (cell, w) in enumerate(zip(row, widths))).rstrip())
        if n == 0:
            lines.append("  ".join("-" * w for w in widths))
    return "\n".join(lines) + "\n"


def parse_report_csv(text: str) -> list[dict[str, str]]:
    return list(csv.DictReader(io.StringIO(text)))
