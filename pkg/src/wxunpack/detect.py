"""Packer detection: section-entropy rule and region-suppression code ratio."""
from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .errors import EmptyInput
from .pe import PeImage, shannon_entropy


class Method(str, enum.Enum):
    ENTROPY = "entropy"
    CODE_RATIO = "coderatio"


class RegionKind(str, enum.Enum):
    NULL = "Null"
    STRING = "String"
    DATA = "Data"
    CODE = "Code"
    PACKED = "Packed"


@dataclass(frozen=True)
class DetectionThresholds:
    entropy_threshold: float = 7.4
    compressed_size_fraction: float = 0.20
    code_fraction_threshold: float = 0.40
    region_window: int = 256
    null_fraction: float = 0.90
    printable_fraction: float = 0.85
    payload_entropy_floor: float = 7.0
    code_entropy_floor: float = 4.0

    def __post_init__(self):
        for name in ("compressed_size_fraction", "code_fraction_threshold", "null_fraction", "printable_fraction"):
            v = getattr(self, name)
            if not 0.0 < v < 1.0:
                raise ValueError(f"{name} must lie in (0, 1), got {v}")
        for name in ("entropy_threshold", "payload_entropy_floor", "code_entropy_floor"):
            v = getattr(self, name)
            if not 0.0 < v < 8.0:
                raise ValueError(f"{name} must lie in (0, 8), got {v}")
        if self.region_window < 16:
            raise ValueError(f"region_window must be >= 16, got {self.region_window}")


DEFAULT_THRESHOLDS = DetectionThresholds()


@dataclass(frozen=True)
class Region:
    offset: int
    length: int
    kind: RegionKind


@dataclass(frozen=True)
class RegionMap:
    regions: tuple[Region, ...]

    def __iter__(self):
        return iter(self.regions)

    def __len__(self):
        return len(self.regions)

    @property
    def total_length(self) -> int:
        return sum(r.length for r in self.regions)

    def bytes_by_kind(self) -> dict[RegionKind, int]:
        out = {k: 0 for k in RegionKind}
        for r in self.regions:
            out[r.kind] += r.length
        return out

    def kinds(self) -> list[RegionKind]:
        return [r.kind for r in self.regions]


@dataclass(frozen=True)
class DetectionVerdict:
    packed: bool
    method: Method
    metrics: Mapping[str, float]
    details: tuple = field(default=(), repr=False)
    region_map: RegionMap | None = field(default=None, repr=False)

    @property
    def metric_name(self) -> str:
        return "compressed_fraction" if self.method is Method.ENTROPY else "code_fraction"

    @property
    def metric(self) -> float:
        return self.metrics[self.metric_name]

    def to_line(self, sha256: str) -> str:
        """``sha256 method packed metric_name=value``"""
        return f"{sha256} {self.method.value} {str(self.packed).lower()} {self.metric_name}={self.metric:.6f}"


@dataclass(frozen=True)
class SectionEvidence:
    name: str
    raw_size: int
    entropy: float
    compressed: bool


def detect_entropy_heuristic(image: PeImage, t: DetectionThresholds = DEFAULT_THRESHOLDS) -> DetectionVerdict:
    """Flag ``image`` as packed when high-entropy sections make up enough of the file.

    A section counts as compressed when its entropy is strictly above
    ``t.entropy_threshold``.  The image is packed when at least one section
    is compressed and their combined raw size is strictly more than
    ``t.compressed_size_fraction`` of the file.
    """
    evidence = tuple(
        SectionEvidence(s.name, s.raw_size, s.entropy, s.entropy > t.entropy_threshold) for s in image.sections
    )
    compressed_bytes = sum(e.raw_size for e in evidence if e.compressed)
    fraction = compressed_bytes / image.total_file_size if image.total_file_size else 0.0
    packed = any(e.compressed for e in evidence) and fraction > t.compressed_size_fraction
    return DetectionVerdict(
        packed=packed,
        method=Method.ENTROPY,
        metrics={"compressed_fraction": fraction},
        details=evidence,
    )


_PRINTABLE = np.zeros(256, dtype=bool)
_PRINTABLE[0x20:0x7F] = True
_PRINTABLE[[0x09, 0x0A, 0x0D]] = True


def classify_window(window: bytes, t: DetectionThresholds = DEFAULT_THRESHOLDS) -> RegionKind:
    arr = np.frombuffer(window, dtype=np.uint8)
    n = arr.size
    if np.count_nonzero(arr == 0) >= t.null_fraction * n:
        return RegionKind.NULL
    if np.count_nonzero(_PRINTABLE[arr]) >= t.printable_fraction * n:
        return RegionKind.STRING
    h = shannon_entropy(window)
    if h >= t.payload_entropy_floor:
        return RegionKind.PACKED
    if h >= t.code_entropy_floor:
        return RegionKind.CODE
    return RegionKind.DATA


def classify_regions(data: bytes, t: DetectionThresholds = DEFAULT_THRESHOLDS) -> RegionMap:
    """Tile ``data`` into fixed windows, classify each, and merge equal neighbours."""
    if not data:
        raise EmptyInput("cannot classify an empty buffer")
    w = t.region_window
    regions: list[Region] = []
    for off in range(0, len(data), w):
        chunk = data[off:off + w]
        kind = classify_window(chunk, t)
        if regions and regions[-1].kind is kind:
            last = regions[-1]
            regions[-1] = Region(last.offset, last.length + len(chunk), kind)
        else:
            regions.append(Region(off, len(chunk), kind))
    return RegionMap(tuple(regions))


def code_fraction_of(region_map: RegionMap) -> float:
    """Code bytes over Code+Data+Packed bytes; 1.0 when nothing is left after suppression."""
    counts = region_map.bytes_by_kind()
    denom = counts[RegionKind.CODE] + counts[RegionKind.DATA] + counts[RegionKind.PACKED]
    if denom == 0:
        return 1.0
    return counts[RegionKind.CODE] / denom


def detect_code_ratio(data: bytes, t: DetectionThresholds = DEFAULT_THRESHOLDS) -> DetectionVerdict:
    region_map = classify_regions(data, t)
    fraction = code_fraction_of(region_map)
    return DetectionVerdict(
        packed=fraction < t.code_fraction_threshold,
        method=Method.CODE_RATIO,
        metrics={"code_fraction": fraction},
        details=region_map.regions,
        region_map=region_map,
    )
