"""Code-database admission gate for unpacked containers."""
from __future__ import annotations

from dataclasses import dataclass

from .detect import DEFAULT_THRESHOLDS, DetectionThresholds, detect_code_ratio
from .errors import NoDumps
from .sandbox import ProcessDump, UnpackContainer

ACCEPTED = "accepted"
REJECTED = "packed"


@dataclass(frozen=True)
class GateDecision:
    accepted: bool
    status: str
    code_fraction: float
    dump_index_used: int = 0

    def to_line(self, sha256: str) -> str:
        return f"{sha256} gate={self.status} code_fraction={self.code_fraction:.6f}"


def select_dump(container: UnpackContainer) -> ProcessDump:
    """Only the first dump is ever forwarded."""
    if not container.unpacked:
        raise NoDumps(f"container outcome is {container.outcome}")
    return container.dumps[0]


def gate(container: UnpackContainer, t: DetectionThresholds = DEFAULT_THRESHOLDS) -> GateDecision:
    dump = select_dump(container)
    fixed = container.fixed_up[0] if container.fixed_up else dump.fixed_up()
    return gate_bytes(fixed, t, dump.index)


def gate_bytes(fixed_up: bytes, t: DetectionThresholds = DEFAULT_THRESHOLDS, dump_index: int = 0) -> GateDecision:
    # accept at exactly the threshold; the detector calls packed only strictly below it
    fraction = detect_code_ratio(fixed_up, t).metrics["code_fraction"]
    accepted = fraction >= t.code_fraction_threshold
    return GateDecision(accepted, ACCEPTED if accepted else REJECTED, fraction, dump_index)
