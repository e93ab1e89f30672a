"""Packer detection and generic write-then-execute unpacking over a synthetic PE32 corpus."""

from .detect import DetectionThresholds, DetectionVerdict, classify_regions, detect_code_ratio, detect_entropy_heuristic
from .gate import GateDecision, gate, select_dump
from .pe import PeImage, SectionInfo, build_minimal_pe, parse_pe, shannon_entropy
from .report import BatchReport, compute_batch_report, render_report
from .repo import Repository, SampleMetadata
from .sandbox import (
    ProcessDump,
    SandboxConfig,
    SimClock,
    UnpackContainer,
    emulate,
    monitor_unpack,
    orchestrate,
    run_analysis,
)
from .static import SignatureDb, identify_packer, static_unpack
from .synth import CorpusSpec, PackRecipe, corrupt, gen_corpus, pack, reference_unpack

__version__ = "0.1.0"

__all__ = [
    "BatchReport",
    "CorpusSpec",
    "DetectionThresholds",
    "DetectionVerdict",
    "GateDecision",
    "PackRecipe",
    "PeImage",
    "ProcessDump",
    "Repository",
    "SampleMetadata",
    "SandboxConfig",
    "SectionInfo",
    "SignatureDb",
    "SimClock",
    "UnpackContainer",
    "build_minimal_pe",
    "classify_regions",
    "compute_batch_report",
    "corrupt",
    "detect_code_ratio",
    "detect_entropy_heuristic",
    "emulate",
    "gate",
    "gen_corpus",
    "identify_packer",
    "monitor_unpack",
    "orchestrate",
    "pack",
    "parse_pe",
    "reference_unpack",
    "render_report",
    "run_analysis",
    "select_dump",
    "shannon_entropy",
    "static_unpack",
]
