"""Deterministic sandbox: emulator, write-then-execute monitor, orchestration.

The emulator stands in for a guest running the sample.  It produces a
stream of :class:`Write`, :class:`Exec` and :class:`Tick` events.  The
monitor consumes only that stream: it tracks pages written since load and
dumps the written region whenever execution lands on one of them.  Nothing
in the monitor knows about packer stubs.
"""
from __future__ import annotations

import enum
import hashlib
import heapq
import io
import json
import os
import tarfile
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Sequence, Union

from .errors import PeError
from .pe import align_up, build_minimal_pe, parse_pe
from .synth import FAMILIES, StubHeader, layer_key

BYTES_PER_TICK = 64


# -- configuration and clock --------------------------------------------------

@dataclass(frozen=True)
class SandboxConfig:
    workers: int = 3
    boot_ticks: int = 45
    quiesce_ticks: int = 30
    timeout_ticks: int = 720
    page_size: int = 4096
    tick_duration: float | None = None  # seconds per tick; None keeps the clock simulated

    def __post_init__(self):
        if self.workers < 1:
            raise ValueError("workers must be >= 1")
        if not 0 <= self.quiesce_ticks < self.timeout_ticks:
            raise ValueError("quiesce_ticks must be non-negative and below timeout_ticks")
        if self.boot_ticks < 0:
            raise ValueError("boot_ticks must be non-negative")
        if self.page_size <= 0 or self.page_size & (self.page_size - 1):
            raise ValueError("page_size must be a power of two")


class SimClock:
    """Tick counter.  With ``tick_duration`` set, advancing also sleeps."""

    def __init__(self, start: int = 0, tick_duration: float | None = None):
        self.now = start
        self.tick_duration = tick_duration

    def advance(self, ticks: int) -> int:
        self.now += ticks
        if self.tick_duration:
            time.sleep(ticks * self.tick_duration)
        return self.now


# -- events -------------------------------------------------------------------

@dataclass(frozen=True)
class Write:
    addr: int
    data: bytes = field(repr=False)

    @property
    def length(self) -> int:
        return len(self.data)


@dataclass(frozen=True)
class Exec:
    addr: int


@dataclass(frozen=True)
class Tick:
    n: int = 1


SandboxEvent = Union[Write, Exec, Tick]


def unpack_region_base(image_base: int, size_of_image: int, page_size: int) -> int:
    """Where decoded layers are written: the first page past the mapped image."""
    return image_base + align_up(size_of_image, page_size)


def emulate(sample: bytes, page_size: int = 4096, max_ticks: int | None = None) -> Iterator[SandboxEvent]:
    """Event stream of ``sample`` running in the guest.

    A sample carrying an ``SPK1`` stub decodes its payload once per layer
    into a fresh region past the image, one :class:`Write` per page, then
    jumps there; the last jump lands on the stub's OEP and the original
    program then runs from the decoded pages.  Anything else just executes
    its own loaded pages.  One :class:`Tick` is emitted per 64 bytes
    processed.  The stream is endless unless ``max_ticks`` is given.

    Raises :class:`~wxunpack.errors.PeError` before yielding anything if
    ``sample`` does not parse.
    """
    image = parse_pe(sample)
    return _run_image(image, page_size, max_ticks)


def _run_image(image, page_size, max_ticks) -> Iterator[SandboxEvent]:
    ticks = 0

    def tick():
        nonlocal ticks
        ticks += 1
        return Tick(1)

    def exhausted():
        return max_ticks is not None and ticks >= max_ticks

    stub = image.section(".stub")
    pay = image.section(".pay")
    header = StubHeader.unpack(stub.data) if stub is not None else None
    layered = (
        header is not None
        and pay is not None
        and header.family in FAMILIES
        and header.layers > 0
        and 0 < header.payload_length <= pay.raw_size
        and header.oep_rva < header.payload_length
    )

    if layered:
        fam = FAMILIES[header.family]
        region = unpack_region_base(image.image_base, image.size_of_image, page_size)
        data = pay.data[: header.payload_length]
        n = len(data)
        for layer in range(header.layers - 1, -1, -1):
            data = fam.decode_layer(data, layer_key(header.key_seed, layer))
            for page_off in range(0, n, page_size):
                page_end = min(page_off + page_size, n)
                for _ in range(page_off, page_end, BYTES_PER_TICK):
                    yield tick()
                    if exhausted():
                        return
                yield Write(region + page_off, data[page_off:page_end])
            yield Exec(region + (header.oep_rva if layer == 0 else 0))
        code_start, code_len, pc = region, n, header.oep_rva
    else:
        code = None
        for s in image.sections:
            if s.virtual_rva <= image.entry_point_rva < s.virtual_rva + max(s.virtual_size, s.raw_size):
                code = s
                break
        if code is None and image.sections:
            code = image.sections[0]
        if code is not None and max(code.virtual_size, code.raw_size) > 0:
            code_start = image.image_base + code.virtual_rva
            code_len = max(code.virtual_size, code.raw_size)
            pc = max(0, min(image.entry_point_rva - code.virtual_rva, code_len - 1))
        else:
            code_start, code_len, pc = image.image_base + image.entry_point_rva, 1, 0

    while not exhausted():
        yield Exec(code_start + pc)
        yield tick()
        pc = (pc + BYTES_PER_TICK) % code_len


# -- monitor ------------------------------------------------------------------

@dataclass(frozen=True)
class ProcessDump:
    index: int
    bytes: bytes = field(repr=False)
    oep_rva: int
    tick_captured: int
    base_addr: int = 0

    def fixed_up(self) -> bytes:
        return build_minimal_pe(self.bytes, self.oep_rva)


class WriteExecMonitor:
    """Incremental write-then-execute detector over a sandbox event stream."""

    def __init__(self, page_size: int = 4096, tick_base: int = 0):
        self.page_size = page_size
        self.ticks = tick_base
        self.memory: dict[int, bytearray] = {}
        self.dirty: set[int] = set()
        self.dumps: list[ProcessDump] = []

    def feed(self, event: SandboxEvent) -> ProcessDump | None:
        if isinstance(event, Tick):
            self.ticks += event.n
        elif isinstance(event, Write):
            self._write(event.addr, event.data)
        elif isinstance(event, Exec):
            page = event.addr // self.page_size
            if page in self.dirty:
                return self._dump(page, event.addr)
        return None

    def _write(self, addr: int, data: bytes) -> None:
        ps = self.page_size
        pos = 0
        while pos < len(data):
            page, off = divmod(addr + pos, ps)
            take = min(ps - off, len(data) - pos)
            buf = self.memory.setdefault(page, bytearray(ps))
            buf[off:off + take] = data[pos:pos + take]
            self.dirty.add(page)
            pos += take

    def _dump(self, page: int, addr: int) -> ProcessDump:
        lo = hi = page
        while lo - 1 in self.dirty:
            lo -= 1
        while hi + 1 in self.dirty:
            hi += 1
        pages = range(lo, hi + 1)
        snapshot = b"".join(bytes(self.memory[p]) for p in pages)
        self.dirty.difference_update(pages)
        base = lo * self.page_size
        dump = ProcessDump(len(self.dumps), snapshot, addr - base, self.ticks, base)
        self.dumps.append(dump)
        return dump


def monitor_unpack(events: Iterable[SandboxEvent], page_size: int = 4096) -> list[ProcessDump]:
    """Run the write-then-execute monitor over a finite event stream."""
    mon = WriteExecMonitor(page_size)
    for ev in events:
        mon.feed(ev)
    return mon.dumps


# -- single analysis ----------------------------------------------------------

class AnalysisState(str, enum.Enum):
    QUEUED = "Queued"
    BOOTING = "Booting"
    TRANSFERRING = "Transferring"
    EXECUTING = "Executing"
    QUIESCING = "Quiescing"
    PACKAGING = "Packaging"
    DONE = "Done"
    FAILED = "Failed"


ALLOWED_TRANSITIONS = {
    (None, AnalysisState.QUEUED),
    (AnalysisState.QUEUED, AnalysisState.BOOTING),
    (AnalysisState.QUEUED, AnalysisState.FAILED),  # sample does not parse; no VM is started
    (AnalysisState.BOOTING, AnalysisState.TRANSFERRING),
    (AnalysisState.TRANSFERRING, AnalysisState.EXECUTING),
    (AnalysisState.EXECUTING, AnalysisState.QUIESCING),
    (AnalysisState.EXECUTING, AnalysisState.FAILED),
    (AnalysisState.QUIESCING, AnalysisState.PACKAGING),
    (AnalysisState.PACKAGING, AnalysisState.DONE),
}


class FailureReason(str, enum.Enum):
    TIMEOUT = "Timeout"
    PARSE_ERROR = "ParseError"


@dataclass
class UnpackContainer:
    original: bytes = field(repr=False)
    dumps: list[ProcessDump]
    log: list[str]
    failure: FailureReason | None = None
    fixed_up: list[bytes] = field(default_factory=list, repr=False)
    duration_ticks: int = 0
    source: str = "dynamic"

    @property
    def sha256(self) -> str:
        return hashlib.sha256(self.original).hexdigest()

    @property
    def unpacked(self) -> bool:
        return self.failure is None and bool(self.dumps)

    @property
    def outcome(self) -> str:
        if self.unpacked:
            return "Unpacked"
        return f"Failed({self.failure.value if self.failure else 'NoDumps'})"

    def meta(self) -> dict:
        return {
            "sha256": self.sha256,
            "source": self.source,
            "outcome": "Unpacked" if self.unpacked else "Failed",
            "reason": None if self.unpacked else (self.failure.value if self.failure else "NoDumps"),
            "duration_ticks": self.duration_ticks,
            "dumps": [
                {
                    "index": d.index,
                    "size": len(d.bytes),
                    "oep_rva": d.oep_rva,
                    "tick_captured": d.tick_captured,
                    "base_addr": d.base_addr,
                }
                for d in self.dumps
            ],
        }

    def to_tar(self) -> bytes:
        """Serialize as a POSIX ustar archive with fixed metadata."""
        buf = io.BytesIO()
        with tarfile.open(fileobj=buf, mode="w", format=tarfile.USTAR_FORMAT) as tar:
            def add(name: str, payload: bytes):
                info = tarfile.TarInfo(name)
                info.size = len(payload)
                info.mode = 0o644
                info.mtime = 0
                info.uid = info.gid = 0
                info.uname = info.gname = ""
                tar.addfile(info, io.BytesIO(payload))

            add("original.bin", self.original)
            for d, pe in zip(self.dumps, self.fixed_up):
                add(f"dumps/dump_{d.index:04d}.bin", d.bytes)
                add(f"dumps/dump_{d.index:04d}.pe", pe)
            add("unpack.log", "".join(line + "\n" for line in self.log).encode("utf-8"))
            add("meta.json", json.dumps(self.meta(), sort_keys=True, indent=1).encode("utf-8"))
        return buf.getvalue()

    def sentinel_text(self) -> str:
        reason = self.failure.value if self.failure else "NoDumps"
        return reason + "\n" + "".join(line + "\n" for line in self.log)

    def write(self, out_dir: str | os.PathLike) -> Path:
        """Write ``<sha256>.unpacked.tar`` or the ``<sha256>.failed.txt`` sentinel."""
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        if self.unpacked:
            path = out / f"{self.sha256}.unpacked.tar"
            _atomic_write(path, self.to_tar())
        else:
            path = out / f"{self.sha256}.failed.txt"
            _atomic_write(path, self.sentinel_text().encode("utf-8"))
        return path


def _atomic_write(path: Path, payload: bytes) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(payload)
    os.replace(tmp, path)


def read_container(path: str | os.PathLike) -> UnpackContainer:
    """Load a container written by :meth:`UnpackContainer.write` (tar or sentinel)."""
    path = Path(path)
    if path.name.endswith(".failed.txt"):
        lines = path.read_text(encoding="utf-8").splitlines()
        return UnpackContainer(b"", [], lines[1:], failure=FailureReason(lines[0]))
    with tarfile.open(path, "r") as tar:
        def read(name):
            return tar.extractfile(name).read()

        meta = json.loads(read("meta.json"))
        dumps, fixed = [], []
        for d in meta["dumps"]:
            raw = read(f"dumps/dump_{d['index']:04d}.bin")
            dumps.append(ProcessDump(d["index"], raw, d["oep_rva"], d["tick_captured"], d.get("base_addr", 0)))
            fixed.append(read(f"dumps/dump_{d['index']:04d}.pe"))
        log = read("unpack.log").decode("utf-8").splitlines()
        return UnpackContainer(
            read("original.bin"), dumps, log, fixed_up=fixed,
            duration_ticks=meta["duration_ticks"], source=meta.get("source", "dynamic"),
        )


class _Recorder:
    def __init__(self, clock: SimClock):
        self.clock = clock
        self.state: AnalysisState | None = None
        self.log: list[str] = []

    def enter(self, state: AnalysisState, event: str) -> None:
        if (self.state, state) not in ALLOWED_TRANSITIONS:
            raise RuntimeError(f"illegal transition {self.state} -> {state}")
        self.state = state
        self.note(event)

    def note(self, event: str) -> None:
        self.log.append(f"tick={self.clock.now} state={self.state.value} event={event}")


def run_analysis(sample: bytes, cfg: SandboxConfig = SandboxConfig(), clock: SimClock | None = None) -> UnpackContainer:
    """Drive one sample through boot, transfer, execution, quiesce and packaging.

    Execution ends ``cfg.quiesce_ticks`` after the first dump (later dumps in
    that window are kept) or fails with ``Timeout`` once ``cfg.timeout_ticks``
    pass without any dump.  Unparseable samples fail with ``ParseError``
    before a sandbox is booted.
    """
    clock = clock if clock is not None else SimClock(tick_duration=cfg.tick_duration)
    start = clock.now
    rec = _Recorder(clock)
    rec.enter(AnalysisState.QUEUED, "queued")
    try:
        events = emulate(sample, cfg.page_size)
    except PeError as exc:
        rec.enter(AnalysisState.FAILED, f"parse_error:{type(exc).__name__}")
        return UnpackContainer(sample, [], rec.log, failure=FailureReason.PARSE_ERROR)

    rec.enter(AnalysisState.BOOTING, "boot")
    clock.advance(cfg.boot_ticks)
    rec.enter(AnalysisState.TRANSFERRING, "transfer")
    rec.enter(AnalysisState.EXECUTING, "execute")

    mon = WriteExecMonitor(cfg.page_size, tick_base=clock.now)
    exec_ticks = 0
    quiet_ticks = 0
    failure = None
    for ev in events:
        if isinstance(ev, Tick):
            clock.advance(ev.n)
            mon.feed(ev)
            if mon.dumps:
                quiet_ticks += ev.n
                if quiet_ticks >= cfg.quiesce_ticks:
                    break
            else:
                exec_ticks += ev.n
                if exec_ticks >= cfg.timeout_ticks:
                    failure = FailureReason.TIMEOUT
                    break
            continue
        dump = mon.feed(ev)
        if dump is not None:
            if dump.index == 0:
                rec.enter(AnalysisState.QUIESCING, "first_dump")
                if cfg.quiesce_ticks == 0:
                    rec.note(f"dump_{dump.index:04d}")
                    break
            rec.note(f"dump_{dump.index:04d}")

    if failure is not None:
        rec.enter(AnalysisState.FAILED, "timeout")
        return UnpackContainer(sample, [], rec.log, failure=failure, duration_ticks=clock.now - start)

    rec.enter(AnalysisState.PACKAGING, "package")
    fixed = [d.fixed_up() for d in mon.dumps]
    rec.enter(AnalysisState.DONE, f"done:{len(mon.dumps)}")
    return UnpackContainer(sample, list(mon.dumps), rec.log, fixed_up=fixed, duration_ticks=clock.now - start)


def replay_log(log: Sequence[str]) -> list[tuple[AnalysisState, int]]:
    """Parse ``tick=N state=X event=Y`` lines and check every transition is legal.

    Returns the sequence of (state, entry tick).  Raises ``ValueError`` on an
    illegal transition or a tick that goes backwards.
    """
    states: list[tuple[AnalysisState, int]] = []
    prev_state, prev_tick = None, None
    for line in log:
        fields = dict(part.split("=", 1) for part in line.split())
        tick, state = int(fields["tick"]), AnalysisState(fields["state"])
        if prev_tick is not None and tick < prev_tick:
            raise ValueError(f"tick went backwards at {line!r}")
        if state != prev_state:
            if (prev_state, state) not in ALLOWED_TRANSITIONS:
                raise ValueError(f"illegal transition {prev_state} -> {state}")
            states.append((state, tick))
        prev_state, prev_tick = state, tick
    return states


# -- orchestration ------------------------------------------------------------

@dataclass(frozen=True)
class SampleTiming:
    index: int
    worker: int
    start_tick: int
    end_tick: int

    @property
    def duration(self) -> int:
        return self.end_tick - self.start_tick


@dataclass
class OrchestrationResult:
    containers: list[UnpackContainer]
    timings: list[SampleTiming]
    total_ticks: int

    @property
    def durations(self) -> list[int]:
        return [t.duration for t in self.timings]


def schedule(durations: Sequence[int], workers: int) -> list[SampleTiming]:
    """Greedy FIFO assignment to the first free slot (lowest id on ties)."""
    slots = [(0, w) for w in range(workers)]
    heapq.heapify(slots)
    out = []
    for i, d in enumerate(durations):
        free, w = heapq.heappop(slots)
        out.append(SampleTiming(i, w, free, free + d))
        heapq.heappush(slots, (free + d, w))
    return out


def orchestrate(
    samples: Sequence[bytes], cfg: SandboxConfig = SandboxConfig(), clock: SimClock | None = None
) -> OrchestrationResult:
    """Analyse ``samples`` on ``cfg.workers`` sandbox slots.

    Each analysis runs on its own clock, so containers do not depend on the
    worker count or thread interleaving; slot timing is derived afterwards
    from per-sample durations.
    """
    with ThreadPoolExecutor(max_workers=cfg.workers) as pool:
        containers = list(pool.map(lambda s: run_analysis(s, cfg, SimClock(tick_duration=cfg.tick_duration)), samples))
    timings = schedule([c.duration_ticks for c in containers], cfg.workers)
    total = max((t.end_tick for t in timings), default=0)
    if clock is not None:
        clock.now += total
    return OrchestrationResult(containers, timings, total)
