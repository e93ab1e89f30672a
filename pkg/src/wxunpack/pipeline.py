"""Analysis chain over a repository: enrich, detect, static, dynamic, gate, report.

Every stage appends one JSON record per sample to ``results.jsonl``; the
report is folded from those records, so stages can run separately (as the
CLI subcommands do) or in one go via :meth:`Pipeline.run`.
"""
from __future__ import annotations

import logging
import os
import shutil
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

from .detect import DEFAULT_THRESHOLDS, DetectionThresholds, DetectionVerdict, Method, detect_code_ratio, detect_entropy_heuristic
from .errors import NotSupported, ParseError, PeError, StubInconsistent
from .gate import GateDecision, gate
from .pe import parse_pe
from .report import BatchReport, SampleResult, compute_batch_report, render_report
from .repo import Repository, SampleMetadata
from .sandbox import ProcessDump, SandboxConfig, SimClock, UnpackContainer, orchestrate, read_container
from .static import DEFAULT_SIGDB, SignatureDb, static_unpack

log = logging.getLogger(__name__)


@dataclass
class PipelineConfig:
    thresholds: DetectionThresholds = DEFAULT_THRESHOLDS
    sigdb: SignatureDb = DEFAULT_SIGDB
    sandbox: SandboxConfig = field(default_factory=SandboxConfig)
    # which detector's verdict defines "packed" for APF accounting
    packed_method: Method = Method.CODE_RATIO


def list_sample_files(directory: str | os.PathLike) -> list[Path]:
    d = Path(directory)
    if (d / "corpus").is_dir():
        d = d / "corpus"
    return sorted(p for p in d.iterdir() if p.is_file() and not p.name.startswith(".") and not p.name.endswith(".tmp"))


class Pipeline:
    def __init__(self, repo: Repository | str | os.PathLike, cfg: PipelineConfig | None = None):
        self.repo = repo if isinstance(repo, Repository) else Repository(repo)
        self.cfg = cfg or PipelineConfig()
        self.errors: list[str] = []

    # -- stages -------------------------------------------------------------

    def ingest_files(self, paths: Iterable[str | os.PathLike], batch: str = "batch-1") -> list[SampleMetadata]:
        out = []
        for p in paths:
            try:
                data = Path(p).read_bytes()
            except OSError as exc:
                self._error(f"{p}: {exc}")
                continue
            out.append(self.ingest(data, batch))
        return out

    def ingest(self, data: bytes, batch: str = "batch-1") -> SampleMetadata:
        known = self.repo.ingest(data, batch)
        if "parse" not in known.statuses:
            self.enrich(known.sha256)
        return known

    def enrich(self, sha: str) -> bool:
        data = self.repo.get(sha)
        try:
            parse_pe(data)
            pe32, error = True, None
        except PeError as exc:
            pe32, error = False, type(exc).__name__
        self.repo.append_result({"sha256": sha, "stage": "parse", "pe32": pe32, "error": error})
        self.repo.set_status(sha, "parse", "pe32" if pe32 else error)
        return pe32

    def detect(self, sha: str, method: Method | str) -> DetectionVerdict | None:
        method = Method(method)
        data = self.repo.get(sha)
        if method is Method.CODE_RATIO:
            verdict = detect_code_ratio(data, self.cfg.thresholds) if data else None
        else:
            try:
                verdict = detect_entropy_heuristic(parse_pe(data), self.cfg.thresholds)
            except PeError:
                verdict = None
        record = {"sha256": sha, "stage": "detect", "method": method.value}
        if verdict is None:
            record.update(packed=None, line=None)
        else:
            record.update(packed=verdict.packed, metric=verdict.metric_name, value=round(verdict.metric, 6),
                          line=verdict.to_line(sha))
        self.repo.append_result(record)
        if method is self.cfg.packed_method:
            self.repo.set_status(sha, "detect", "n/a" if verdict is None else ("packed" if verdict.packed else "clean"))
        return verdict

    def unpack_static(self, sha: str) -> bytes | None:
        data = self.repo.get(sha)
        result, unpacked = "unpacked", None
        try:
            unpacked = static_unpack(data, self.cfg.sigdb)
        except (NotSupported, ParseError, StubInconsistent) as exc:
            result = type(exc).__name__
        if unpacked is not None:
            self.repo.static_dir.mkdir(parents=True, exist_ok=True)
            (self.repo.static_dir / f"{sha}.unpacked.pe").write_bytes(unpacked)
        self.repo.append_result({"sha256": sha, "stage": "static", "result": result})
        self.repo.set_status(sha, "static", result)
        return unpacked

    def unpack_dynamic(self, shas: Sequence[str], out_dir: str | os.PathLike | None = None):
        out = Path(out_dir) if out_dir is not None else self.repo.containers
        result = orchestrate([self.repo.get(s) for s in shas], self.cfg.sandbox)
        for sha, container, timing in zip(shas, result.containers, result.timings):
            path = container.write(out)
            if out != self.repo.containers:
                container.write(self.repo.containers)
            self.repo.append_result({
                "sha256": sha,
                "stage": "dynamic",
                "outcome": "Unpacked" if container.unpacked else "Failed",
                "reason": None if container.unpacked else container.failure.value,
                "dumps": len(container.dumps),
                "duration_ticks": container.duration_ticks,
                "artifact": path.name,
            })
            self.repo.set_status(sha, "dynamic", container.outcome)
        self.repo.append_result({
            "stage": "orchestrate",
            "samples": len(shas),
            "workers": self.cfg.sandbox.workers,
            "total_ticks": result.total_ticks,
        })
        return result

    def gate_container(self, sha: str, container: UnpackContainer) -> GateDecision:
        decision = gate(container, self.cfg.thresholds)
        self.repo.append_result({
            "sha256": sha,
            "stage": "gate",
            "status": decision.status,
            "code_fraction": round(decision.code_fraction, 6),
            "dump_index": decision.dump_index_used,
            "line": decision.to_line(sha),
        })
        self.repo.set_status(sha, "gate", decision.status)
        return decision

    def gate_all(self) -> dict[str, GateDecision]:
        out = {}
        if not self.repo.containers.is_dir():
            return out
        for path in sorted(self.repo.containers.glob("*.unpacked.tar")):
            sha = path.name.split(".", 1)[0]
            out[sha] = self.gate_container(sha, read_container(path))
        return out

    # -- selections ---------------------------------------------------------

    def fold(self) -> tuple[list[SampleResult], int | None]:
        """Collapse the result log into one :class:`SampleResult` per sample.

        Later records for the same stage override earlier ones.
        """
        latest: dict[tuple, dict] = {}
        total_ticks = None
        for rec in self.repo.results():
            if rec["stage"] == "orchestrate":
                total_ticks = (total_ticks or 0) + rec["total_ticks"]
                continue
            key = (rec["sha256"], rec["stage"], rec.get("method"))
            latest[key] = rec
        out = []
        for meta in self.repo.samples():
            sha = meta.sha256
            parse = latest.get((sha, "parse", None), {})
            det = latest.get((sha, "detect", Method.CODE_RATIO.value)) if self.cfg.packed_method is Method.CODE_RATIO \
                else latest.get((sha, "detect", Method.ENTROPY.value))
            static = latest.get((sha, "static", None), {})
            dyn = latest.get((sha, "dynamic", None))
            gate_rec = latest.get((sha, "gate", None))
            out.append(SampleResult(
                sha256=sha,
                pe32=bool(parse.get("pe32")),
                packed=bool(det and det.get("packed")),
                static_unpacked=static.get("result") == "unpacked",
                dynamic_unpacked=None if dyn is None else dyn["outcome"] == "Unpacked",
                runtime_ticks=None if dyn is None else dyn["duration_ticks"],
                gate=None if gate_rec is None else gate_rec["status"],
                batch=meta.batch,
            ))
        return out, total_ticks

    def apf_members(self) -> list[str]:
        results, _ = self.fold()
        return [r.sha256 for r in results if r.in_apf]

    def reports(self) -> list[BatchReport]:
        results, total = self.fold()
        batches: dict[str, list[SampleResult]] = {}
        for r in results:
            batches.setdefault(r.batch, []).append(r)
        single = len(batches) == 1
        return [compute_batch_report(rs, label=b, total_runtime_ticks=total if single else None)
                for b, rs in batches.items()]

    def render(self, format: str = "table") -> str:
        return render_report(self.reports(), format)

    # -- whole chain --------------------------------------------------------

    def run(self, corpus: str | os.PathLike, batch: str = "batch-1") -> str:
        """Ingest a corpus directory and run every stage; returns the table report."""
        metas = self.ingest_files(list_sample_files(corpus), batch)
        shas = [m.sha256 for m in metas]
        for sha in shas:
            for method in (Method.ENTROPY, Method.CODE_RATIO):
                self.detect(sha, method)
        for sha in shas:
            self.unpack_static(sha)
        apf = [s for s in self.apf_members() if s in set(shas)]
        result = self.unpack_dynamic(apf)
        for sha, container in zip(apf, result.containers):
            if container.unpacked:
                self.gate_container(sha, container)
        text = self.render("table")
        (self.repo.root / "report.txt").write_text(text)
        return text

    def _error(self, message: str) -> None:
        log.error(message)
        self.errors.append(message)


def static_container(original: bytes, unpacked_pe: bytes, page_size: int = 4096) -> UnpackContainer:
    """Wrap a static unpacking result in the same container shape as a sandbox run."""
    image = parse_pe(unpacked_pe)
    body = image.sections[0].data
    padded = body + bytes(-len(body) % page_size)
    dump = ProcessDump(0, padded, image.entry_point_rva, 0)
    return UnpackContainer(
        original, [dump], ["tick=0 state=Done event=static_unpack"], fixed_up=[dump.fixed_up()], source="static"
    )


class Listener:
    """Inbox/outbox daemon.

    Each poll moves new inbox files to ``inprogress/``, runs the chain and
    leaves exactly one artifact per file in the outbox: a ``.unpacked.tar``
    container or a ``.failed.txt`` sentinel.  Anything found in
    ``inprogress/`` at startup is the remains of an aborted run and is
    deleted.
    """

    def __init__(
        self,
        inbox: str | os.PathLike,
        outbox: str | os.PathLike,
        pipeline: Pipeline,
        inprogress: str | os.PathLike | None = None,
        poll_interval: int = 1,
        clock: SimClock | None = None,
    ):
        self.inbox = Path(inbox)
        self.outbox = Path(outbox)
        self.pipeline = pipeline
        self.inprogress = Path(inprogress) if inprogress else pipeline.repo.root / "inprogress"
        self.poll_interval = poll_interval
        self.clock = clock or SimClock()
        self.polls = 0

    def startup(self) -> None:
        if self.inprogress.exists():
            for leftover in self.inprogress.iterdir():
                log.warning("removing aborted analysis %s", leftover.name)
                if leftover.is_dir():
                    shutil.rmtree(leftover)
                else:
                    leftover.unlink()
        self.inprogress.mkdir(parents=True, exist_ok=True)
        self.outbox.mkdir(parents=True, exist_ok=True)

    def poll_once(self) -> list[Path]:
        self.polls += 1
        pipe = self.pipeline
        claimed = []
        for path in list_sample_files(self.inbox):
            target = self.inprogress / path.name
            try:
                os.replace(path, target)
                data = target.read_bytes()
            except OSError as exc:
                pipe._error(f"{path}: {exc}")
                continue
            claimed.append((target, data))

        artifacts: list[Path] = []
        dynamic: list[tuple[Path, str]] = []
        for target, data in claimed:
            try:
                sha = pipe.ingest(data).sha256
                for method in (Method.ENTROPY, Method.CODE_RATIO):
                    pipe.detect(sha, method)
                unpacked = pipe.unpack_static(sha)
            except OSError as exc:
                pipe._error(f"{target.name}: {exc}")
                continue
            if unpacked is not None:
                container = static_container(data, unpacked, pipe.cfg.sandbox.page_size)
                artifacts.append(container.write(self.outbox))
                pipe.gate_container(sha, container)
                target.unlink()
            else:
                dynamic.append((target, sha))

        if dynamic:
            shas = [sha for _, sha in dynamic]
            result = pipe.unpack_dynamic(shas, self.outbox)
            for (target, sha), container in zip(dynamic, result.containers):
                name = f"{sha}.unpacked.tar" if container.unpacked else f"{sha}.failed.txt"
                artifacts.append(self.outbox / name)
                if container.unpacked:
                    pipe.gate_container(sha, container)
                target.unlink()
        return artifacts

    def run(self, max_polls: int | None = None, stop: threading.Event | None = None) -> None:
        self.startup()
        while not (stop is not None and stop.is_set()):
            self.poll_once()
            if max_polls is not None and self.polls >= max_polls:
                break
            self.clock.advance(self.poll_interval)
            if self.clock.tick_duration is None and stop is not None:
                time.sleep(0.01)
