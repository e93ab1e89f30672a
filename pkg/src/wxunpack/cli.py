"""Command-line entry point: ``wxunpack <subcommand> ...``.

Exit status is 0 on success, 1 on usage errors and 2 when processing
errors occurred (details on stderr).
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .detect import DetectionThresholds, Method
from .pipeline import Listener, Pipeline, PipelineConfig, list_sample_files
from .sandbox import SandboxConfig, SimClock
from .static import DEFAULT_SIGDB, SignatureDb
from .synth import CorpusSpec, gen_corpus


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _sandbox_args(p):
    p.add_argument("--workers", type=int, default=3)
    p.add_argument("--boot", type=int, default=45, help="boot ticks per sandbox")
    p.add_argument("--quiesce", type=int, default=30, help="ticks collected after the first dump")
    p.add_argument("--timeout", type=int, default=720, help="ticks without a dump before giving up")


def _threshold_args(p):
    p.add_argument("--entropy-threshold", type=float, default=7.4)
    p.add_argument("--size-fraction", type=float, default=0.20)
    p.add_argument("--code-threshold", type=float, default=0.40)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="wxunpack", description="Synthetic packer detection and write-then-execute unpacking.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="generate a corpus and manifest")
    p.add_argument("--spec", required=True, help="JSON file with category counts and family mix")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("ingest", help="store and enrich sample files")
    p.add_argument("--repo", required=True)
    p.add_argument("--batch", default="batch-1")
    p.add_argument("files", nargs="+")

    p = sub.add_parser("detect", help="write packer verdicts for every stored sample")
    p.add_argument("--repo", required=True)
    p.add_argument("--method", choices=[m.value for m in Method], required=True)
    _threshold_args(p)

    p = sub.add_parser("unpack-static", help="signature-based unpacking")
    p.add_argument("--repo", required=True)
    p.add_argument("--sigdb", help="signature database file (default: built-in, families 1 and 2)")

    p = sub.add_parser("unpack-dynamic", help="sandboxed unpacking of error-adjusted packed files")
    p.add_argument("--repo", required=True)
    p.add_argument("--out", help="output directory for containers (default: REPO/containers)")
    _sandbox_args(p)

    p = sub.add_parser("gate", help="code-database admission over unpacked containers")
    p.add_argument("--repo", required=True)
    p.add_argument("--code-threshold", type=float, default=0.40)

    p = sub.add_parser("report", help="batch rate table")
    p.add_argument("--repo", required=True)
    p.add_argument("--format", choices=["table", "csv"], default="table")

    p = sub.add_parser("listen", help="watch an inbox and write results to an outbox")
    p.add_argument("--inbox", required=True)
    p.add_argument("--outbox", required=True)
    p.add_argument("--repo", required=True)
    p.add_argument("--sigdb")
    p.add_argument("--poll-interval", type=int, default=1, help="ticks between polls")
    p.add_argument("--tick-seconds", type=float, default=None, help="map ticks to real seconds")
    p.add_argument("--max-polls", type=int, default=None)
    _sandbox_args(p)

    p = sub.add_parser("run", help="full chain over a corpus directory")
    p.add_argument("--corpus", required=True)
    p.add_argument("--repo", required=True)
    p.add_argument("--sigdb")
    p.add_argument("--batch", default="batch-1")
    _sandbox_args(p)
    return parser


def _config(args) -> PipelineConfig:
    t = DetectionThresholds(
        entropy_threshold=getattr(args, "entropy_threshold", 7.4),
        compressed_size_fraction=getattr(args, "size_fraction", 0.20),
        code_fraction_threshold=getattr(args, "code_threshold", 0.40),
    )
    sigdb = SignatureDb.load(args.sigdb) if getattr(args, "sigdb", None) else DEFAULT_SIGDB
    sandbox = SandboxConfig()
    if hasattr(args, "workers"):
        sandbox = SandboxConfig(
            workers=args.workers,
            boot_ticks=args.boot,
            quiesce_ticks=args.quiesce,
            timeout_ticks=args.timeout,
            tick_duration=getattr(args, "tick_seconds", None),
        )
    return PipelineConfig(thresholds=t, sigdb=sigdb, sandbox=sandbox)


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")

    try:
        cfg = _config(args)
    except (ValueError, OSError) as exc:
        parser.error(str(exc))

    if args.command == "synth":
        try:
            spec = CorpusSpec.load(args.spec)
        except (ValueError, TypeError, OSError) as exc:
            parser.error(f"bad corpus spec: {exc}")
        manifest = gen_corpus(spec, args.seed, args.out)
        print(f"{len(manifest.entries)} samples written to {Path(args.out) / 'corpus'}")
        return 0

    pipe = Pipeline(args.repo, cfg)
    cmd = args.command
    if cmd == "ingest":
        for meta in pipe.ingest_files(args.files, args.batch):
            print(f"{meta.sha256} {meta.mime} {meta.size}")
    elif cmd == "detect":
        for meta in pipe.repo.samples():
            verdict = pipe.detect(meta.sha256, args.method)
            print(verdict.to_line(meta.sha256) if verdict else f"{meta.sha256} {args.method} n/a")
    elif cmd == "unpack-static":
        for meta in pipe.repo.samples():
            result = pipe.unpack_static(meta.sha256)
            print(f"{meta.sha256} static={'unpacked' if result else pipe.repo.metadata(meta.sha256).statuses['static']}")
    elif cmd == "unpack-dynamic":
        shas = pipe.apf_members()
        result = pipe.unpack_dynamic(shas, args.out)
        for sha, c in zip(shas, result.containers):
            print(f"{sha} {c.outcome} dumps={len(c.dumps)} ticks={c.duration_ticks}")
        print(f"total_ticks={result.total_ticks} workers={cfg.sandbox.workers}")
    elif cmd == "gate":
        for sha, decision in pipe.gate_all().items():
            print(decision.to_line(sha))
    elif cmd == "report":
        sys.stdout.write(pipe.render(args.format))
    elif cmd == "listen":
        listener = Listener(args.inbox, args.outbox, pipe, poll_interval=args.poll_interval,
                            clock=SimClock(tick_duration=args.tick_seconds))
        try:
            listener.run(max_polls=args.max_polls)
        except KeyboardInterrupt:
            pass
    elif cmd == "run":
        if not list_sample_files(args.corpus):
            print(f"no samples in {args.corpus}", file=sys.stderr)
            return 2
        sys.stdout.write(pipe.run(args.corpus, args.batch))

    for message in pipe.errors:
        print(message, file=sys.stderr)
    return 2 if pipe.errors else 0


if __name__ == "__main__":
    sys.exit(main())
