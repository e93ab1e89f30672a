"""Exit criteria.  Each test prints one PASS/FAIL line (also repeated in the
terminal summary) and then asserts the same condition."""
import hashlib
import time

import pytest

from wxunpack.detect import detect_code_ratio, detect_entropy_heuristic
from wxunpack.errors import NotSupported, ParseError, PeError
from wxunpack.gate import REJECTED, gate, gate_bytes, select_dump
from wxunpack.pe import build_minimal_pe, build_pe, parse_pe
from wxunpack.pipeline import Listener, Pipeline
from wxunpack.report import BatchReport, SampleResult, compute_batch_report, percent
from wxunpack.sandbox import SandboxConfig, UnpackContainer, emulate, monitor_unpack, orchestrate, run_analysis
from wxunpack.static import DEFAULT_SIGDB, static_unpack
from wxunpack.synth import CorpusSpec, PackRecipe, gen_corpus, iter_corpus, make_sample, pack, prng_bytes, reference_unpack

from .conftest import record_acceptance
from .oracles import rescan_dumps

pytestmark = pytest.mark.acceptance

CORPUS_SPEC = CorpusSpec(plain=40, text=20, lowcode=10, packed=110, corrupt=20)
CORPUS_SEED = 2015


@pytest.fixture(scope="module")
def corpus():
    samples = list(iter_corpus(CORPUS_SPEC, CORPUS_SEED))
    assert len(samples) == 200
    return samples


def _check(criterion, ok, detail):
    record_acceptance(criterion, ok, detail)
    assert ok, detail


def _step_budget(data):
    img = parse_pe(data)
    pay, stub = img.section(".pay"), img.section(".stub")
    layers = stub.data[6] if stub is not None else 1
    return layers * (len(pay.data) if pay else 0) // 64 + 40


# -- 1. dynamic rate arithmetic ------------------------------------------------

def test_apf_rate_reproduction():
    t0 = time.perf_counter()
    packed = [36, 61, 64, 41, 72]
    static = [14, 1, 5, 1, 1]
    apf = [14, 19, 24, 19, 25]
    unpacked = [11, 15, 15, 6, 15]
    target = [78.6, 78.9, 62.5, 31.6, 60.0]
    got = []
    for p, s, a, u in zip(packed, static, apf, unpacked):
        corrupt = p - s - a
        recs = []
        for i in range(p):
            kind = "static" if i < s else "corrupt" if i < s + corrupt else "apf"
            k = i - s - corrupt
            recs.append(SampleResult(f"{i}", pe32=kind != "corrupt", packed=True, static_unpacked=kind == "static",
                                     dynamic_unpacked=(k < u) if kind == "apf" else None))
        rep = compute_batch_report(recs)
        assert rep.apf == a and rep.dynamic_unpacked == u
        got.append(rep.dynamic_rate * 100)
    elapsed = time.perf_counter() - t0
    ok = all(abs(g - t) <= 0.05 for g, t in zip(got, target)) and elapsed < 1
    _check("APF rate arithmetic", ok,
           " / ".join(f"{g:.2f}" for g in got) + f" vs {' / '.join(map(str, target))} (±0.05 pp, {elapsed:.3f}s)")


# -- 2. static rate arithmetic --------------------------------------------------

def test_static_rate_reproduction():
    t0 = time.perf_counter()
    cases = [(14, 36, 38.9), (5, 64, 7.8), (1, 41, 2.4), (1, 72, 1.4), (1689, 6963, 24.3)]
    got = [BatchReport.from_counts(p, s).static_rate * 100 for s, p, _ in cases]
    rendered = [str(percent(s, p)) for s, p, _ in cases]
    elapsed = time.perf_counter() - t0
    ok = all(abs(g - t) <= 0.05 for g, (_, _, t) in zip(got, cases)) and elapsed < 1
    ok = ok and rendered == ["38.9", "7.8", "2.4", "1.4", "24.3"]
    _check("static rate arithmetic", ok, " / ".join(f"{g:.2f}" for g in got) + f" ({elapsed:.3f}s)")


# -- 3. runtime accounting --------------------------------------------------------

def test_runtime_accounting():
    t0 = time.perf_counter()
    cfg = SandboxConfig(workers=3)
    # per-sample durations spread evenly around 551 ticks; decode time is payload/64
    durations = [551 + 4 * (i - 50) for i in range(101)]
    samples = []
    for i, d in enumerate(durations):
        ticks = d - cfg.boot_ticks - cfg.quiesce_ticks
        base = build_pe([(".text", prng_bytes(i, ticks * 64), 0)], 0x1000)
        samples.append(pack(base, PackRecipe(3, 1, i)))
    result = orchestrate(samples, cfg)
    elapsed = time.perf_counter() - t0
    measured = result.durations
    mean = sum(measured) / len(measured)
    target = 101 * 551 / 3
    ok = (all(c.unpacked for c in result.containers) and mean == 551
          and abs(result.total_ticks - target) <= 0.10 * target and elapsed < 5)
    _check("runtime accounting", ok,
           f"mean {mean:.1f} ticks, min {min(measured)}, max {max(measured)}, total {result.total_ticks} ticks "
           f"vs {target:.0f} ±10% ({elapsed:.2f}s)")


# -- 4. static unpacking oracle equivalence -----------------------------------------

def test_static_oracle_equivalence(corpus):
    t0 = time.perf_counter()
    mismatches, successes = [], 0
    for data, e in corpus:
        expected = e.category == "packed" and e.family in DEFAULT_SIGDB.supported
        try:
            out = static_unpack(data)
        except (NotSupported, ParseError):
            if expected:
                mismatches.append(e.sha256)
            continue
        successes += 1
        if not expected or parse_pe(out).sections[0].data != reference_unpack(data, e.recipe):
            mismatches.append(e.sha256)
    elapsed = time.perf_counter() - t0
    ok = not mismatches and elapsed < 10
    _check("static unpacking oracle equivalence", ok,
           f"{successes} successes, {len(mismatches)} mismatches over {len(corpus)} samples ({elapsed:.2f}s)")


# -- 5. write-then-execute soundness ------------------------------------------------

def test_write_exec_soundness(corpus):
    t0 = time.perf_counter()
    checked = oracle_mismatch = count_mismatch = payload_mismatch = 0
    for data, e in corpus:
        if e.category == "corrupt":
            with pytest.raises(PeError):
                emulate(data)
            continue
        events = list(emulate(data, 4096, max_ticks=_step_budget(data)))
        dumps = monitor_unpack(events, 4096)
        checked += 1
        if [(d.base_addr, d.bytes, d.oep_rva) for d in dumps] != rescan_dumps(events, 4096):
            oracle_mismatch += 1
        if len(dumps) != e.layers:
            count_mismatch += 1
        if e.layers:
            ref = reference_unpack(data, e.recipe)
            if dumps[-1].bytes[: len(ref)] != ref or dumps[-1].oep_rva != e.oep_rva:
                payload_mismatch += 1
    elapsed = time.perf_counter() - t0
    ok = not (oracle_mismatch or count_mismatch or payload_mismatch) and elapsed < 30
    _check("write-then-execute soundness", ok,
           f"{checked} samples: oracle mismatches {oracle_mismatch}, dump/layer mismatches {count_mismatch}, "
           f"final-dump mismatches {payload_mismatch} ({elapsed:.2f}s)")


# -- 6. detector ground truth -----------------------------------------------------------

def test_detector_ground_truth(corpus):
    t0 = time.perf_counter()
    layered = entropy_hits = ratio_hits = 0
    text_flagged = 0
    for data, e in corpus:
        if e.category == "packed":
            img = parse_pe(data)
            if img.section(".pay").raw_size < 0.5 * len(data):
                continue
            layered += 1
            entropy_hits += detect_entropy_heuristic(img).packed
            ratio_hits += detect_code_ratio(data).packed
        elif e.category == "text":
            text_flagged += detect_entropy_heuristic(parse_pe(data)).packed + detect_code_ratio(data).packed
    elapsed = time.perf_counter() - t0
    ok = layered > 0 and entropy_hits >= 0.95 * layered and ratio_hits >= 0.95 * layered
    ok = ok and text_flagged == 0 and elapsed < 10
    _check("detector ground truth", ok,
           f"entropy {entropy_hits}/{layered}, code ratio {ratio_hits}/{layered}, "
           f"text fixtures flagged {text_flagged}/{CORPUS_SPEC.text} ({elapsed:.2f}s)")


# -- 7. gate behaviour ------------------------------------------------------------------

def test_gate_behaviour(corpus):
    t0 = time.perf_counter()
    decisions, bad = 0, []
    statuses = set()
    for data, e in corpus:
        if e.category != "packed":
            continue
        c = run_analysis(data)
        if not c.unpacked:
            bad.append(f"{e.sha256[:8]} not unpacked")
            continue
        d = gate(c)
        first = c.dumps[0]
        again = gate_bytes(build_minimal_pe(first.bytes, first.oep_rva))
        decisions += 1
        statuses.add(d.status)
        if select_dump(c) is not first or d.dump_index_used != 0 or d != again:
            bad.append(f"{e.sha256[:8]} not reproducible")
        if not d.accepted and d.status != "packed":
            bad.append(f"{e.sha256[:8]} status {d.status!r}")
    # multi-dump container from a full event stream: still index 0
    multi, _ = make_sample("packed", 77, CorpusSpec(min_layers=3, max_layers=3))
    dumps = monitor_unpack(emulate(multi, max_ticks=_step_budget(multi)))
    three = UnpackContainer(multi, dumps, [], fixed_up=[x.fixed_up() for x in dumps])
    if len(dumps) != 3 or gate(three) != gate_bytes(dumps[0].fixed_up()):
        bad.append("multi-dump container")
    elapsed = time.perf_counter() - t0
    ok = not bad and REJECTED == "packed" and statuses <= {"accepted", "packed"} and elapsed < 5
    _check("gate behaviour", ok,
           f"{decisions} decisions reproducible from first dump, statuses {sorted(statuses)}, "
           f"problems {bad[:3]} ({elapsed:.2f}s)")


# -- 8. end-to-end listener -------------------------------------------------------------

def test_listener_end_to_end(tmp_path):
    t0 = time.perf_counter()
    known = CorpusSpec(families={1: 1.0, 2: 1.0})
    novel = CorpusSpec(families={3: 1.0})
    plan = [("plain", None)] * 3 + [("packed", known)] * 3 + [("packed", novel)] * 2 + [("corrupt", None)] * 2
    inbox, outbox = tmp_path / "inbox", tmp_path / "outbox"
    inbox.mkdir()
    entries = []
    for i, (cat, spec) in enumerate(plan):
        data, e = make_sample(cat, 1000 + i, spec)
        (inbox / f"sample_{i:02d}.exe").write_bytes(data)
        entries.append(e)
    pipe = Pipeline(tmp_path / "repo")
    Listener(inbox, outbox, pipe).run(max_polls=3)

    problems = []
    for e in entries:
        tar = outbox / f"{e.sha256}.unpacked.tar"
        failed = outbox / f"{e.sha256}.failed.txt"
        if tar.exists() == failed.exists():
            problems.append(f"{e.category} {e.sha256[:8]} artifacts tar={tar.exists()} failed={failed.exists()}")
            continue
        want_tar = e.category == "packed"
        if tar.exists() != want_tar:
            problems.append(f"{e.category} {e.sha256[:8]} wrong artifact")
        if failed.exists():
            reason = failed.read_text().splitlines()[0]
            if reason != ("ParseError" if e.category == "corrupt" else "Timeout"):
                problems.append(f"{e.category} reason {reason}")
    if len(list(outbox.iterdir())) != len(entries):
        problems.append(f"{len(list(outbox.iterdir()))} outbox files")

    rep = pipe.reports()[0]
    n_known = sum(e.category == "packed" and e.family in (1, 2) for e in entries)
    n_novel = sum(e.category == "packed" and e.family == 3 for e in entries)
    n_corrupt = sum(e.category == "corrupt" for e in entries)
    expected = dict(total_files=10, pe32_files=10 - n_corrupt, packed_files=n_known + n_novel + n_corrupt,
                    static_unpacked=n_known, corrupt_files=n_corrupt, apf=n_novel, dynamic_unpacked=n_novel)
    got = {k: getattr(rep, k) for k in expected}
    if got != expected:
        problems.append(f"report {got} != {expected}")
    elapsed = time.perf_counter() - t0
    ok = not problems and not list(inbox.iterdir()) and elapsed < 30
    _check("end-to-end listener", ok,
           f"10 inbox files -> {len(list(outbox.iterdir()))} artifacts, report {got}, problems {problems} "
           f"({elapsed:.2f}s)")


# -- 9. determinism -----------------------------------------------------------------------

def _digest_tree(root):
    out = {}
    for p in sorted(root.rglob("*")):
        if p.is_file():
            out[str(p.relative_to(root))] = hashlib.sha256(p.read_bytes()).hexdigest()
    return out


def test_run_determinism(tmp_path):
    t0 = time.perf_counter()
    spec = CorpusSpec(plain=6, text=2, lowcode=2, packed=14, corrupt=3)
    runs = []
    for k in ("a", "b"):
        gen_corpus(spec, 42, tmp_path / k / "corpus_dir")
        pipe = Pipeline(tmp_path / k / "repo")
        report = pipe.run(tmp_path / k / "corpus_dir")
        root = tmp_path / k / "repo"
        runs.append(((root / "results.jsonl").read_bytes(), _digest_tree(root / "containers"), report,
                     (root / "index.jsonl").read_bytes()))
    elapsed = time.perf_counter() - t0
    a, b = runs
    ok = a == b and len(a[1]) > 0
    _check("determinism", ok,
           f"results.jsonl equal={a[0] == b[0]}, {len(a[1])} containers equal={a[1] == b[1]}, "
           f"report equal={a[2] == b[2]}, index equal={a[3] == b[3]} ({elapsed:.2f}s)")
