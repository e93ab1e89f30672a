import numpy as np
import pytest

from wxunpack.detect import DetectionThresholds
from wxunpack.errors import NoDumps
from wxunpack.gate import GateDecision, gate, gate_bytes, select_dump
from wxunpack.pe import build_minimal_pe
from wxunpack.sandbox import FailureReason, ProcessDump, UnpackContainer, run_analysis
from wxunpack.synth import CorpusSpec, code_window, data_window, iter_corpus, reference_unpack

from .oracles import code_fraction, window_kinds


def _dump_of(n_code, n_data, seed=0, index=0):
    rng = np.random.default_rng(seed)
    body = b"".join(code_window(rng) for _ in range(n_code)) + b"".join(data_window(rng) for _ in range(n_data))
    body += bytes(-len(body) % 4096)
    return ProcessDump(index, body, 0, 10)


def _container(*dumps):
    return UnpackContainer(b"orig", list(dumps), [], fixed_up=[d.fixed_up() for d in dumps])


def test_select_first_of_three():
    dumps = [_dump_of(2, 2, seed=i, index=i) for i in range(3)]
    assert select_dump(_container(*dumps)) is dumps[0]


def test_failed_container_has_no_dumps():
    with pytest.raises(NoDumps):
        select_dump(UnpackContainer(b"x", [], [], failure=FailureReason.TIMEOUT))
    with pytest.raises(NoDumps):
        gate(UnpackContainer(b"x", [], []))


def test_accept_at_045():
    d = _dump_of(9, 11)
    kinds = window_kinds(d.fixed_up())
    assert code_fraction(kinds) == pytest.approx(0.45)
    dec = gate(_container(d))
    assert dec == GateDecision(True, "accepted", pytest.approx(0.45), 0)


def test_reject_at_039_with_packed_status():
    d = _dump_of(39, 61, seed=4)
    assert code_fraction(window_kinds(d.fixed_up())) == pytest.approx(0.39)
    dec = gate(_container(d))
    assert not dec.accepted and dec.status == "packed"
    assert dec.code_fraction == pytest.approx(0.39)


def test_boundary_exactly_at_threshold():
    d = _dump_of(2, 3)
    assert gate(_container(d)).code_fraction == pytest.approx(0.4)
    assert gate(_container(d)).accepted


def test_decision_depends_only_on_first_dump_and_thresholds():
    first = _dump_of(9, 11)
    a = gate(_container(first, _dump_of(0, 8, index=1)))
    b = gate(_container(first, _dump_of(8, 0, seed=3, index=1)))
    assert a == b == gate_bytes(first.fixed_up())
    strict = DetectionThresholds(code_fraction_threshold=0.5)
    assert not gate(_container(first), strict).accepted


def test_line_format():
    line = GateDecision(False, "packed", 0.125).to_line("ff" * 32)
    assert line == "ff" * 32 + " gate=packed code_fraction=0.125000"


def test_one_layer_corpus_accepted_after_dynamic():
    spec = CorpusSpec(packed=12, min_layers=1, max_layers=1)
    for data, e in iter_corpus(spec, 8):
        c = run_analysis(data)
        dump = select_dump(c)
        ref = reference_unpack(data, e.recipe)
        assert dump.bytes[: len(ref)] == ref
        assert dump.index == 0
        assert gate(c).accepted
        assert gate(c) == gate_bytes(build_minimal_pe(dump.bytes, dump.oep_rva))
