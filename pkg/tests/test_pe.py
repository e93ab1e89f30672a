import random
import struct

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from wxunpack.errors import EmptyDump, EmptyInput, Malformed, NotPe, OepOutOfRange, PeError, Truncated
from wxunpack.pe import build_minimal_pe, build_pe, parse_pe, shannon_entropy
from wxunpack.synth import prng_bytes

from .conftest import hand_built_pe
from .oracles import histogram_entropy, pe_header_fields

# histogram_entropy(prng_bytes(42, 4096)), see tests/oracles.py
ENTROPY_SEED42_4096 = 7.9530123952117675


def test_parse_hand_built_two_sections(two_section_pe):
    img = parse_pe(two_section_pe)
    ref = pe_header_fields(two_section_pe)
    assert ref["machine"] == 0x14C and ref["magic"] == 0x10B
    assert img.entry_point_rva == ref["entry"] == 0x1234
    assert img.image_base == ref["image_base"]
    assert [s.name for s in img.sections] == [s["name"] for s in ref["sections"]] == [".text", ".data"]
    for s, r in zip(img.sections, ref["sections"]):
        assert (s.raw_offset, s.raw_size, s.virtual_rva, s.virtual_size) == (
            r["raw_ptr"], r["raw_size"], r["virtual_address"], r["virtual_size"])
        assert s.data == two_section_pe[s.raw_offset:s.raw_end]
    assert img.raw == two_section_pe
    assert img.total_file_size == len(two_section_pe)
    assert img.sections[0].entropy == 8.0
    assert img.sections[1].entropy == 0.0


def test_writer_matches_layout_oracle():
    data = build_pe([(".a", b"\x01" * 700, 0), (".b", b"\x02" * 10, 0)], entry_point_rva=0x1010)
    ref = pe_header_fields(data)
    assert ref["entry"] == 0x1010
    assert [(s["raw_ptr"], s["raw_size"]) for s in ref["sections"]] == [(0x200, 700), (0x600, 10)]
    assert [s["virtual_address"] for s in ref["sections"]] == [0x1000, 0x2000]


def test_not_pe():
    with pytest.raises(NotPe):
        parse_pe(b"XX" + bytes(200))


def test_pe32_plus_rejected(two_section_pe):
    data = bytearray(two_section_pe)
    struct.pack_into("<H", data, 0x98, 0x20B)
    with pytest.raises(NotPe):
        parse_pe(bytes(data))


def test_section_past_eof_is_truncated(two_section_pe):
    data = bytearray(two_section_pe)
    struct.pack_into("<I", data, 0x98 + 0xE0 + 40 + 16, 0x10000)  # .data SizeOfRawData
    with pytest.raises(Truncated):
        parse_pe(bytes(data))


def test_overlapping_sections_malformed(two_section_pe):
    data = bytearray(two_section_pe)
    struct.pack_into("<I", data, 0x98 + 0xE0 + 40 + 20, 0x300)  # .data PointerToRawData into .text
    with pytest.raises(Malformed):
        parse_pe(bytes(data))


def test_short_headers_truncated():
    with pytest.raises(Truncated):
        parse_pe(b"MZ" + bytes(10))


def test_dll_accepted(two_section_pe):
    data = bytearray(two_section_pe)
    struct.pack_into("<H", data, 0x84 + 18, 0x2102)
    assert len(parse_pe(bytes(data)).sections) == 2


def test_zero_length_section_has_zero_entropy():
    img = parse_pe(build_pe([(".bss", b"", 0), (".text", b"\x90" * 16, 0)], 0x2000))
    assert img.sections[0].raw_size == 0 and img.sections[0].entropy == 0.0


# -- entropy ------------------------------------------------------------------

def test_entropy_constant():
    assert shannon_entropy(bytes(4096)) == 0.0


def test_entropy_uniform():
    assert shannon_entropy(bytes(range(256))) == 8.0


def test_entropy_prng_seed42_matches_histogram_oracle():
    assert shannon_entropy(prng_bytes(42, 4096)) == pytest.approx(ENTROPY_SEED42_4096, abs=1e-12)


def test_entropy_empty():
    with pytest.raises(EmptyInput):
        shannon_entropy(b"")


@given(st.binary(min_size=1, max_size=2048), st.randoms(use_true_random=False))
def test_entropy_permutation_invariant(data, rnd):
    shuffled = bytearray(data)
    rnd.shuffle(shuffled)
    assert shannon_entropy(bytes(shuffled)) == shannon_entropy(data)


@given(st.binary(min_size=1, max_size=2048))
def test_entropy_bounds_and_zero_iff_constant(data):
    h = shannon_entropy(data)
    assert 0.0 <= h <= 8.0
    assert (h == 0.0) == (len(set(data)) == 1)
    assert h == pytest.approx(histogram_entropy(data), abs=1e-9)


# -- minimal PE rebuild -------------------------------------------------------

def test_minimal_pe_three_pages():
    dump = prng_bytes(3, 3 * 4096)
    img = parse_pe(build_minimal_pe(dump, 0))
    assert img.entry_point_rva == 0
    assert [s.name for s in img.sections] == [".dump"]


def test_minimal_pe_round_trip_oep_4096():
    dump = prng_bytes(4, 3 * 4096)
    img = parse_pe(build_minimal_pe(dump, 4096))
    assert img.sections[0].data == dump
    assert img.entry_point_rva == 4096


def test_minimal_pe_errors():
    with pytest.raises(EmptyDump):
        build_minimal_pe(b"", 0)
    with pytest.raises(OepOutOfRange):
        build_minimal_pe(b"\x90" * 16, 16)


@given(st.binary(min_size=1, max_size=9000), st.data())
def test_minimal_pe_round_trip_property(dump, data):
    oep = data.draw(st.integers(0, len(dump) - 1))
    img = parse_pe(build_minimal_pe(dump, oep))
    assert img.sections[0].data == dump
    assert img.entry_point_rva == oep


@settings(max_examples=300)
@given(st.integers(0, 2**32 - 1))
def test_parse_never_crashes_on_mutations(seed):
    rnd = random.Random(seed)
    data = bytearray(hand_built_pe())
    for _ in range(rnd.randint(1, 8)):
        pos = rnd.randrange(0, 0x200)  # headers, where the parser looks
        data[pos] = rnd.randrange(256)
    if rnd.random() < 0.3:
        del data[rnd.randrange(len(data)):]
    try:
        img = parse_pe(bytes(data))
    except PeError:
        return
    for s in img.sections:
        assert s.raw_end <= len(data)
        assert s.data == bytes(data[s.raw_offset:s.raw_end])
