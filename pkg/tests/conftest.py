import struct

import pytest

from wxunpack.synth import make_plain_pe


def hand_built_pe(entry=0x1234, image_base=0x00400000):
    """Two-section PE32 laid out field by field, independent of the package writer.

    .text: raw 0x200 bytes at file offset 0x200, RVA 0x1000
    .data: raw 0x200 bytes at file offset 0x400, RVA 0x2000
    """
    out = bytearray(0x600)
    out[0:2] = b"MZ"
    struct.pack_into("<I", out, 0x3C, 0x80)
    out[0x80:0x84] = b"PE\0\0"
    # COFF: machine, nsections, timestamp, symtab, nsyms, optsize, characteristics
    struct.pack_into("<HHIIIHH", out, 0x84, 0x14C, 2, 0, 0, 0, 0xE0, 0x0102)
    opt = 0x98
    struct.pack_into("<H", out, opt, 0x10B)
    struct.pack_into("<I", out, opt + 16, entry)
    struct.pack_into("<I", out, opt + 28, image_base)
    struct.pack_into("<II", out, opt + 32, 0x1000, 0x200)
    table = opt + 0xE0
    struct.pack_into("<8sIIII12sI", out, table, b".text", 0x200, 0x1000, 0x200, 0x200, b"", 0x60000020)
    struct.pack_into("<8sIIII12sI", out, table + 40, b".data", 0x200, 0x2000, 0x200, 0x400, b"", 0xC0000040)
    out[0x200:0x400] = bytes(range(256)) * 2
    out[0x400:0x600] = b"\x00" * 0x200
    return bytes(out)


@pytest.fixture
def two_section_pe():
    return hand_built_pe()


@pytest.fixture(scope="session")
def plain_pe():
    return make_plain_pe(7)


ACCEPTANCE_LINES: list[str] = []


def record_acceptance(criterion: str, ok: bool, detail: str) -> None:
    line = f"[{'PASS' if ok else 'FAIL'}] {criterion}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
