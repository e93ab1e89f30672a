"""Minimal PE32 reader/writer and byte entropy.

Only the parts of the format needed to locate section data are handled:
DOS header, NT signature, COFF header, the fixed part of the PE32 optional
header and the section table.  Import tables, relocations and resources are
never touched.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import EmptyDump, EmptyInput, Malformed, NotPe, OepOutOfRange, Truncated

DOS_MAGIC = b"MZ"
NT_SIGNATURE = b"PE\x00\x00"
MACHINE_I386 = 0x014C
PE32_MAGIC = 0x010B
PE32PLUS_MAGIC = 0x020B

DOS_HEADER_SIZE = 64
E_LFANEW_OFFSET = 0x3C
COFF_HEADER_SIZE = 20
OPTIONAL_HEADER_SIZE = 224  # PE32 with 16 data directories
OPTIONAL_HEADER_MIN = 96  # fixed fields, no data directories
SECTION_ENTRY_SIZE = 40
MAX_SECTIONS = 96

FILE_ALIGNMENT = 0x200
SECTION_ALIGNMENT = 0x1000
DEFAULT_IMAGE_BASE = 0x00400000

SCN_CODE = 0x00000020
SCN_INITIALIZED_DATA = 0x00000040
SCN_MEM_EXECUTE = 0x20000000
SCN_MEM_READ = 0x40000000
SCN_MEM_WRITE = 0x80000000

_COFF = struct.Struct("<HHIIIHH")
_SECTION = struct.Struct("<8sIIIIIIHHI")


def align_up(value: int, alignment: int) -> int:
    return (value + alignment - 1) // alignment * alignment


def byte_histogram(data: bytes) -> np.ndarray:
    return np.bincount(np.frombuffer(data, dtype=np.uint8), minlength=256)


def shannon_entropy(data: bytes) -> float:
    """Shannon entropy of ``data`` in bits per byte, in ``[0, 8]``.

    Computed from the 256-bin byte histogram, so the result depends only on
    byte counts and is exactly invariant under reordering of the input.
    """
    n = len(data)
    if n == 0:
        raise EmptyInput("entropy of an empty byte sequence is undefined")
    counts = byte_histogram(data)
    p = counts[counts > 0] / n
    h = float(-(p * np.log2(p)).sum())
    # single-symbol input gives -0.0
    return min(max(h, 0.0), 8.0)


def section_entropy(data: bytes) -> float:
    """Like :func:`shannon_entropy` but zero-length sections score 0."""
    return shannon_entropy(data) if data else 0.0


@dataclass(frozen=True)
class SectionInfo:
    name: str
    raw_offset: int
    raw_size: int
    virtual_rva: int
    virtual_size: int
    entropy: float
    characteristics: int = 0
    data: bytes = field(default=b"", repr=False)

    @property
    def raw_end(self) -> int:
        return self.raw_offset + self.raw_size


@dataclass(frozen=True)
class PeImage:
    image_base: int
    entry_point_rva: int
    sections: tuple[SectionInfo, ...]
    total_file_size: int
    raw: bytes = field(repr=False)

    def section(self, name: str) -> SectionInfo | None:
        for s in self.sections:
            if s.name == name:
                return s
        return None

    def payload(self) -> bytes:
        """Raw bytes of every section concatenated in table order."""
        return b"".join(s.data for s in self.sections)

    @property
    def size_of_image(self) -> int:
        end = SECTION_ALIGNMENT
        for s in self.sections:
            end = max(end, s.virtual_rva + align_up(max(s.virtual_size, s.raw_size), SECTION_ALIGNMENT))
        return end


def parse_pe(data: bytes) -> PeImage:
    """Parse a PE32 image.

    Raises :class:`NotPe` when the MZ/PE magic, machine type or optional
    header magic is wrong (PE32+ included), :class:`Truncated` when a header,
    the section table or a section's raw data runs past the end of the
    buffer, and :class:`Malformed` for overlapping or otherwise impossible
    section layouts.
    """
    data = bytes(data)
    size = len(data)
    if not data.startswith(DOS_MAGIC):
        raise NotPe("missing MZ signature")
    if size < DOS_HEADER_SIZE:
        raise Truncated("DOS header exceeds file length")

    (e_lfanew,) = struct.unpack_from("<I", data, E_LFANEW_OFFSET)
    if e_lfanew + 4 + COFF_HEADER_SIZE > size:
        raise Truncated(f"NT headers at {e_lfanew:#x} exceed file length {size}")
    if data[e_lfanew:e_lfanew + 4] != NT_SIGNATURE:
        raise NotPe("missing PE signature")

    machine, n_sections, _, _, _, opt_size, _ = _COFF.unpack_from(data, e_lfanew + 4)
    if machine != MACHINE_I386:
        raise NotPe(f"unsupported machine {machine:#06x}")
    if n_sections > MAX_SECTIONS:
        raise Malformed(f"{n_sections} sections declared")

    opt_off = e_lfanew + 4 + COFF_HEADER_SIZE
    if opt_off + 2 > size:
        raise Truncated("optional header exceeds file length")
    (magic,) = struct.unpack_from("<H", data, opt_off)
    if magic != PE32_MAGIC:
        raise NotPe(f"optional header magic {magic:#06x} is not PE32")
    if opt_size < OPTIONAL_HEADER_MIN:
        raise Malformed(f"optional header too small ({opt_size} bytes)")
    if opt_off + opt_size > size:
        raise Truncated("optional header exceeds file length")

    (entry_rva,) = struct.unpack_from("<I", data, opt_off + 16)
    (image_base,) = struct.unpack_from("<I", data, opt_off + 28)

    table_off = opt_off + opt_size
    headers_end = table_off + n_sections * SECTION_ENTRY_SIZE
    if headers_end > size:
        raise Truncated("section table exceeds file length")

    sections = []
    for i in range(n_sections):
        (raw_name, vsize, va, raw_size, raw_ptr, _, _, _, _, chars) = _SECTION.unpack_from(
            data, table_off + i * SECTION_ENTRY_SIZE
        )
        name = raw_name.rstrip(b"\x00").decode("latin-1")
        if raw_size == 0:
            body = b""
        else:
            if raw_ptr + raw_size > size:
                raise Truncated(
                    f"section {name!r} raw data [{raw_ptr:#x}, {raw_ptr + raw_size:#x}) exceeds file length {size:#x}"
                )
            if raw_ptr < headers_end:
                raise Malformed(f"section {name!r} raw data overlaps the headers")
            body = data[raw_ptr:raw_ptr + raw_size]
        sections.append(
            SectionInfo(
                name=name,
                raw_offset=raw_ptr if raw_size else 0,
                raw_size=raw_size,
                virtual_rva=va,
                virtual_size=vsize,
                entropy=section_entropy(body),
                characteristics=chars,
                data=body,
            )
        )

    spans = sorted((s.raw_offset, s.raw_end, s.name) for s in sections if s.raw_size)
    for (_, end_a, name_a), (start_b, _, name_b) in zip(spans, spans[1:]):
        if start_b < end_a:
            raise Malformed(f"sections {name_a!r} and {name_b!r} overlap")

    return PeImage(
        image_base=image_base,
        entry_point_rva=entry_rva,
        sections=tuple(sections),
        total_file_size=size,
        raw=data,
    )


def build_pe(
    sections: Sequence[tuple[str, bytes, int]],
    entry_point_rva: int,
    image_base: int = DEFAULT_IMAGE_BASE,
) -> bytes:
    """Write a PE32 image from ``(name, data, characteristics)`` triples.

    Sections are mapped back to back at section alignment starting at RVA
    0x1000 and stored at file alignment; each SizeOfRawData is exactly
    ``len(data)``.  Header fields not needed to locate sections stay zero.
    """
    n = len(sections)
    if n > MAX_SECTIONS:
        raise ValueError(f"too many sections: {n}")
    e_lfanew = DOS_HEADER_SIZE
    table_off = e_lfanew + 4 + COFF_HEADER_SIZE + OPTIONAL_HEADER_SIZE
    size_of_headers = align_up(table_off + n * SECTION_ENTRY_SIZE, FILE_ALIGNMENT)

    layout = []
    raw_ptr = size_of_headers
    rva = SECTION_ALIGNMENT
    for name, body, chars in sections:
        encoded = name.encode("latin-1")
        if len(encoded) > 8:
            raise ValueError(f"section name {name!r} longer than 8 bytes")
        layout.append((encoded, bytes(body), chars, raw_ptr if body else 0, rva))
        if body:
            raw_ptr = align_up(raw_ptr + len(body), FILE_ALIGNMENT)
        rva += align_up(max(len(body), 1), SECTION_ALIGNMENT)
    size_of_image = rva

    out = bytearray(size_of_headers)
    out[0:2] = DOS_MAGIC
    struct.pack_into("<I", out, E_LFANEW_OFFSET, e_lfanew)
    out[e_lfanew:e_lfanew + 4] = NT_SIGNATURE
    _COFF.pack_into(out, e_lfanew + 4, MACHINE_I386, n, 0, 0, 0, OPTIONAL_HEADER_SIZE, 0x0102)

    opt = e_lfanew + 4 + COFF_HEADER_SIZE
    struct.pack_into("<H", out, opt, PE32_MAGIC)
    struct.pack_into("<I", out, opt + 16, entry_point_rva)
    struct.pack_into("<III", out, opt + 28, image_base, SECTION_ALIGNMENT, FILE_ALIGNMENT)
    struct.pack_into("<II", out, opt + 56, size_of_image, size_of_headers)
    struct.pack_into("<H", out, opt + 68, 2)  # IMAGE_SUBSYSTEM_WINDOWS_GUI
    struct.pack_into("<I", out, opt + 92, 16)

    for i, (name, body, chars, ptr, va) in enumerate(layout):
        _SECTION.pack_into(
            out, table_off + i * SECTION_ENTRY_SIZE, name, len(body), va, len(body), ptr, 0, 0, 0, 0, chars
        )

    for _, body, _, ptr, _ in layout:
        if not body:
            continue
        if len(out) < ptr:
            out.extend(bytes(ptr - len(out)))
        out.extend(body)
    return bytes(out)


def build_minimal_pe(dump: bytes, oep_rva: int) -> bytes:
    """Wrap a raw memory dump in just enough PE32 headers to parse.

    The result has a single ``.dump`` section whose raw bytes are ``dump``
    unchanged and whose AddressOfEntryPoint is ``oep_rva``.  No attempt is
    made to rebuild imports.
    """
    if not dump:
        raise EmptyDump("cannot rebuild an empty dump")
    if not 0 <= oep_rva < len(dump):
        raise OepOutOfRange(f"oep {oep_rva:#x} outside dump of {len(dump):#x} bytes")
    chars = SCN_CODE | SCN_INITIALIZED_DATA | SCN_MEM_EXECUTE | SCN_MEM_READ | SCN_MEM_WRITE
    return build_pe([(".dump", dump, chars)], entry_point_rva=oep_rva)

