"""Signature-based static unpacking of known packer families."""
from __future__ import annotations

import os
from dataclasses import dataclass, field
from pathlib import Path

from .errors import NotSupported, ParseError, PeError, StubInconsistent
from .pe import PeImage, build_minimal_pe, parse_pe
from .synth import FAMILIES, MAX_LAYERS, StubHeader, decode_layers


@dataclass(frozen=True)
class SignatureDb:
    signatures: dict[int, bytes] = field(default_factory=lambda: {f.id: f.signature for f in FAMILIES.values()})
    supported: frozenset[int] = frozenset({1, 2})
    version: str = "builtin-1"

    def __post_init__(self):
        unknown = set(self.supported) - set(self.signatures)
        if unknown:
            raise ValueError(f"supported families {sorted(unknown)} have no signature")
        unregistered = set(self.signatures) - set(FAMILIES)
        if unregistered:
            raise ValueError(f"families {sorted(unregistered)} are not registered")

    @classmethod
    def parse(cls, text: str, version: str = "file") -> "SignatureDb":
        """One ``id signature_hex supported`` line per family; ``#`` starts a comment."""
        sigs: dict[int, bytes] = {}
        supported = set()
        for lineno, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            parts = line.split()
            if len(parts) != 3:
                raise ValueError(f"line {lineno}: expected 'id signature_hex supported'")
            fid, sig_hex, flag = parts
            sig = bytes.fromhex(sig_hex)
            if len(sig) != 4:
                raise ValueError(f"line {lineno}: signature must be 4 bytes")
            sigs[int(fid)] = sig
            if flag.lower() in ("1", "true", "yes", "supported"):
                supported.add(int(fid))
            elif flag.lower() not in ("0", "false", "no", "unsupported"):
                raise ValueError(f"line {lineno}: bad supported flag {flag!r}")
        return cls(sigs, frozenset(supported), version)

    @classmethod
    def load(cls, path: str | os.PathLike) -> "SignatureDb":
        return cls.parse(Path(path).read_text(), version=Path(path).name)

    def dumps(self) -> str:
        return "".join(
            f"{fid} {sig.hex()} {int(fid in self.supported)}\n" for fid, sig in sorted(self.signatures.items())
        )


DEFAULT_SIGDB = SignatureDb()


def _scan_stub(image: PeImage, db: SignatureDb) -> int | None:
    stub = image.section(".stub")
    if stub is None:
        return None
    hits = []
    for fid, sig in db.signatures.items():
        pos = stub.data.find(sig)
        if pos >= 0:
            hits.append((pos, fid))
    return min(hits)[1] if hits else None


def identify_packer(data: bytes, db: SignatureDb = DEFAULT_SIGDB) -> int | None:
    """Return the family id whose signature sits in ``.stub``, if ``db`` supports it.

    ``None`` means not found: no stub, no signature, an unsupported family,
    or input that does not parse.
    """
    try:
        image = parse_pe(data)
    except PeError:
        return None
    fid = _scan_stub(image, db)
    return fid if fid in db.supported else None


def static_unpack(data: bytes, db: SignatureDb = DEFAULT_SIGDB) -> bytes:
    """Statically unpack a sample of a supported family into a minimal PE32."""
    try:
        image = parse_pe(data)
    except PeError as exc:
        raise ParseError(str(exc)) from exc
    fid = _scan_stub(image, db)
    if fid is None or fid not in db.supported:
        raise NotSupported("no supported packer signature" if fid is None else f"family {fid} not supported")
    header = StubHeader.unpack(image.section(".stub").data)
    pay = image.section(".pay")
    if header is None or pay is None:
        raise StubInconsistent("stub header or .pay section missing")
    if header.family != fid:
        raise StubInconsistent(f"stub declares family {header.family}, signature says {fid}")
    if header.layers > MAX_LAYERS:
        raise StubInconsistent(f"layer count {header.layers} out of range")
    if not 0 < header.payload_length <= pay.raw_size:
        raise StubInconsistent(f"payload length {header.payload_length} exceeds .pay size {pay.raw_size}")
    if header.oep_rva >= header.payload_length:
        raise StubInconsistent(f"oep {header.oep_rva:#x} beyond payload")
    payload = decode_layers(pay.data, fid, header.key_seed, header.layers)[: header.payload_length]
    return build_minimal_pe(payload, header.oep_rva)
