"""Deterministic synthetic corpus: plain PE32 fixtures, toy packers, corruption.

Packed samples carry two sections.  ``.stub`` starts with a plaintext header
(``SPK1`` magic, family id, layer count, key seed, payload length, OEP) and
holds the family's 4-byte signature at offset 32.  ``.pay`` holds the
concatenated original section bytes run through the family transform once
per layer.
"""
from __future__ import annotations

import enum
import hashlib
import json
import os
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Mapping

import numpy as np

from .errors import BadRecipe, SignatureMismatch
from .pe import (
    SCN_CODE,
    SCN_INITIALIZED_DATA,
    SCN_MEM_EXECUTE,
    SCN_MEM_READ,
    SCN_MEM_WRITE,
    PeImage,
    build_pe,
    parse_pe,
)

STUB_MAGIC = b"SPK1"
STUB_HEADER = struct.Struct("<4sHBIII")
STUB_SIGNATURE_OFFSET = 32
STUB_SIZE = 512
MAX_LAYERS = 8

STUB_CHARS = SCN_CODE | SCN_MEM_EXECUTE | SCN_MEM_READ
PAY_CHARS = SCN_INITIALIZED_DATA | SCN_MEM_READ | SCN_MEM_WRITE
TEXT_CHARS = SCN_CODE | SCN_MEM_EXECUTE | SCN_MEM_READ
RDATA_CHARS = SCN_INITIALIZED_DATA | SCN_MEM_READ
DATA_CHARS = SCN_INITIALIZED_DATA | SCN_MEM_READ | SCN_MEM_WRITE

WINDOW = 256


def prng_bytes(seed: int, n: int) -> bytes:
    """``n`` bytes from the corpus PRNG (numpy PCG64) seeded with ``seed``."""
    return np.random.default_rng(seed).integers(0, 256, size=n, dtype=np.uint8).tobytes()


# -- rolling key and family transforms ---------------------------------------

def _key_cycle(k0: int) -> np.ndarray:
    ks = np.empty(256, dtype=np.uint8)
    k = k0 & 0xFF
    for i in range(256):
        ks[i] = k
        k = (5 * k + 1) & 0xFF
    return ks


_KEY_CYCLES = [_key_cycle(k) for k in range(256)]


def key_stream(k0: int, n: int) -> np.ndarray:
    """Rolling key ``k[i+1] = (5*k[i] + 1) mod 256`` starting at ``k0``; period 256."""
    cycle = _KEY_CYCLES[k0 & 0xFF]
    reps = -(-n // 256)
    return np.tile(cycle, reps)[:n]


def layer_key(key_seed: int, layer: int) -> int:
    """Starting key for ``layer`` (0 = innermost, applied first when packing)."""
    return (key_seed + layer) % 256


def _nibble_swap(a: np.ndarray) -> np.ndarray:
    return ((a << 4) | (a >> 4)).astype(np.uint8)


def _xor_enc(a, k):
    return a ^ k


def _add_enc(a, k):
    return (a + k).astype(np.uint8)


def _add_dec(a, k):
    return (a - k).astype(np.uint8)


def _xns_enc(a, k):
    return _nibble_swap(a ^ k)


def _xns_dec(a, k):
    return _nibble_swap(a) ^ k


class Transform(enum.IntEnum):
    XOR_ROLLING = 1
    ADD_ROLLING = 2
    XOR_NIBBLE_SWAP = 3


@dataclass(frozen=True)
class Family:
    id: int
    transform: Transform
    signature: bytes
    _encode: Callable = field(repr=False, compare=False)
    _decode: Callable = field(repr=False, compare=False)

    def encode_layer(self, data: bytes, k0: int) -> bytes:
        a = np.frombuffer(data, dtype=np.uint8)
        return self._encode(a, key_stream(k0, a.size)).astype(np.uint8).tobytes()

    def decode_layer(self, data: bytes, k0: int) -> bytes:
        a = np.frombuffer(data, dtype=np.uint8)
        return self._decode(a, key_stream(k0, a.size)).astype(np.uint8).tobytes()


FAMILIES: dict[int, Family] = {
    1: Family(1, Transform.XOR_ROLLING, b"XRL\x01", _xor_enc, _xor_enc),
    2: Family(2, Transform.ADD_ROLLING, b"ADR\x02", _add_enc, _add_dec),
    3: Family(3, Transform.XOR_NIBBLE_SWAP, b"XNS\x03", _xns_enc, _xns_dec),
}


def get_family(family_id: int) -> Family:
    try:
        return FAMILIES[family_id]
    except KeyError:
        raise BadRecipe(f"unregistered packer family {family_id}") from None


def encode_layers(data: bytes, family_id: int, key_seed: int, layers: int) -> bytes:
    fam = get_family(family_id)
    for j in range(layers):
        data = fam.encode_layer(data, layer_key(key_seed, j))
    return data


def decode_layers(data: bytes, family_id: int, key_seed: int, layers: int, start: int | None = None) -> bytes:
    """Undo ``layers`` layers, outermost first.

    ``start`` is the index of the outermost layer still present; it defaults
    to ``layers - 1`` (a fully packed payload).
    """
    fam = get_family(family_id)
    top = layers - 1 if start is None else start
    for j in range(top, top - layers, -1):
        data = fam.decode_layer(data, layer_key(key_seed, j))
    return data


# -- packing ------------------------------------------------------------------

@dataclass(frozen=True)
class PackRecipe:
    family: int
    layers: int
    key_seed: int
    oep_rva: int = 0

    def validate(self) -> None:
        if self.family not in FAMILIES:
            raise BadRecipe(f"unregistered packer family {self.family}")
        if not 0 <= self.layers <= MAX_LAYERS:
            raise BadRecipe(f"layers must be in [0, {MAX_LAYERS}], got {self.layers}")
        if not 0 <= self.key_seed < 2**32:
            raise BadRecipe(f"key_seed must be a u32, got {self.key_seed}")
        if self.oep_rva < 0:
            raise BadRecipe("negative oep_rva")


@dataclass(frozen=True)
class StubHeader:
    family: int
    layers: int
    key_seed: int
    payload_length: int
    oep_rva: int

    def pack(self) -> bytes:
        return STUB_HEADER.pack(STUB_MAGIC, self.family, self.layers, self.key_seed, self.payload_length, self.oep_rva)

    @classmethod
    def unpack(cls, stub: bytes) -> "StubHeader | None":
        if len(stub) < STUB_HEADER.size or not stub.startswith(STUB_MAGIC):
            return None
        _, family, layers, key_seed, length, oep = STUB_HEADER.unpack_from(stub)
        return cls(family, layers, key_seed, length, oep)


def payload_offset_of_rva(image: PeImage, rva: int) -> int:
    """Map an RVA to its offset in ``image.payload()``; 0 if it hits no section."""
    offset = 0
    for s in image.sections:
        if s.virtual_rva <= rva < s.virtual_rva + s.raw_size:
            return offset + rva - s.virtual_rva
        offset += s.raw_size
    return 0


def pack(pe: bytes, recipe: PackRecipe) -> bytes:
    """Pack a PE32 image with a synthetic family transform."""
    recipe.validate()
    image = parse_pe(pe)
    payload = image.payload()
    if not payload:
        raise BadRecipe("image has no section data to pack")
    if recipe.oep_rva >= len(payload):
        raise BadRecipe(f"oep_rva {recipe.oep_rva:#x} outside payload of {len(payload):#x} bytes")
    fam = get_family(recipe.family)
    header = StubHeader(recipe.family, recipe.layers, recipe.key_seed, len(payload), recipe.oep_rva)
    stub = bytearray(STUB_SIZE)
    stub[: STUB_HEADER.size] = header.pack()
    stub[STUB_SIGNATURE_OFFSET:STUB_SIGNATURE_OFFSET + 4] = fam.signature
    body = encode_layers(payload, recipe.family, recipe.key_seed, recipe.layers)
    return build_pe([(".stub", bytes(stub), STUB_CHARS), (".pay", body, PAY_CHARS)], entry_point_rva=0x1000,
                    image_base=image.image_base)


def reference_unpack(packed: bytes, recipe: PackRecipe) -> bytes:
    """Invert :func:`pack` using the known recipe; returns the original payload."""
    image = parse_pe(packed)
    stub = image.section(".stub")
    pay = image.section(".pay")
    if stub is None or pay is None:
        raise SignatureMismatch("no .stub/.pay sections")
    header = StubHeader.unpack(stub.data)
    if header is None:
        raise SignatureMismatch("stub magic missing")
    fam = get_family(recipe.family)
    if header.family != recipe.family or fam.signature not in stub.data:
        raise SignatureMismatch(f"sample is family {header.family}, recipe says {recipe.family}")
    return decode_layers(pay.data, recipe.family, recipe.key_seed, recipe.layers)[: header.payload_length]


# -- corruption ---------------------------------------------------------------

class CorruptMode(str, enum.Enum):
    TRUNCATE = "truncate"
    HEADER_SMASH = "header_smash"


def corrupt(data: bytes, mode: CorruptMode | str, seed: int) -> bytes:
    """Damage a sample so it no longer parses.

    ``TRUNCATE`` drops the final quarter of the file; ``HEADER_SMASH``
    overwrites the four bytes at the offset named by e_lfanew (the PE
    signature) with PRNG output.
    """
    mode = CorruptMode(mode)
    if mode is CorruptMode.TRUNCATE:
        return bytes(data[: len(data) - len(data) // 4])
    out = bytearray(data)
    e_lfanew = struct.unpack_from("<I", out, 0x3C)[0] if len(out) >= 0x40 else 0
    if e_lfanew + 4 > len(out):
        e_lfanew = 0x3C if len(out) >= 0x40 else 0
    junk = bytearray(prng_bytes(seed, 4))
    if junk == b"PE\x00\x00":
        junk[0] ^= 0xFF
    end = min(e_lfanew + 4, len(out))
    out[e_lfanew:end] = junk[: end - e_lfanew]
    return bytes(out)


# -- plain fixtures -----------------------------------------------------------

# frequent IA-32 opcode / modrm / immediate bytes, most common first
_CODE_VOCAB = np.array(
    [0x8B, 0x89, 0xFF, 0xE8, 0x00, 0x83, 0x45, 0x55, 0xC3, 0x74, 0x75, 0xEB, 0x50, 0x8D, 0xC7,
     0x85, 0x33, 0xC0, 0x6A, 0x68, 0x0F, 0x84, 0xE9, 0xEC, 0x5D, 0x56, 0x57, 0x53, 0x51, 0x52,
     0x5E, 0x5F, 0x5B, 0x59, 0xF8, 0xFC, 0xF0, 0xF4, 0x04, 0x08, 0x0C, 0x10, 0x14, 0x18, 0x01,
     0x24, 0x44, 0x4C, 0x40, 0x48, 0x90, 0xCC, 0x3B, 0x2B, 0x03, 0xB8, 0xA1, 0x81, 0x7D, 0x8A,
     0x88, 0xC1, 0xE0, 0xF6, 0xD2, 0x0B, 0x23, 0xC6, 0xA3, 0x3D, 0xB9, 0x13, 0x1B, 0x86, 0x9C],
    dtype=np.uint8,
)
_CODE_WEIGHTS = 1.0 / np.arange(1, _CODE_VOCAB.size + 1) ** 0.8
_CODE_WEIGHTS /= _CODE_WEIGHTS.sum()

_DATA_VOCAB = np.array([0x00, 0x01, 0x02, 0x03, 0x04, 0x08, 0x10, 0x80, 0xFE, 0xFF], dtype=np.uint8)
_DATA_WEIGHTS = np.array([0.4, 0.15, 0.1, 0.05, 0.08, 0.06, 0.05, 0.03, 0.03, 0.05])

_WORDS = (
    "the kernel32 dll GetProcAddress LoadLibraryA error file path config server update "
    "user password connect socket send recv http www com exe system registry key value "
    "open close read write memory thread process service window message version").split()


def code_window(rng: np.random.Generator) -> bytes:
    return rng.choice(_CODE_VOCAB, size=WINDOW, p=_CODE_WEIGHTS).tobytes()


def data_window(rng: np.random.Generator) -> bytes:
    return rng.choice(_DATA_VOCAB, size=WINDOW, p=_DATA_WEIGHTS).tobytes()


def text_window(rng: np.random.Generator) -> bytes:
    out = bytearray()
    while len(out) < WINDOW:
        out += _WORDS[rng.integers(len(_WORDS))].encode() + (b"\n" if rng.random() < 0.1 else b" ")
    return bytes(out[:WINDOW])


def random_window(rng: np.random.Generator) -> bytes:
    return rng.integers(0, 256, size=WINDOW, dtype=np.uint8).tobytes()


def null_window(rng: np.random.Generator | None = None) -> bytes:
    return bytes(WINDOW)


class Profile(str, enum.Enum):
    CODE = "code"  # mostly code windows, the usual case
    LOWCODE = "lowcode"  # code well under 40% of non-suppressed bytes
    TEXT = "text"  # one section of printable text only


def make_plain_pe(seed: int, profile: Profile | str = Profile.CODE, code_windows: int | None = None) -> bytes:
    """Synthesize an unpacked PE32 whose section contents follow ``profile``.

    All section sizes are multiples of 512 so 256-byte analysis windows never
    straddle two kinds of content.
    """
    profile = Profile(profile)
    rng = np.random.default_rng(seed)

    def fill(maker, n):
        return b"".join(maker(rng) for _ in range(n))

    if profile is Profile.TEXT:
        body = fill(text_window, 2 * int(rng.integers(1, 5)))
        return build_pe([(".rdata", body, RDATA_CHARS)], entry_point_rva=0x1000)

    if profile is Profile.CODE:
        n_code = code_windows if code_windows is not None else 2 * int(rng.integers(4, 17))
        text = fill(code_window, n_code)
        rdata = fill(text_window, 2 * int(rng.integers(1, 3)))
        data = fill(data_window, 2) + fill(null_window, 2 * int(rng.integers(0, 2)))
    else:
        n_code = code_windows if code_windows is not None else 2
        text = fill(code_window, n_code)
        rdata = fill(text_window, 2)
        data = fill(data_window, 2 * int(rng.integers(3, 6)))
    entry = 0x1000 + int(rng.integers(0, len(text) // 16)) * 16
    return build_pe(
        [(".text", text, TEXT_CHARS), (".rdata", rdata, RDATA_CHARS), (".data", data, DATA_CHARS)],
        entry_point_rva=entry,
    )


# -- corpus -------------------------------------------------------------------

CATEGORIES = ("plain", "text", "lowcode", "packed", "corrupt")


@dataclass
class CorpusSpec:
    plain: int = 0
    packed: int = 0
    corrupt: int = 0
    text: int = 0
    lowcode: int = 0
    families: Mapping[int, float] = field(default_factory=lambda: {1: 1.0, 2: 1.0, 3: 1.0})
    min_layers: int = 1
    max_layers: int = 3
    packed_profile: str = "code"

    def __post_init__(self):
        for name in CATEGORIES:
            if getattr(self, name) < 0:
                raise ValueError(f"negative count for {name}")
        self.families = {int(k): float(v) for k, v in self.families.items()}
        for fid in self.families:
            get_family(fid)
        if not 0 <= self.min_layers <= self.max_layers <= MAX_LAYERS:
            raise ValueError("layer range must satisfy 0 <= min <= max <= 8")

    @classmethod
    def from_mapping(cls, data: Mapping) -> "CorpusSpec":
        return cls(**dict(data))

    @classmethod
    def load(cls, path: str | os.PathLike) -> "CorpusSpec":
        return cls.from_mapping(json.loads(Path(path).read_text()))

    @property
    def total(self) -> int:
        return sum(getattr(self, c) for c in CATEGORIES)


@dataclass(frozen=True)
class ManifestEntry:
    sha256: str
    category: str
    family: int | None
    layers: int
    seed: int
    profile: str | None = None
    key_seed: int | None = None
    oep_rva: int | None = None
    corrupt_mode: str | None = None

    @property
    def recipe(self) -> PackRecipe | None:
        if self.family is None or self.category != "packed":
            return None
        return PackRecipe(self.family, self.layers, self.key_seed, self.oep_rva)

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


@dataclass
class CorpusManifest:
    entries: list[ManifestEntry]

    @property
    def counts(self) -> dict[str, int]:
        out = {c: 0 for c in CATEGORIES}
        for e in self.entries:
            out[e.category] += 1
        return out

    def by_sha(self) -> dict[str, ManifestEntry]:
        return {e.sha256: e for e in self.entries}

    def dump(self, path: str | os.PathLike) -> None:
        Path(path).write_text("".join(e.to_json() + "\n" for e in self.entries))

    @classmethod
    def load(cls, path: str | os.PathLike) -> "CorpusManifest":
        lines = Path(path).read_text().splitlines()
        return cls([ManifestEntry(**json.loads(line)) for line in lines if line.strip()])


def sample_seed(master_seed: int, category: str, index: int) -> int:
    rng = np.random.default_rng([master_seed, CATEGORIES.index(category), index])
    return int(rng.integers(0, 2**32))


def _pick_recipe(rng: np.random.Generator, spec: CorpusSpec, base: bytes) -> PackRecipe:
    ids = sorted(spec.families)
    weights = np.array([spec.families[i] for i in ids], dtype=float)
    family = ids[int(rng.choice(len(ids), p=weights / weights.sum()))]
    layers = int(rng.integers(spec.min_layers, spec.max_layers + 1))
    key_seed = int(rng.integers(0, 2**32))
    image = parse_pe(base)
    oep = payload_offset_of_rva(image, image.entry_point_rva)
    return PackRecipe(family, layers, key_seed, oep)


def make_sample(category: str, seed: int, spec: CorpusSpec | None = None) -> tuple[bytes, ManifestEntry]:
    """Build one corpus sample of ``category`` from ``seed``; returns bytes and manifest entry."""
    spec = spec or CorpusSpec()
    if category in ("plain", "text", "lowcode"):
        profile = {"plain": Profile.CODE, "text": Profile.TEXT, "lowcode": Profile.LOWCODE}[category]
        data = make_plain_pe(seed, profile)
        return data, ManifestEntry(_sha(data), category, None, 0, seed, profile=profile.value)
    if category not in ("packed", "corrupt"):
        raise ValueError(f"unknown category {category!r}")
    rng = np.random.default_rng([seed, 1])
    base = make_plain_pe(seed, spec.packed_profile)
    recipe = _pick_recipe(rng, spec, base)
    data = pack(base, recipe)
    mode = None
    if category == "corrupt":
        mode = CorruptMode.TRUNCATE if rng.random() < 0.5 else CorruptMode.HEADER_SMASH
        data = corrupt(data, mode, seed)
        mode = mode.value
    entry = ManifestEntry(
        _sha(data), category, recipe.family, recipe.layers, seed,
        profile=spec.packed_profile, key_seed=recipe.key_seed, oep_rva=recipe.oep_rva, corrupt_mode=mode,
    )
    return data, entry


def iter_corpus(spec: CorpusSpec, seed: int) -> Iterable[tuple[bytes, ManifestEntry]]:
    for category in CATEGORIES:
        for i in range(getattr(spec, category)):
            yield make_sample(category, sample_seed(seed, category, i), spec)


def gen_corpus(spec: CorpusSpec, seed: int, out_dir: str | os.PathLike) -> CorpusManifest:
    """Write ``out_dir/corpus/<sha256>.bin`` and ``out_dir/manifest.jsonl``."""
    out = Path(out_dir)
    files = out / "corpus"
    files.mkdir(parents=True, exist_ok=True)
    entries = []
    for data, entry in iter_corpus(spec, seed):
        (files / f"{entry.sha256}.bin").write_bytes(data)
        entries.append(entry)
    manifest = CorpusManifest(entries)
    manifest.dump(out / "manifest.jsonl")
    return manifest


def _sha(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()
