"""Content-addressed sample store with a JSONL index and result log."""
from __future__ import annotations

import hashlib
import json
import os
import threading
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator

MIME_PE = "application/x-dosexec"
MIME_OCTET = "application/octet-stream"


def sniff_mime(data: bytes) -> str:
    return MIME_PE if data[:2] == b"MZ" else MIME_OCTET


@dataclass
class SampleMetadata:
    sha256: str
    md5: str
    size: int
    mime: str
    first_seen: int  # simulated tick of first ingestion
    batch: str = "batch-1"
    statuses: dict[str, str] = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


class Repository:
    """Flat store under ``root``.

    ``store/<sha256>.bin`` holds sample bytes, ``index.jsonl`` the metadata
    (rewritten through a temp file and rename), ``results.jsonl`` the
    append-only stage records and ``containers/`` the unpack artifacts.
    """

    def __init__(self, root: str | os.PathLike):
        self.root = Path(root)
        self.store = self.root / "store"
        self.containers = self.root / "containers"
        self.static_dir = self.root / "static"
        self.index_path = self.root / "index.jsonl"
        self.results_path = self.root / "results.jsonl"
        self.store.mkdir(parents=True, exist_ok=True)
        self._lock = threading.Lock()
        self._index: dict[str, SampleMetadata] = {}
        if self.index_path.exists():
            for line in self.index_path.read_text().splitlines():
                if line.strip():
                    meta = SampleMetadata(**json.loads(line))
                    self._index[meta.sha256] = meta
        self.clock = len(self._index)

    def __len__(self):
        return len(self._index)

    def __contains__(self, sha256: str) -> bool:
        return sha256 in self._index

    def ingest(self, data: bytes, batch: str = "batch-1") -> SampleMetadata:
        """Store ``data`` and return its metadata; re-ingesting is a no-op."""
        data = bytes(data)
        sha = hashlib.sha256(data).hexdigest()
        with self._lock:
            if sha in self._index:
                return self._index[sha]
            path = self.store / f"{sha}.bin"
            if not path.exists():
                tmp = path.with_suffix(".tmp")
                tmp.write_bytes(data)
                os.replace(tmp, path)
            meta = SampleMetadata(
                sha256=sha,
                md5=hashlib.md5(data).hexdigest(),
                size=len(data),
                mime=sniff_mime(data),
                first_seen=self.clock,
                batch=batch,
            )
            self.clock += 1
            self._index[sha] = meta
            self._flush_index()
            return meta

    def get(self, sha256: str) -> bytes:
        return (self.store / f"{sha256}.bin").read_bytes()

    def metadata(self, sha256: str) -> SampleMetadata:
        return self._index[sha256]

    def samples(self) -> list[SampleMetadata]:
        """All records in ingestion order."""
        return sorted(self._index.values(), key=lambda m: m.first_seen)

    def set_status(self, sha256: str, stage: str, result: str) -> None:
        with self._lock:
            self._index[sha256].statuses[stage] = result
            self._flush_index()

    def append_result(self, record: dict) -> None:
        with self._lock:
            with self.results_path.open("a", encoding="utf-8") as fh:
                fh.write(json.dumps(record, sort_keys=True) + "\n")

    def results(self) -> Iterator[dict]:
        if not self.results_path.exists():
            return iter(())
        lines = self.results_path.read_text(encoding="utf-8").splitlines()
        return (json.loads(line) for line in lines if line.strip())

    def _flush_index(self) -> None:
        tmp = self.index_path.with_suffix(".tmp")
        tmp.write_text("".join(m.to_json() + "\n" for m in self.samples()))
        os.replace(tmp, self.index_path)
