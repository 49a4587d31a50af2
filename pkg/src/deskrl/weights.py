"""File-based weight broadcast: one publisher, many polling readers.

Checkpoint file ``ckpt_{version:012d}.bin``::

    0    4   magic b"DKCK"
    4    2   format version (u16)
    6    2   blob count n (u16)
    8    8   checkpoint version (u64)
    16   8   creation time, unix seconds (f64)
    24   48n blob table; per blob: name (16 bytes, NUL padded), offset (u64),
             length (u64), blake2b-128 digest of the blob
    ..   16  blake2b-128 digest of bytes [0, 24 + 48n)
    ..       blobs (network blobs in the ``DenseNet.to_bytes`` format)

The per-blob digests let a sampler read and verify only the actor blob.
A ``latest`` text file holds the newest published version. Both files are
written to a temporary name and renamed into place, so readers see either
the old or the new file, never a partial one.
"""
from __future__ import annotations

import hashlib
import logging
import os
import re
import struct
import tempfile
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable

from .nn import DenseNet

log = logging.getLogger(__name__)

CKPT_MAGIC = b"DKCK"
CKPT_FORMAT = 1
_HEAD = struct.Struct("<4sHHQd")
_ENTRY = struct.Struct("<16sQQ16s")
_DIGEST = 16
_NAME_RE = re.compile(r"^ckpt_(\d{12})\.bin$")

# test hook: called with a stage name ("mid_write", "before_rename") during publish
_FAULT_HOOK: Callable[[str], None] | None = None


class PublishError(OSError):
    pass


class CorruptCheckpoint(ValueError):
    pass


def _digest(data: bytes) -> bytes:
    return hashlib.blake2b(data, digest_size=_DIGEST).digest()


def ckpt_name(version: int) -> str:
    return f"ckpt_{version:012d}.bin"


@dataclass
class CheckpointBundle:
    version: int
    blobs: dict[str, bytes]
    created: float = field(default_factory=time.time)

    @classmethod
    def from_nets(cls, version: int, nets: dict[str, DenseNet]) -> "CheckpointBundle":
        return cls(version, {k: v.to_bytes() for k, v in nets.items()})

    def net(self, name: str) -> DenseNet:
        return DenseNet.from_bytes(self.blobs[name])

    def encode(self) -> bytes:
        names = list(self.blobs)
        table_end = _HEAD.size + _ENTRY.size * len(names)
        off = table_end + _DIGEST
        entries = []
        for n in names:
            raw = n.encode()
            if len(raw) > 16:
                raise ValueError(f"blob name {n!r} longer than 16 bytes")
            blob = self.blobs[n]
            entries.append(_ENTRY.pack(raw, off, len(blob), _digest(blob)))
            off += len(blob)
        head = _HEAD.pack(CKPT_MAGIC, CKPT_FORMAT, len(names), self.version, self.created) + b"".join(entries)
        return head + _digest(head) + b"".join(self.blobs[n] for n in names)

    @property
    def checksum(self) -> bytes:
        return _digest(self.encode())


def _read_table(f) -> tuple[int, float, list[tuple[str, int, int, bytes]]]:
    head = f.read(_HEAD.size)
    if len(head) < _HEAD.size:
        raise CorruptCheckpoint("truncated header")
    magic, fmt, n, version, created = _HEAD.unpack(head)
    if magic != CKPT_MAGIC or fmt != CKPT_FORMAT:
        raise CorruptCheckpoint(f"bad magic/format {magic!r}/{fmt}")
    table = f.read(_ENTRY.size * n)
    digest = f.read(_DIGEST)
    if len(table) < _ENTRY.size * n or digest != _digest(head + table):
        raise CorruptCheckpoint("header digest mismatch")
    entries = []
    for i in range(n):
        raw, off, length, dg = _ENTRY.unpack_from(table, i * _ENTRY.size)
        entries.append((raw.rstrip(b"\0").decode(), off, length, dg))
    return version, created, entries


def read_checkpoint(path: str | os.PathLike, names: Iterable[str] | None = None) -> CheckpointBundle:
    """Load and verify a checkpoint file, optionally only some blobs."""
    want = None if names is None else set(names)
    with open(path, "rb") as f:
        version, created, entries = _read_table(f)
        blobs = {}
        for name, off, length, dg in entries:
            if want is not None and name not in want:
                continue
            f.seek(off)
            blob = f.read(length)
            if len(blob) != length or _digest(blob) != dg:
                raise CorruptCheckpoint(f"blob {name!r} failed verification")
            blobs[name] = blob
    if want is not None and not want <= blobs.keys():
        raise CorruptCheckpoint(f"missing blobs {sorted(want - blobs.keys())}")
    return CheckpointBundle(version, blobs, created)


class CheckpointStore:
    """A directory of versioned checkpoints plus a ``latest`` pointer."""

    def __init__(self, path: str | os.PathLike, keep_last: int = 3, archive_every: int = 0) -> None:
        self.path = Path(path)
        self.path.mkdir(parents=True, exist_ok=True)
        self.keep_last = keep_last
        self.archive_every = archive_every

    # publisher -------------------------------------------------------------

    def _atomic_write(self, final: Path, data: bytes) -> None:
        fd, tmp = tempfile.mkstemp(prefix=f".{final.name}.", suffix=".tmp", dir=self.path)
        try:
            with os.fdopen(fd, "wb") as f:
                half = len(data) // 2
                f.write(data[:half])
                if _FAULT_HOOK:
                    f.flush()
                    _FAULT_HOOK("mid_write")
                f.write(data[half:])
                f.flush()
                os.fsync(f.fileno())
            if _FAULT_HOOK:
                _FAULT_HOOK("before_rename")
            os.replace(tmp, final)
        except BaseException:
            try:
                os.unlink(tmp)
            except FileNotFoundError:
                pass
            raise

    def publish(self, bundle: CheckpointBundle) -> int:
        """Write ``bundle`` atomically and advance ``latest``; returns the version."""
        latest = self.latest_version()
        if latest is not None and bundle.version <= latest:
            raise PublishError(f"version {bundle.version} does not advance past {latest}")
        try:
            self._atomic_write(self.path / ckpt_name(bundle.version), bundle.encode())
            self._atomic_write(self.path / "latest", f"{bundle.version}\n".encode())
        except OSError as exc:
            raise PublishError(f"could not publish version {bundle.version}: {exc}") from exc
        self._retire()
        return bundle.version

    def publish_nets(self, version: int, nets: dict[str, DenseNet]) -> int:
        return self.publish(CheckpointBundle.from_nets(version, nets))

    def _retire(self) -> None:
        versions = self.versions()
        for v in versions[:-self.keep_last] if self.keep_last > 0 else []:
            if self.archive_every and v % self.archive_every == 0:
                continue
            try:
                os.unlink(self.path / ckpt_name(v))
            except FileNotFoundError:
                pass

    def clean_temps(self) -> int:
        """Delete leftover temp files from a crashed publisher."""
        n = 0
        for p in self.path.glob(".*.tmp"):
            try:
                p.unlink()
                n += 1
            except FileNotFoundError:
                pass
        return n

    # readers ---------------------------------------------------------------

    def versions(self) -> list[int]:
        out = []
        for p in self.path.iterdir():
            m = _NAME_RE.match(p.name)
            if m:
                out.append(int(m.group(1)))
        return sorted(out)

    def latest_version(self) -> int | None:
        try:
            text = (self.path / "latest").read_text().strip()
            return int(text)
        except (FileNotFoundError, ValueError):
            vs = self.versions()
            return vs[-1] if vs else None

    def load(self, version: int, names: Iterable[str] | None = None) -> CheckpointBundle:
        return read_checkpoint(self.path / ckpt_name(version), names)

    def poll_latest(self, known_version: int | None = None,
                    names: Iterable[str] | None = None) -> CheckpointBundle | None:
        """The newest valid bundle newer than ``known_version``, or None.

        Corrupt or vanished files are skipped with a warning, falling back to
        older versions that are still newer than ``known_version``.
        """
        known = -1 if known_version is None else known_version
        latest = self.latest_version()
        if latest is None or latest <= known:
            return None
        candidates = sorted({v for v in self.versions() if known < v <= latest}, reverse=True)
        for v in candidates:
            try:
                return self.load(v, names)
            except FileNotFoundError:
                continue
            except (CorruptCheckpoint, OSError, struct.error) as exc:
                log.warning("skipping unreadable checkpoint %s: %s", ckpt_name(v), exc)
        return None
