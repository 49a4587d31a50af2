"""Shared-memory replay ring and the queue-based baseline channel.

Region layout (all integers little-endian)::

    offset  size  field
    0       4     magic b"SPRZ"
    4       4     format version (u32)
    8       4     obs_dim (u32)
    12      4     act_dim (u32)
    16      8     capacity in records (u64)
    24      4     record size in bytes (u32)
    28      4     lock word: reservation mode (u32; 1 atomic fetch-add, 2 file lock)
    32      8     cursor offset (u64, always 64)
    40      8     marks offset (u64)
    48      8     records offset (u64)
    56      4     max writers (u32)
    60      4     reserved
    64      8     write cursor: next global index (u64, mutable)
    72      8     reader: distinct records sampled at least once
    80      8     reader: sample calls
    88      8     reader: records drawn
    96      8     reader: transfer events (cursor advanced since previous call)
    104     24    reserved
    128     32*W  writer slots, each u64 x4: pushes, evicted-unsampled,
                  evicted-total, push nanoseconds
    marks   8*C   per-slot u64: (global index + 1) of the record last sampled there
    records C*R   record region

Record (R = round_up(16 + 4 * (2*obs + act + 1), 8) bytes)::

    0   8   sequence word: 0 empty, 2g+1 write in progress, 2g+2 committed record g
    8   4   FNV-1a checksum over payload words, d, and g
    12  1   d (1 terminal, 0 otherwise; time-limit truncation is stored as 0)
    13  3   padding
    16  4*k float32 payload: s[obs], a[act], s2[obs], r

Slot for global index g is ``g % C``. The only critical section is the cursor
reservation; payloads are written outside it and published by the sequence
word.
"""
from __future__ import annotations

import fcntl
import os
import struct
import tempfile
import time
from contextlib import contextmanager
from dataclasses import dataclass
from multiprocessing import resource_tracker, shared_memory

import numpy as np

from . import kernels
from .envs import EnvSpec

MAGIC = b"SPRZ"
FORMAT_VERSION = 1
HEADER_SIZE = 128
CURSOR_OFFSET = 64
WRITER_SLOT_SIZE = 32
RECORD_HEAD = 16
RESERVE_ATOMIC = 1
RESERVE_FILELOCK = 2

_HEADER = struct.Struct("<4sIIIQIIQQQI4x")

_R_UNIQUE, _R_CALLS, _R_DRAWN, _R_TRANSFERS = 72, 80, 88, 96


class RingError(RuntimeError):
    pass


class NotEnoughData(RuntimeError):
    """Fewer valid records than requested; the caller should retry later."""


def record_size(obs_dim: int, act_dim: int) -> int:
    raw = RECORD_HEAD + 4 * (2 * obs_dim + act_dim + 1)
    return (raw + 7) // 8 * 8


def _align(n: int, to: int = 64) -> int:
    return (n + to - 1) // to * to


def region_layout(obs_dim: int, act_dim: int, capacity: int, max_writers: int = 64) -> dict:
    rs = record_size(obs_dim, act_dim)
    marks = _align(HEADER_SIZE + WRITER_SLOT_SIZE * max_writers)
    records = _align(marks + 8 * capacity)
    return {"record_size": rs, "marks_offset": marks, "records_offset": records,
            "total": records + rs * capacity}


@dataclass
class Transition:
    s: np.ndarray
    a: np.ndarray
    s2: np.ndarray
    r: float
    d: int


@dataclass
class Batch:
    s: np.ndarray
    a: np.ndarray
    s2: np.ndarray
    r: np.ndarray
    d: np.ndarray
    idx: np.ndarray

    def __len__(self) -> int:
        return len(self.r)

    @property
    def nbytes(self) -> int:
        return sum(x.nbytes for x in (self.s, self.a, self.s2, self.r, self.d))


@dataclass(frozen=True)
class RingHeader:
    magic: bytes
    version: int
    obs_dim: int
    act_dim: int
    capacity: int
    record_size: int
    reserve_mode: int
    cursor_offset: int
    marks_offset: int
    records_offset: int
    max_writers: int


@dataclass
class RingAccounting:
    pushes: int
    evicted_unsampled: int
    evicted_total: int
    sampled_unique: int
    resident: int
    resident_unsampled: int
    push_seconds: float

    @property
    def transmission_loss(self) -> float:
        return self.evicted_unsampled / self.pushes if self.pushes else 0.0


def _lock_path(name: str) -> str:
    return os.path.join(tempfile.gettempdir(), f"deskrl-{name}.lock")


def _attach_untracked(name: str) -> shared_memory.SharedMemory:
    # attachers must not register the segment: on 3.10 the tracker would
    # unlink it when the attaching process exits
    orig = resource_tracker.register
    resource_tracker.register = lambda *a, **k: None
    try:
        return shared_memory.SharedMemory(name=name, create=False)
    finally:
        resource_tracker.register = orig


class ReplayRing:
    """Multi-writer, single-sampler circular transition store in named shared memory."""

    def __init__(self, shm: shared_memory.SharedMemory, owner: bool, writer_id: int | None) -> None:
        self._shm = shm
        self.owner = owner
        self.buf = shm.buf
        self.header = self._read_header()
        h = self.header
        if h.magic != MAGIC:
            raise RingError(f"bad ring magic {h.magic!r}")
        if h.version != FORMAT_VERSION:
            raise RingError(f"unsupported ring format version {h.version}")
        if writer_id is not None and not 0 <= writer_id < h.max_writers:
            raise RingError(f"writer id {writer_id} outside [0, {h.max_writers})")
        self.writer_id = writer_id
        self.name = shm.name
        self.capacity = h.capacity
        self.obs_dim, self.act_dim = h.obs_dim, h.act_dim
        self._k = kernels.get_backend("compiled" if h.reserve_mode == RESERVE_ATOMIC else "python")
        self._lock_fd: int | None = None
        if h.reserve_mode == RESERVE_FILELOCK:
            self._lock_fd = os.open(_lock_path(self.name), os.O_RDWR | os.O_CREAT, 0o600)
        self._u64 = np.ndarray((HEADER_SIZE // 8,), dtype="<u8", buffer=self.buf)
        self._wslots = np.ndarray((h.max_writers, 4), dtype="<u8", buffer=self.buf, offset=HEADER_SIZE)
        self._marks = np.ndarray((h.capacity,), dtype="<u8", buffer=self.buf, offset=h.marks_offset)
        self._seqs = np.ndarray((h.capacity,), dtype="<u8", buffer=self.buf, offset=h.records_offset,
                                strides=(h.record_size,))
        self._last_cursor_seen = 0
        self._out = None
        self._closed = False

    # construction ------------------------------------------------------------

    @classmethod
    def create(cls, name: str, spec: EnvSpec | None = None, capacity: int = 1_000_000, *,
               obs_dim: int | None = None, act_dim: int | None = None, max_writers: int = 64,
               memory_budget: int | None = None, min_capacity: int = 1,
               reserve_mode: int | None = None, writer_id: int | None = None) -> "ReplayRing":
        if spec is not None:
            obs_dim, act_dim = spec.obs_dim, spec.act_dim
        if obs_dim is None or act_dim is None:
            raise RingError("need an EnvSpec or explicit obs/act dims")
        if capacity < 1 or capacity < min_capacity:
            raise RingError(f"capacity {capacity} below the minimum {max(1, min_capacity)}")
        lay = region_layout(obs_dim, act_dim, capacity, max_writers)
        if memory_budget is not None and lay["total"] > memory_budget:
            raise RingError(f"ring needs {lay['total']} bytes, budget is {memory_budget}")
        if reserve_mode is None:
            reserve_mode = RESERVE_ATOMIC if kernels.HAS_COMPILED else RESERVE_FILELOCK
        if reserve_mode == RESERVE_ATOMIC and not kernels.HAS_COMPILED:
            raise RingError("atomic reservation needs the compiled kernels")
        try:
            shm = shared_memory.SharedMemory(name=name, create=True, size=lay["total"])
        except FileExistsError:
            raise RingError(f"shared region {name!r} already exists") from None
        _HEADER.pack_into(shm.buf, 0, MAGIC, FORMAT_VERSION, obs_dim, act_dim, capacity,
                          lay["record_size"], reserve_mode, CURSOR_OFFSET, lay["marks_offset"],
                          lay["records_offset"], max_writers)
        if reserve_mode == RESERVE_FILELOCK:
            open(_lock_path(name), "a").close()
        return cls(shm, owner=True, writer_id=writer_id)

    @classmethod
    def attach(cls, name: str, writer_id: int | None = None) -> "ReplayRing":
        try:
            shm = _attach_untracked(name)
        except FileNotFoundError:
            raise RingError(f"no shared region named {name!r}") from None
        return cls(shm, owner=False, writer_id=writer_id)

    def _read_header(self) -> RingHeader:
        return RingHeader(*_HEADER.unpack_from(self.buf, 0))

    def close(self) -> None:
        if self._closed:
            return
        self._closed = True
        self._u64 = self._wslots = self._marks = self._seqs = self._out = None
        self.buf = None
        if self._lock_fd is not None:
            os.close(self._lock_fd)
            self._lock_fd = None
        self._shm.close()

    def unlink(self) -> None:
        """Remove the named region (creator only)."""
        self.close()
        try:
            self._shm.unlink()
        except FileNotFoundError:
            pass
        try:
            os.unlink(_lock_path(self.name))
        except FileNotFoundError:
            pass

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        if self.owner:
            self.unlink()
        else:
            self.close()

    # counters ------------------------------------------------------------------

    @property
    def cursor(self) -> int:
        return int(self._k.load_u64(self.buf, CURSOR_OFFSET))

    @property
    def fill(self) -> int:
        return min(self.cursor, self.capacity)

    @contextmanager
    def _locked(self):
        if self._lock_fd is None:
            yield
            return
        fcntl.flock(self._lock_fd, fcntl.LOCK_EX)
        try:
            yield
        finally:
            fcntl.flock(self._lock_fd, fcntl.LOCK_UN)

    # writer side ---------------------------------------------------------------

    def push(self, s, a, s2, r: float, d: int) -> int:
        """Publish one transition; returns its global index."""
        if self._closed:
            raise RingError("ring handle is closed")
        if self.writer_id is None:
            raise RingError("handle was attached read-only; pass writer_id to push")
        t0 = time.perf_counter_ns()
        s = np.ascontiguousarray(s, dtype=np.float32)
        a = np.ascontiguousarray(a, dtype=np.float32)
        s2 = np.ascontiguousarray(s2, dtype=np.float32)
        if s.shape != (self.obs_dim,) or s2.shape != (self.obs_dim,) or a.shape != (self.act_dim,):
            raise RingError("transition shape does not match the ring layout")
        h = self.header
        if self._lock_fd is None:
            g = self._k.fetch_add(self.buf, CURSOR_OFFSET, 1)
            slot = g % h.capacity
            q, was_sampled, _ = self._k.write_record(
                self.buf, h.records_offset + slot * h.record_size, g, s, a, s2, float(r), int(d),
                h.marks_offset + 8 * slot)
        else:
            # fallback route: no CAS available, so the write also runs under the lock
            with self._locked():
                g = self._k.fetch_add(self.buf, CURSOR_OFFSET, 1)
                slot = g % h.capacity
                q, was_sampled, _ = self._k.write_record(
                    self.buf, h.records_offset + slot * h.record_size, g, s, a, s2, float(r), int(d),
                    h.marks_offset + 8 * slot)
        w = self._wslots[self.writer_id]
        w[0] += 1
        if q >= 2 * g + 1:
            # lapped before writing: record g never became readable
            w[1] += 1
            w[2] += 1
        elif q != 0 and q % 2 == 0:
            w[2] += 1
            if not was_sampled:
                w[1] += 1
        w[3] += time.perf_counter_ns() - t0
        return int(g)

    def push_transition(self, t: Transition) -> int:
        return self.push(t.s, t.a, t.s2, t.r, t.d)

    # reader side ---------------------------------------------------------------

    def _buffers(self, n: int):
        if self._out is None or len(self._out[3]) < n:
            self._out = (np.empty((n, self.obs_dim), np.float32), np.empty((n, self.act_dim), np.float32),
                         np.empty((n, self.obs_dim), np.float32), np.empty(n, np.float32),
                         np.empty(n, np.uint8), np.empty(n, np.int64))
        return tuple(x[:n] for x in self._out)

    def _gather(self, slots: np.ndarray, mark: bool):
        h = self.header
        out = self._buffers(len(slots))
        with self._locked():
            bad, newly = self._k.gather(self.buf, h.records_offset, h.record_size, slots,
                                        self.obs_dim, self.act_dim, *out,
                                        h.marks_offset if mark else -1)
        return out, bad, newly

    def sample(self, batch_size: int, rng: np.random.Generator, max_retries: int = 64) -> Batch:
        """Uniform sample with replacement over the valid window.

        Rows caught mid-write are redrawn. Raises ``NotEnoughData`` when the
        ring holds fewer than ``batch_size`` records.
        """
        if self._closed:
            raise RingError("ring handle is closed")
        cur = self.cursor
        fill = min(cur, self.capacity)
        if fill < batch_size or batch_size < 1:
            raise NotEnoughData(f"ring holds {fill} records, need {batch_size}")
        u = self._u64
        u[_R_CALLS // 8] += 1
        if cur != self._last_cursor_seen:
            u[_R_TRANSFERS // 8] += 1
            self._last_cursor_seen = cur
        slots = rng.integers(0, fill, batch_size, dtype=np.int64)
        s = np.empty((batch_size, self.obs_dim), np.float32)
        a = np.empty((batch_size, self.act_dim), np.float32)
        s2 = np.empty((batch_size, self.obs_dim), np.float32)
        r = np.empty(batch_size, np.float32)
        d = np.empty(batch_size, np.uint8)
        idx = np.empty(batch_size, np.int64)
        todo = np.arange(batch_size)
        newly_total = 0
        for _ in range(max_retries):
            (os_, oa, os2, orr, od, og), bad, newly = self._gather(np.ascontiguousarray(slots[todo]), True)
            newly_total += newly
            good = og >= 0
            tgt = todo[good]
            s[tgt], a[tgt], s2[tgt], r[tgt], d[tgt], idx[tgt] = os_[good], oa[good], os2[good], orr[good], od[good], og[good]
            todo = todo[~good]
            if len(todo) == 0:
                break
            slots[todo] = rng.integers(0, fill, len(todo), dtype=np.int64)
        u[_R_UNIQUE // 8] += newly_total
        if len(todo):
            raise NotEnoughData(f"{len(todo)} rows stayed unreadable after {max_retries} redraws")
        u[_R_DRAWN // 8] += batch_size
        return Batch(s, a, s2, r, d, idx)

    def read_slot(self, slot: int) -> Transition | None:
        """Validated copy of one slot without touching sampled-marks; None if not readable."""
        (os_, oa, os2, orr, od, og), bad, _ = self._gather(np.array([slot], np.int64), False)
        if bad:
            return None
        return Transition(os_[0].copy(), oa[0].copy(), os2[0].copy(), float(orr[0]), int(od[0]))

    def readable_indices(self) -> np.ndarray:
        """Global indices of all committed, checksum-valid records (a full integrity scan)."""
        fill = self.fill
        if fill == 0:
            return np.empty(0, np.int64)
        (_, _, _, _, _, og), _, _ = self._gather(np.arange(fill, dtype=np.int64), False)
        return og[og >= 0].copy()

    def scan_integrity(self) -> tuple[int, int]:
        """(valid, invalid) committed slots; in-progress or empty slots count as invalid."""
        fill = self.fill
        ok = self.readable_indices()
        return len(ok), fill - len(ok)

    # accounting ----------------------------------------------------------------

    def writer_counters(self) -> np.ndarray:
        return self._wslots.copy()

    def reader_counters(self) -> dict:
        u = self._u64
        return {"sampled_unique": int(u[_R_UNIQUE // 8]), "sample_calls": int(u[_R_CALLS // 8]),
                "drawn": int(u[_R_DRAWN // 8]), "transfer_events": int(u[_R_TRANSFERS // 8])}

    def accounting(self) -> RingAccounting:
        """Counters for the conservation identity (exact at quiescence)."""
        w = self._wslots.sum(axis=0)
        fill = self.fill
        seqs = self._seqs[:fill]
        committed = (seqs != 0) & (seqs % 2 == 0)
        resident = int(committed.sum())
        marked = self._marks[:fill] == seqs // 2
        resident_unsampled = int((committed & ~marked).sum())
        return RingAccounting(int(w[0]), int(w[1]), int(w[2]),
                              int(self._u64[_R_UNIQUE // 8]), resident, resident_unsampled,
                              float(w[3]) * 1e-9)


class QueueChannel:
    """Bounded FIFO of transitions between samplers and the learner (baseline path).

    ``qs`` bounds occupancy in transitions. ``policy`` is "block" (senders
    wait while the queue is full) or "drop" (the new transition is discarded).
    """

    def __init__(self, qs: int, policy: str = "block", ctx=None) -> None:
        import multiprocessing as mp

        if qs < 1:
            raise ValueError("queue size must be >= 1")
        if policy not in ("block", "drop"):
            raise ValueError(f"unknown queue policy {policy!r}")
        ctx = ctx or mp.get_context()
        self.qs = qs
        self.policy = policy
        self._q = ctx.Queue(maxsize=qs)
        self.dropped = ctx.Value("q", 0, lock=False)

    def put(self, t: Transition, timeout: float | None = None) -> bool:
        item = (time.time(), t.s, t.a, t.s2, float(t.r), int(t.d))
        import queue

        if self.policy == "drop":
            try:
                self._q.put_nowait(item)
                return True
            except queue.Full:
                self.dropped.value += 1
                return False
        try:
            self._q.put(item, timeout=timeout)
            return True
        except queue.Full:
            return False

    def occupancy(self) -> int:
        try:
            return self._q.qsize()
        except NotImplementedError:  # pragma: no cover - macOS
            return 0

    def full(self) -> bool:
        return self.occupancy() >= self.qs

    def drain(self, max_items: int | None = None, timeout: float = 0.0) -> list[tuple]:
        """Pop up to ``max_items`` items, FIFO. Each item is (send_time, s, a, s2, r, d)."""
        import queue

        out = []
        limit = self.qs if max_items is None else max_items
        # items counted by qsize may still be in a sender's feeder thread
        expected = min(limit, self.occupancy())
        while len(out) < limit:
            wait = max(timeout, 0.05) if len(out) < expected else timeout
            try:
                out.append(self._q.get(timeout=wait) if wait else self._q.get_nowait())
            except queue.Empty:
                break
        return out

    def release_sender(self) -> None:
        """Let a sending process exit even if the learner never reads what it buffered."""
        self._q.cancel_join_thread()

    def close(self) -> None:
        self._q.cancel_join_thread()
        self._q.close()


class LocalReplay:
    """In-process uniform replay used by the learner on the queue path."""

    def __init__(self, capacity: int, obs_dim: int, act_dim: int) -> None:
        if capacity < 1:
            raise RingError("capacity must be >= 1")
        self.capacity = capacity
        self.s = np.zeros((capacity, obs_dim), np.float32)
        self.a = np.zeros((capacity, act_dim), np.float32)
        self.s2 = np.zeros((capacity, obs_dim), np.float32)
        self.r = np.zeros(capacity, np.float32)
        self.d = np.zeros(capacity, np.uint8)
        self.sampled = np.zeros(capacity, bool)
        self.cursor = 0
        self.evicted_unsampled = 0
        self.sampled_unique = 0

    @property
    def fill(self) -> int:
        return min(self.cursor, self.capacity)

    def add(self, s, a, s2, r: float, d: int) -> None:
        i = self.cursor % self.capacity
        if self.cursor >= self.capacity and not self.sampled[i]:
            self.evicted_unsampled += 1
        self.s[i], self.a[i], self.s2[i] = s, a, s2
        self.r[i], self.d[i] = r, d
        self.sampled[i] = False
        self.cursor += 1

    def add_items(self, items) -> None:
        """Append drained queue items (send_time, s, a, s2, r, d)."""
        for _, s, a, s2, r, d in items:
            self.add(s, a, s2, r, d)

    def sample(self, batch_size: int, rng: np.random.Generator) -> Batch:
        n = self.fill
        if n < batch_size:
            raise NotEnoughData(f"{n} transitions resident, batch of {batch_size} requested")
        idx = rng.integers(0, n, batch_size)
        fresh = np.unique(idx[~self.sampled[idx]])
        self.sampled_unique += len(fresh)
        self.sampled[fresh] = True
        return Batch(self.s[idx], self.a[idx], self.s2[idx], self.r[idx], self.d[idx], idx)
