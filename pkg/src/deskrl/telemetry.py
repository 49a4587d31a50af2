"""Throughput counters shared across processes and their windowed aggregation.

Each process owns one row ("slot") of a shared float64 board and is the only
writer of the cells in it, so increments need no locks or atomics. A single
aggregator in the orchestrator turns counter deltas into ``ThroughputStats``.
"""
from __future__ import annotations

import json
import logging
import math
import os
import time
from dataclasses import asdict, dataclass, field
from multiprocessing import shared_memory
from typing import Callable, Iterable

import numpy as np

from .replay import _attach_untracked

log = logging.getLogger(__name__)

# counters accumulate; gauges are overwritten
COUNTERS = (
    "env_steps", "episodes", "faults", "pushes",
    "updates", "consumed", "update_seconds", "receive_seconds", "received",
    "transfer_events", "transfer_latency_sum", "transfer_latency_n", "lost",
)
GAUGES = (
    "alive", "heartbeat", "pid", "policy_version", "batch_size", "batch_request",
    "eval_mean", "eval_min", "eval_max", "eval_count", "eval_version", "eval_time",
    "iteration", "staleness",
)
FIELDS = COUNTERS + GAUGES
FIELD_ID = {name: i for i, name in enumerate(FIELDS)}

UPDATER_SLOT = 0
EVAL_SLOT = 1
TRACER_SLOT = 2
CONTROL_SLOT = 3
FIRST_SAMPLER_SLOT = 4


def sampler_slot(worker_id: int) -> int:
    return FIRST_SAMPLER_SLOT + worker_id


class UnknownCounter(KeyError):
    pass


def counter_id(name: str) -> int:
    """Resolve a counter name; unknown names fail here, never on the hot path."""
    try:
        return FIELD_ID[name]
    except KeyError:
        raise UnknownCounter(name) from None


class CounterBoard:
    """A (slots x fields) float64 table in named shared memory."""

    def __init__(self, shm: shared_memory.SharedMemory, owner: bool) -> None:
        self._shm = shm
        self.owner = owner
        self.name = shm.name
        n_slots = shm.size // (8 * len(FIELDS))
        self.table = np.ndarray((n_slots, len(FIELDS)), dtype=np.float64, buffer=shm.buf)

    @classmethod
    def create(cls, name: str, n_slots: int) -> "CounterBoard":
        shm = shared_memory.SharedMemory(name=name, create=True, size=8 * len(FIELDS) * n_slots)
        board = cls(shm, owner=True)
        board.table[...] = 0.0
        return board

    @classmethod
    def attach(cls, name: str) -> "CounterBoard":
        return cls(_attach_untracked(name), owner=False)

    @property
    def n_slots(self) -> int:
        return self.table.shape[0]

    def record_event(self, slot: int, cid: int, amount: float = 1.0) -> None:
        if amount:
            self.table[slot, cid] += amount

    def set(self, slot: int, cid: int, value: float) -> None:
        self.table[slot, cid] = value

    def get(self, slot: int, cid: int) -> float:
        return float(self.table[slot, cid])

    def read(self) -> np.ndarray:
        return self.table.copy()

    def close(self) -> None:
        self.table = None
        self._shm.close()

    def unlink(self) -> None:
        self.close()
        try:
            self._shm.unlink()
        except FileNotFoundError:
            pass


class SlotWriter:
    """Hot-path handle: one process, one slot."""

    __slots__ = ("row",)

    def __init__(self, board: CounterBoard, slot: int) -> None:
        self.row = board.table[slot]

    def record_event(self, cid: int, amount: float = 1.0) -> None:
        if amount:
            self.row[cid] += amount

    def set(self, cid: int, value: float) -> None:
        self.row[cid] = value

    def get(self, cid: int) -> float:
        return float(self.row[cid])


@dataclass
class ThroughputStats:
    window_start: float
    window_end: float
    sampling_frame_rate: float = 0.0
    update_frequency: float = 0.0
    update_frame_rate: float = 0.0
    batch_size: float = 0.0
    transfer_frequency: float = 0.0
    transfer_cycle_s: float = 0.0
    transmission_loss: float = 0.0
    receive_time_share: float = 0.0
    cpu_utilization: float = 0.0
    updater_duty: float = 0.0
    per_worker_rates: dict = field(default_factory=dict)
    policy_version: int = 0
    complete: bool = True
    updates: float = 0.0  # raw counts over the window
    frames: float = 0.0

    @property
    def seconds(self) -> float:
        return self.window_end - self.window_start

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


class CpuMeter:
    """CPU use of a set of processes as a fraction of the whole machine."""

    def __init__(self, clock: Callable[[], float] = time.monotonic, n_cpus: int | None = None) -> None:
        import psutil

        self._psutil = psutil
        self.clock = clock
        self.n_cpus = n_cpus or psutil.cpu_count() or 1
        self._prev: dict[int, float] = {}
        self._t = clock()

    def _cpu_seconds(self, pid: int) -> float | None:
        try:
            t = self._psutil.Process(pid).cpu_times()
            return t.user + t.system
        except (self._psutil.NoSuchProcess, self._psutil.AccessDenied):
            return None

    def sample(self, pids: Iterable[int]) -> float:
        now = self.clock()
        dt = now - self._t
        self._t = now
        used = 0.0
        cur = {}
        for pid in pids:
            c = self._cpu_seconds(pid)
            if c is None:
                continue
            cur[pid] = c
            used += c - self._prev.get(pid, c)
        self._prev = cur
        if dt <= 0:
            return 0.0
        return min(1.0, max(0.0, used / (dt * self.n_cpus)))


class Telemetry:
    """Windowed snapshots over a ``CounterBoard``.

    ``loss_source`` returns cumulative (pushed, lost-unsampled) transition
    counts; ``pids`` returns the processes whose CPU time counts.
    """

    def __init__(self, board: CounterBoard, out_path: str | os.PathLike | None = None,
                 clock: Callable[[], float] = time.monotonic,
                 loss_source: Callable[[], tuple[int, int]] | None = None,
                 pids: Callable[[], Iterable[int]] | None = None,
                 cpu_meter: CpuMeter | None = None, warmup: float = 0.0) -> None:
        self.board = board
        self.out_path = out_path
        self.clock = clock
        self.loss_source = loss_source
        self.pids = pids
        self.cpu = cpu_meter if cpu_meter is not None else (CpuMeter(clock) if pids else None)
        self.warmup = warmup
        self._t0 = clock()
        self._prev_t = self._t0
        self._prev = board.read()
        self._prev_loss = loss_source() if loss_source else (0, 0)
        self.history: list[ThroughputStats] = []

    def reset_window(self) -> None:
        """Start a fresh window now (drops whatever accumulated since the last snapshot)."""
        self._prev_t = self.clock()
        self._prev = self.board.read()
        if self.loss_source:
            self._prev_loss = self.loss_source()
        if self.cpu and self.pids:
            self.cpu.sample(self.pids())

    def snapshot(self) -> ThroughputStats | None:
        """Close the current window; returns None (and logs) if the clock went backwards."""
        now = self.clock()
        cur = self.board.read()
        start = self._prev_t
        if now <= start:
            log.warning("clock did not advance (%.6f -> %.6f); window discarded", start, now)
            self._prev = cur
            return None
        dt = now - start
        delta = cur - self._prev
        self._prev, self._prev_t = cur, now
        tot = delta.sum(axis=0)
        f = FIELD_ID

        def total(name):
            return float(tot[f[name]])

        updates = total("updates")
        consumed = total("consumed")
        freq = updates / dt
        batch = consumed / updates if updates else float(cur[UPDATER_SLOT, f["batch_size"]])
        stats = ThroughputStats(window_start=start, window_end=now, updates=updates, frames=consumed)
        stats.sampling_frame_rate = total("env_steps") / dt
        stats.update_frequency = freq
        stats.batch_size = batch
        # frame rate is defined as frequency x batch over the same window
        stats.update_frame_rate = freq * batch
        stats.transfer_frequency = total("transfer_events") / dt
        n_lat = total("transfer_latency_n")
        stats.transfer_cycle_s = total("transfer_latency_sum") / n_lat if n_lat else 0.0
        stats.receive_time_share = min(1.0, total("receive_seconds") / dt)
        stats.updater_duty = min(1.0, total("update_seconds") / dt)
        if self.loss_source:
            pushed, lost = self.loss_source()
            dp, dl = pushed - self._prev_loss[0], lost - self._prev_loss[1]
            self._prev_loss = (pushed, lost)
            stats.transmission_loss = min(1.0, max(0.0, dl / dp)) if dp > 0 else 0.0
        if self.cpu and self.pids:
            stats.cpu_utilization = self.cpu.sample(self.pids())
        steps = delta[:, f["env_steps"]]
        stats.per_worker_rates = {
            str(slot - FIRST_SAMPLER_SLOT): float(steps[slot] / dt)
            for slot in range(FIRST_SAMPLER_SLOT, self.board.n_slots)
            if cur[slot, f["alive"]] > 0 or steps[slot] > 0
        }
        stats.policy_version = int(cur[UPDATER_SLOT, f["policy_version"]])
        stats.complete = (start - self._t0) >= self.warmup
        self.history.append(stats)
        if self.out_path is not None:
            with open(self.out_path, "a") as fh:
                fh.write(stats.to_json() + "\n")
        return stats


def read_jsonl(path: str | os.PathLike) -> tuple[list[dict], int]:
    """Parse a JSON-lines log; returns (records, malformed-line count)."""
    rows, bad = [], 0
    try:
        with open(path) as fh:
            for line in fh:
                line = line.strip()
                if not line:
                    continue
                try:
                    rows.append(json.loads(line))
                except json.JSONDecodeError:
                    bad += 1
    except FileNotFoundError:
        pass
    return rows, bad


def append_jsonl(path: str | os.PathLike, record: dict) -> None:
    with open(path, "a") as fh:
        fh.write(json.dumps(record, sort_keys=True, allow_nan=True) + "\n")


def is_finite_number(x) -> bool:
    return isinstance(x, (int, float)) and math.isfinite(x)
