"""Actor-side processes: experience samplers, the evaluator and the tracer.

Each runs in its own process with a private environment and policy copy.
Shared state is limited to the replay ring (or queue), checkpoint files and
the counter board.
"""
from __future__ import annotations

import csv
import logging
import os
import time
from collections import deque
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from .envs import Env, make_env
from .nn import DenseNet, GaussianPolicyHead
from .replay import QueueChannel, ReplayRing, Transition
from .telemetry import EVAL_SLOT, TRACER_SLOT, CounterBoard, SlotWriter, append_jsonl, counter_id, sampler_slot
from .weights import CheckpointStore

log = logging.getLogger(__name__)


class EnvFault(RuntimeError):
    pass


class TooManyFaults(RuntimeError):
    pass


class FaultInjector(Env):
    """Wraps an env and raises ``EnvFault`` on every ``every``-th step after the first ``after``."""

    def __init__(self, inner: Env, every: int, after: int = 0) -> None:
        super().__init__()
        self.inner = inner
        self.spec = inner.spec
        self.every = every
        self.after = after
        self.count = 0

    def reset(self, seed=None):
        return self.inner.reset(seed)

    def step(self, action):
        self.count += 1
        if self.every and self.count > self.after and self.count % self.every == 0:
            raise EnvFault(f"injected fault at step {self.count}")
        return self.inner.step(action)

    def sample_action(self, rng):
        return self.inner.sample_action(rng)


def build_env(name: str, params: dict | None = None) -> Env:
    params = dict(params or {})
    every = int(params.pop("fault_every", 0))
    after = int(params.pop("fault_after", 0))
    env = make_env(name, **params)
    return FaultInjector(env, every, after) if every else env


@dataclass
class SamplerStatus:
    worker_id: int
    steps: int = 0
    episodes: int = 0
    policy_version: int = 0
    steps_per_sec: float = 0.0
    alive: bool = False
    faults: int = 0


@dataclass
class EvalRecord:
    time: float
    policy_version: int
    mean: float | None
    min: float | None
    max: float | None
    episodes: int
    untrained: bool = False

    def as_dict(self) -> dict:
        return asdict(self)


class SamplerCore:
    """One sampler's per-step logic, independent of process and transport.

    ``sink(s, a, s2, r, d)`` receives every transition. ``random_until()``
    returns True while warm-up random actions should be used.
    """

    def __init__(self, env: Env, sink: Callable, rng: np.random.Generator,
                 random_until: Callable[[], bool] | None = None, seed: int | None = None) -> None:
        self.env = env
        self.sink = sink
        self.rng = rng
        self.random_until = random_until or (lambda: False)
        self.head: GaussianPolicyHead | None = None
        self.version = 0
        self.steps = 0
        self.episodes = 0
        self.last_return = 0.0
        self._ep_return = 0.0
        self._seed = seed
        self.obs = env.reset(seed)

    def load_actor(self, net: DenseNet, version: int) -> None:
        self.head = GaussianPolicyHead(net, self.env.spec.act_bound)
        self.version = version

    def act(self, obs: np.ndarray) -> np.ndarray:
        if self.head is None or self.random_until():
            return self.env.sample_action(self.rng)
        a, _ = self.head.sample(obs[None, :], deterministic=False, rng=self.rng)
        return a[0]

    def reset(self) -> None:
        self.obs = self.env.reset(None if self._seed is None else self._seed + self.episodes + 1)
        self._ep_return = 0.0

    def step(self) -> bool:
        """Advance one env step; returns True when an episode ended."""
        obs = self.obs
        a = self.act(obs)
        res = self.env.step(a)
        self.sink(obs, a, res.obs, res.reward, int(res.done))
        self.steps += 1
        self._ep_return += res.reward
        if res.done or res.truncated:
            self.episodes += 1
            self.last_return = self._ep_return
            self.reset()
            return True
        self.obs = res.obs
        return False


def _poll_actor(store: CheckpointStore, known: int | None):
    try:
        return store.poll_latest(known, names=["actor"])
    except OSError as exc:
        log.warning("checkpoint poll failed: %s", exc)
        return None


def run_sampler(worker_id: int, env_name: str, env_params: dict | None, ring_name: str | None,
                ckpt_path: str, stop, *, channel: QueueChannel | None = None, board_name: str | None = None,
                seed: int = 0, warmup_steps: int = 1000, warmup_share: int = 1, poll_seconds: float = 0.5,
                fault_limit: int = 5, fault_window: float = 10.0, rate_window: float = 5.0,
                max_steps: int | None = None) -> SamplerStatus:
    """Roll out the latest policy and publish every transition until ``stop`` is set.

    Warm-up: while the ring holds fewer than ``warmup_steps`` transitions
    (queue mode: while this worker has taken fewer than
    ``warmup_steps / warmup_share`` steps) actions are uniform random.
    """
    env = build_env(env_name, env_params)
    rng = np.random.default_rng(seed)
    store = CheckpointStore(ckpt_path)
    ring = ReplayRing.attach(ring_name, writer_id=worker_id) if ring_name else None
    board = CounterBoard.attach(board_name) if board_name else None
    w = SlotWriter(board, sampler_slot(worker_id)) if board else None
    ids = {n: counter_id(n) for n in ("env_steps", "episodes", "faults", "pushes", "alive", "pid",
                                      "heartbeat", "policy_version")}
    status = SamplerStatus(worker_id)

    if ring is not None:
        def sink(s, a, s2, r, d):
            ring.push(s, a, s2, r, d)
        random_until = lambda: ring.cursor < warmup_steps  # noqa: E731
    elif channel is not None:
        def sink(s, a, s2, r, d):
            t = Transition(np.asarray(s, np.float32), np.asarray(a, np.float32), np.asarray(s2, np.float32), r, d)
            while not channel.put(t, timeout=0.1):
                if stop.is_set() or channel.policy == "drop":
                    return
        own = -(-warmup_steps // max(1, warmup_share))
        random_until = lambda: core.steps < own  # noqa: E731
    else:
        raise ValueError("sampler needs a ring or a queue channel")

    core = SamplerCore(env, sink, rng, random_until, seed=seed)
    if w:
        w.set(ids["alive"], 1)
        w.set(ids["pid"], os.getpid())
    faults: deque[float] = deque()
    rate_marks: deque[tuple[float, int]] = deque([(time.monotonic(), 0)])
    next_poll = 0.0
    try:
        while not stop.is_set():
            if max_steps is not None and core.steps >= max_steps:
                break
            now = time.monotonic()
            if now >= next_poll:
                b = _poll_actor(store, core.version or None)
                if b is not None:
                    core.load_actor(b.net("actor"), b.version)
                    if w:
                        w.set(ids["policy_version"], b.version)
                next_poll = now + poll_seconds
                rate_marks.append((now, core.steps))
                while len(rate_marks) > 2 and now - rate_marks[0][0] > rate_window:
                    rate_marks.popleft()
                if w:
                    w.set(ids["heartbeat"], now)
            try:
                ended = core.step()
            except EnvFault as exc:
                status.faults += 1
                if w:
                    w.record_event(ids["faults"], 1)
                faults.append(now)
                while faults and now - faults[0] > fault_window:
                    faults.popleft()
                log.warning("sampler %d: env fault (%s); resetting", worker_id, exc)
                if len(faults) > fault_limit:
                    raise TooManyFaults(f"sampler {worker_id}: {len(faults)} faults within {fault_window}s")
                core.reset()
                continue
            if w:
                w.record_event(ids["env_steps"], 1)
                w.record_event(ids["pushes"], 1)
                if ended:
                    w.record_event(ids["episodes"], 1)
    finally:
        if w:
            w.set(ids["alive"], 0)
        if ring is not None:
            ring.close()
        if channel is not None:
            channel.release_sender()
        if board is not None:
            board.close()
    t0, s0 = rate_marks[0]
    dt = time.monotonic() - t0
    status.steps, status.episodes, status.policy_version = core.steps, core.episodes, core.version
    status.steps_per_sec = max(0.0, (core.steps - s0) / dt) if dt > 0 else 0.0
    status.alive = False
    return status


# evaluation ------------------------------------------------------------------------


def evaluate_policy(env: Env, head: GaussianPolicyHead, episodes: int, seed: int = 0) -> list[float]:
    """Deterministic returns of ``episodes`` episodes with fixed per-episode seeds."""
    out = []
    for k in range(episodes):
        obs = env.reset(seed + k)
        total = 0.0
        while True:
            a, _ = head.sample(obs[None, :], deterministic=True)
            res = env.step(a[0])
            total += res.reward
            if res.done or res.truncated:
                break
            obs = res.obs
        out.append(total)
    return out


def make_eval_record(t: float, version: int, returns: list[float]) -> EvalRecord:
    return EvalRecord(t, version, float(np.mean(returns)), float(np.min(returns)), float(np.max(returns)),
                      len(returns))


def run_evaluator(env_name: str, env_params: dict | None, ckpt_path: str, stop, out_path: str, *,
                  cadence: float = 5.0, episodes: int = 5, seed: int = 10_000, t0: float | None = None,
                  board_name: str | None = None, max_records: int | None = None) -> list[EvalRecord]:
    """Every ``cadence`` seconds evaluate the newest policy; never touches the replay ring."""
    if episodes < 1:
        raise ValueError("need at least one evaluation episode")
    env = make_env(env_name, **{k: v for k, v in (env_params or {}).items() if not k.startswith("fault_")})
    store = CheckpointStore(ckpt_path)
    t0 = time.time() if t0 is None else t0
    board = CounterBoard.attach(board_name) if board_name else None
    w = SlotWriter(board, EVAL_SLOT) if board else None
    records: list[EvalRecord] = []
    head, version = None, 0
    try:
        if w:
            w.set(counter_id("alive"), 1)
            w.set(counter_id("pid"), os.getpid())
        while not stop.is_set():
            tick = time.monotonic()
            b = _poll_actor(store, version or None)
            if b is not None:
                head, version = GaussianPolicyHead(b.net("actor"), env.spec.act_bound), b.version
            if head is None:
                rec = EvalRecord(time.time() - t0, 0, None, None, None, episodes, untrained=True)
            else:
                rec = make_eval_record(time.time() - t0, version, evaluate_policy(env, head, episodes, seed))
                rec.time = time.time() - t0
            records.append(rec)
            append_jsonl(out_path, rec.as_dict())
            if w and not rec.untrained:
                w.set(counter_id("eval_mean"), rec.mean)
                w.set(counter_id("eval_min"), rec.min)
                w.set(counter_id("eval_max"), rec.max)
                w.set(counter_id("eval_version"), rec.policy_version)
                w.set(counter_id("eval_time"), rec.time)
                w.record_event(counter_id("eval_count"), 1)
            if w:
                w.set(counter_id("heartbeat"), time.monotonic())
            if max_records is not None and len(records) >= max_records:
                break
            remaining = cadence - (time.monotonic() - tick)
            if remaining > 0:
                stop.wait(remaining)
    finally:
        if w:
            w.set(counter_id("alive"), 0)
        if board:
            board.close()
    return records


# tracing --------------------------------------------------------------------------


def write_trace(env: Env, head: GaussianPolicyHead, path: str | os.PathLike, seed: int = 0) -> int:
    """Roll out one deterministic episode and write (t, s..., a..., r) rows; returns the row count."""
    spec = env.spec
    header = ["t"] + [f"s{i}" for i in range(spec.obs_dim)] + [f"a{i}" for i in range(spec.act_dim)] + ["r"]
    tmp = f"{path}.tmp"
    rows = 0
    with open(tmp, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(header)
        obs = env.reset(seed)
        while True:
            a, _ = head.sample(obs[None, :], deterministic=True)
            res = env.step(a[0])
            wr.writerow([rows, *map(repr, obs.tolist()), *map(repr, a[0].tolist()), repr(res.reward)])
            rows += 1
            if res.done or res.truncated:
                break
            obs = res.obs
    os.replace(tmp, path)
    return rows


def run_tracer(env_name: str, env_params: dict | None, ckpt_path: str, stop, out_dir: str, *,
               cadence: float = 60.0, seed: int = 20_000, board_name: str | None = None,
               max_traces: int | None = None) -> list[str]:
    """Periodically trace the newest policy to ``trace_{version}.csv``."""
    env = make_env(env_name, **{k: v for k, v in (env_params or {}).items() if not k.startswith("fault_")})
    store = CheckpointStore(ckpt_path)
    board = CounterBoard.attach(board_name) if board_name else None
    w = SlotWriter(board, TRACER_SLOT) if board else None
    written: list[str] = []
    version = 0
    try:
        if w:
            w.set(counter_id("alive"), 1)
            w.set(counter_id("pid"), os.getpid())
        while not stop.is_set():
            tick = time.monotonic()
            b = _poll_actor(store, version or None)
            if b is not None:
                version = b.version
                path = str(Path(out_dir) / f"trace_{version}.csv")
                try:
                    write_trace(env, GaussianPolicyHead(b.net("actor"), env.spec.act_bound), path, seed)
                    written.append(path)
                except OSError as exc:
                    log.warning("trace for version %d skipped: %s", version, exc)
            if w:
                w.set(counter_id("heartbeat"), time.monotonic())
            if max_traces is not None and len(written) >= max_traces:
                break
            remaining = cadence - (time.monotonic() - tick)
            if remaining > 0:
                stop.wait(remaining)
    finally:
        if w:
            w.set(counter_id("alive"), 0)
        if board:
            board.close()
    return written


# process entry points ------------------------------------------------------------


def _setup_child_logging(level: int = logging.WARNING) -> None:
    logging.basicConfig(level=level, format="%(asctime)s %(processName)s %(levelname)s %(message)s")


def sampler_main(*args, **kwargs) -> None:
    _setup_child_logging()
    try:
        run_sampler(*args, **kwargs)
    except TooManyFaults as exc:
        log.error("%s", exc)
        raise SystemExit(3)


def evaluator_main(*args, **kwargs) -> None:
    _setup_child_logging()
    run_evaluator(*args, **kwargs)


def tracer_main(*args, **kwargs) -> None:
    _setup_child_logging()
    run_tracer(*args, **kwargs)
