"""Large-batch SAC learner.

Two execution modes compute the same update:

* single: one worker owns every network;
* dual: an actor worker owns the policy and a critic worker owns Q1, Q2 and
  their targets. They run concurrently and meet once per iteration.

Per-iteration exchange in dual mode (float32, B = batch size, A = action dim)::

    actor -> critic   a_next   (B, A)   a' ~ pi(.|s2)
                      logp_next (B,)    log pi(a'|s2)
                      a_tilde  (B, A)   reparameterized a~ ~ pi(.|s)
    critic -> actor   minq     (B,)     min(Q1, Q2)(s, a~)
                      dminq_da (B, A)   gradient of minq w.r.t. a~

Both workers read (s, a, s2) from the sampled batch; r and d go only to the
critic worker. The actor gradient uses the critics as they were before this
iteration's critic step, which is what lets the two workers run in parallel.
"""
from __future__ import annotations

import logging
import queue
import threading
import time
from dataclasses import asdict, dataclass
from typing import Callable

import numpy as np

from .nn import (
    LOG_STD_MAX,
    LOG_STD_MIN,
    Adam,
    DenseNet,
    GaussianPolicyHead,
    OptimizerError,
    ShapeError,
    polyak_update,
    squash_backward,
    squash_sample,
)
from .replay import Batch, LocalReplay, NotEnoughData, QueueChannel, ReplayRing
from .telemetry import CONTROL_SLOT, UPDATER_SLOT, CounterBoard, SlotWriter, append_jsonl, counter_id
from .weights import CheckpointStore

log = logging.getLogger(__name__)

EXCHANGE_TO_CRITIC = ("a_next", "logp_next", "a_tilde")
EXCHANGE_TO_ACTOR = ("minq", "dminq_da")
CHECKPOINT_NETS = ("actor", "q1", "q2", "q1_targ", "q2_targ")


class UpdateError(FloatingPointError):
    def __init__(self, msg: str, diag: dict | None = None) -> None:
        super().__init__(msg)
        self.diag = diag or {}


class DesyncError(RuntimeError):
    pass


class ExchangeTimeout(TimeoutError):
    pass


@dataclass
class UpdateDiag:
    iteration: int
    batch_size: int
    q1_loss: float
    q2_loss: float
    actor_loss: float
    q_mean: float
    q_std: float
    target_mean: float
    logp_mean: float
    exchange_bytes: int = 0

    def as_dict(self) -> dict:
        return asdict(self)


@dataclass
class BatchSplit:
    """One sampled batch routed to the two workers."""

    s: np.ndarray
    a: np.ndarray
    s2: np.ndarray
    r: np.ndarray
    d: np.ndarray
    idx: np.ndarray

    def __post_init__(self) -> None:
        n = len(self.r)
        if not (len(self.s) == len(self.a) == len(self.s2) == len(self.d) == len(self.idx) == n):
            raise ShapeError("batch fields index different numbers of transitions")

    @classmethod
    def from_batch(cls, b: Batch) -> "BatchSplit":
        return cls(b.s, b.a, b.s2, np.asarray(b.r, np.float32), np.asarray(b.d, np.float32), b.idx)

    def __len__(self) -> int:
        return len(self.r)

    @property
    def state_bytes(self) -> int:
        """Bytes of the (s, s2) fields, the yardstick for the exchange payload."""
        return self.s.nbytes + self.s2.nbytes


class LearnerState:
    """Networks, optimizers and hyperparameters of one SAC learner."""

    def __init__(self, actor: DenseNet, q1: DenseNet, q2: DenseNet, q1_targ: DenseNet, q2_targ: DenseNet,
                 bound, *, gamma: float = 0.99, tau: float = 0.005, alpha: float = 0.2, lr: float = 3e-4,
                 batch_size: int = 256, iteration: int = 0) -> None:
        self.actor, self.q1, self.q2 = actor, q1, q2
        self.q1_targ, self.q2_targ = q1_targ, q2_targ
        self.bound = np.asarray(bound, np.float32)
        self.gamma, self.tau, self.alpha, self.lr = gamma, tau, alpha, lr
        self.batch_size = batch_size
        self.iteration = iteration
        self.opt_actor = Adam(actor.params, actor.param_names, lr=lr)
        self.opt_q1 = Adam(q1.params, q1.param_names, lr=lr)
        self.opt_q2 = Adam(q2.params, q2.param_names, lr=lr)
        self.validate()

    @classmethod
    def create(cls, obs_dim: int, act_dim: int, bound, hidden=(256, 256), *, seed: int = 0,
               **kw) -> "LearnerState":
        hidden = list(hidden)
        actor = DenseNet([obs_dim, *hidden, 2 * act_dim], seed=seed)
        q1 = DenseNet([obs_dim + act_dim, *hidden, 1], seed=seed + 1)
        q2 = DenseNet([obs_dim + act_dim, *hidden, 1], seed=seed + 2)
        return cls(actor, q1, q2, q1.copy(), q2.copy(), bound, **kw)

    def validate(self) -> None:
        if self.q1.topology() != self.q1_targ.topology() or self.q2.topology() != self.q2_targ.topology():
            raise ShapeError("target topologies must match their critics")
        # gamma = 0 is allowed: it reduces targets to immediate rewards
        if not 0.0 <= self.gamma < 1.0:
            raise ValueError(f"gamma {self.gamma} outside [0, 1)")
        if not 0.0 < self.tau <= 1.0:
            raise ValueError(f"tau {self.tau} outside (0, 1]")
        if self.batch_size < 1:
            raise ValueError("batch size must be >= 1")
        if self.actor.out_dim != 2 * self.act_dim or self.q1.in_dim != self.obs_dim + self.act_dim:
            raise ShapeError("actor and critic dimensions disagree")

    @property
    def obs_dim(self) -> int:
        return self.actor.in_dim

    @property
    def act_dim(self) -> int:
        return self.bound.shape[0]

    @property
    def head(self) -> GaussianPolicyHead:
        return GaussianPolicyHead(self.actor, self.bound)

    def nets(self) -> dict[str, DenseNet]:
        return {n: getattr(self, n) for n in CHECKPOINT_NETS}

    def set_batch_size(self, b: int) -> None:
        # optimizer moments are untouched, only the sample count changes
        if b < 1:
            raise ValueError("batch size must be >= 1")
        self.batch_size = int(b)

    def flat_params(self) -> np.ndarray:
        return np.concatenate([getattr(self, n).flat() for n in CHECKPOINT_NETS])


# shared pieces -------------------------------------------------------------------


def _draw_noise(state: LearnerState, n: int, rng: np.random.Generator):
    shape = (n, state.act_dim)
    eps_next = rng.standard_normal(shape, dtype=np.float32)
    eps = rng.standard_normal(shape, dtype=np.float32)
    return eps_next, eps


def _actor_forward(state: LearnerState, s, s2, eps_next, eps):
    A = state.act_dim
    rng_ls = (LOG_STD_MIN, LOG_STD_MAX)
    out2 = state.actor(s2)
    a_next, logp_next, _ = squash_sample(out2[:, :A], out2[:, A:], state.bound, eps_next, rng_ls)
    out, cache = state.actor.forward_cached(s)
    a_tilde, logp, sq = squash_sample(out[:, :A], out[:, A:], state.bound, eps, rng_ls)
    return a_next, logp_next, a_tilde, logp, cache, sq


def _critic_pass(state: LearnerState, s, a, s2, r, d, a_next, logp_next, a_tilde):
    """Critic gradients and min-Q at (s, a~), all from the pre-update critics."""
    B = len(r)
    O = state.obs_dim
    x2 = np.concatenate([s2, a_next], axis=1)
    qt = np.minimum(state.q1_targ(x2)[:, 0], state.q2_targ(x2)[:, 0])
    y = r + state.gamma * (1.0 - d) * (qt - state.alpha * logp_next)
    x = np.concatenate([s, a], axis=1)
    grads, losses, qs = [], [], []
    for net in (state.q1, state.q2):
        q, cache = net.forward_cached(x)
        err = q[:, 0] - y
        losses.append(float(np.mean(err * err)))
        grads.append(net.backward((2.0 / B) * err[:, None], cache))
        qs.append(q[:, 0])
    xt = np.concatenate([s, a_tilde], axis=1)
    ones = np.ones((B, 1), np.float32)
    p, dx = [], []
    for net in (state.q1, state.q2):
        q, cache = net.forward_cached(xt)
        _, g = net.backward(ones, cache, input_grad=True, param_grads=False)
        p.append(q[:, 0])
        dx.append(g[:, O:])
    take1 = p[0] <= p[1]
    minq = np.where(take1, p[0], p[1])
    dminq = np.where(take1[:, None], dx[0], dx[1])
    q_all = np.concatenate(qs)
    stats = {"q1_loss": losses[0], "q2_loss": losses[1], "q_mean": float(q_all.mean()),
             "q_std": float(q_all.std()), "target_mean": float(y.mean())}
    if not (np.isfinite(losses[0]) and np.isfinite(losses[1])):
        raise UpdateError(f"non-finite critic loss at iteration {state.iteration}", stats)
    return grads, minq, dminq, stats


def _critic_apply(state: LearnerState, grads) -> None:
    try:
        state.opt_q1.step(grads[0])
        state.opt_q2.step(grads[1])
    except OptimizerError as exc:
        raise UpdateError(f"critic step failed at iteration {state.iteration}: {exc}") from exc
    polyak_update(state.q1_targ, state.q1, state.tau)
    polyak_update(state.q2_targ, state.q2, state.tau)


def _actor_pass(state: LearnerState, cache, sq, logp, minq, dminq):
    B = len(minq)
    loss = float(np.mean(state.alpha * logp - minq))
    if not np.isfinite(loss):
        raise UpdateError(f"non-finite actor loss at iteration {state.iteration}", {"actor_loss": loss})
    d_mean, d_ls = squash_backward(sq, -dminq / np.float32(B), np.full(B, state.alpha / B, np.float32))
    grads = state.actor.backward(np.concatenate([d_mean, d_ls], axis=1), cache)
    try:
        state.opt_actor.step(grads)
    except OptimizerError as exc:
        raise UpdateError(f"actor step failed at iteration {state.iteration}: {exc}") from exc
    return loss


def _check_batch(state: LearnerState, batch) -> None:
    if len(batch) != state.batch_size:
        raise ShapeError(f"batch of {len(batch)} but the learner batch size is {state.batch_size}")


# single worker ---------------------------------------------------------------------


def sac_update_single(state: LearnerState, batch: Batch | BatchSplit,
                      rng: np.random.Generator) -> tuple[LearnerState, UpdateDiag]:
    """One critic step, one actor step and a target update, in place."""
    _check_batch(state, batch)
    b = batch if isinstance(batch, BatchSplit) else BatchSplit.from_batch(batch)
    eps_next, eps = _draw_noise(state, len(b), rng)
    a_next, logp_next, a_tilde, logp, cache, sq = _actor_forward(state, b.s, b.s2, eps_next, eps)
    grads, minq, dminq, stats = _critic_pass(state, b.s, b.a, b.s2, b.r, b.d, a_next, logp_next, a_tilde)
    _critic_apply(state, grads)
    actor_loss = _actor_pass(state, cache, sq, logp, minq, dminq)
    state.iteration += 1
    return state, UpdateDiag(state.iteration, len(b), actor_loss=actor_loss,
                             logp_mean=float(logp.mean()), **stats)


# dual worker -----------------------------------------------------------------------


class DualUpdater:
    """Actor and critic workers on two threads with a per-iteration rendezvous.

    ``stall`` maps a worker name to seconds of artificial delay before it
    sends its half of the exchange (fault injection for tests).
    """

    def __init__(self, state: LearnerState, timeout: float = 10.0) -> None:
        self.state = state
        self.timeout = timeout
        self.actor_iter = state.iteration
        self.critic_iter = state.iteration
        self.stall = {"actor": 0.0, "critic": 0.0}
        self._jobs = {"actor": queue.Queue(), "critic": queue.Queue()}
        self._to_critic: queue.Queue = queue.Queue()
        self._to_actor: queue.Queue = queue.Queue()
        self._done: queue.Queue = queue.Queue()
        self._failed: BaseException | None = None
        self._threads = [
            threading.Thread(target=self._run, args=(name, fn), name=f"sac-{name}", daemon=True)
            for name, fn in (("actor", self._actor_job), ("critic", self._critic_job))
        ]
        for t in self._threads:
            t.start()

    def _counters(self) -> str:
        return f"actor worker at iteration {self.actor_iter}, critic worker at iteration {self.critic_iter}"

    def _recv(self, q: queue.Queue, it: int, who: str):
        try:
            msg = q.get(timeout=self.timeout)
        except queue.Empty:
            raise ExchangeTimeout(f"{who} worker timed out after {self.timeout}s waiting for its peer; "
                                  + self._counters()) from None
        if msg[0] != it:
            raise DesyncError(f"{who} worker at iteration {it} received iteration {msg[0]}")
        return msg[1:]

    def _run(self, name: str, fn: Callable) -> None:
        jobs = self._jobs[name]
        while True:
            job = jobs.get()
            if job is None:
                return
            try:
                self._done.put((name, fn(*job)))
            except BaseException as exc:  # reported to the caller
                self._done.put((name, exc))

    def _actor_job(self, it, b: BatchSplit, eps_next, eps):
        if it != self.actor_iter:
            raise DesyncError(f"actor worker at iteration {self.actor_iter} given job {it}")
        st = self.state
        a_next, logp_next, a_tilde, logp, cache, sq = _actor_forward(st, b.s, b.s2, eps_next, eps)
        if self.stall["actor"]:
            time.sleep(self.stall["actor"])
        self._to_critic.put((it, a_next, logp_next, a_tilde))
        minq, dminq = self._recv(self._to_actor, it, "actor")
        loss = _actor_pass(st, cache, sq, logp, minq, dminq)
        self.actor_iter += 1
        sent = a_next.nbytes + logp_next.nbytes + a_tilde.nbytes + minq.nbytes + dminq.nbytes
        return {"actor_loss": loss, "logp_mean": float(logp.mean()), "exchange_bytes": sent}

    def _critic_job(self, it, b: BatchSplit, eps_next, eps):
        if it != self.critic_iter:
            raise DesyncError(f"critic worker at iteration {self.critic_iter} given job {it}")
        st = self.state
        a_next, logp_next, a_tilde = self._recv(self._to_critic, it, "critic")
        grads, minq, dminq, stats = _critic_pass(st, b.s, b.a, b.s2, b.r, b.d, a_next, logp_next, a_tilde)
        if self.stall["critic"]:
            time.sleep(self.stall["critic"])
        self._to_actor.put((it, minq, dminq))
        _critic_apply(st, grads)
        self.critic_iter += 1
        return stats

    def update(self, batch: Batch | BatchSplit, rng: np.random.Generator) -> tuple[LearnerState, UpdateDiag]:
        if self._failed is not None:
            raise RuntimeError("dual updater is unusable after an earlier failure") from self._failed
        st = self.state
        _check_batch(st, batch)
        b = batch if isinstance(batch, BatchSplit) else BatchSplit.from_batch(batch)
        eps_next, eps = _draw_noise(st, len(b), rng)
        it = st.iteration
        for q in self._jobs.values():
            q.put((it, b, eps_next, eps))
        results = {}
        deadline = time.monotonic() + 2 * self.timeout
        while len(results) < 2:
            try:
                name, res = self._done.get(timeout=max(0.0, deadline - time.monotonic()))
            except queue.Empty:
                self._failed = ExchangeTimeout("update workers did not finish; " + self._counters())
                raise self._failed from None
            if isinstance(res, BaseException):
                self._failed = res
                raise res
            results[name] = res
        if self.actor_iter != self.critic_iter:
            self._failed = DesyncError("workers finished on different iterations; " + self._counters())
            raise self._failed
        st.iteration += 1
        return st, UpdateDiag(st.iteration, len(b), **results["critic"], **results["actor"])

    def close(self) -> None:
        for q in self._jobs.values():
            q.put(None)
        for t in self._threads:
            t.join(timeout=0.1)

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def sac_update_dual(state: LearnerState, batch: Batch | BatchSplit, rng: np.random.Generator,
                    timeout: float = 10.0) -> tuple[LearnerState, UpdateDiag]:
    """One dual-mode iteration with a throwaway worker pair (see ``DualUpdater``)."""
    with DualUpdater(state, timeout) as du:
        return du.update(batch, rng)


# experience sources ------------------------------------------------------------------


class RingSource:
    """Experience straight from the shared ring; a transfer is any new data since the last sample."""

    def __init__(self, ring: ReplayRing) -> None:
        self.ring = ring
        self._last_cursor = ring.cursor
        w = ring.writer_counters().sum(axis=0)
        self._pushes, self._push_ns = int(w[0]), int(w[3])

    @property
    def fill(self) -> int:
        return self.ring.fill

    def poll(self) -> tuple[int, float, int]:
        """(transfer events, summed publish latency in s, latency samples)."""
        cur = self.ring.cursor
        if cur == self._last_cursor:
            return 0, 0.0, 0
        self._last_cursor = cur
        w = self.ring.writer_counters().sum(axis=0)
        n, ns = int(w[0]) - self._pushes, int(w[3]) - self._push_ns
        self._pushes, self._push_ns = int(w[0]), int(w[3])
        return 1, ns * 1e-9, n

    def sample(self, n: int, rng: np.random.Generator) -> Batch:
        return self.ring.sample(n, rng)

    def loss_counts(self) -> tuple[int, int]:
        acc = self.ring.accounting()
        return acc.pushes, acc.evicted_unsampled


class QueueSource:
    """Queue baseline: the learner takes the queue contents once it is full."""

    def __init__(self, channel: QueueChannel, local: LocalReplay, clock: Callable[[], float] = time.time) -> None:
        self.channel = channel
        self.local = local
        self.clock = clock

    @property
    def fill(self) -> int:
        return self.local.fill

    def poll(self) -> tuple[int, float, int]:
        if not self.channel.full():
            return 0, 0.0, 0
        items = self.channel.drain()
        if not items:
            return 0, 0.0, 0
        now = self.clock()
        self.local.add_items(items)
        return 1, sum(now - it[0] for it in items), len(items)

    def sample(self, n: int, rng: np.random.Generator) -> Batch:
        return self.local.sample(n, rng)

    def loss_counts(self) -> tuple[int, int]:
        return self.local.cursor, self.local.evicted_unsampled


# loop ---------------------------------------------------------------------------------


@dataclass
class LoopStats:
    iterations: int = 0
    published: int = 0
    last_version: int = 0
    waits: int = 0


def update_loop(state: LearnerState, source, store: CheckpointStore | None, stop, *,
                rng: np.random.Generator, dual: bool = False, board: CounterBoard | None = None,
                learn_log=None, publish_every: int = 100, publish_seconds: float = 2.0,
                log_seconds: float = 1.0, warmup_floor: int = 0, max_iterations: int | None = None,
                dual_timeout: float = 10.0, clock: Callable[[], float] = time.monotonic,
                stats: LoopStats | None = None) -> LearnerState:
    """Sample, update, publish and report until ``stop`` is set.

    ``stop`` is anything with ``is_set()``. Batch-size requests are read from
    the board's control slot and applied between iterations.
    """
    stats = stats if stats is not None else LoopStats()
    du = DualUpdater(state, dual_timeout) if dual else None
    w = SlotWriter(board, UPDATER_SLOT) if board is not None else None
    ctl = SlotWriter(board, CONTROL_SLOT) if board is not None else None
    ids = {n: counter_id(n) for n in ("updates", "consumed", "update_seconds", "receive_seconds",
                                      "transfer_events", "transfer_latency_sum", "transfer_latency_n",
                                      "policy_version", "batch_size", "batch_request", "iteration",
                                      "heartbeat", "alive", "received", "lost")}
    local = getattr(source, "local", None)
    lost_seen = 0
    version = (store.latest_version() or 0) if store is not None else 0
    last_pub_t = clock()
    last_pub_it = state.iteration
    last_log_t, last_log_it, last_log_frames = clock(), state.iteration, 0
    frames = 0
    backoff = 0.001
    last_wait_log = 0.0
    diag = None

    def publish():
        nonlocal version, last_pub_t, last_pub_it
        if store is None:
            return
        version += 1
        store.publish_nets(version, state.nets())
        stats.published += 1
        stats.last_version = version
        last_pub_t, last_pub_it = clock(), state.iteration
        if w:
            w.set(ids["policy_version"], version)

    if w:
        w.set(ids["alive"], 1)
        w.set(ids["batch_size"], state.batch_size)
    try:
        while not stop.is_set():
            if max_iterations is not None and stats.iterations >= max_iterations:
                break
            if ctl:
                req = int(ctl.get(ids["batch_request"]))
                if req > 0 and req != state.batch_size:
                    log.info("batch size %d -> %d at iteration %d", state.batch_size, req, state.iteration)
                    state.set_batch_size(req)
            t0 = time.perf_counter()
            events, lat_sum, lat_n = source.poll()
            # receive time is getting new experience to the learner; the
            # minibatch gather that follows is the same work on either channel
            t_recv = time.perf_counter() - t0
            if w and local is not None and lat_n:
                # queue path: the learner's own replay is where experience gets lost
                w.record_event(ids["received"], lat_n)
                w.record_event(ids["lost"], local.evicted_unsampled - lost_seen)
                lost_seen = local.evicted_unsampled
            B = state.batch_size
            try:
                if source.fill < max(warmup_floor, B):
                    raise NotEnoughData(f"{source.fill} transitions available")
                batch = source.sample(B, rng)
            except NotEnoughData as exc:
                if w:
                    w.record_event(ids["receive_seconds"], t_recv)
                    w.record_event(ids["transfer_events"], events)
                    w.record_event(ids["transfer_latency_sum"], lat_sum)
                    w.record_event(ids["transfer_latency_n"], lat_n)
                    w.set(ids["heartbeat"], clock())
                stats.waits += 1
                now = clock()
                if now - last_wait_log > 5.0:
                    log.info("waiting for experience: %s", exc)
                    last_wait_log = now
                stop_wait = getattr(stop, "wait", None)
                if stop_wait is not None:
                    stop_wait(backoff)
                else:
                    time.sleep(backoff)
                backoff = min(0.1, backoff * 2)
                continue
            backoff = 0.001
            t1 = time.perf_counter()
            if du is not None:
                _, diag = du.update(batch, rng)
            else:
                _, diag = sac_update_single(state, batch, rng)
            t2 = time.perf_counter()
            stats.iterations += 1
            frames += B
            if w:
                w.record_event(ids["updates"], 1)
                w.record_event(ids["consumed"], B)
                w.record_event(ids["update_seconds"], t2 - t1)
                w.record_event(ids["receive_seconds"], t_recv)
                w.record_event(ids["transfer_events"], events)
                w.record_event(ids["transfer_latency_sum"], lat_sum)
                w.record_event(ids["transfer_latency_n"], lat_n)
                w.set(ids["iteration"], state.iteration)
                w.set(ids["batch_size"], B)
                w.set(ids["heartbeat"], clock())
            now = clock()
            if state.iteration - last_pub_it >= publish_every or now - last_pub_t >= publish_seconds:
                publish()
            if learn_log is not None and now - last_log_t >= log_seconds:
                dt = now - last_log_t
                n = state.iteration - last_log_it
                freq = n / dt
                mean_b = (frames - last_log_frames) / n if n else float(B)
                rec = diag.as_dict()
                rec.update(time=now, update_frequency=freq, update_frame_rate=freq * mean_b,
                           batch_size=mean_b, policy_version=version)
                append_jsonl(learn_log, rec)
                last_log_t, last_log_it, last_log_frames = now, state.iteration, frames
        if state.iteration != last_pub_it or stats.published == 0:
            publish()
    finally:
        if du is not None:
            du.close()
        if w:
            w.set(ids["alive"], 0)
    return state
