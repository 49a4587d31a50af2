"""Run lifecycle: shared resources, child processes, supervision, tuning, teardown.

The orchestrator is single-threaded control logic. Children talk to it only
through the replay ring (or queue), checkpoint files, the counter board and
their per-process stop events.

Run directory::

    manifest.json   resolved config, versions, final SP/B, exit status
    status.json     live pids of the orchestrator and its children
    eval.jsonl      one line per evaluation (time is seconds since launch)
    learn.jsonl     learner diagnostics and update rates
    stats.jsonl     ThroughputStats per telemetry window
    tune.jsonl      one line per tuner window (empty when autotune is off)
    ckpt_*.bin      versioned weights, ``latest`` pointer
    trace_*.csv     deterministic rollouts of published policies
"""
from __future__ import annotations

import gc
import json
import logging
import math
import multiprocessing as mp
import os
import platform
import signal
import time
import uuid
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import __version__, kernels
from .autotune import TuneConfig, TuneState, settled_report, tune_record, tune_step
from .config import ConfigError, RunConfig, from_dict
from .envs import make_env
from .replay import LocalReplay, QueueChannel, ReplayRing, RingError, region_layout
from .telemetry import (CONTROL_SLOT, EVAL_SLOT, FIRST_SAMPLER_SLOT, UPDATER_SLOT, CounterBoard, Telemetry,
                        append_jsonl, counter_id, sampler_slot)
from .updater import LearnerState, QueueSource, RingSource, UpdateError, sac_update_single, update_loop
from .weights import CheckpointStore
from .workers import (EvalRecord, SamplerCore, build_env, evaluate_policy, evaluator_main, make_eval_record,
                      sampler_main, tracer_main)

log = logging.getLogger(__name__)

EXIT_OK, EXIT_CONFIG, EXIT_FAILURE, EXIT_TARGET = 0, 2, 3, 4
LOG_FILES = ("eval.jsonl", "learn.jsonl", "stats.jsonl", "tune.jsonl")
SUMMARY_FIELDS = ("sampling_frame_rate", "update_frequency", "update_frame_rate", "batch_size",
                  "transfer_frequency", "transfer_cycle_s", "transmission_loss", "receive_time_share",
                  "cpu_utilization", "updater_duty")
EVAL_SEED = 10_000
TRACE_SEED = 20_000
SAMPLER_RSS_GUESS = 150e6


class ComponentFailure(RuntimeError):
    pass


def component_versions() -> dict:
    return {"deskrl": __version__, "kernels": kernels.BACKEND, "numpy": np.__version__,
            "python": platform.python_version()}


@dataclass
class RunManifest:
    config: dict
    start_time: float
    versions: dict = field(default_factory=component_versions)
    final_sp: int | None = None
    final_b: int | None = None
    exit_status: str = "running"
    exit_code: int | None = None
    reason: str = ""
    end_time: float | None = None
    files: dict = field(default_factory=dict)
    restarts: int = 0
    summary: dict = field(default_factory=dict)
    final_eval: float | None = None
    best_eval: float | None = None
    stopped_at: float | None = None  # seconds since launch when the stop condition fired

    def write(self, run_dir: str | os.PathLike) -> Path:
        path = Path(run_dir) / "manifest.json"
        tmp = path.with_suffix(".json.tmp")
        tmp.write_text(json.dumps(asdict(self), indent=2, sort_keys=True, allow_nan=True))
        os.replace(tmp, path)
        return path

    @classmethod
    def read(cls, run_dir: str | os.PathLike) -> "RunManifest":
        return cls(**json.loads((Path(run_dir) / "manifest.json").read_text()))


def _prepare_run_dir(cfg: RunConfig) -> Path:
    run_dir = Path(cfg.run_dir)
    if (run_dir / "manifest.json").exists():
        raise ConfigError(f"run directory {run_dir} already holds a run; pick a new --run-dir")
    run_dir.mkdir(parents=True, exist_ok=True)
    for name in LOG_FILES:
        (run_dir / name).write_text("")
    return run_dir


def _file_pointers(run_dir: Path) -> dict:
    files = {name.split(".")[0]: name for name in LOG_FILES}
    files["checkpoints"] = sorted(p.name for p in run_dir.glob("ckpt_*.bin"))
    files["traces"] = sorted(p.name for p in run_dir.glob("trace_*.csv"))
    return files


def summarize(history, since: float | None) -> dict:
    """Per-field means over telemetry windows that started after ``since``."""
    rows = [s for s in history if since is not None and s.window_start >= since and s.complete]
    out = {"windows": len(rows)}
    for f in SUMMARY_FIELDS:
        out[f] = float(np.mean([getattr(s, f) for s in rows])) if rows else None
    return out


def _eval_bounds(path: Path) -> tuple[float | None, float | None]:
    from .telemetry import read_jsonl

    rows, _ = read_jsonl(path)
    means = [r["mean"] for r in rows if not r.get("untrained") and r.get("mean") is not None]
    return (means[-1], max(means)) if means else (None, None)


# child processes -----------------------------------------------------------------------


def _child_entry(target, level: str, args, kwargs) -> None:
    # the orchestrator owns shutdown; a terminal ^C must not kill children first
    signal.signal(signal.SIGINT, signal.SIG_IGN)
    logging.basicConfig(level=getattr(logging, level, logging.INFO),
                        format="%(asctime)s %(processName)s %(levelname)s %(message)s")
    target(*args, **kwargs)


def updater_main(cfg_dict: dict, ring_name: str | None, channel: QueueChannel | None, board_name: str,
                 run_dir: str, stop) -> None:
    cfg = from_dict(cfg_dict)
    spec = make_env(cfg.env, **{k: v for k, v in cfg.env_params.items() if not k.startswith("fault_")}).spec
    state = LearnerState.create(spec.obs_dim, spec.act_dim, spec.act_bound, cfg.hidden, seed=cfg.seed,
                                gamma=cfg.gamma, tau=cfg.tau, alpha=cfg.alpha, lr=cfg.lr,
                                batch_size=cfg.batch_size)
    board = CounterBoard.attach(board_name)
    board.set(UPDATER_SLOT, counter_id("pid"), os.getpid())
    ring = None
    if ring_name:
        ring = ReplayRing.attach(ring_name)
        source = RingSource(ring)
    else:
        source = QueueSource(channel, LocalReplay(cfg.ring_capacity, spec.obs_dim, spec.act_dim))
    # bench mode measures throughput only: nothing is published, samplers stay random
    store = None if cfg.bench else CheckpointStore(run_dir)
    try:
        update_loop(state, source, store, stop, rng=np.random.default_rng(cfg.seed + 1),
                    dual=cfg.dual_updater, board=board, learn_log=str(Path(run_dir) / "learn.jsonl"),
                    publish_every=cfg.publish_every, publish_seconds=cfg.publish_seconds,
                    warmup_floor=cfg.warmup_steps)
    except UpdateError as exc:
        log.error("update failed at iteration %d: %s %s", state.iteration, exc, exc.diag)
        raise SystemExit(EXIT_FAILURE)
    finally:
        if ring is not None:
            ring.close()
        board.close()


@dataclass
class Child:
    role: str
    wid: int
    proc: mp.process.BaseProcess
    stop: object
    started: float
    retiring: bool = False

    @property
    def key(self) -> str:
        return f"{self.role}-{self.wid}" if self.role == "sampler" else self.role


class Orchestrator:
    """One run: ``launch()`` returns the finalized manifest."""

    def __init__(self, cfg: RunConfig, *, install_signals: bool = True, poll: float = 0.1) -> None:
        self.cfg = cfg
        self.install_signals = install_signals
        self.poll = poll
        self.ctx = mp.get_context("spawn")
        self.children: dict[str, Child] = {}
        self.retiring: list[Child] = []
        self.restarts = 0
        self.interrupted = False
        self.ring: ReplayRing | None = None
        self.channel: QueueChannel | None = None
        self.board: CounterBoard | None = None
        self.t_wall0 = time.time()
        self.t0 = time.monotonic()
        self.sp = cfg.sp
        self.batch = cfg.batch_size
        self.tuner: TuneState | None = None
        self.telemetry: Telemetry | None = None
        self.t_active: float | None = None

    # resources --------------------------------------------------------------

    def _memory_budget(self) -> float:
        if self.cfg.memory_budget > 0:
            return self.cfg.memory_budget
        import psutil

        return 0.8 * psutil.virtual_memory().total

    def _create_shared(self) -> None:
        cfg = self.cfg
        tag = f"dk{os.getpid()}_{uuid.uuid4().hex[:8]}"
        n_slots = FIRST_SAMPLER_SLOT + cfg.sp_cap
        self.board = CounterBoard.create(f"{tag}_board", n_slots)
        self.board.set(CONTROL_SLOT, counter_id("batch_request"), cfg.batch_size)
        self.board.set(CONTROL_SLOT, counter_id("pid"), os.getpid())
        try:
            spec = make_env(cfg.env, **{k: v for k, v in cfg.env_params.items() if not k.startswith("fault_")}).spec
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"env_params for {cfg.env}: {exc}") from exc
        if cfg.channel == "shm":
            try:
                self.ring = ReplayRing.create(f"{tag}_ring", spec, cfg.ring_capacity,
                                              memory_budget=int(self._memory_budget()))
            except RingError as exc:
                raise ConfigError(str(exc)) from exc
        else:
            self.channel = QueueChannel(cfg.queue_size, cfg.queue_policy, ctx=self.ctx)
        self.spec = spec

    def _release_shared(self) -> None:
        if self.channel is not None:
            self.channel.close()
            self.channel = None
        if self.ring is not None:
            self.ring.unlink()
            self.ring = None
        if self.board is not None:
            self.board.unlink()
            self.board = None

    # processes --------------------------------------------------------------

    def _spawn(self, role: str, wid: int = 0) -> Child:
        cfg = self.cfg
        run_dir = str(self.run_dir)
        stop = self.ctx.Event()
        ring_name = self.ring.name if self.ring is not None else None
        if role == "updater":
            target, args, kw = updater_main, (cfg.to_dict(), ring_name, self.channel, self.board.name,
                                              run_dir, stop), {}
        elif role == "sampler":
            target = sampler_main
            args = (wid, cfg.env, cfg.env_params, ring_name, run_dir, stop)
            kw = dict(channel=self.channel, board_name=self.board.name, seed=cfg.seed * 1000 + 100 + wid,
                      warmup_steps=cfg.warmup_steps, warmup_share=self.sp, poll_seconds=cfg.poll_seconds)
        elif role == "evaluator":
            target = evaluator_main
            args = (cfg.env, cfg.env_params, run_dir, stop, str(self.run_dir / "eval.jsonl"))
            kw = dict(cadence=cfg.eval_cadence, episodes=cfg.eval_episodes, seed=EVAL_SEED,
                      t0=self.t_wall0, board_name=self.board.name)
        elif role == "tracer":
            target = tracer_main
            args = (cfg.env, cfg.env_params, run_dir, stop, run_dir)
            kw = dict(cadence=cfg.trace_cadence, seed=TRACE_SEED, board_name=self.board.name)
        else:  # pragma: no cover
            raise ValueError(role)
        proc = self.ctx.Process(target=_child_entry, args=(target, cfg.log_level, args, kw),
                                name=f"deskrl-{role}-{wid}" if role == "sampler" else f"deskrl-{role}",
                                daemon=False)
        proc.start()
        child = Child(role, wid, proc, stop, time.monotonic())
        self.children[child.key] = child
        log.info("started %s (pid %d)", child.key, proc.pid)
        return child

    def _slot(self, child: Child) -> int:
        return {"updater": UPDATER_SLOT, "evaluator": EVAL_SLOT, "tracer": 2}.get(
            child.role, sampler_slot(child.wid))

    def _wait_started(self, children: list[Child]) -> None:
        deadline = time.monotonic() + self.cfg.startup_timeout
        alive = counter_id("alive")
        pending = list(children)
        while pending:
            for c in list(pending):
                if not c.proc.is_alive():
                    raise ComponentFailure(f"{c.key} exited during startup (code {c.proc.exitcode})")
                if self.board.get(self._slot(c), alive) > 0:
                    pending.remove(c)
            if self.interrupted:
                raise KeyboardInterrupt
            if pending and time.monotonic() > deadline:
                raise ComponentFailure(f"{', '.join(c.key for c in pending)} did not start within "
                                       f"{self.cfg.startup_timeout:g} s")
            time.sleep(0.05)

    def _stop_child(self, child: Child, timeout: float) -> None:
        child.stop.set()
        child.proc.join(timeout)
        if child.proc.is_alive():
            log.warning("%s did not stop in %.0f s; terminating", child.key, timeout)
            child.proc.terminate()
            child.proc.join(5.0)
        if child.proc.is_alive():
            child.proc.kill()
            child.proc.join(5.0)

    def _teardown(self) -> None:
        order = ("tracer", "evaluator", "sampler", "updater")
        everyone = list(self.children.values()) + self.retiring
        for c in everyone:
            if c.role != "updater":
                c.stop.set()
        for role in order:
            for c in [c for c in everyone if c.role == role]:
                if role == "updater":
                    c.stop.set()
                self._stop_child(c, 60.0 if role == "updater" else 15.0)
        self.children.clear()
        self.retiring.clear()

    def _set_sp(self, sp: int) -> None:
        while self.sp < sp:
            self._spawn("sampler", self.sp)
            self.sp += 1
        while self.sp > sp:
            self.sp -= 1
            c = self.children.pop(f"sampler-{self.sp}")
            c.retiring = True
            c.stop.set()
            self.retiring.append(c)

    def _supervise(self) -> None:
        for c in list(self.retiring):
            if not c.proc.is_alive():
                c.proc.join()
                self.retiring.remove(c)
        for key, c in list(self.children.items()):
            if c.proc.is_alive():
                continue
            code = c.proc.exitcode
            c.proc.join()
            if c.role == "updater":
                raise ComponentFailure(f"updater exited with code {code}")
            if self.restarts >= self.cfg.restart_budget:
                raise ComponentFailure(f"{key} exited with code {code}; restart budget "
                                       f"({self.cfg.restart_budget}) exhausted")
            self.restarts += 1
            log.warning("%s exited with code %s; restarting (%d/%d)", key, code, self.restarts,
                        self.cfg.restart_budget)
            del self.children[key]
            self._spawn(c.role, c.wid)

    def pids(self) -> list[int]:
        return [os.getpid()] + [c.proc.pid for c in list(self.children.values()) + self.retiring
                                if c.proc.pid is not None]

    def _write_status(self) -> None:
        rec = {"pid": os.getpid(), "time": time.time(), "sp": self.sp, "batch_size": self.batch,
               "children": {k: c.proc.pid for k, c in self.children.items()}, "restarts": self.restarts}
        tmp = self.run_dir / "status.json.tmp"
        tmp.write_text(json.dumps(rec))
        os.replace(tmp, self.run_dir / "status.json")

    # tuning -----------------------------------------------------------------

    def _loss_counts(self) -> tuple[int, int]:
        if self.ring is not None:
            acc = self.ring.accounting()
            return acc.pushes, acc.evicted_unsampled
        t = self.board.read()
        return int(t[UPDATER_SLOT, counter_id("received")]), int(t[UPDATER_SLOT, counter_id("lost")])

    def _measure_memory(self) -> None:
        import psutil

        cfg = self.tuner.cfg
        base, per = 0.0, []
        for c in self.children.values():
            try:
                rss = psutil.Process(c.proc.pid).memory_info().rss
            except (psutil.NoSuchProcess, psutil.AccessDenied):
                continue
            if c.role == "sampler":
                per.append(rss)
            else:
                base += rss
        base += psutil.Process().memory_info().rss
        if self.ring is not None:
            base += region_layout(self.spec.obs_dim, self.spec.act_dim, self.cfg.ring_capacity)["total"]
        cfg.base_bytes = base
        if per:
            cfg.bytes_per_sampler = float(np.mean(per))

    def _apply_directive(self, d) -> None:
        if d.kind == "sp":
            log.info("tuner: SP %d -> %d", self.sp, d.value)
            self._set_sp(d.value)
        else:
            log.info("tuner: B %d -> %d", self.batch, d.value)
            self.batch = d.value
            self.board.set(CONTROL_SLOT, counter_id("batch_request"), d.value)

    # main loop --------------------------------------------------------------

    def launch(self) -> RunManifest:
        cfg = self.cfg
        self.run_dir = _prepare_run_dir(cfg)
        manifest = RunManifest(config=cfg.to_dict(), start_time=self.t_wall0)
        manifest.files = _file_pointers(self.run_dir)
        manifest.write(self.run_dir)
        old_handlers = {}
        if self.install_signals:
            for sig in (signal.SIGINT, signal.SIGTERM):
                old_handlers[sig] = signal.signal(sig, self._on_signal)
        code, status, reason = EXIT_OK, "success", ""
        try:
            self._create_shared()
            self._run(manifest)
            manifest.stopped_at = time.time() - self.t_wall0
            code, status, reason = manifest.exit_code, manifest.exit_status, manifest.reason
        except ComponentFailure as exc:
            log.error("component failure: %s", str(exc))
            code, status, reason = EXIT_FAILURE, "failed", str(exc)
        except KeyboardInterrupt:
            code, status, reason = EXIT_OK, "interrupted", "signal"
        except ConfigError as exc:
            log.error("config error: %s", str(exc))
            code, status, reason = EXIT_CONFIG, "config-error", str(exc)
        finally:
            self._teardown()
            self._release_shared()
            for sig, h in old_handlers.items():
                signal.signal(sig, h)
            # named semaphores behind the stop events and queue are unlinked
            # when their objects are finalized; do it now, not at interpreter exit
            gc.collect()
        manifest.exit_code, manifest.exit_status, manifest.reason = code, status, reason
        manifest.end_time = time.time()
        manifest.restarts = self.restarts
        if self.tuner is not None:
            manifest.final_sp, manifest.final_b = self.tuner.sp, self.tuner.b
        else:
            manifest.final_sp, manifest.final_b = self.sp, self.batch
        if self.telemetry is not None:
            manifest.summary = summarize(self.telemetry.history, self.t_active)
        manifest.final_eval, manifest.best_eval = _eval_bounds(self.run_dir / "eval.jsonl")
        manifest.files = _file_pointers(self.run_dir)
        manifest.write(self.run_dir)
        log.info("run finished: %s (exit %d) %s", status, code, reason)
        return manifest

    def _on_signal(self, signum, frame) -> None:
        log.warning("received signal %d; shutting down", signum)
        self.interrupted = True

    def _run(self, manifest: RunManifest) -> None:
        cfg = self.cfg
        first = [self._spawn("updater")]
        first += [self._spawn("sampler", i) for i in range(self.sp)]
        if not cfg.bench:
            first.append(self._spawn("evaluator"))
            if cfg.trace_cadence > 0:
                first.append(self._spawn("tracer"))
        self._wait_started(first)
        self._write_status()
        log.info("all %d components up after %.1f s", len(first), time.monotonic() - self.t0)

        # stats windows are stamped in seconds since launch, like eval.jsonl
        clock = lambda: time.monotonic() - self.t0  # noqa: E731
        self.telemetry = Telemetry(self.board, self.run_dir / "stats.jsonl", clock=clock,
                                   loss_source=self._loss_counts, pids=self.pids)
        tune_tel = None
        if cfg.autotune:
            tcfg = TuneConfig(sp_cap=cfg.sp_cap, cpu_guard=cfg.cpu_guard, freq_floor=cfg.freq_floor,
                              min_gain=cfg.min_gain, ladder=tuple(cfg.ladder),
                              memory_budget=self._memory_budget(), bytes_per_sampler=SAMPLER_RSS_GUESS)
            self.tuner = TuneState(self.sp, self.batch, tcfg)
            tune_tel = Telemetry(self.board, clock=clock, loss_source=self._loss_counts, pids=self.pids)
        else:
            append_jsonl(self.run_dir / "tune.jsonl", {"time": time.time() - self.t_wall0, "phase": "disabled",
                                                       "sp": self.sp, "b": self.batch, "directive": None})
        window_open = window_close = None
        next_stats = time.monotonic() + cfg.stats_cadence
        next_status = time.monotonic() + 1.0
        evals_seen = 0
        ids = {n: counter_id(n) for n in ("updates", "eval_count", "eval_mean")}

        while True:
            now = time.monotonic()
            if self.interrupted:
                manifest.exit_code, manifest.exit_status, manifest.reason = EXIT_OK, "interrupted", "signal"
                return
            self._supervise()
            if self.t_active is None and self.board.get(UPDATER_SLOT, ids["updates"]) > 0:
                self.t_active = now - self.t0
                log.info("learner active after %.1f s", now - self.t0)
                if tune_tel is not None:
                    window_open = now + cfg.tune_discard
            n_eval = int(self.board.get(EVAL_SLOT, ids["eval_count"]))
            if n_eval > evals_seen:
                evals_seen = n_eval
                mean = self.board.get(EVAL_SLOT, ids["eval_mean"])
                log.info("eval %d: mean return %.1f", n_eval, mean)
                if cfg.target_return is not None and mean >= cfg.target_return:
                    manifest.exit_code, manifest.exit_status = EXIT_OK, "success"
                    manifest.reason = f"target {cfg.target_return:g} reached ({mean:.1f})"
                    return
            if cfg.time_budget > 0 and now - self.t0 >= cfg.time_budget:
                if cfg.target_return is not None:
                    manifest.exit_code, manifest.exit_status = EXIT_TARGET, "target-not-reached"
                    manifest.reason = f"target {cfg.target_return:g} not reached in {cfg.time_budget:g} s"
                else:
                    manifest.exit_code, manifest.exit_status, manifest.reason = EXIT_OK, "success", "time budget"
                return
            if now >= next_stats:
                self.telemetry.snapshot()
                next_stats = now + cfg.stats_cadence
            if window_open is not None and window_close is None and now >= window_open:
                tune_tel.reset_window()
                window_close = now + (cfg.tune_window - cfg.tune_discard)
            if window_close is not None and now >= window_close:
                m = tune_tel.snapshot()
                window_close = None
                window_open = now + cfg.tune_discard
                if m is not None:
                    self._measure_memory()
                    _, d = tune_step(self.tuner, m)
                    append_jsonl(self.run_dir / "tune.jsonl", tune_record(self.tuner, d, time.time() - self.t_wall0))
                    if d is not None:
                        self._apply_directive(d)
                    if self.tuner.phase == "settled" and d is None:
                        sp, b, _ = settled_report(self.tuner)
                        log.info("tuner settled at SP=%d B=%d", sp, b)
                        window_open = None
            if now >= next_status:
                self._write_status()
                next_status = now + 1.0
            time.sleep(self.poll)


def launch(cfg: RunConfig, **kw) -> RunManifest:
    if cfg.lockstep:
        return run_lockstep(cfg)
    return Orchestrator(cfg, **kw).launch()


# deterministic single-process mode --------------------------------------------------------

VIRTUAL_STEPS_PER_SECOND = 1000.0


def run_lockstep(cfg: RunConfig) -> RunManifest:
    """Samplers and learner interleaved in one process on a virtual clock.

    Every sampler takes ``lockstep_steps_per_update`` steps, then the learner
    does one update once warm; virtual time is total env steps divided by
    ``VIRTUAL_STEPS_PER_SECOND``. With fixed seeds the logs are bit-identical
    from run to run.
    """
    run_dir = _prepare_run_dir(cfg)
    manifest = RunManifest(config=cfg.to_dict(), start_time=time.time())
    manifest.files = _file_pointers(run_dir)
    manifest.write(run_dir)
    eval_env = make_env(cfg.env, **{k: v for k, v in cfg.env_params.items() if not k.startswith("fault_")})
    spec = eval_env.spec
    replay = LocalReplay(cfg.ring_capacity, spec.obs_dim, spec.act_dim)
    state = LearnerState.create(spec.obs_dim, spec.act_dim, spec.act_bound, cfg.hidden, seed=cfg.seed,
                                gamma=cfg.gamma, tau=cfg.tau, alpha=cfg.alpha, lr=cfg.lr,
                                batch_size=cfg.batch_size)
    rng = np.random.default_rng(cfg.seed + 1)
    warm = lambda: replay.cursor < cfg.warmup_steps  # noqa: E731
    cores = [SamplerCore(build_env(cfg.env, cfg.env_params), replay.add,
                         np.random.default_rng(cfg.seed * 1000 + 100 + i), warm, seed=cfg.seed * 1000 + 100 + i)
             for i in range(cfg.sp)]
    store = CheckpointStore(run_dir)
    version = 0
    next_eval = 0.0
    last_log_it = 0
    code, status, reason = EXIT_OK, "success", "time budget"
    budget = cfg.time_budget if cfg.time_budget > 0 else math.inf
    interrupted = []
    old = signal.signal(signal.SIGINT, lambda *a: interrupted.append(1))
    try:
        while True:
            vt = replay.cursor / VIRTUAL_STEPS_PER_SECOND
            if vt >= next_eval and cfg.eval_cadence > 0:
                if version == 0:
                    rec = EvalRecord(vt, 0, None, None, None, cfg.eval_episodes, untrained=True)
                else:
                    rec = make_eval_record(vt, version, evaluate_policy(eval_env, state.head,
                                                                        cfg.eval_episodes, EVAL_SEED))
                append_jsonl(run_dir / "eval.jsonl", rec.as_dict())
                next_eval += cfg.eval_cadence
                if not rec.untrained and cfg.target_return is not None and rec.mean >= cfg.target_return:
                    reason = f"target {cfg.target_return:g} reached ({rec.mean:.1f})"
                    break
            if vt >= budget:
                if cfg.target_return is not None:
                    code, status = EXIT_TARGET, "target-not-reached"
                    reason = f"target {cfg.target_return:g} not reached in {budget:g} virtual s"
                break
            if interrupted:
                status, reason = "interrupted", "signal"
                break
            for core in cores:
                for _ in range(cfg.lockstep_steps_per_update):
                    core.step()
            if replay.fill >= max(cfg.warmup_steps, state.batch_size):
                _, diag = sac_update_single(state, replay.sample(state.batch_size, rng), rng)
                if state.iteration % cfg.publish_every == 0:
                    version += 1
                    store.publish_nets(version, state.nets())
                    for core in cores:
                        core.load_actor(state.actor.copy(), version)
                if state.iteration - last_log_it >= cfg.publish_every:
                    rec = diag.as_dict()
                    rec.update(time=vt, policy_version=version)
                    append_jsonl(run_dir / "learn.jsonl", rec)
                    last_log_it = state.iteration
        if state.iteration % cfg.publish_every:
            version += 1
            store.publish_nets(version, state.nets())
    except UpdateError as exc:
        code, status, reason = EXIT_FAILURE, "failed", str(exc)
    finally:
        signal.signal(signal.SIGINT, old)
    manifest.exit_code, manifest.exit_status, manifest.reason = code, status, reason
    manifest.end_time = time.time()
    manifest.final_sp, manifest.final_b = cfg.sp, state.batch_size
    manifest.final_eval, manifest.best_eval = _eval_bounds(run_dir / "eval.jsonl")
    manifest.summary = {"iterations": state.iteration, "env_steps": replay.cursor}
    manifest.files = _file_pointers(run_dir)
    manifest.write(run_dir)
    return manifest
