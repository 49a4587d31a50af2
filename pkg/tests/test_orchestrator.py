import json
import os
import signal
import subprocess
import sys
import time
from pathlib import Path

import numpy as np
import psutil
import pytest

from deskrl.cli import main as cli_main
from deskrl.config import resolve
from deskrl.harness import ablate
from deskrl.orchestrator import EXIT_CONFIG, EXIT_FAILURE, EXIT_OK, EXIT_TARGET, Orchestrator, RunManifest, launch
from deskrl.plotting import mean_curve, plot
from deskrl.telemetry import read_jsonl
from deskrl.weights import CheckpointStore

SMALL = {"hidden": [32, 32], "batch_size": 64, "warmup_steps": 256, "publish_seconds": 0.5,
         "stats_cadence": 2.0, "eval_cadence": 2.0, "trace_cadence": 4.0, "sp": 2, "log_level": "WARNING"}


def run_children():
    # the interpreter-wide multiprocessing resource tracker outlives runs by design
    return [c for c in psutil.Process().children()
            if "resource_tracker" not in " ".join(c.cmdline())]


def shm_entries():
    return set(os.listdir("/dev/shm"))


def assert_no_orphans(run_dir, before):
    status = json.loads((Path(run_dir) / "status.json").read_text())
    for pid in status["children"].values():
        assert not psutil.pid_exists(pid) or psutil.Process(pid).status() == psutil.STATUS_ZOMBIE
    assert shm_entries() - before == set()


def spreeze(args, **kw):
    return subprocess.Popen([sys.executable, "-m", "deskrl.cli", *args], stdout=subprocess.PIPE,
                            stderr=subprocess.STDOUT, text=True, **kw)


def wait_for(pred, timeout, step=0.2):
    end = time.monotonic() + timeout
    while time.monotonic() < end:
        if pred():
            return True
        time.sleep(step)
    return False


def test_smoke_run_line_reacher(tmp_path):
    before = shm_entries()
    run = tmp_path / "run"
    cfg = resolve(environ={}, env="line-reacher", time_budget=30.0, run_dir=str(run), **SMALL)
    m = launch(cfg, install_signals=False)
    assert m.exit_code == EXIT_OK and m.exit_status == "success"
    for name in ("eval.jsonl", "learn.jsonl", "stats.jsonl", "tune.jsonl"):
        assert (run / name).stat().st_size > 0, name
    assert list(run.glob("ckpt_*.bin")) and list(run.glob("trace_*.csv"))
    again = RunManifest.read(run)
    assert again.exit_status == "success" and again.config["env"] == "line-reacher"
    assert again.summary["windows"] >= 5
    assert again.files["checkpoints"]
    assert_no_orphans(run, before)
    assert run_children() == []
    # learning happened: the last evaluation beats the random-policy return
    evals, bad = read_jsonl(run / "eval.jsonl")
    assert bad == 0
    assert m.final_eval is not None and m.final_eval > -50


def test_sigint_graceful(tmp_path):
    before = shm_entries()
    run = tmp_path / "run"
    p = spreeze(["run", "--env", "line-reacher", "--time-budget", "120", "--run-dir", str(run),
                 "--hidden", "[32,32]", "--batch-size", "64", "--warmup-steps", "256", "--log-level", "WARNING"])
    try:
        assert wait_for(lambda: (CheckpointStore(run).latest_version() or 0) >= 3 if run.exists() else False, 90)
        seen = CheckpointStore(run).latest_version()
        p.send_signal(signal.SIGINT)
        out, _ = p.communicate(timeout=60)
    finally:
        if p.poll() is None:
            p.kill()
    assert p.returncode == EXIT_OK, out
    m = RunManifest.read(run)
    assert m.exit_status == "interrupted"
    store = CheckpointStore(run)
    # the learner publishes once more on the way out
    assert store.latest_version() > seen
    bundle = store.load(store.latest_version())
    assert set(bundle.blobs) >= {"actor", "q1", "q2", "q1_targ", "q2_targ"}
    bundle.net("actor")
    assert_no_orphans(run, before)


def test_killed_sampler_is_replaced(tmp_path):
    before = shm_entries()
    run = tmp_path / "run"
    p = spreeze(["run", "--env", "line-reacher", "--time-budget", "40", "--run-dir", str(run), "--sp", "2",
                 "--hidden", "[32,32]", "--batch-size", "64", "--warmup-steps", "256",
                 "--stats-cadence", "2", "--bench", "--log-level", "WARNING"])
    try:
        assert wait_for(lambda: (run / "status.json").exists(), 60)
        time.sleep(10)
        victim = json.loads((run / "status.json").read_text())["children"]["sampler-0"]
        t_kill = time.time()
        os.kill(victim, signal.SIGKILL)
        out, _ = p.communicate(timeout=120)
    finally:
        if p.poll() is None:
            p.kill()
    assert p.returncode == EXIT_OK, out
    m = RunManifest.read(run)
    assert m.restarts == 1
    kill_at = t_kill - m.start_time
    stats, _ = read_jsonl(run / "stats.jsonl")
    freq = [s["update_frequency"] for s in stats if s["window_start"] > 5]
    around = [s["update_frequency"] for s in stats if s["window_start"] <= kill_at + 2 <= s["window_end"] + 2]
    assert around and min(around) >= 0.5 * np.median(freq)
    assert_no_orphans(run, before)


def test_dead_updater_aborts(tmp_path):
    before = shm_entries()
    run = tmp_path / "run"
    p = spreeze(["run", "--env", "line-reacher", "--time-budget", "60", "--run-dir", str(run),
                 "--hidden", "[32,32]", "--bench", "--log-level", "WARNING"])
    try:
        assert wait_for(lambda: (run / "status.json").exists(), 60)
        os.kill(json.loads((run / "status.json").read_text())["children"]["updater"], signal.SIGKILL)
        out, _ = p.communicate(timeout=60)
    finally:
        if p.poll() is None:
            p.kill()
    assert p.returncode == EXIT_FAILURE, out
    assert RunManifest.read(run).exit_status == "failed"
    assert_no_orphans(run, before)


def test_faulty_samplers_exhaust_restart_budget(tmp_path):
    before = shm_entries()
    run = tmp_path / "run"
    cfg = resolve(environ={}, env="line-reacher", env_params={"fault_every": 1, "fault_after": 20000},
                  time_budget=60.0,
                  restart_budget=2, run_dir=str(run), bench=True, **{**SMALL, "sp": 1})
    m = launch(cfg, install_signals=False)
    assert m.exit_code == EXIT_FAILURE and "restart budget" in m.reason
    assert m.restarts == 2
    assert_no_orphans(run, before)


def test_startup_failure_rolls_back(tmp_path):
    before = shm_entries()
    run = tmp_path / "run"
    cfg = resolve(environ={}, env="line-reacher", time_budget=30.0, startup_timeout=0.001,
                  run_dir=str(run), **SMALL)
    m = launch(cfg, install_signals=False)
    assert m.exit_code == EXIT_FAILURE and "did not start" in m.reason
    assert run_children() == []
    assert shm_entries() - before == set()


def test_config_errors_exit_2(tmp_path, capsys):
    assert cli_main(["run", "--env", "nope", "--run-dir", str(tmp_path / "a")]) == EXIT_CONFIG
    assert cli_main(["run", "--sp", "x"]) == EXIT_CONFIG
    assert cli_main(["ablate", "no-such-scenario"]) == EXIT_CONFIG
    assert cli_main(["run", "--env", "line-reacher", "--env-params", '{"bogus": 1}',
                     "--run-dir", str(tmp_path / "b")]) == EXIT_CONFIG
    (tmp_path / "c").mkdir()
    (tmp_path / "c" / "manifest.json").write_text("{}")
    assert cli_main(["run", "--run-dir", str(tmp_path / "c")]) == EXIT_CONFIG


def test_target_stop_and_budget_exit(tmp_path):
    run = tmp_path / "hit"
    cfg = resolve(environ={}, env="line-reacher", time_budget=90.0, target_return=-20.0, run_dir=str(run),
                  **SMALL)
    m = launch(cfg, install_signals=False)
    assert m.exit_code == EXIT_OK and "target" in m.reason
    evals, _ = read_jsonl(run / "eval.jsonl")
    crossing = next(r for r in evals if not r["untrained"] and r["mean"] >= -20.0)
    assert m.stopped_at - crossing["time"] <= cfg.eval_cadence
    run = tmp_path / "miss"
    cfg = resolve(environ={}, env="line-reacher", time_budget=8.0, target_return=1e6, run_dir=str(run), **SMALL)
    assert launch(cfg, install_signals=False).exit_code == EXIT_TARGET


def test_queue_channel_run(tmp_path):
    before = shm_entries()
    run = tmp_path / "run"
    cfg = resolve(environ={}, env="line-reacher", time_budget=20.0, channel="queue", queue_size=500,
                  run_dir=str(run), bench=True, **SMALL)
    m = launch(cfg, install_signals=False)
    assert m.exit_code == EXIT_OK
    assert m.summary["transfer_frequency"] > 0 and m.summary["update_frequency"] > 0
    assert 0.0 <= m.summary["transmission_loss"] <= 1.0
    assert shm_entries() - before == set()


def test_autotune_writes_tune_log(tmp_path):
    run = tmp_path / "run"
    cfg = resolve(environ={}, env="line-reacher", time_budget=40.0, autotune=True, tune_window=4.0,
                  tune_discard=1.0, run_dir=str(run), bench=True, **{**SMALL, "batch_size": 128})
    m = launch(cfg, install_signals=False)
    rows, bad = read_jsonl(run / "tune.jsonl")
    assert bad == 0 and len(rows) >= 3
    assert all(r["phase"] in ("tuning-SP", "tuning-B", "settled") for r in rows)
    # at most one directive per window, and SP moves by one step at a time
    sps = [r["sp"] for r in rows]
    assert all(abs(a - b) <= 1 for a, b in zip(sps, sps[1:]))
    assert m.final_sp == rows[-1]["sp"] and m.final_b == rows[-1]["b"]


def test_lockstep_bit_identical(tmp_path):
    kw = dict(env="line-reacher", lockstep=True, time_budget=4.0, eval_cadence=0.5, seed=3,
              hidden=[16, 16], batch_size=32, warmup_steps=200, publish_every=20)
    a = launch(resolve(environ={}, run_dir=str(tmp_path / "a"), **kw))
    b = launch(resolve(environ={}, run_dir=str(tmp_path / "b"), **kw))
    assert a.exit_code == b.exit_code == EXIT_OK
    ea = (tmp_path / "a" / "eval.jsonl").read_bytes()
    assert ea == (tmp_path / "b" / "eval.jsonl").read_bytes()
    assert ea.count(b"\n") == 9
    c = launch(resolve(environ={}, run_dir=str(tmp_path / "c"), **{**kw, "seed": 4}))
    assert c.exit_code == EXIT_OK
    assert (tmp_path / "c" / "eval.jsonl").read_bytes() != ea


# plotting ----------------------------------------------------------------------------


def _fake_seed(d: Path, rng, n, with_sentinel=True, junk=0):
    d.mkdir(parents=True)
    t = np.sort(rng.uniform(0, 100, n))
    t[0] = rng.uniform(0, 5)
    with open(d / "eval.jsonl", "w") as fh:
        if with_sentinel:
            fh.write(json.dumps({"time": 0.0, "untrained": True, "mean": None}) + "\n")
        for ti in t:
            fh.write(json.dumps({"time": ti, "mean": float(rng.normal(-300 + 2 * ti, 5)),
                                 "untrained": False}) + "\n")
        for _ in range(junk):
            fh.write("{not json\n")
    with open(d / "stats.jsonl", "w") as fh:
        for ti in t:
            fh.write(json.dumps({"window_start": ti - 1, "window_end": ti,
                                 "sampling_frame_rate": 1000 + ti, "update_frequency": 50.0,
                                 "update_frame_rate": 50.0 * 256}) + "\n")


def _read_csv(path):
    lines = Path(path).read_text().splitlines()
    header = lines[0]
    cols = lines[1].split(",")
    data = np.array([[float(x) for x in ln.split(",")] for ln in lines[2:]]) if len(lines) > 2 else None
    return header, cols, data


def test_plot_mean_of_five_seeds(tmp_path):
    rng = np.random.default_rng(0)
    for k in range(5):
        _fake_seed(tmp_path / f"seed{k}", rng, 30 + k, junk=1 if k == 2 else 0)
    rep = plot(tmp_path, tmp_path / "out")
    assert rep.series == 5 and rep.malformed == 1
    header, cols, data = _read_csv(tmp_path / "out" / "return_mean.csv")
    assert "series=5" in header
    assert cols[0] == "time" and cols[-1] == "mean" and len(cols) == 7
    # oracle: recompute from the raw logs
    grid = data[:, 0]
    per = []
    for k in range(5):
        rows, _ = read_jsonl(tmp_path / f"seed{k}" / "eval.jsonl")
        pts = sorted((r["time"], r["mean"]) for r in rows if not r.get("untrained") and isinstance(r.get("mean"), float))
        t, v = np.array(pts).T
        assert grid[0] >= t[0] and grid[-1] <= t[-1]
        per.append(np.interp(grid, t, v))
    np.testing.assert_allclose(data[:, 1:6], np.stack(per).T, rtol=0, atol=1e-9)
    np.testing.assert_allclose(data[:, -1], np.mean(per, axis=0), rtol=0, atol=1e-9)
    assert (tmp_path / "out" / "sampling_frame_rate_mean.csv").exists()


def test_plot_empty_log(tmp_path, caplog):
    (tmp_path / "run").mkdir()
    (tmp_path / "run" / "eval.jsonl").write_text("")
    rep = plot(tmp_path / "run")
    header, cols, data = _read_csv(tmp_path / "run" / "plots" / "return_mean.csv")
    assert data is None and cols == ["time", "mean"]
    assert rep.warnings and any("no data" in w for w in rep.warnings)


def test_mean_curve_uses_common_range():
    a = (np.array([0.0, 10.0]), np.array([0.0, 10.0]))
    b = (np.array([2.0, 8.0]), np.array([1.0, 1.0]))
    grid, vals, mean = mean_curve([a, b], points=4)
    assert grid[0] == 2.0 and grid[-1] == 8.0
    np.testing.assert_allclose(mean, (grid + 1.0) / 2)


def test_ablate_report_with_stub_runner(tmp_path):
    calls = []

    def runner(cfg):
        calls.append(cfg)
        freq = {128: 100.0, 8192: 5.0, 32768: 1.5}[cfg.batch_size]
        m = RunManifest(config=cfg.to_dict(), start_time=0.0, exit_code=0)
        m.summary = {"update_frequency": freq, "update_frame_rate": freq * cfg.batch_size, "windows": 3}
        return m

    base = resolve(environ={}, run_dir=str(tmp_path), bench=True, time_budget=5.0)
    rep = ablate("bs-sweep", base, runner=runner)
    assert [c.batch_size for c in calls] == [128, 8192, 32768]
    assert len({c.seed for c in calls}) == 1
    assert all(ok for ok, _ in rep.checks.values())
    assert (tmp_path / "comparison.csv").exists()
    data = json.loads((tmp_path / "comparison.json").read_text())
    assert data["scenario"] == "bs-sweep" and len(data["rows"]) == 3
    assert "PASS" in rep.table()
