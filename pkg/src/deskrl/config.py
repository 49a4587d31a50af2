"""Run configuration: defaults < TOML file < environment variables < CLI flags.

Every field of ``RunConfig`` can be set in each layer under the same name:

* file: ``batch_size = 512`` (TOML, top level; ``[env_params]`` is a table)
* environment: ``DESKRL_BATCH_SIZE=512`` (``SPREEZE_BATCH_SIZE`` also accepted)
* flag: ``--batch-size 512``

Environment values and flags are parsed by the field's type; dicts and
lists accept JSON (``--env-params '{"step_us": 500}'``).
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import math
import os
import sys
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any, Mapping

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover
    import tomli as tomllib

ENV_PREFIXES = ("DESKRL_", "SPREEZE_")


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    # environment
    env: str = "pendulum"
    env_params: dict = field(default_factory=dict)
    # algorithm
    gamma: float = 0.99
    tau: float = 0.005
    alpha: float = 0.2
    lr: float = 3e-4
    hidden: list = field(default_factory=lambda: [256, 256])
    # parallelism
    sp: int = 4
    sp_cap: int = 16
    batch_size: int = 256
    ladder: list = field(default_factory=lambda: [128 << i for i in range(10)])
    ring_capacity: int = 1_000_000
    channel: str = "shm"
    queue_size: int = 5000
    queue_policy: str = "block"
    dual_updater: bool = False
    autotune: bool = False
    # reproducibility
    seed: int = 0
    lockstep: bool = False
    lockstep_steps_per_update: int = 1
    # paths
    run_dir: str = "runs/run"
    # cadences (seconds unless noted)
    eval_cadence: float = 5.0
    eval_episodes: int = 5
    trace_cadence: float = 60.0
    stats_cadence: float = 10.0
    tune_window: float = 10.0
    tune_discard: float = 2.0
    publish_every: int = 100
    publish_seconds: float = 2.0
    poll_seconds: float = 0.5
    warmup_steps: int = 1000
    # stop conditions
    time_budget: float = 0.0
    target_return: float | None = None
    # supervision and limits
    restart_budget: int = 3
    memory_budget: float = 0.0
    startup_timeout: float = 60.0
    # tuner guards
    cpu_guard: float = 0.9
    freq_floor: float = 10.0
    min_gain: float = 0.01
    # bench mode: no evaluator or tracer
    bench: bool = False
    log_level: str = "INFO"

    def validate(self) -> "RunConfig":
        from .envs import ENV_REGISTRY

        if self.env not in ENV_REGISTRY:
            raise ConfigError(f"unknown env {self.env!r}; choose from {sorted(ENV_REGISTRY)}")
        if not isinstance(self.env_params, dict):
            raise ConfigError("env_params must be a table")
        checks = [
            (0.0 <= self.gamma < 1.0, "gamma must be in [0, 1)"),
            (0.0 < self.tau <= 1.0, "tau must be in (0, 1]"),
            (self.alpha >= 0.0, "alpha must be >= 0"),
            (self.lr > 0.0, "lr must be > 0"),
            (len(self.hidden) >= 1 and all(int(h) >= 1 for h in self.hidden), "hidden must list positive widths"),
            (1 <= self.sp <= self.sp_cap, "need 1 <= sp <= sp_cap"),
            (self.sp_cap <= 64, "sp_cap is limited to 64 writers"),
            (self.batch_size >= 1, "batch_size must be >= 1"),
            (len(self.ladder) >= 1 and sorted(self.ladder) == list(self.ladder), "ladder must be ascending"),
            (self.ring_capacity >= 1, "ring_capacity must be >= 1"),
            (self.channel in ("shm", "queue"), "channel must be 'shm' or 'queue'"),
            (self.queue_size >= 1, "queue_size must be >= 1"),
            (self.queue_policy in ("block", "drop"), "queue_policy must be 'block' or 'drop'"),
            (self.eval_cadence >= 0 and self.trace_cadence >= 0, "cadences must be >= 0"),
            (self.eval_episodes >= 1, "eval_episodes must be >= 1"),
            (self.stats_cadence > 0, "stats_cadence must be > 0"),
            (0 <= self.tune_discard < self.tune_window, "need 0 <= tune_discard < tune_window"),
            (self.publish_every >= 1 and self.publish_seconds > 0, "publish cadence must be positive"),
            (self.poll_seconds > 0, "poll_seconds must be > 0"),
            (self.warmup_steps >= 0, "warmup_steps must be >= 0"),
            (self.time_budget >= 0, "time_budget must be >= 0"),
            (self.target_return is None or math.isfinite(self.target_return), "target_return must be finite"),
            (self.restart_budget >= 0, "restart_budget must be >= 0"),
            (self.memory_budget >= 0, "memory_budget must be >= 0"),
            (0.0 < self.cpu_guard <= 1.0, "cpu_guard must be in (0, 1]"),
            (self.freq_floor >= 0 and self.min_gain >= 0, "freq_floor and min_gain must be >= 0"),
            (self.lockstep_steps_per_update >= 1, "lockstep_steps_per_update must be >= 1"),
        ]
        for ok, msg in checks:
            if not ok:
                raise ConfigError(msg)
        if self.autotune and self.batch_size not in self.ladder:
            raise ConfigError(f"with autotune on, batch_size {self.batch_size} must be on the ladder")
        return self

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


_FIELDS = {f.name: f for f in fields(RunConfig)}


def _field_kind(name: str) -> str:
    default = RunConfig().__getattribute__(name)
    t = _FIELDS[name].type
    if isinstance(default, bool):
        return "bool"
    if isinstance(default, int):
        return "int"
    if isinstance(default, float) or "float" in str(t):
        return "float"
    if isinstance(default, (dict, list)):
        return "json"
    return "str"


def parse_value(name: str, raw: str) -> Any:
    """Convert a string from an env var or flag to the field's type."""
    kind = _field_kind(name)
    try:
        if kind == "bool":
            low = raw.strip().lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if kind == "int":
            return int(raw)
        if kind == "float":
            if raw.strip().lower() in ("none", "null", ""):
                return None
            return float(raw)
        if kind == "json":
            return json.loads(raw)
        return raw
    except (ValueError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot parse {name}={raw!r} as {kind}") from exc


def _coerce(name: str, value: Any) -> Any:
    kind = _field_kind(name)
    if value is None:
        if name == "target_return":
            return None
        raise ConfigError(f"{name} cannot be empty")
    if kind == "float" and isinstance(value, int) and not isinstance(value, bool):
        return float(value)
    if kind == "int" and isinstance(value, float) and value.is_integer():
        return int(value)
    expected = {"bool": bool, "int": int, "float": float, "json": (dict, list), "str": str}[kind]
    if not isinstance(value, expected) or (kind == "int" and isinstance(value, bool)):
        raise ConfigError(f"{name} should be {kind}, got {value!r}")
    return value


def load_file(path: str | os.PathLike) -> dict:
    try:
        with open(path, "rb") as fh:
            data = tomllib.load(fh)
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"config file {path}: {exc}") from exc
    return data


def env_overrides(environ: Mapping[str, str] | None = None) -> dict:
    environ = os.environ if environ is None else environ
    out = {}
    for prefix in reversed(ENV_PREFIXES):  # DESKRL_ wins over SPREEZE_
        for name in _FIELDS:
            key = prefix + name.upper()
            if key in environ:
                out[name] = parse_value(name, environ[key])
    return out


def add_config_flags(parser: argparse.ArgumentParser) -> None:
    """One ``--field-name`` flag per config field (default: not given)."""
    parser.add_argument("--config", help="TOML config file")
    for name in _FIELDS:
        flag = "--" + name.replace("_", "-")
        if _field_kind(name) == "bool":
            parser.add_argument(flag, dest=name, nargs="?", const="true", default=None, metavar="BOOL")
        else:
            parser.add_argument(flag, dest=name, default=None, metavar=_field_kind(name).upper())


def flag_overrides(ns: argparse.Namespace) -> dict:
    out = {}
    for name in _FIELDS:
        raw = getattr(ns, name, None)
        if raw is not None:
            out[name] = parse_value(name, raw)
    return out


def resolve(file: str | os.PathLike | None = None, environ: Mapping[str, str] | None = None,
            flags: Mapping[str, Any] | None = None, **overrides) -> RunConfig:
    """Merge the layers (flag > env > file > defaults) and validate."""
    merged: dict[str, Any] = {}
    layers = [load_file(file) if file else {}, env_overrides(environ), dict(flags or {}), overrides]
    for layer in layers:
        for k, v in layer.items():
            if k not in _FIELDS:
                raise ConfigError(f"unknown config key {k!r}")
            merged[k] = _coerce(k, v)
    try:
        cfg = RunConfig(**merged)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc
    return cfg.validate()


def from_dict(d: Mapping[str, Any]) -> RunConfig:
    return resolve(flags=d)


def write_toml_example(path: str | os.PathLike) -> None:
    """A commented config with every key at its default."""
    lines = ["# deskrl run configuration (all keys optional)"]
    tables = []
    for name, value in RunConfig().to_dict().items():
        if isinstance(value, dict):
            tables.append(f"\n[{name}]")
            continue
        if value is None:
            lines.append(f"# {name} =")
        else:
            lines.append(f"{name} = {json.dumps(value)}")
    Path(path).write_text("\n".join(lines + tables) + "\n")
