"""``spreeze`` command line: run, ablate, plot, bench.

Exit codes: 0 success, 2 config error, 3 component failure, 4 target not
reached within the time budget.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys

from .config import ConfigError, add_config_flags, flag_overrides, resolve
from .orchestrator import EXIT_CONFIG, EXIT_FAILURE, EXIT_OK, launch


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="spreeze", description="Desk-scale parallel SAC training engine.")
    sub = p.add_subparsers(dest="verb", required=True)
    run = sub.add_parser("run", help="train (stops on time budget, target return or SIGINT)")
    add_config_flags(run)
    ab = sub.add_parser("ablate", help="run an ablation scenario and compare")
    ab.add_argument("scenario")
    add_config_flags(ab)
    pl = sub.add_parser("plot", help="export reward and throughput curves")
    pl.add_argument("run_path", help="a run directory or a directory of seed runs")
    pl.add_argument("--out", default=None, help="output directory (default: <run_path>/plots)")
    be = sub.add_parser("bench", help="throughput-only run, or --kernels to compare kernel backends")
    be.add_argument("--kernels", action="store_true", help="time compiled vs pure-Python kernels")
    add_config_flags(be)
    return p


def _config(ns, defaults=None):
    flags = {**(defaults or {}), **flag_overrides(ns)}
    return resolve(ns.config, flags=flags)


def main(argv=None) -> int:
    ns = _parser().parse_args(argv)
    try:
        if ns.verb == "plot":
            logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s")
            from .plotting import plot

            rep = plot(ns.run_path, ns.out)
            print(f"series: {rep.series}, malformed lines skipped: {rep.malformed}")
            for f in rep.files:
                print(f)
            return EXIT_OK
        if ns.verb == "ablate":
            from .harness import SCENARIO_DEFAULTS, SCENARIOS, ablate

            if ns.scenario not in SCENARIOS:
                raise ConfigError(f"unknown scenario {ns.scenario!r}; choose from {', '.join(SCENARIOS)}")
            cfg = _config(ns, SCENARIO_DEFAULTS[ns.scenario])
            logging.basicConfig(level=cfg.log_level, format="%(asctime)s %(levelname)s %(message)s")
            rep = ablate(ns.scenario, cfg)
            print(rep.table())
            return EXIT_OK if all(c.get("exit") == 0 for c in rep.rows) else EXIT_FAILURE
        if ns.verb == "bench" and ns.kernels:
            from .kernel_bench import main as kbench

            return kbench()
        cfg = _config(ns)
        logging.basicConfig(level=cfg.log_level, format="%(asctime)s %(levelname)s %(message)s")
        if ns.verb == "bench":
            from .harness import bench

            m = bench(cfg)
            print(json.dumps(m.summary, indent=2))
        else:
            m = launch(cfg)
        print(f"{m.exit_status}: {m.reason} (exit {m.exit_code})")
        return int(m.exit_code)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
