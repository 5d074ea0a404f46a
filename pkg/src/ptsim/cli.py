"""``simulate`` command: run one scenario and write the CSV and JSON outputs."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from ptsim.errors import ConfigError, InvariantViolation
from ptsim.harness import RunConfig, Scenario, build_config, parse_config, run_scenario, write_outputs

log = logging.getLogger("ptsim")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="simulate",
        description="Simulate paravirtual page-table management for one scenario.",
    )
    p.add_argument("--scenario", choices=[s.value for s in Scenario])
    p.add_argument("--minutes", type=int, help="simulated minutes (default 30)")
    p.add_argument("--seed", type=int)
    p.add_argument("--config", type=Path, help="key = value config file")
    p.add_argument("--out", help="per-minute metrics CSV path")
    p.add_argument("--summary", help="run summary JSON path")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def resolve_config(args: argparse.Namespace) -> RunConfig:
    """Config file first, then command-line flags on top."""
    config = RunConfig()
    if args.config is not None:
        config = parse_config(args.config.read_text(), config)
    overrides = {}
    if args.scenario is not None:
        overrides["scenario"] = Scenario(args.scenario)
    if args.minutes is not None:
        if args.minutes < 0:
            raise ConfigError(None, "--minutes must be >= 0")
        overrides["duration_minutes"] = args.minutes
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.out is not None:
        overrides["out"] = args.out
    if args.summary is not None:
        overrides["summary"] = args.summary
    return build_config(config, overrides) if overrides else config


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        config = resolve_config(args)
        result = run_scenario(config)
    except ConfigError as exc:
        print(f"simulate: config error: {exc}", file=sys.stderr)
        return 2
    except InvariantViolation as exc:
        print(f"simulate: invariant violation: {exc}", file=sys.stderr)
        return 3
    except OSError as exc:
        print(f"simulate: {exc}", file=sys.stderr)
        return 2
    try:
        write_outputs(result.rows, result.summary, config.out, config.summary)
    except OSError as exc:
        print(f"simulate: cannot write outputs: {exc}", file=sys.stderr)
        return 2
    s = result.summary
    print(
        f"{s['scenario']}: {s['minutes']} min, "
        f"flushes_pt={s['totals']['flushes_pt']}, fallbacks={s['fallbacks']}, "
        f"unsafe_dma_writes={s['security']['unsafe_dma_writes']}"
    )
    return 0


if __name__ == "__main__":
    sys.exit(main())
