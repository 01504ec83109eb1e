"""Command line entry point: ``twoscale-lod --study sweep --config study.ini``."""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .experiments import STUDIES, ConfigError, ExperimentConfig, run


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="twoscale-lod",
                                description="Two-scale LOD studies for scattering by a locally periodic medium.")
    p.add_argument("--config", type=Path, help="INI-style config file (flags override it)")
    p.add_argument("--study", choices=STUDIES, help="study to run")
    p.add_argument("--out", help="output directory")
    p.add_argument("--m", help="oversampling order, integer or 'auto'")
    p.add_argument("--k", type=float, help="wave number (single and quasiopt studies)")
    p.add_argument("--threads", type=int, help="worker threads for corrector solves")
    p.add_argument("--write-config", action="store_true", help="print the effective config and exit")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    overrides = {"study": args.study, "out": args.out, "m": args.m, "k": args.k, "threads": args.threads}
    try:
        text = args.config.read_text() if args.config else ""
        cfg = ExperimentConfig.from_text(text, **overrides)
    except (OSError, ConfigError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    if args.write_config:
        print(cfg.to_text())
        return 0
    result = run(cfg)
    print(f"{result.name}: {len(result.rows)} rows -> {Path(cfg.out) / (result.name + '.csv')}")
    for key, value in sorted(result.fitted.items()):
        print(f"  {key} = {value}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
