#!/usr/bin/env python3
"""Run the reference no-body-charge decay experiment and print the fitted
exponential rates of every tracked norm series.

Usage: python scripts/decay_study.py [config]
"""

import sys
from pathlib import Path

from npdsim.cli import main

REPO = Path(__file__).resolve().parents[1]


def run(config: str) -> int:
    rc = main(["run", config])
    if rc != 0:
        return rc
    import configparser

    cp = configparser.ConfigParser()
    cp.read(config)
    outdir = Path(cp.get("run", "output_dir"))
    with open(outdir / "report.csv") as fh:
        lines = fh.read().splitlines()
    print(f"\nfitted decay rates ({outdir / 'report.csv'}):")
    print(f"  {'series':<14} {'rate':>10} {'offset':>12} {'r^2':>10}")
    for line in lines[1:]:
        name, rate, offset, r2, _ = line.split(",")
        print(f"  {name:<14} {float(rate):>10.4f} {float(offset):>12.3e} {float(r2):>10.6f}")
    return 0


if __name__ == "__main__":
    cfg = sys.argv[1] if len(sys.argv) > 1 else str(REPO / "configs" / "decay_no_body_charge.cfg")
    sys.exit(run(cfg))
