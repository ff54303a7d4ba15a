#!/usr/bin/env python3
"""Twin-trajectory continuity: evolve perturbations delta and delta/2 of one
base state and print the separation ratio over time.

Usage: python scripts/twin_continuity_study.py [config]
"""

import sys
from pathlib import Path

from npdsim.cli import main, read_csv

REPO = Path(__file__).resolve().parents[1]


def run(config: str) -> int:
    rc = main(["run", config])
    if rc != 0:
        return rc
    import configparser

    cp = configparser.ConfigParser()
    cp.read(config)
    outdir = Path(cp.get("run", "output_dir"))
    header, cols = read_csv(outdir / "separation.csv")
    print(f"\ntwin separations ({outdir / 'separation.csv'}):")
    print(f"  {'t':>6} {'sep(delta)':>14} {'sep(delta/2)':>14} {'ratio':>8}")
    stride = max(1, len(cols["t"]) // 12)
    for i in range(0, len(cols["t"]), stride):
        print(
            f"  {cols['t'][i]:>6.2f} {cols['sep_full'][i]:>14.6e} "
            f"{cols['sep_half'][i]:>14.6e} {cols['ratio'][i]:>8.4f}"
        )
    return 0


if __name__ == "__main__":
    cfg = sys.argv[1] if len(sys.argv) > 1 else str(REPO / "configs" / "twin_lipschitz.cfg")
    sys.exit(run(cfg))
