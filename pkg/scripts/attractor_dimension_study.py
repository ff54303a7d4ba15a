#!/usr/bin/env python3
"""Tangent-volume decay rates along a forced trajectory, plus the exact
heat-spectrum comparison for the unforced equilibrium configuration.

Usage: python scripts/attractor_dimension_study.py [config]
"""

import sys
from pathlib import Path

import numpy as np

import npdsim as nd
from npdsim.cli import main, read_csv
from npdsim.tangent import heat_rate_oracle, volume_decay_experiment

REPO = Path(__file__).resolve().parents[1]


def forced_run(config: str) -> int:
    rc = main(["run", config])
    if rc != 0:
        return rc
    import configparser

    cp = configparser.ConfigParser()
    cp.read(config)
    outdir = Path(cp.get("run", "output_dir"))
    header, cols = read_csv(outdir / "rates.csv")
    print(f"\nforced-trajectory volume decay ({outdir / 'rates.csv'}):")
    print(f"  {'n':>3} {'rate':>10} {'rate/n^2':>10} {'r^2':>10}  positive")
    for i in range(len(cols["n"])):
        n = int(cols["n"][i])
        print(
            f"  {n:>3} {cols['rate'][i]:>10.4f} {cols['rate_over_n2'][i]:>10.4f} "
            f"{cols['fit_r2'][i]:>10.6f}  {cols['rate'][i] > 0}"
        )
    return 0


def equilibrium_reference() -> None:
    grid = nd.make_grid(3, 16)
    params = nd.SpeciesParams(1.0, (1.0, -1.0))
    eq = nd.NpdState(grid=grid, time=0.0, c=[np.full(grid.shape, 0.6)] * 2)
    cfg = nd.StepperConfig(dt=0.02, t_end=5.0, output_every=1.0)
    res = volume_decay_experiment(
        eq, params, nd.BodyCharge.zero(grid), [1, 2, 4, 8],
        t0=2.0, t1=5.0, seed=5, k_max=4, renorm_every=5, r_zero=True, stepper=cfg,
    )
    print("\nequilibrium reference vs exact heat spectrum:")
    print(f"  {'n':>3} {'fitted':>10} {'exact':>10} {'rel err':>10}")
    for row in res.rows:
        exact = heat_rate_oracle(grid, params, row.n, r_zero=True)
        print(f"  {row.n:>3} {row.rate:>10.4f} {exact:>10.4f} {abs(row.rate - exact) / exact:>10.2e}")


if __name__ == "__main__":
    cfg = sys.argv[1] if len(sys.argv) > 1 else str(REPO / "configs" / "volume_decay.cfg")
    rc = forced_run(cfg)
    if rc == 0:
        equilibrium_reference()
    sys.exit(rc)
