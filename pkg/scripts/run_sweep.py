"""Pruning experiments on the 128x128 toy fit.

Runs the efficient-vs-random comparison over several seeds, then the
soft/hard ratio grid, and writes the grid to CSV.

    python scripts/run_sweep.py --seeds 10 --out sweep.csv
"""

from __future__ import annotations

import argparse
from dataclasses import asdict, dataclass, fields

import numpy as np

from tilesplat.fitting import pruning_efficacy, sweep, write_sweep_csv


@dataclass
class SweepConfig:
    seeds: int = 10
    soft_ratios: str = "0,0.3,0.5,0.7,0.8,0.9"
    hard_ratios: str = "0,0.2,0.3,0.5"
    soft_events: int = 1
    scale: int = 100
    n_init: int = 200
    out: str = "sweep.csv"


def main() -> None:
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    for f in fields(SweepConfig):
        p.add_argument(f"--{f.name.replace('_', '-')}", dest=f.name, type=type(f.default), default=f.default)
    cfg = SweepConfig(**vars(p.parse_args()))
    print(asdict(cfg))

    margins = []
    for seed in range(cfg.seeds):
        eff, rnd = pruning_efficacy(seed)
        margins.append(eff - rnd)
        print(f"seed {seed}: efficient {eff:.2f} dB, random {rnd:.2f} dB, margin {eff - rnd:+.2f}")
    print(f"efficient wins {sum(m > 0 for m in margins)}/{cfg.seeds}, median margin {np.median(margins):.2f} dB")

    soft = [float(v) for v in cfg.soft_ratios.split(",")]
    hard = [float(v) for v in cfg.hard_ratios.split(",")]
    rows = sweep(soft, hard, n_init=cfg.n_init, scale=cfg.scale, soft_events=cfg.soft_events)
    print("soft  hard  count  reduction  psnr_db")
    for r in rows:
        print(f"{r.soft_ratio:4.2f}  {r.hard_ratio:4.2f}  {r.final_count:5d}  {r.reduction_factor:9.3f}  {r.psnr_db:7.3f}")
    write_sweep_csv(rows, cfg.out)
    print(f"wrote {cfg.out}")


if __name__ == "__main__":
    main()
