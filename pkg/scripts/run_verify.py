"""Randomised AccuTile-vs-oracle battery over several seeds and grid sizes.

    python scripts/run_verify.py --trials 100000 --seeds 3
"""

from __future__ import annotations

import argparse
import time
from dataclasses import asdict, dataclass, fields

from tilesplat.binning import TileGrid
from tilesplat.verify import CHECKS, random_conics, run_battery


@dataclass
class VerifyConfig:
    trials: int = 100_000
    seeds: int = 3
    tiles: int = 40
    max_condition: float = 1e3


def main() -> int:
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    for f in fields(VerifyConfig):
        p.add_argument(f"--{f.name}", type=type(f.default), default=f.default)
    cfg = VerifyConfig(**vars(p.parse_args()))
    print(asdict(cfg))
    grid = TileGrid(cfg.tiles, cfg.tiles, 16)
    ok = True
    for seed in range(cfg.seeds):
        t0 = time.perf_counter()
        rep = run_battery(random_conics(cfg.trials, seed, grid, max_condition=cfg.max_condition), grid)
        fails = " ".join(f"{c}={len(rep.failures[c])}" for c in CHECKS)
        tiles = " ".join(f"{k}={v:.3f}" for k, v in rep.mean_tiles.items())
        print(f"seed {seed}: {fails} | max tangency {rep.max_tangency_error:.2e} | tiles {tiles} "
              f"| {time.perf_counter() - t0:.1f} s")
        ok &= rep.ok
    return 0 if ok else 4


if __name__ == "__main__":
    raise SystemExit(main())
