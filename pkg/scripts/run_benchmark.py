"""Stage-timing benchmark over several synthetic scenes.

Writes one CSV row per (scene, strategy, repeat) and prints per-stage means
plus tile counts and speed-ups relative to the baseline strategy.

    python scripts/run_benchmark.py --scenes 3 --n 10000 --repeats 5 --out bench.csv
"""

from __future__ import annotations

import argparse
from dataclasses import asdict, dataclass, fields

from tilesplat.binning import STRATEGIES
from tilesplat.pipeline import StageTimings, run_pipeline, warmup
from tilesplat.scene_io import BenchReport, BenchRow, standard_bench_scene, write_csv


STRATEGY_NAMES = tuple(STRATEGIES)


@dataclass
class BenchConfig:
    scenes: int = 3
    n: int = 10_000
    repeats: int = 5
    out: str = "bench.csv"


def run(cfg: BenchConfig) -> BenchReport:
    warmup()
    report = BenchReport()
    for seed in range(cfg.scenes):
        scene, cam = standard_bench_scene(seed, cfg.n)
        for rep in range(cfg.repeats):
            for strategy in STRATEGY_NAMES:
                res = run_pipeline(scene, cam, strategy)
                report.rows.append(BenchRow(f"synth-{seed}", strategy, rep, res.timings, res.n_keys,
                                            res.n_gaussians, res.n_visible))
    return report


def summarise(report: BenchReport) -> None:
    print(f"{'stage':22s}" + "".join(f"{s:>12s}" for s in STRATEGY_NAMES))
    means = {s: StageTimings.mean(r.timings for r in report.rows if r.strategy == s) for s in STRATEGY_NAMES}
    for i, name in enumerate(StageTimings.names()):
        print(f"{name:22s}" + "".join(f"{means[s].as_list()[i]:12.3f}" for s in STRATEGY_NAMES))
    for s in STRATEGY_NAMES:
        rows = [r for r in report.rows if r.strategy == s]
        tpg = sum(r.tiles_per_gaussian for r in rows) / len(rows)
        print(f"{s:9s} tiles/gaussian {tpg:7.3f}")
    for s, ratio in report.speedups("baseline").items():
        print(f"speed-up {s} vs baseline: {ratio:.3f}x")


def main() -> None:
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    for f in fields(BenchConfig):
        p.add_argument(f"--{f.name}", type=type(f.default), default=f.default)
    cfg = BenchConfig(**vars(p.parse_args()))
    print(asdict(cfg))
    report = run(cfg)
    summarise(report)
    write_csv(report, cfg.out)
    print(f"wrote {cfg.out}")


if __name__ == "__main__":
    main()
