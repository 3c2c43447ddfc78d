"""Command-line entry point.

The library is imported lazily, after argument parsing, so that ``--threads``
can configure numba before it starts its thread pool.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_ASSERT, EXIT_VERIFY, EXIT_DEGENERATE = range(6)
STRATEGY_NAMES = ("baseline", "snugbox", "accutile")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _floats(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from exc


def _rgb(text: str) -> tuple[float, float, float]:
    vals = _floats(text)
    if len(vals) != 3:
        raise argparse.ArgumentTypeError("background must be r,g,b")
    return tuple(vals)


def _strategies(text: str) -> list[str]:
    if text == "all":
        return list(STRATEGY_NAMES)
    names = [s.strip() for s in text.split(",") if s.strip()]
    bad = [s for s in names if s not in STRATEGY_NAMES]
    if bad or not names:
        raise argparse.ArgumentTypeError(f"unknown strategy {bad[0] if bad else text!r}")
    return names


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--threads", type=int, default=0, help="worker threads (0 = auto)")
    common.add_argument("--out", default=None, help="output artifact path")

    p = _Parser(prog="tilesplat", description="Tile-based Gaussian splatting toolkit.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    r = sub.add_parser("render", parents=[common], help="render a scene to a PPM image")
    r.add_argument("--scene", required=True, help="scene .json or 3D-GS .ply")
    r.add_argument("--camera", default=None, help="camera .json (default: 640x480 test camera)")
    r.add_argument("--strategy", choices=STRATEGY_NAMES, default="accutile")
    r.add_argument("--background", type=_rgb, default=(0.0, 0.0, 0.0))
    r.add_argument("--timings", default=None, help="optional stage,ms CSV")

    v = sub.add_parser("verify", parents=[common], help="randomised AccuTile vs oracle battery")
    v.add_argument("--trials", type=int, default=100_000)
    v.add_argument("--report", default=None, help="CSV with per-check counts and minimal failures")
    v.add_argument("--tiles", type=int, default=40, help="grid side in tiles")
    v.add_argument("--inject-fault", action="store_true", help=argparse.SUPPRESS)

    b = sub.add_parser("bench", parents=[common], help="stage timings per strategy")
    b.add_argument("--scene", default=None, help="scene file (default: standard synthetic scene)")
    b.add_argument("--camera", default=None)
    b.add_argument("--n", type=int, default=10_000, help="Gaussians in the default scene")
    b.add_argument("--repeats", type=int, default=3)
    b.add_argument("--strategies", type=_strategies, default=list(STRATEGY_NAMES))

    pr = sub.add_parser("prune", parents=[common], help="score a scene and drop the lowest fraction")
    pr.add_argument("--scene", required=True)
    pr.add_argument("--cameras", required=True, help="directory of camera .json files, or one file")
    pr.add_argument("--ratio", type=float, required=True)
    pr.add_argument("--score", choices=("efficient", "random"), default="efficient")
    pr.add_argument("--background", type=_rgb, default=(0.0, 0.0, 0.0))

    f = sub.add_parser("fit", parents=[common], help="fit random splats to the toy target")
    f.add_argument("--n-init", type=int, default=200)
    f.add_argument("--iterations", type=int, default=None, help="default: schedule length")
    f.add_argument("--step-size", type=float, default=1.0)
    f.add_argument("--soft-ratio", type=float, default=0.8)
    f.add_argument("--hard-ratio", type=float, default=0.3)
    f.add_argument("--soft-events", type=int, default=1)
    f.add_argument("--scale", type=int, default=10, help="divide the 30k-iteration timeline by this")
    f.add_argument("--score", choices=("efficient", "random"), default="efficient")
    f.add_argument("--image", default=None, help="optional PPM of the fitted render")

    s = sub.add_parser("sweep", parents=[common], help="grid over soft/hard pruning ratios")
    s.add_argument("--soft-ratios", type=_floats, default=[0.0, 0.5, 0.8])
    s.add_argument("--hard-ratios", type=_floats, default=[0.0, 0.3])
    s.add_argument("--soft-events", type=int, default=1)
    s.add_argument("--scale", type=int, default=100)
    s.add_argument("--n-init", type=int, default=200)

    sy = sub.add_parser("synth", parents=[common], help="write a synthetic scene")
    sy.add_argument("--n", type=int, default=10_000)
    sy.add_argument("--max-opacity", type=float, default=0.95)
    sy.add_argument("--camera-out", default=None, help="also write the matching camera")
    return p


def _configure_threads(threads: int) -> None:
    if threads < 0:
        raise ValueError("--threads must be >= 0")
    if threads:
        os.environ["NUMBA_NUM_THREADS"] = str(threads)


def _load_scene(path):
    from . import scene_io

    if not os.path.exists(path):
        raise FileNotFoundError(f"no such file: {path}")
    return scene_io.load_gs_ply(path) if str(path).lower().endswith(".ply") else scene_io.load_scene(path)


def _load_camera(path):
    from . import scene_io

    if path is None:
        return scene_io.default_camera()
    if not os.path.exists(path):
        raise FileNotFoundError(f"no such file: {path}")
    return scene_io.load_camera(path)


def _require_out(args, what):
    if not args.out:
        raise ValueError(f"{args.command} needs --out for the {what}")


def cmd_render(args) -> int:
    from . import scene_io
    from .pipeline import run_pipeline

    _require_out(args, "image")
    scene, cam = _load_scene(args.scene), _load_camera(args.camera)
    res = run_pipeline(scene, cam, args.strategy, args.background)
    scene_io.write_image(res.image, args.out)
    if args.timings:
        scene_io.write_timings_csv(res.timings, args.timings)
    print(f"gaussians={res.n_gaussians} visible={res.n_visible} tile_keys={res.n_keys}")
    for name, ms in zip(res.timings.names(), res.timings.as_list()):
        print(f"  {name:22s} {ms:10.3f} ms")
    print(f"wrote {args.out}")
    return EXIT_OK


def cmd_verify(args) -> int:
    from .binning import TileGrid
    from .verify import CHECKS, random_conics, run_battery

    if args.trials < 0:
        raise ValueError("--trials must be >= 0")
    grid = TileGrid(args.tiles, args.tiles, 16)
    report = run_battery(random_conics(args.trials, args.seed, grid), grid, skip_tangent_test=args.inject_fault)
    for name in CHECKS:
        n_fail = len(report.failures[name])
        print(f"  {name:18s} {'PASS' if n_fail == 0 else 'FAIL'} {args.trials - n_fail}/{args.trials}")
    print(f"max tangency error {report.max_tangency_error:.3e}")
    print("mean tiles " + " ".join(f"{k}={v:.3f}" for k, v in report.mean_tiles.items()))
    path = args.report or args.out
    if path:
        report.write_csv(path)
        print(f"wrote {path}")
    return EXIT_OK if report.ok else EXIT_VERIFY


def cmd_bench(args) -> int:
    from . import scene_io
    from .pipeline import run_pipeline, warmup

    if args.repeats < 1:
        raise ValueError("--repeats must be >= 1")
    if args.scene:
        scene, cam, scene_id = _load_scene(args.scene), _load_camera(args.camera), os.path.basename(args.scene)
    else:
        scene, cam = scene_io.standard_bench_scene(args.seed, args.n)
        scene_id = f"synth-{args.seed}-{args.n}"
        if args.camera:
            cam = _load_camera(args.camera)
    warmup()
    report = scene_io.BenchReport()
    for rep in range(args.repeats):
        for strategy in args.strategies:
            res = run_pipeline(scene, cam, strategy)
            report.rows.append(scene_io.BenchRow(scene_id, strategy, rep, res.timings, res.n_keys,
                                                 res.n_gaussians, res.n_visible))
    for strategy in args.strategies:
        row = next(r for r in report.rows if r.strategy == strategy)
        print(f"  {strategy:9s} tiles/gaussian={row.tiles_per_gaussian:8.3f} "
              f"overall={report.mean_overall(strategy):9.2f} ms")
    if "baseline" in args.strategies:
        for strategy, ratio in report.speedups("baseline").items():
            print(f"  speed-up {strategy} vs baseline: {ratio:.3f}x")
    if args.out:
        scene_io.write_csv(report, args.out)
        print(f"wrote {args.out}")
    return EXIT_OK


def cmd_prune(args) -> int:
    import numpy as np

    from . import scene_io
    from .pruning import DegenerateSceneError, prune, random_scores, score_scene

    _require_out(args, "pruned scene")
    scene = _load_scene(args.scene)
    if os.path.isdir(args.cameras):
        cams = scene_io.load_camera_dir(args.cameras)
    else:
        cams = [_load_camera(args.cameras)]
    if args.score == "random":
        scores = random_scores(len(scene), np.random.default_rng(args.seed))
    else:
        scores = score_scene(scene, cams, args.background).values
    pruned = prune(scene, scores, args.ratio)
    if len(pruned) == 0:
        raise DegenerateSceneError("pruning removed every Gaussian")
    scene_io.save_scene(pruned, args.out, note=f"pruned {args.score} ratio={args.ratio}")
    print(f"kept {len(pruned)} of {len(scene)} Gaussians over {len(cams)} pose(s); wrote {args.out}")
    return EXIT_OK


def cmd_fit(args) -> int:
    import numpy as np

    from . import scene_io
    from .fitting import FitConfig, Splats2D, fit_splats, lift_to_scene, psnr, toy_camera, toy_target
    from .pruning import PruneSchedule

    sched = PruneSchedule.from_training_timeline(args.soft_ratio, args.hard_ratio, scale=args.scale,
                                                 soft_events=args.soft_events)
    iterations = sched.total_iterations if args.iterations is None else args.iterations
    if iterations < sched.total_iterations:
        sched = PruneSchedule([e for e in sched.soft_events if e[0] <= iterations],
                              [e for e in sched.hard_events if e[0] <= iterations], iterations)
    target = toy_target()
    init = Splats2D.random(args.n_init, target.shape[0], np.random.default_rng(args.seed))
    cfg = FitConfig(iterations=iterations, step_size=args.step_size, prune_score=args.score, seed=args.seed)
    res = fit_splats(target, init, sched, cfg)
    print(f"iterations={iterations} counts={' -> '.join(map(str, res.counts))}")
    if res.losses:
        print(f"L1 {res.losses[0]:.5f} -> {res.losses[-1]:.5f}")
    print(f"psnr {psnr(res.image, target):.3f} dB")
    if args.out:
        scene_io.save_scene(lift_to_scene(res.splats, toy_camera(target.shape[0])), args.out,
                            note=f"toy fit seed={args.seed}")
        print(f"wrote {args.out}")
    if args.image:
        scene_io.write_image(res.image, args.image)
        print(f"wrote {args.image}")
    return EXIT_OK


def cmd_sweep(args) -> int:
    from .fitting import sweep, write_sweep_csv

    rows = sweep(args.soft_ratios, args.hard_ratios, seed=args.seed, n_init=args.n_init, scale=args.scale,
                 soft_events=args.soft_events)
    print("soft  hard  count  reduction  psnr_db")
    for r in rows:
        print(f"{r.soft_ratio:4.2f}  {r.hard_ratio:4.2f}  {r.final_count:5d}  {r.reduction_factor:9.3f}  {r.psnr_db:7.3f}")
    if args.out:
        write_sweep_csv(rows, args.out)
        print(f"wrote {args.out}")
    return EXIT_OK


def cmd_synth(args) -> int:
    from . import scene_io

    _require_out(args, "scene")
    scene = scene_io.synth_scene(args.seed, args.n, opacity_range=(0.05, args.max_opacity))
    scene_io.save_scene(scene, args.out, note=f"synth seed={args.seed} n={args.n}")
    print(f"wrote {args.out} ({len(scene)} Gaussians)")
    if args.camera_out:
        scene_io.save_camera(scene_io.default_camera(), args.camera_out)
        print(f"wrote {args.camera_out}")
    return EXIT_OK


COMMANDS = {
    "render": cmd_render,
    "verify": cmd_verify,
    "bench": cmd_bench,
    "prune": cmd_prune,
    "fit": cmd_fit,
    "sweep": cmd_sweep,
    "synth": cmd_synth,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        _configure_threads(args.threads)
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    config = {k: v for k, v in vars(args).items() if k != "inject_fault" or v}
    print("config: " + json.dumps(config, sort_keys=True, default=str))

    from .pruning import DegenerateSceneError
    from .scene_io import FormatError

    try:
        return COMMANDS[args.command](args)
    except DegenerateSceneError as exc:
        print(f"error: degenerate result: {exc}", file=sys.stderr)
        return EXIT_DEGENERATE
    except (OSError, FormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except AssertionError as exc:
        print(f"error: internal assertion: {exc}", file=sys.stderr)
        return EXIT_ASSERT
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
