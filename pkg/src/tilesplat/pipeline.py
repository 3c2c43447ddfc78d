"""Six-stage CPU tile renderer with per-stage wall-clock timing.

Stages: preprocess -> inclusive_sum -> duplicate_with_keys -> sort_pairs ->
identify_tile_ranges -> render. Parallel loops only ever write to disjoint
slots (per-Gaussian offsets, per-tile pixels), so the framebuffer is
bit-identical for any numba thread count.
"""

from __future__ import annotations

import math
import time
from dataclasses import astuple, dataclass, fields

import numpy as np
from numba import njit, prange

from .binning import (
    ACCUTILE,
    BASELINE,
    ROWS,
    SNUGBOX,
    STRATEGIES,
    TileGrid,
    accutile_kernel,
    baseline_rect_kernel,
    snug_rect_kernel,
)
from .geometry import ALPHA_MIN, CameraModel, ProjectedBatch, Scene, project_scene

ALPHA_MAX = 0.99
T_STOP = 1e-4


@dataclass
class StageTimings:
    """Milliseconds per stage."""

    preprocess: float = 0.0
    inclusive_sum: float = 0.0
    duplicate_with_keys: float = 0.0
    sort: float = 0.0
    identify_tile_ranges: float = 0.0
    render: float = 0.0
    overall: float = 0.0

    @classmethod
    def names(cls) -> list[str]:
        return [f.name for f in fields(cls)]

    def as_list(self) -> list[float]:
        return list(astuple(self))

    @classmethod
    def mean(cls, runs) -> StageTimings:
        runs = list(runs)
        return cls(*np.mean([r.as_list() for r in runs], axis=0).tolist())


def strategy_code(strategy) -> int:
    if isinstance(strategy, str):
        try:
            return STRATEGIES[strategy]
        except KeyError:
            raise ValueError(f"unknown strategy {strategy!r}; expected one of {sorted(STRATEGIES)}") from None
    if strategy not in (BASELINE, SNUGBOX, ACCUTILE):
        raise ValueError(f"unknown strategy code {strategy}")
    return int(strategy)


# ---------------------------------------------------------------------------
# kernels
# ---------------------------------------------------------------------------


@njit(parallel=True, cache=True)
def _count_kernel(mean2d, cov2d, conic, threshold, valid, strategy, tiles_x, tiles_y, ts):
    n = len(valid)
    counts = np.zeros(n, dtype=np.int64)
    empty = np.zeros(0, dtype=np.int64)
    for i in prange(n):
        if not valid[i]:
            continue
        mx, my = mean2d[i, 0], mean2d[i, 1]
        if strategy == 0:
            x0, x1, y0, y1 = baseline_rect_kernel(mx, my, cov2d[i, 0], cov2d[i, 1], cov2d[i, 2], tiles_x, tiles_y, ts)
            counts[i] = max(x1 - x0, 0) * max(y1 - y0, 0)
        elif strategy == 1:
            x0, x1, y0, y1 = snug_rect_kernel(mx, my, conic[i, 0], conic[i, 1], conic[i, 2], threshold[i],
                                              tiles_x, tiles_y, ts)
            counts[i] = max(x1 - x0, 0) * max(y1 - y0, 0)
        else:
            counts[i] = accutile_kernel(mx, my, conic[i, 0], conic[i, 1], conic[i, 2], threshold[i],
                                        tiles_x, tiles_y, ts, False, empty, empty, False)[3]
    return counts


@njit(parallel=True, cache=True)
def _duplicate_kernel(mean2d, cov2d, conic, threshold, strategy, tiles_x, tiles_y, ts,
                      counts, offsets, depth_bits, keys, values):
    n = len(counts)
    mismatched = np.zeros(n, dtype=np.bool_)
    nbuf = max(tiles_x, tiles_y, 1)
    for i in prange(n):
        want = counts[i]
        if want == 0:
            continue
        off = offsets[i]
        depth = np.uint64(depth_bits[i])
        mx, my = mean2d[i, 0], mean2d[i, 1]
        written = 0
        if strategy == 2:
            lo = np.zeros(nbuf, dtype=np.int64)
            hi = np.zeros(nbuf, dtype=np.int64)
            axis, l0, l1, cnt, _ = accutile_kernel(mx, my, conic[i, 0], conic[i, 1], conic[i, 2], threshold[i],
                                                   tiles_x, tiles_y, ts, True, lo, hi, False)
            for k in range(l1 - l0):
                for m in range(lo[k], hi[k]):
                    if written >= want:
                        mismatched[i] = True
                        break
                    if axis == ROWS:
                        tile = (l0 + k) * tiles_x + m
                    else:
                        tile = m * tiles_x + (l0 + k)
                    keys[off + written] = (np.uint64(tile) << np.uint64(32)) | depth
                    values[off + written] = i
                    written += 1
        else:
            if strategy == 0:
                x0, x1, y0, y1 = baseline_rect_kernel(mx, my, cov2d[i, 0], cov2d[i, 1], cov2d[i, 2],
                                                      tiles_x, tiles_y, ts)
            else:
                x0, x1, y0, y1 = snug_rect_kernel(mx, my, conic[i, 0], conic[i, 1], conic[i, 2], threshold[i],
                                                  tiles_x, tiles_y, ts)
            for ty in range(y0, y1):
                for tx in range(x0, x1):
                    if written >= want:
                        mismatched[i] = True
                        break
                    keys[off + written] = (np.uint64(ty * tiles_x + tx) << np.uint64(32)) | depth
                    values[off + written] = i
                    written += 1
        if written != want:
            mismatched[i] = True
    return mismatched


@njit(cache=True)
def radix_sort_pairs(keys, values):
    """Stable LSD radix sort on uint64 keys, 8 bits per pass.

    Passes whose digit is constant across all keys are skipped, so with
    few tiles most of the high-byte passes vanish.
    """
    n = len(keys)
    hist = np.zeros((8, 256), dtype=np.int64)
    mask = np.uint64(0xFF)
    for i in range(n):
        k = keys[i]
        for p in range(8):
            hist[p, np.int64((k >> np.uint64(8 * p)) & mask)] += 1
    src_k = keys.copy()
    src_v = values.copy()
    dst_k = np.empty_like(keys)
    dst_v = np.empty_like(values)
    pos = np.zeros(256, dtype=np.int64)
    for p in range(8):
        if hist[p].max() == n:
            continue
        acc = 0
        for d in range(256):
            pos[d] = acc
            acc += hist[p, d]
        shift = np.uint64(8 * p)
        for i in range(n):
            d = np.int64((src_k[i] >> shift) & mask)
            j = pos[d]
            dst_k[j] = src_k[i]
            dst_v[j] = src_v[i]
            pos[d] = j + 1
        src_k, dst_k = dst_k, src_k
        src_v, dst_v = dst_v, src_v
    return src_k, src_v


@njit(cache=True)
def _ranges_kernel(keys, n_tiles):
    ranges = np.zeros((n_tiles, 2), dtype=np.int64)
    n = len(keys)
    if n == 0:
        return ranges
    shift = np.uint64(32)
    prev = np.int64(keys[0] >> shift)
    ranges[prev, 0] = 0
    for i in range(1, n):
        tile = np.int64(keys[i] >> shift)
        if tile != prev:
            ranges[prev, 1] = i
            ranges[tile, 0] = i
            prev = tile
    ranges[prev, 1] = n
    return ranges


@njit(parallel=True, cache=True)
def _render_kernel(mean2d, conic, opacity, color, values, ranges, width, height, tiles_x, ts, bg):
    out = np.zeros((height, width, 3), dtype=np.float32)
    one = np.float32(1.0)
    t_stop = np.float32(T_STOP)
    for tile in prange(ranges.shape[0]):
        tx = tile % tiles_x
        ty = tile // tiles_x
        start = ranges[tile, 0]
        end = ranges[tile, 1]
        for py in range(ty * ts, min((ty + 1) * ts, height)):
            for px in range(tx * ts, min((tx + 1) * ts, width)):
                T = one
                c0 = np.float32(0.0)
                c1 = np.float32(0.0)
                c2 = np.float32(0.0)
                for k in range(start, end):
                    g = values[k]
                    dx = px - mean2d[g, 0]
                    dy = py - mean2d[g, 1]
                    power = -0.5 * (conic[g, 0] * dx * dx + conic[g, 2] * dy * dy) - conic[g, 1] * dx * dy
                    if power > 0.0:
                        continue
                    alpha = min(ALPHA_MAX, opacity[g] * math.exp(power))
                    if alpha < ALPHA_MIN:
                        continue
                    a32 = np.float32(alpha)
                    w = a32 * T
                    c0 += color[g, 0] * w
                    c1 += color[g, 1] * w
                    c2 += color[g, 2] * w
                    T = T * (one - a32)
                    if T < t_stop:
                        break
                out[py, px, 0] = c0 + bg[0] * T
                out[py, px, 1] = c1 + bg[1] * T
                out[py, px, 2] = c2 + bg[2] * T
    return out


# ---------------------------------------------------------------------------
# stages
# ---------------------------------------------------------------------------


def count_tiles(batch: ProjectedBatch, grid: TileGrid, strategy) -> np.ndarray:
    """Per-Gaussian tile counts under ``strategy`` (0 for culled entries)."""
    if len(batch) == 0:
        return np.zeros(0, dtype=np.int64)
    return _count_kernel(batch.mean2d, batch.cov2d, batch.conic, batch.threshold, batch.valid,
                         strategy_code(strategy), grid.tiles_x, grid.tiles_y, grid.tile_size)


def preprocess(scene: Scene, cam: CameraModel, strategy) -> tuple[ProjectedBatch, np.ndarray]:
    batch = project_scene(scene, cam)
    return batch, count_tiles(batch, TileGrid.for_camera(cam), strategy)


def inclusive_sum(counts) -> tuple[np.ndarray, int]:
    """Exclusive write offsets and the grand total."""
    counts = np.asarray(counts, dtype=np.int64)
    csum = np.cumsum(counts)
    total = int(csum[-1]) if len(csum) else 0
    return csum - counts, total


def duplicate_with_keys(batch: ProjectedBatch, counts, offsets, strategy, grid: TileGrid):
    """Emit one (tile|depth key, Gaussian index) pair per covered tile."""
    counts = np.asarray(counts, dtype=np.int64)
    offsets = np.asarray(offsets, dtype=np.int64)
    total = int(counts.sum())
    keys = np.zeros(total, dtype=np.uint64)
    values = np.zeros(total, dtype=np.int64)
    if total == 0:
        return keys, values
    # camera-space depth is positive, so its float32 bit pattern sorts correctly
    depth_bits = np.ascontiguousarray(batch.depth, dtype=np.float32).view(np.uint32)
    bad = _duplicate_kernel(batch.mean2d, batch.cov2d, batch.conic, batch.threshold, strategy_code(strategy),
                            grid.tiles_x, grid.tiles_y, grid.tile_size, counts, offsets, depth_bits, keys, values)
    if bad.any():
        raise AssertionError(f"recomputed tile intersections disagree with counts for {int(bad.sum())} Gaussian(s)")
    return keys, values


def sort_pairs(keys, values):
    keys = np.ascontiguousarray(keys, dtype=np.uint64)
    values = np.ascontiguousarray(values, dtype=np.int64)
    if len(keys) < 2:
        return keys.copy(), values.copy()
    return radix_sort_pairs(keys, values)


def identify_tile_ranges(keys, grid: TileGrid) -> np.ndarray:
    """(n_tiles, 2) half-open [start, end) into the sorted key array."""
    return _ranges_kernel(np.ascontiguousarray(keys, dtype=np.uint64), grid.n_tiles)


def render(batch: ProjectedBatch, values, ranges, cam: CameraModel, background=(0.0, 0.0, 0.0)) -> np.ndarray:
    """Front-to-back alpha compositing; returns an (H, W, 3) float32 image."""
    grid = TileGrid.for_camera(cam)
    bg = np.asarray(background, dtype=np.float32).reshape(3)
    return _render_kernel(batch.mean2d, batch.conic, batch.opacity,
                          np.ascontiguousarray(batch.color, dtype=np.float32),
                          np.ascontiguousarray(values, dtype=np.int64), ranges,
                          cam.width, cam.height, grid.tiles_x, grid.tile_size, bg)


@dataclass
class PipelineResult:
    image: np.ndarray
    timings: StageTimings
    n_keys: int
    n_visible: int
    n_gaussians: int


def run_pipeline(scene: Scene, cam: CameraModel, strategy="accutile", background=(0.0, 0.0, 0.0)) -> PipelineResult:
    code = strategy_code(strategy)
    grid = TileGrid.for_camera(cam)
    clock = time.perf_counter
    t_start = clock()
    batch, counts = preprocess(scene, cam, code)
    t1 = clock()
    offsets, total = inclusive_sum(counts)
    t2 = clock()
    keys, values = duplicate_with_keys(batch, counts, offsets, code, grid)
    t3 = clock()
    keys, values = sort_pairs(keys, values)
    t4 = clock()
    ranges = identify_tile_ranges(keys, grid)
    t5 = clock()
    image = render(batch, values, ranges, cam, background)
    t6 = clock()
    ms = [1e3 * (b - a) for a, b in ((t_start, t1), (t1, t2), (t2, t3), (t3, t4), (t4, t5), (t5, t6))]
    timings = StageTimings(*ms, overall=1e3 * (t6 - t_start))
    return PipelineResult(image, timings, total, int(batch.valid.sum()), len(scene))


def render_full(scene: Scene, cam: CameraModel, strategy="accutile", background=(0.0, 0.0, 0.0),
                repeats: int = 1) -> tuple[np.ndarray, StageTimings]:
    """Run every stage ``repeats`` times; returns the image and mean timings."""
    if repeats < 1:
        raise ValueError("repeats must be >= 1")
    runs = [run_pipeline(scene, cam, strategy, background) for _ in range(repeats)]
    return runs[-1].image, StageTimings.mean(r.timings for r in runs)


def warmup() -> None:
    """Trigger compilation of every kernel on a tiny scene."""
    from .geometry import Scene as _Scene

    cam = CameraModel.looking_down_z(20.0, 20.0, 32, 32)
    scene = _Scene([[0, 0, 2.0]], [[0.1, 0.05, 0.08]], [[1, 0, 0, 0]], [0.5], [[1, 0.5, 0.2]])
    for s in STRATEGIES:
        run_pipeline(scene, cam, s)
