"""Efficient pruning score and score-based pruning.

The score of Gaussian i is the squared derivative of the rendered image
with respect to its splat value g_i(p), summed over pixels, colour channels
and poses. Only one accumulator per Gaussian is kept.

Everything here runs in float64 so that analytic gradients can be checked
against finite differences; the float32 renderer lives in ``pipeline``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from numba import njit

from .binning import TileGrid
from .geometry import ALPHA_MIN, CameraModel, ProjectedBatch, Scene, project_scene
from .pipeline import ALPHA_MAX, T_STOP, count_tiles, duplicate_with_keys, identify_tile_ranges, inclusive_sum, sort_pairs


class DegenerateSceneError(RuntimeError):
    """Pruning left no Gaussians."""


# ---------------------------------------------------------------------------
# per-pixel compositing, forward and backward
# ---------------------------------------------------------------------------


@njit(cache=True)
def composite_forward(sigma, g, color, n, bg, alpha, t_before, used):
    """Composite ``n`` depth-ordered splats at one pixel.

    Fills ``alpha``, ``t_before`` (transmittance in front of each splat) and
    ``used``; returns (r, g, b, final transmittance).
    """
    T = 1.0
    c0 = 0.0
    c1 = 0.0
    c2 = 0.0
    for k in range(n):
        used[k] = False
    for k in range(n):
        a = min(ALPHA_MAX, sigma[k] * g[k])
        if g[k] > 1.0 or a < ALPHA_MIN:
            continue
        alpha[k] = a
        t_before[k] = T
        used[k] = True
        w = a * T
        c0 += color[k, 0] * w
        c1 += color[k, 1] * w
        c2 += color[k, 2] * w
        T = T * (1.0 - a)
        if T < T_STOP:
            break
    return c0 + bg[0] * T, c1 + bg[1] * T, c2 + bg[2] * T, T


@njit(cache=True)
def composite_backward(color, n, bg, alpha, t_before, used, t_final, dc_dalpha):
    """dC/dalpha for every splat via one back-to-front suffix sweep.

    dC/dalpha_k = c_k T_k - (sum_{j>k} c_j alpha_j T_j + bg T_final) / (1 - alpha_k)
    """
    s0 = bg[0] * t_final
    s1 = bg[1] * t_final
    s2 = bg[2] * t_final
    for k in range(n - 1, -1, -1):
        if not used[k]:
            dc_dalpha[k, 0] = 0.0
            dc_dalpha[k, 1] = 0.0
            dc_dalpha[k, 2] = 0.0
            continue
        inv = 1.0 / (1.0 - alpha[k])
        tk = t_before[k]
        dc_dalpha[k, 0] = color[k, 0] * tk - s0 * inv
        dc_dalpha[k, 1] = color[k, 1] * tk - s1 * inv
        dc_dalpha[k, 2] = color[k, 2] * tk - s2 * inv
        w = alpha[k] * tk
        s0 += color[k, 0] * w
        s1 += color[k, 1] * w
        s2 += color[k, 2] * w


@njit(cache=True)
def _gather(values, start, end, px, py, mean2d, conic, opacity, color, sig, g, col, idx, power):
    n = end - start
    for k in range(n):
        gi = values[start + k]
        dx = px - mean2d[gi, 0]
        dy = py - mean2d[gi, 1]
        p = -0.5 * (conic[gi, 0] * dx * dx + conic[gi, 2] * dy * dy) - conic[gi, 1] * dx * dy
        power[k] = p
        # power > 0 only for a broken conic; push g above 1 so it is skipped
        g[k] = math.exp(p) if p <= 0.0 else 2.0
        sig[k] = opacity[gi]
        col[k, 0] = color[gi, 0]
        col[k, 1] = color[gi, 1]
        col[k, 2] = color[gi, 2]
        idx[k] = gi
    return n


@njit(cache=True)
def _max_range(ranges):
    m = 1
    for t in range(ranges.shape[0]):
        m = max(m, ranges[t, 1] - ranges[t, 0])
    return m


@njit(cache=True)
def render64_kernel(mean2d, conic, opacity, color, values, ranges, width, height, tiles_x, ts, bg):
    out = np.zeros((height, width, 3))
    m = _max_range(ranges)
    sig = np.zeros(m)
    g = np.zeros(m)
    col = np.zeros((m, 3))
    idx = np.zeros(m, dtype=np.int64)
    power = np.zeros(m)
    alpha = np.zeros(m)
    tb = np.zeros(m)
    used = np.zeros(m, dtype=np.bool_)
    for tile in range(ranges.shape[0]):
        tx = tile % tiles_x
        ty = tile // tiles_x
        for py in range(ty * ts, min((ty + 1) * ts, height)):
            for px in range(tx * ts, min((tx + 1) * ts, width)):
                n = _gather(values, ranges[tile, 0], ranges[tile, 1], px, py, mean2d, conic, opacity, color,
                            sig, g, col, idx, power)
                r, gg, b, _ = composite_forward(sig, g, col, n, bg, alpha, tb, used)
                out[py, px, 0] = r
                out[py, px, 1] = gg
                out[py, px, 2] = b
    return out


@njit(cache=True)
def score_kernel(mean2d, conic, opacity, color, values, ranges, width, height, tiles_x, ts, bg, score):
    """Add sum_p sum_ch (sigma_i * dC/dalpha_i)^2 into ``score`` in place."""
    m = _max_range(ranges)
    sig = np.zeros(m)
    g = np.zeros(m)
    col = np.zeros((m, 3))
    idx = np.zeros(m, dtype=np.int64)
    power = np.zeros(m)
    alpha = np.zeros(m)
    tb = np.zeros(m)
    used = np.zeros(m, dtype=np.bool_)
    dca = np.zeros((m, 3))
    for tile in range(ranges.shape[0]):
        tx = tile % tiles_x
        ty = tile // tiles_x
        for py in range(ty * ts, min((ty + 1) * ts, height)):
            for px in range(tx * ts, min((tx + 1) * ts, width)):
                n = _gather(values, ranges[tile, 0], ranges[tile, 1], px, py, mean2d, conic, opacity, color,
                            sig, g, col, idx, power)
                _, _, _, tf = composite_forward(sig, g, col, n, bg, alpha, tb, used)
                composite_backward(col, n, bg, alpha, tb, used, tf, dca)
                for k in range(n):
                    if used[k]:
                        s = sig[k]
                        score[idx[k]] += (s * dca[k, 0]) ** 2 + (s * dca[k, 1]) ** 2 + (s * dca[k, 2]) ** 2


@njit(cache=True)
def backward_kernel(mean2d, conic, opacity, color, values, ranges, width, height, tiles_x, ts, bg, dl_dc,
                    d_mean, d_conic, d_opacity, d_color):
    """Accumulate dL/d(screen-space parameters) given dL/dC per pixel."""
    m = _max_range(ranges)
    sig = np.zeros(m)
    g = np.zeros(m)
    col = np.zeros((m, 3))
    idx = np.zeros(m, dtype=np.int64)
    power = np.zeros(m)
    alpha = np.zeros(m)
    tb = np.zeros(m)
    used = np.zeros(m, dtype=np.bool_)
    dca = np.zeros((m, 3))
    for tile in range(ranges.shape[0]):
        tx = tile % tiles_x
        ty = tile // tiles_x
        for py in range(ty * ts, min((ty + 1) * ts, height)):
            for px in range(tx * ts, min((tx + 1) * ts, width)):
                n = _gather(values, ranges[tile, 0], ranges[tile, 1], px, py, mean2d, conic, opacity, color,
                            sig, g, col, idx, power)
                _, _, _, tf = composite_forward(sig, g, col, n, bg, alpha, tb, used)
                composite_backward(col, n, bg, alpha, tb, used, tf, dca)
                u0 = dl_dc[py, px, 0]
                u1 = dl_dc[py, px, 1]
                u2 = dl_dc[py, px, 2]
                for k in range(n):
                    if not used[k]:
                        continue
                    gi = idx[k]
                    dl_da = u0 * dca[k, 0] + u1 * dca[k, 1] + u2 * dca[k, 2]
                    w = alpha[k] * tb[k]
                    d_color[gi, 0] += u0 * w
                    d_color[gi, 1] += u1 * w
                    d_color[gi, 2] += u2 * w
                    d_opacity[gi] += dl_da * g[k]
                    dl_dpow = dl_da * sig[k] * g[k]
                    dx = px - mean2d[gi, 0]
                    dy = py - mean2d[gi, 1]
                    a, b, c = conic[gi, 0], conic[gi, 1], conic[gi, 2]
                    d_mean[gi, 0] += dl_dpow * (a * dx + b * dy)
                    d_mean[gi, 1] += dl_dpow * (c * dy + b * dx)
                    d_conic[gi, 0] += dl_dpow * (-0.5 * dx * dx)
                    d_conic[gi, 1] += dl_dpow * (-dx * dy)
                    d_conic[gi, 2] += dl_dpow * (-0.5 * dy * dy)


# ---------------------------------------------------------------------------
# binning helpers shared by scoring and fitting
# ---------------------------------------------------------------------------


@dataclass
class Worklist:
    batch: ProjectedBatch
    values: np.ndarray
    ranges: np.ndarray
    grid: TileGrid
    width: int
    height: int

    def kernel_args(self, background):
        b = self.batch
        return (b.mean2d, b.conic, b.opacity, b.color, self.values, self.ranges,
                self.width, self.height, self.grid.tiles_x, self.grid.tile_size,
                np.asarray(background, dtype=np.float64).reshape(3))


def build_worklist(batch: ProjectedBatch, width: int, height: int, tile_size: int = 16,
                   strategy="accutile") -> Worklist:
    grid = TileGrid.for_image(width, height, tile_size)
    counts = count_tiles(batch, grid, strategy)
    offsets, _ = inclusive_sum(counts)
    keys, values = duplicate_with_keys(batch, counts, offsets, strategy, grid)
    keys, values = sort_pairs(keys, values)
    return Worklist(batch, values, identify_tile_ranges(keys, grid), grid, width, height)


def render64(work: Worklist, background=(0.0, 0.0, 0.0)) -> np.ndarray:
    return render64_kernel(*work.kernel_args(background))


def pixel_splats(work: Worklist, px: int, py: int):
    """Depth-ordered (opacity, g, color, gaussian index) lists seen by one pixel."""
    ts = work.grid.tile_size
    tile = (py // ts) * work.grid.tiles_x + px // ts
    start, end = int(work.ranges[tile, 0]), int(work.ranges[tile, 1])
    n = end - start
    sig, g, power = np.zeros(n), np.zeros(n), np.zeros(n)
    col, idx = np.zeros((n, 3)), np.zeros(n, dtype=np.int64)
    b = work.batch
    _gather(work.values, start, end, px, py, b.mean2d, b.conic, b.opacity, b.color, sig, g, col, idx, power)
    return sig, g, col, idx


# ---------------------------------------------------------------------------
# scores and pruning
# ---------------------------------------------------------------------------


@dataclass
class ScoreVector:
    values: np.ndarray  # (N,) float64, one accumulator per Gaussian

    def __len__(self):
        return len(self.values)

    @property
    def storage_scalars(self) -> int:
        return self.values.size


def score_batch(batch: ProjectedBatch, width: int, height: int, tile_size: int = 16,
                background=(0.0, 0.0, 0.0), out: np.ndarray | None = None) -> np.ndarray:
    score = np.zeros(len(batch)) if out is None else out
    if len(batch):
        work = build_worklist(batch, width, height, tile_size)
        score_kernel(*work.kernel_args(background), score)
    return score


def score_scene(scene: Scene, cams, background=(0.0, 0.0, 0.0)) -> ScoreVector:
    """Efficient pruning score accumulated over every pose in ``cams``, in order."""
    if isinstance(cams, CameraModel):
        cams = [cams]
    score = np.zeros(len(scene))
    for cam in cams:
        score_batch(project_scene(scene, cam), cam.width, cam.height, cam.tile_size, background, out=score)
    return ScoreVector(score)


def _n_removed(n: int, ratio: float) -> int:
    if not 0.0 <= ratio < 1.0:
        raise ValueError(f"prune ratio must lie in [0, 1), got {ratio}")
    # round first so that e.g. 0.3 * 10 does not floor to 2
    return int(math.floor(round(ratio * n, 9)))


def prune_mask(scores, ratio: float) -> np.ndarray:
    """Keep-mask dropping floor(ratio * N) lowest scores.

    Among equal scores the higher index goes first, so lower canonical
    indices survive.
    """
    scores = np.asarray(getattr(scores, "values", scores), dtype=np.float64)
    n = len(scores)
    k = _n_removed(n, ratio)
    keep = np.ones(n, dtype=bool)
    if k:
        order = np.lexsort((-np.arange(n), scores))
        keep[order[:k]] = False
    return keep


def prune(scene: Scene, scores, ratio: float) -> Scene:
    scores = getattr(scores, "values", scores)
    if len(scores) != len(scene):
        raise ValueError("score vector length does not match the scene")
    return scene.subset(prune_mask(scores, ratio))


def random_scores(n: int, rng: np.random.Generator) -> np.ndarray:
    """Uniform scores: pruning by these removes a uniformly random subset."""
    return rng.random(n)


@dataclass
class PruneSchedule:
    soft_events: list[tuple[int, float]] = field(default_factory=list)
    hard_events: list[tuple[int, float]] = field(default_factory=list)
    total_iterations: int = 0

    def __post_init__(self):
        for name, events in (("soft", self.soft_events), ("hard", self.hard_events)):
            its = [it for it, _ in events]
            if any(b <= a for a, b in zip(its, its[1:])):
                raise ValueError(f"{name} event iterations must be strictly increasing")
            for it, ratio in events:
                if not 0.0 <= ratio < 1.0:
                    raise ValueError(f"{name} ratio {ratio} outside [0, 1)")
                if not 0 <= it <= self.total_iterations:
                    raise ValueError(f"{name} event at {it} outside [0, {self.total_iterations}]")

    def events(self) -> list[tuple[int, float, str]]:
        """All events ordered by iteration (soft before hard on ties)."""
        evs = [(it, r, "soft") for it, r in self.soft_events] + [(it, r, "hard") for it, r in self.hard_events]
        return sorted(evs, key=lambda e: (e[0], e[2] != "soft"))

    @classmethod
    def from_training_timeline(cls, soft_ratio: float = 0.8, hard_ratio: float = 0.3, scale: int = 10,
                               soft_events: int = 1, total: int = 30_000) -> PruneSchedule:
        """Soft pruning before the opacity resets at 6k/9k/12k, hard pruning
        every 3k from 15k on, all divided by ``scale``. Zero ratios are dropped."""
        soft = [(it // scale, soft_ratio) for it in (6000, 9000, 12000)[:soft_events] if soft_ratio > 0]
        hard = [(it // scale, hard_ratio) for it in range(15_000, total, 3000) if hard_ratio > 0]
        return cls(soft, hard, total // scale)


def schedule_counts(n: int, schedule: PruneSchedule) -> list[int]:
    """Gaussian counts after each event, starting with ``n``."""
    counts = [n]
    for _, ratio, _ in schedule.events():
        n -= _n_removed(n, ratio)
        counts.append(n)
    return counts
