"""Gaussian-to-tile assignment: baseline square, SnugBox rect, AccuTile spans.

The scalar kernels are numba-compiled so that the render pipeline can call
them per Gaussian inside parallel loops; the public wrappers take
:class:`ProjectedGaussian` records and return small dataclasses.

Tile ``k`` along an axis owns the continuous interval ``[k*ts, (k+1)*ts)``,
so a point at coordinate ``v`` falls in tile ``floor(v / ts)``. Tile ids are
row-major: ``row * tiles_x + col``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from numba import njit

from .geometry import BBox2D, ProjectedGaussian, max_eigenvalue

BASELINE, SNUGBOX, ACCUTILE = 0, 1, 2
STRATEGIES = {"baseline": BASELINE, "snugbox": SNUGBOX, "accutile": ACCUTILE}

ROWS, COLS = 0, 1


@dataclass(frozen=True)
class TileGrid:
    tiles_x: int
    tiles_y: int
    tile_size: int = 16

    @classmethod
    def for_image(cls, width: int, height: int, tile_size: int = 16) -> TileGrid:
        return cls(-(-width // tile_size), -(-height // tile_size), tile_size)

    @classmethod
    def for_camera(cls, cam) -> TileGrid:
        return cls.for_image(cam.width, cam.height, cam.tile_size)

    @property
    def n_tiles(self) -> int:
        return self.tiles_x * self.tiles_y


@dataclass(frozen=True)
class TileRect:
    """Half-open tile rectangle [x0, x1) x [y0, y1)."""

    x0: int
    x1: int
    y0: int
    y1: int

    @property
    def count(self) -> int:
        return (self.x1 - self.x0) * (self.y1 - self.y0)

    def tiles(self) -> set[tuple[int, int]]:
        return {(x, y) for y in range(self.y0, self.y1) for x in range(self.x0, self.x1)}


@dataclass
class TileSpanList:
    """Per-line tile spans. ``axis`` is ``"row"`` (spans run over columns) or
    ``"col"`` (spans run over rows)."""

    axis: str
    spans: list[tuple[int, int, int]] = field(default_factory=list)
    evaluations: int = 0

    @property
    def count(self) -> int:
        return sum(hi - lo for _, lo, hi in self.spans)

    def tiles(self) -> set[tuple[int, int]]:
        out = set()
        for line, lo, hi in self.spans:
            for k in range(lo, hi):
                out.add((k, line) if self.axis == "row" else (line, k))
        return out


# ---------------------------------------------------------------------------
# scalar kernels
# ---------------------------------------------------------------------------


@njit(cache=True)
def _extremes(a, b, c, t):
    # y-extremes of a x^2 + 2b xy + c y^2 = t and the x of each tangent point
    g = b * b - a * c
    x_arg = math.sqrt(-b * b * t / (g * a))
    y_lo = math.inf
    y_hi = -math.inf
    x_lo = 0.0
    x_hi = 0.0
    for s in range(2):
        xs = x_arg if s == 0 else -x_arg
        r = math.sqrt(max(g * xs * xs + t * c, 0.0))
        for k in range(2):
            y = (-b * xs - r) / c if k == 0 else (-b * xs + r) / c
            if y < y_lo:
                y_lo = y
                x_lo = xs
            if y > y_hi:
                y_hi = y
                x_hi = xs
    return y_lo, x_lo, y_hi, x_hi


@njit(cache=True)
def snug_bbox_kernel(mx, my, a, b, c, t):
    """(x_min, x_max, y_min, y_max, y_at_x_min, y_at_x_max, x_at_y_min, x_at_y_max)."""
    y_lo, x_at_ylo, y_hi, x_at_yhi = _extremes(a, b, c, t)
    x_lo, y_at_xlo, x_hi, y_at_xhi = _extremes(c, b, a, t)
    return (
        mx + x_lo,
        mx + x_hi,
        my + y_lo,
        my + y_hi,
        my + y_at_xlo,
        my + y_at_xhi,
        mx + x_at_ylo,
        mx + x_at_yhi,
    )


@njit(cache=True)
def tile_lo(v, ts, n):
    f = math.floor(min(max(v / ts, -1.0), n + 1.0))
    return int(min(max(f, 0.0), float(n)))


@njit(cache=True)
def tile_hi(v, ts, n):
    f = math.floor(min(max(v / ts, -2.0), n + 1.0)) + 1.0
    return int(min(max(f, 0.0), float(n)))


@njit(cache=True)
def baseline_rect_kernel(mx, my, sxx, sxy, syy, tiles_x, tiles_y, ts):
    mid = 0.5 * (sxx + syy)
    lam = mid + math.sqrt(max(0.25 * (sxx - syy) ** 2 + sxy * sxy, 0.0))
    r = math.ceil(3.0 * math.sqrt(lam))
    return (
        tile_lo(mx - r, ts, tiles_x),
        tile_hi(mx + r, ts, tiles_x),
        tile_lo(my - r, ts, tiles_y),
        tile_hi(my + r, ts, tiles_y),
    )


@njit(cache=True)
def snug_rect_kernel(mx, my, a, b, c, t, tiles_x, tiles_y, ts):
    bb = snug_bbox_kernel(mx, my, a, b, c, t)
    return (
        tile_lo(bb[0], ts, tiles_x),
        tile_hi(bb[1], ts, tiles_x),
        tile_lo(bb[2], ts, tiles_y),
        tile_hi(bb[3], ts, tiles_y),
    )


@njit(cache=True)
def _walk(mu, mv, a, b, c, t, u_min, u_max, v_min, v_max, v_at_umin, v_at_umax,
          l0, l1, n_u, ts, emit, lo_out, hi_out, skip_tangent):
    # Sweep lines [l0, l1) across the v axis. a multiplies u^2, c multiplies v^2.
    # Only the boundary line shared with the next row is solved per step.
    g = b * b - a * c
    count = 0
    evals = 0
    prev_ok = False
    p_lo = 0.0
    p_hi = 0.0
    line = l0 * ts
    if line >= v_min and line <= v_max:
        vd = line - mv
        r = math.sqrt(max(g * vd * vd + t * a, 0.0))
        p_lo = mu + (-b * vd - r) / a
        p_hi = mu + (-b * vd + r) / a
        prev_ok = True
        evals += 1
    for k in range(l0, l1):
        line = (k + 1) * ts
        next_ok = False
        n_lo = 0.0
        n_hi = 0.0
        if line <= v_max:
            vd = line - mv
            r = math.sqrt(max(g * vd * vd + t * a, 0.0))
            n_lo = mu + (-b * vd - r) / a
            n_hi = mu + (-b * vd + r) / a
            next_ok = True
            evals += 1
        row_lo = k * ts
        row_hi = (k + 1) * ts
        e_min = math.inf
        e_max = -math.inf
        if not skip_tangent and row_lo <= v_at_umin and v_at_umin < row_hi:
            e_min = u_min
        else:
            if prev_ok:
                e_min = min(e_min, p_lo)
            if next_ok:
                e_min = min(e_min, n_lo)
        if not skip_tangent and row_lo <= v_at_umax and v_at_umax < row_hi:
            e_max = u_max
        else:
            if prev_ok:
                e_max = max(e_max, p_hi)
            if next_ok:
                e_max = max(e_max, n_hi)
        if e_min <= e_max:
            t0 = tile_lo(e_min, ts, n_u)
            t1 = tile_hi(e_max, ts, n_u)
            if t1 < t0:
                t1 = t0
        else:
            t0 = 0
            t1 = 0
        count += t1 - t0
        if emit:
            lo_out[k - l0] = t0
            hi_out[k - l0] = t1
        prev_ok = next_ok
        p_lo = n_lo
        p_hi = n_hi
    return count, evals


@njit(cache=True)
def accutile_kernel(mx, my, a, b, c, t, tiles_x, tiles_y, ts, emit, lo_out, hi_out, skip_tangent):
    """Exact tile spans of the ellipse q = t.

    Returns (axis, first_line, last_line_exclusive, count, line_evaluations).
    With ``emit`` the spans for line ``first_line + k`` are written to
    ``lo_out[k], hi_out[k]``; the spans run over the other axis.
    """
    bb = snug_bbox_kernel(mx, my, a, b, c, t)
    x0 = tile_lo(bb[0], ts, tiles_x)
    x1 = tile_hi(bb[1], ts, tiles_x)
    y0 = tile_lo(bb[2], ts, tiles_y)
    y1 = tile_hi(bb[3], ts, tiles_y)
    if x1 <= x0 or y1 <= y0:
        return ROWS, y0, y0, 0, 0
    # A single-tile rect is exact only if clipping did not shrink it.
    if x1 - x0 == 1 and y1 - y0 == 1 and tile_hi(bb[1], ts, tiles_x + 2) == x1 \
            and tile_hi(bb[3], ts, tiles_y + 2) == y1 and bb[0] >= 0.0 and bb[2] >= 0.0:
        if emit:
            lo_out[0] = x0
            hi_out[0] = x1
        return ROWS, y0, y1, 1, 0
    if y1 - y0 <= x1 - x0:
        count, evals = _walk(mx, my, a, b, c, t, bb[0], bb[1], bb[2], bb[3], bb[4], bb[5],
                             y0, y1, tiles_x, ts, emit, lo_out, hi_out, skip_tangent)
        return ROWS, y0, y1, count, evals
    count, evals = _walk(my, mx, c, b, a, t, bb[2], bb[3], bb[0], bb[1], bb[6], bb[7],
                         x0, x1, tiles_y, ts, emit, lo_out, hi_out, skip_tangent)
    return COLS, x0, x1, count, evals


@njit(cache=True)
def rect_min_q(a, b, c, x0, x1, y0, y1):
    """Exact minimum of a x^2 + 2b xy + c y^2 over [x0, x1] x [y0, y1]."""
    if x0 <= 0.0 <= x1 and y0 <= 0.0 <= y1:
        return 0.0
    best = math.inf
    for k in range(2):
        x = x0 if k == 0 else x1
        y = min(max(-b * x / c, y0), y1)
        best = min(best, a * x * x + 2.0 * b * x * y + c * y * y)
        y = y0 if k == 0 else y1
        x = min(max(-b * y / a, x0), x1)
        best = min(best, a * x * x + 2.0 * b * x * y + c * y * y)
    return best


@njit(cache=True)
def _unclipped(v, ts, n, hi):
    f = math.floor(min(max(v / ts, -3.0), n + 3.0))
    return int(f) + (1 if hi else 0)


@njit(cache=True)
def oracle_kernel(mx, my, a, b, c, t, tiles_x, tiles_y, ts):
    """Brute tile test over the snug rect grown by one ring.

    Returns (wx0, wy0, mask, ring_hits) where ``mask[j, i]`` tells whether
    tile (wx0 + i, wy0 + j) meets the ellipse.
    """
    bb = snug_bbox_kernel(mx, my, a, b, c, t)
    ux0 = _unclipped(bb[0], ts, tiles_x, False)
    ux1 = _unclipped(bb[1], ts, tiles_x, True)
    uy0 = _unclipped(bb[2], ts, tiles_y, False)
    uy1 = _unclipped(bb[3], ts, tiles_y, True)
    wx0 = max(ux0 - 1, 0)
    wx1 = min(ux1 + 1, tiles_x)
    wy0 = max(uy0 - 1, 0)
    wy1 = min(uy1 + 1, tiles_y)
    nx = max(wx1 - wx0, 0)
    ny = max(wy1 - wy0, 0)
    mask = np.zeros((ny, nx), dtype=np.bool_)
    ring_hits = 0
    for j in range(ny):
        ty = wy0 + j
        for i in range(nx):
            tx = wx0 + i
            q = rect_min_q(a, b, c, tx * ts - mx, (tx + 1) * ts - mx, ty * ts - my, (ty + 1) * ts - my)
            if q <= t:
                mask[j, i] = True
                if tx < ux0 or tx >= ux1 or ty < uy0 or ty >= uy1:
                    ring_hits += 1
    return wx0, wy0, mask, ring_hits


# ---------------------------------------------------------------------------
# public wrappers
# ---------------------------------------------------------------------------


def _params(pg: ProjectedGaussian):
    return float(pg.mean2d[0]), float(pg.mean2d[1]), pg.conic.a, pg.conic.b, pg.conic.c, pg.threshold_t


def rect_from_bbox(bbox: BBox2D, grid: TileGrid) -> TileRect:
    ts = grid.tile_size
    return TileRect(
        tile_lo(bbox.x_min, ts, grid.tiles_x),
        tile_hi(bbox.x_max, ts, grid.tiles_x),
        tile_lo(bbox.y_min, ts, grid.tiles_y),
        tile_hi(bbox.y_max, ts, grid.tiles_y),
    )


def tiles_baseline(pg: ProjectedGaussian, grid: TileGrid) -> TileRect:
    r = math.ceil(3.0 * math.sqrt(max_eigenvalue(*pg.cov2d)))
    mx, my = float(pg.mean2d[0]), float(pg.mean2d[1])
    return rect_from_bbox(BBox2D(mx - r, mx + r, my - r, my + r), grid)


def tiles_snugbox(pg: ProjectedGaussian, grid: TileGrid) -> TileRect:
    x0, x1, y0, y1 = snug_rect_kernel(*_params(pg), grid.tiles_x, grid.tiles_y, grid.tile_size)
    return TileRect(x0, x1, y0, y1)


def _span_buffers(grid: TileGrid):
    n = max(grid.tiles_x, grid.tiles_y, 1)
    return np.zeros(n, dtype=np.int64), np.zeros(n, dtype=np.int64)


def tiles_accutile(pg: ProjectedGaussian, grid: TileGrid, *, skip_tangent_test: bool = False) -> TileSpanList:
    """Exact tile set via a sweep over the shorter side of the SnugBox rect.

    ``skip_tangent_test`` deliberately breaks the algorithm (fault injection
    for the verification runner).
    """
    lo, hi = _span_buffers(grid)
    axis, l0, l1, _, evals = accutile_kernel(
        *_params(pg), grid.tiles_x, grid.tiles_y, grid.tile_size, True, lo, hi, skip_tangent_test
    )
    spans = [(l0 + k, int(lo[k]), int(hi[k])) for k in range(l1 - l0)]
    return TileSpanList("row" if axis == ROWS else "col", spans, evals)


def accutile_count(pg: ProjectedGaussian, grid: TileGrid) -> int:
    """Count-only pass of AccuTile (what ``preprocess`` uses)."""
    empty = np.zeros(0, dtype=np.int64)
    return int(
        accutile_kernel(*_params(pg), grid.tiles_x, grid.tiles_y, grid.tile_size, False, empty, empty, False)[3]
    )


def tiles_oracle(pg: ProjectedGaussian, grid: TileGrid) -> TileSpanList:
    """Exact per-tile ellipse/rectangle test, for verification only.

    Raises AssertionError if a tile outside the SnugBox rect is hit.
    """
    wx0, wy0, mask, ring_hits = oracle_kernel(*_params(pg), grid.tiles_x, grid.tiles_y, grid.tile_size)
    assert ring_hits == 0, f"oracle found {ring_hits} hit(s) outside the SnugBox rect"
    spans = []
    for j in range(mask.shape[0]):
        cols = np.flatnonzero(mask[j])
        if len(cols):
            assert cols[-1] - cols[0] + 1 == len(cols), "non-contiguous row coverage"
            spans.append((wy0 + j, wx0 + int(cols[0]), wx0 + int(cols[-1]) + 1))
    return TileSpanList("row", spans, mask.size)
