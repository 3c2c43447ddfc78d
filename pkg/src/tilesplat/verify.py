"""Randomised equivalence battery: AccuTile vs the exact oracle.

Each trial draws a positive-definite screen-space covariance and an
opacity, then checks in one compiled pass:

* AccuTile's tile set equals the oracle's,
* the oracle finds nothing in the ring around the SnugBox rect,
* the four SnugBox tangent points sit on q = t,
* AccuTile ⊆ SnugBox, and SnugBox ⊆ baseline whenever opacity <= 0.35,
* count-only and emit passes agree, and the sweep solves at most
  (lines + 1) boundary intersections.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np
from numba import njit, prange

from .binning import (
    TileGrid,
    accutile_kernel,
    baseline_rect_kernel,
    oracle_kernel,
    snug_bbox_kernel,
    snug_rect_kernel,
)

CHECKS = ("exact", "ring", "tangency", "accutile_in_snug", "snug_in_baseline", "count_emit", "cost")
TANGENCY_RTOL = 1e-9
CONTAINMENT_OPACITY = 0.35


@dataclass
class ConicBattery:
    mean_x: np.ndarray
    mean_y: np.ndarray
    a: np.ndarray
    b: np.ndarray
    c: np.ndarray
    opacity: np.ndarray

    def __len__(self):
        return len(self.a)

    @property
    def threshold(self):
        return 2.0 * np.log(255.0 * self.opacity)

    @property
    def cov2d(self):
        det = self.a * self.c - self.b**2
        return np.stack([self.c / det, -self.b / det, self.a / det], axis=1)


def random_conics(n: int, seed: int, grid: TileGrid, max_condition: float = 1e3,
                  eig_range=(0.3, 4000.0)) -> ConicBattery:
    """Seeded conics: log-uniform size and condition number, uniform angle,
    opacity uniform on the open interval (1/255, 1), means scattered over
    the image plus a 10% margin so clipping paths get exercised."""
    rng = np.random.default_rng(seed)
    lam_max = np.exp(rng.uniform(math.log(eig_range[0]), math.log(eig_range[1]), n))
    cond = np.exp(rng.uniform(0.0, math.log(max_condition), n))
    lam_min = lam_max / cond
    theta = rng.uniform(0.0, math.pi, n)
    cs, sn = np.cos(theta), np.sin(theta)
    sxx = lam_max * cs * cs + lam_min * sn * sn
    syy = lam_max * sn * sn + lam_min * cs * cs
    sxy = (lam_max - lam_min) * cs * sn
    det = sxx * syy - sxy * sxy
    opacity = rng.uniform(1.0 / 255.0, 1.0, n)
    bad = (opacity <= 1.0 / 255.0) | (opacity >= 1.0)
    while bad.any():
        opacity[bad] = rng.uniform(1.0 / 255.0, 1.0, bad.sum())
        bad = (opacity <= 1.0 / 255.0) | (opacity >= 1.0)
    w = grid.tiles_x * grid.tile_size
    h = grid.tiles_y * grid.tile_size
    mean_x = rng.uniform(-0.1 * w, 1.1 * w, n)
    mean_y = rng.uniform(-0.1 * h, 1.1 * h, n)
    return ConicBattery(mean_x, mean_y, syy / det, -sxy / det, sxx / det, opacity)


@njit(cache=True)
def _q(a, b, c, x, y):
    return a * x * x + 2.0 * b * x * y + c * y * y


@njit(parallel=True, cache=True)
def _battery_kernel(mx, my, a, b, c, opacity, tiles_x, tiles_y, ts, skip_tangent):
    n = len(a)
    exact_ok = np.ones(n, dtype=np.bool_)
    ring = np.zeros(n, dtype=np.int64)
    tangency = np.zeros(n)
    in_snug = np.ones(n, dtype=np.bool_)
    in_base = np.ones(n, dtype=np.bool_)
    count_ok = np.ones(n, dtype=np.bool_)
    cost_ok = np.ones(n, dtype=np.bool_)
    counts = np.zeros((n, 3), dtype=np.int64)  # baseline, snugbox, accutile
    nbuf = max(tiles_x, tiles_y, 1)
    for i in prange(n):
        t = 2.0 * math.log(255.0 * opacity[i])
        ai, bi, ci = a[i], b[i], c[i]
        bb = snug_bbox_kernel(mx[i], my[i], ai, bi, ci, t)
        pts = (
            (bb[0], bb[4]),
            (bb[1], bb[5]),
            (bb[6], bb[2]),
            (bb[7], bb[3]),
        )
        worst = 0.0
        for p in pts:
            err = abs(_q(ai, bi, ci, p[0] - mx[i], p[1] - my[i]) - t) / t
            worst = max(worst, err)
        tangency[i] = worst

        sx0, sx1, sy0, sy1 = snug_rect_kernel(mx[i], my[i], ai, bi, ci, t, tiles_x, tiles_y, ts)
        det = ai * ci - bi * bi
        bx0, bx1, by0, by1 = baseline_rect_kernel(mx[i], my[i], ci / det, -bi / det, ai / det,
                                                  tiles_x, tiles_y, ts)
        snug_n = max(sx1 - sx0, 0) * max(sy1 - sy0, 0)
        counts[i, 0] = max(bx1 - bx0, 0) * max(by1 - by0, 0)
        counts[i, 1] = snug_n
        if opacity[i] <= 0.35 and snug_n > 0:
            if sx0 < bx0 or sx1 > bx1 or sy0 < by0 or sy1 > by1:
                in_base[i] = False

        lo = np.zeros(nbuf, dtype=np.int64)
        hi = np.zeros(nbuf, dtype=np.int64)
        axis, l0, l1, cnt, evals = accutile_kernel(mx[i], my[i], ai, bi, ci, t, tiles_x, tiles_y, ts,
                                                   True, lo, hi, skip_tangent)
        counts[i, 2] = cnt
        empty = np.zeros(0, dtype=np.int64)
        cnt2 = accutile_kernel(mx[i], my[i], ai, bi, ci, t, tiles_x, tiles_y, ts,
                               False, empty, empty, skip_tangent)[3]
        if cnt2 != cnt:
            count_ok[i] = False
        if evals > (l1 - l0) + 1:
            cost_ok[i] = False

        wx0, wy0, mask, hits = oracle_kernel(mx[i], my[i], ai, bi, ci, t, tiles_x, tiles_y, ts)
        ring[i] = hits
        ny, nx = mask.shape
        oracle_n = 0
        for jj in range(ny):
            for ii in range(nx):
                if mask[jj, ii]:
                    oracle_n += 1
        acc_n = 0
        ok = True
        for k in range(l1 - l0):
            line = l0 + k
            for m in range(lo[k], hi[k]):
                if axis == 0:
                    tx, ty = m, line
                else:
                    tx, ty = line, m
                acc_n += 1
                if tx < sx0 or tx >= sx1 or ty < sy0 or ty >= sy1:
                    in_snug[i] = False
                jj = ty - wy0
                ii = tx - wx0
                if jj < 0 or jj >= ny or ii < 0 or ii >= nx or not mask[jj, ii]:
                    ok = False
        if acc_n != oracle_n or acc_n != cnt:
            ok = False
        exact_ok[i] = ok
    return exact_ok, ring, tangency, in_snug, in_base, count_ok, cost_ok, counts


@dataclass
class BatteryReport:
    trials: int
    failures: dict[str, np.ndarray]  # check name -> failing trial indices
    max_tangency_error: float
    mean_tiles: dict[str, float]
    battery: ConicBattery
    snug_counts: np.ndarray

    @property
    def ok(self) -> bool:
        return all(len(v) == 0 for v in self.failures.values())

    def minimal_failure(self, check: str):
        """Failing trial with the smallest SnugBox rect (lowest index on ties)."""
        idx = self.failures[check]
        if len(idx) == 0:
            return None
        return int(idx[np.lexsort((idx, self.snug_counts[idx]))[0]])

    def write_csv(self, path) -> None:
        bat = self.battery
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["check", "trials", "failures", "trial", "mean_x", "mean_y", "a", "b", "c", "opacity"])
            for name in CHECKS:
                i = self.minimal_failure(name)
                row = [name, self.trials, len(self.failures[name])]
                if i is None:
                    row += [""] * 7
                else:
                    row += [i] + [repr(float(v[i])) for v in (bat.mean_x, bat.mean_y, bat.a, bat.b, bat.c, bat.opacity)]
                w.writerow(row)


def run_battery(battery: ConicBattery, grid: TileGrid, *, skip_tangent_test: bool = False) -> BatteryReport:
    if len(battery) == 0:
        return BatteryReport(0, {k: np.zeros(0, dtype=np.int64) for k in CHECKS}, 0.0,
                             {k: 0.0 for k in ("baseline", "snugbox", "accutile")}, battery, np.zeros(0, np.int64))
    exact, ring, tang, in_snug, in_base, count_ok, cost_ok, counts = _battery_kernel(
        battery.mean_x, battery.mean_y, battery.a, battery.b, battery.c, battery.opacity,
        grid.tiles_x, grid.tiles_y, grid.tile_size, skip_tangent_test,
    )
    failures = {
        "exact": np.flatnonzero(~exact),
        "ring": np.flatnonzero(ring > 0),
        "tangency": np.flatnonzero(~(tang < TANGENCY_RTOL)),
        "accutile_in_snug": np.flatnonzero(~in_snug),
        "snug_in_baseline": np.flatnonzero(~in_base),
        "count_emit": np.flatnonzero(~count_ok),
        "cost": np.flatnonzero(~cost_ok),
    }
    mean_tiles = dict(zip(("baseline", "snugbox", "accutile"), counts.mean(axis=0).tolist()))
    return BatteryReport(len(battery), failures, float(tang.max()), mean_tiles, battery, counts[:, 1].copy())
