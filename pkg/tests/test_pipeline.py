from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tilesplat.binning import TileGrid, accutile_count, tiles_accutile
from tilesplat.geometry import CameraModel, ProjectedBatch, Scene, project_scene
from tilesplat.pipeline import (
    StageTimings,
    count_tiles,
    duplicate_with_keys,
    identify_tile_ranges,
    inclusive_sum,
    preprocess,
    radix_sort_pairs,
    render,
    render_full,
    run_pipeline,
    sort_pairs,
)
from tilesplat.scene_io import synth_scene

Q = [1.0, 0.0, 0.0, 0.0]


def _cam(w=64, h=48, f=50.0):
    return CameraModel.looking_down_z(f, f, w, h)


def _keys(tile, depth):
    return (np.uint64(tile) << np.uint64(32)) | np.uint64(np.float32(depth).view(np.uint32))


class TestPreprocess:
    def test_empty(self):
        batch, counts = preprocess(Scene.empty(), _cam(), "accutile")
        assert len(batch) == 0 and len(counts) == 0

    def test_single_tile(self):
        # centered in tile (1, 1) of a 64x48 image with a small footprint
        cam = _cam()
        z = 5.0
        x = (24 - cam.cx) * z / cam.fx
        y = (24 - cam.cy) * z / cam.fy
        scene = Scene([[x, y, z]], [[0.02, 0.02, 0.02]], [Q], [0.5], [[1, 1, 1]])
        for s in ("baseline", "snugbox", "accutile"):
            assert preprocess(scene, cam, s)[1].tolist() == [1]

    def test_behind_camera(self):
        scene = Scene([[0, 0, -3.0]], [[0.1] * 3], [Q], [0.5], [[1, 1, 1]])
        assert preprocess(scene, _cam(), "accutile")[1].tolist() == [0]

    def test_counts_match_accutile(self):
        scene = synth_scene(3, 300)
        cam = _cam(160, 120, 80)
        batch, counts = preprocess(scene, cam, "accutile")
        grid = TileGrid.for_camera(cam)
        for i in range(len(batch)):
            pg = batch.record(i)
            assert counts[i] == (0 if pg is None else accutile_count(pg, grid))


class TestPrefixSum:
    def test_examples(self):
        off, total = inclusive_sum([1, 0, 3])
        assert off.tolist() == [0, 1, 1] and total == 4
        assert inclusive_sum([])[1] == 0

    def test_matches_sequential_fold(self):
        counts = np.random.default_rng(0).integers(0, 50, 100_000)
        off, total = inclusive_sum(counts)
        acc = 0
        expected = np.empty_like(counts)
        for i, c in enumerate(counts.tolist()):
            expected[i] = acc
            acc += c
        assert np.array_equal(off, expected) and total == acc


class TestDuplicate:
    def test_single_gaussian_four_tiles(self):
        cov = np.array([[1.3, 0.0, 1.3]])
        batch = ProjectedBatch.from_arrays([[16.0, 16.0]], cov, [0.99], [2.5], [[1, 1, 1]])
        grid = TileGrid(3, 3, 16)
        counts = count_tiles(batch, grid, "accutile")
        off, total = inclusive_sum(counts)
        keys, vals = duplicate_with_keys(batch, counts, off, "accutile", grid)
        assert total == 4 == len(keys)
        assert sorted((keys >> np.uint64(32)).tolist()) == [0, 1, 3, 4]
        depth_bits = np.float32(2.5).view(np.uint32)
        assert np.all((keys & np.uint64(0xFFFFFFFF)) == depth_bits)
        assert np.all(vals == 0)

    def test_disjoint_offsets(self):
        cov = np.array([[1.0, 0.0, 1.0], [1.0, 0.0, 1.0]])
        batch = ProjectedBatch.from_arrays([[8.0, 8.0], [40.0, 40.0]], cov, [0.5, 0.5], [1.0, 2.0], np.ones((2, 3)))
        grid = TileGrid(3, 3, 16)
        counts = count_tiles(batch, grid, "snugbox")
        off, _ = inclusive_sum(counts)
        keys, vals = duplicate_with_keys(batch, counts, off, "snugbox", grid)
        assert vals.tolist() == [0, 1]
        assert (keys >> np.uint64(32)).tolist() == [0, 8]

    def test_mismatch_is_assertion(self):
        cov = np.array([[1.0, 0.0, 1.0]])
        batch = ProjectedBatch.from_arrays([[16.0, 16.0]], cov, [0.99], [1.0], np.ones((1, 3)))
        grid = TileGrid(3, 3, 16)
        with pytest.raises(AssertionError):
            duplicate_with_keys(batch, np.array([2]), np.array([0]), "accutile", grid)

    def test_emit_order_is_span_order(self):
        batch = ProjectedBatch.from_arrays([[100.0, 80.0]], [[300.0, 200.0, 300.0]], [0.8], [3.0], np.ones((1, 3)))
        grid = TileGrid(20, 20, 16)
        counts = count_tiles(batch, grid, "accutile")
        keys, _ = duplicate_with_keys(batch, counts, inclusive_sum(counts)[0], "accutile", grid)
        spans = tiles_accutile(batch.record(0), grid)
        order = [(ln, k) for ln, lo, hi in spans.spans for k in range(lo, hi)]
        expected = [(y * 20 + x) if spans.axis == "row" else (x * 20 + y) for y, x in order]
        assert (keys >> np.uint64(32)).tolist() == expected


class TestSort:
    def test_already_sorted(self):
        k = np.arange(10, dtype=np.uint64)
        sk, sv = sort_pairs(k, np.arange(10))
        assert np.array_equal(sk, k) and sv.tolist() == list(range(10))

    def test_depth_swap(self):
        k = np.array([_keys(3, 2.0), _keys(3, 1.0)], dtype=np.uint64)
        _, v = sort_pairs(k, np.array([0, 1]))
        assert v.tolist() == [1, 0]

    def test_matches_stable_argsort_on_million(self):
        rng = np.random.default_rng(1)
        tiles = rng.integers(0, 1200, 1_000_000).astype(np.uint64)
        depth = rng.uniform(0.2, 20, 1_000_000).astype(np.float32)
        # force many equal keys to exercise stability
        depth[::3] = 1.0
        keys = (tiles << np.uint64(32)) | depth.view(np.uint32).astype(np.uint64)
        vals = np.arange(len(keys), dtype=np.int64)
        sk, sv = radix_sort_pairs(keys, vals)
        order = np.argsort(keys, kind="stable")
        assert np.array_equal(sk, keys[order]) and np.array_equal(sv, vals[order])

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.integers(0, 2**64 - 1), max_size=300))
    def test_property_stable(self, raw):
        keys = np.array(raw, dtype=np.uint64)
        vals = np.arange(len(keys), dtype=np.int64)
        sk, sv = sort_pairs(keys, vals)
        order = np.argsort(keys, kind="stable")
        assert np.array_equal(sk, keys[order]) and np.array_equal(sv, vals[order])


class TestRanges:
    def test_single_tile(self):
        keys = np.array([_keys(5, d) for d in (1.0, 2.0, 3.0)], dtype=np.uint64)
        r = identify_tile_ranges(keys, TileGrid(3, 3, 16))
        assert r[5].tolist() == [0, 3]
        assert np.all(r[np.arange(9) != 5, 0] == r[np.arange(9) != 5, 1])

    def test_empty(self):
        r = identify_tile_ranges(np.zeros(0, dtype=np.uint64), TileGrid(3, 3, 16))
        assert np.all(r[:, 0] == r[:, 1])

    def test_random_against_scan(self):
        rng = np.random.default_rng(2)
        keys = np.sort(rng.integers(0, 50, 5000).astype(np.uint64) << np.uint64(32))
        r = identify_tile_ranges(keys, TileGrid(10, 5, 16))
        tiles = (keys >> np.uint64(32)).astype(np.int64)
        for t in range(50):
            idx = np.flatnonzero(tiles == t)
            if len(idx):
                assert r[t].tolist() == [idx[0], idx[-1] + 1]
            else:
                assert r[t, 0] == r[t, 1]


def _render_batch(batch, cam, background=(0.0, 0.0, 0.0), strategy="accutile"):
    grid = TileGrid.for_camera(cam)
    counts = count_tiles(batch, grid, strategy)
    off, _ = inclusive_sum(counts)
    keys, vals = sort_pairs(*duplicate_with_keys(batch, counts, off, strategy, grid))
    return render(batch, vals, identify_tile_ranges(keys, grid), cam, background)


class TestRender:
    def test_empty_tile_is_background(self):
        cam = _cam(32, 32)
        batch = ProjectedBatch.from_arrays(np.zeros((0, 2)), np.zeros((0, 3)), [], [], np.zeros((0, 3)))
        img = _render_batch(batch, cam, (0.25, 0.5, 0.75))
        assert img.dtype == np.float32
        assert np.all(img == np.float32([0.25, 0.5, 0.75]))

    def test_single_gaussian_at_pixel(self):
        cam = _cam(32, 32)
        batch = ProjectedBatch.from_arrays([[10.0, 12.0]], [[1.0, 0.0, 1.0]], [0.5], [1.0], [[1, 1, 1]])
        img = _render_batch(batch, cam)
        assert img[12, 10].tolist() == [0.5, 0.5, 0.5]

    def test_two_coincident(self):
        cam = _cam(32, 32)
        batch = ProjectedBatch.from_arrays([[10.0, 12.0]] * 2, [[1.0, 0.0, 1.0]] * 2, [0.5, 0.5], [1.0, 2.0],
                                           [[1, 1, 1]] * 2)
        assert _render_batch(batch, cam)[12, 10].tolist() == [0.75, 0.75, 0.75]

    def test_front_to_back_order(self):
        cam = _cam(32, 32)
        batch = ProjectedBatch.from_arrays([[10.0, 12.0]] * 2, [[1.0, 0.0, 1.0]] * 2, [0.5, 0.5], [2.0, 1.0],
                                           [[1, 0, 0], [0, 1, 0]])
        # the green one is nearer
        assert _render_batch(batch, cam)[12, 10].tolist() == [0.25, 0.5, 0.0]

    def test_early_stop(self):
        cam = _cam(16, 16)
        n = 6
        batch = ProjectedBatch.from_arrays([[5.0, 5.0]] * n, [[1.0, 0.0, 1.0]] * n, [0.999] * n,
                                           np.arange(1, n + 1.0), np.ones((n, 3)))
        img = _render_batch(batch, cam, (1.0, 0.0, 0.0))
        # alpha clamps to 0.99; float32 transmittance drops under 1e-4 after two
        expected = np.float32(0.0)
        t = np.float32(1.0)
        used = 0
        for _ in range(n):
            expected += np.float32(0.99) * t
            t *= np.float32(1) - np.float32(0.99)
            used += 1
            if t < np.float32(1e-4):
                break
        assert used == 2
        assert img[5, 5, 1] == expected
        assert img[5, 5, 0] == expected + t

    def test_output_bounded_and_finite(self):
        scene = synth_scene(4, 500)
        cam = _cam(96, 64, 60)
        img, _ = render_full(scene, cam, background=(0.2, 0.2, 0.2))
        assert np.all(np.isfinite(img)) and img.min() >= 0 and img.max() <= 1.0 + 1e-6


class TestFull:
    def test_lossless_snug_vs_accutile(self):
        scene = synth_scene(5, 2000)
        cam = _cam(160, 120, 100)
        a, _ = render_full(scene, cam, "snugbox")
        b, _ = render_full(scene, cam, "accutile")
        assert np.array_equal(a, b)

    def test_baseline_equal_for_low_opacity(self):
        scene = synth_scene(6, 2000, opacity_range=(0.05, 0.35))
        cam = _cam(160, 120, 100)
        assert np.array_equal(render_full(scene, cam, "baseline")[0], render_full(scene, cam, "accutile")[0])

    def test_key_totals_and_determinism(self):
        scene = synth_scene(7, 1000)
        cam = _cam(160, 120, 100)
        r1 = run_pipeline(scene, cam, "accutile")
        r2 = run_pipeline(scene, cam, "accutile")
        assert np.array_equal(r1.image, r2.image)
        batch = project_scene(scene, cam)
        assert r1.n_keys == count_tiles(batch, TileGrid.for_camera(cam), "accutile").sum()

    def test_timings(self):
        scene = synth_scene(8, 200)
        _, t = render_full(scene, _cam(), repeats=2)
        vals = t.as_list()
        assert len(vals) == 7 and all(v >= 0 for v in vals)
        assert t.overall >= max(vals[:-1])
        assert StageTimings.names()[-1] == "overall"
        with pytest.raises(ValueError):
            render_full(scene, _cam(), repeats=0)
