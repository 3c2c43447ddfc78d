from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tilesplat.geometry import CameraModel, Scene, project_scene
from tilesplat.pruning import (
    PruneSchedule,
    ScoreVector,
    build_worklist,
    prune,
    prune_mask,
    render64,
    schedule_counts,
    score_scene,
)
from tilesplat.pipeline import render_full
from tilesplat.scene_io import synth_scene

from helpers import analytic, forward, fd_pairs, relative_error

Q = [1.0, 0.0, 0.0, 0.0]
BLACK = np.zeros(3)


class TestCompositing:
    def test_matches_float32_renderer(self):
        scene = synth_scene(2, 400)
        cam = CameraModel.looking_down_z(60.0, 60.0, 96, 64)
        img32, _ = render_full(scene, cam, background=(0.1, 0.2, 0.3))
        img64 = render64(build_worklist(project_scene(scene, cam), 96, 64), (0.1, 0.2, 0.3))
        assert np.max(np.abs(img64 - img32)) < 1e-4

    def test_single_gaussian(self):
        c, _, _, _, tf = forward(np.array([0.5]), np.array([1.0]), np.ones((1, 3)), BLACK)
        assert c.tolist() == [0.5, 0.5, 0.5] and tf == 0.5
        grad, _, _ = analytic(np.array([0.5]), np.array([1.0]), np.ones((1, 3)), BLACK)
        assert grad.tolist() == [[0.5, 0.5, 0.5]]

    def test_background_term(self):
        # one splat over a white background: dC/dalpha = c - bg
        grad, _, _ = analytic(np.array([0.4]), np.array([1.0]), np.array([[0.2, 0.2, 0.2]]), np.ones(3))
        np.testing.assert_allclose(grad[0], 0.4 * (0.2 - 1.0))

    def test_skipped_entries_have_zero_gradient(self):
        sig = np.array([0.5, 0.001, 0.5])
        grad, _, used = analytic(sig, np.ones(3), np.ones((3, 3)), BLACK)
        assert not used[1] and np.all(grad[1] == 0)

    @pytest.mark.parametrize("seed", range(3))
    def test_finite_differences(self, seed):
        pairs = fd_pairs(seed, 100)
        assert len(pairs) == 100
        worst = max(relative_error(a, n) for a, n in pairs)
        assert worst < 1e-4


class TestScore:
    def test_single_pixel_value(self):
        cam = CameraModel.looking_down_z(10.0, 10.0, 1, 1)
        scene = Scene([[0, 0, 2.0]], [[0.01] * 3], [Q], [0.5], [[1, 1, 1]])
        s = score_scene(scene, [cam])
        assert s.values[0] == pytest.approx(0.75, rel=1e-12)

    def test_culled_everywhere_is_zero(self):
        cam = CameraModel.looking_down_z(50.0, 50.0, 32, 32)
        scene = Scene([[0, 0, 2.0], [0, 0, -2.0]], [[0.1] * 3] * 2, [Q] * 2, [0.5] * 2, [[1, 1, 1]] * 2)
        s = score_scene(scene, [cam, cam])
        assert s.values[0] > 0 and s.values[1] == 0

    def test_nonnegative_and_length(self):
        scene = synth_scene(1, 300)
        cam = CameraModel.looking_down_z(60.0, 60.0, 96, 64)
        s = score_scene(scene, cam)
        assert isinstance(s, ScoreVector)
        assert s.values.shape == (300,) and s.values.dtype == np.float64
        assert s.storage_scalars == len(scene)
        assert np.all(s.values >= 0)

    def test_pose_additivity(self):
        scene = synth_scene(3, 300)
        c1 = CameraModel.looking_down_z(60.0, 60.0, 96, 64)
        w2c = np.hstack([np.eye(3), [[0.5], [-0.2], [0.3]]])
        c2 = CameraModel(w2c, 70.0, 70.0, 96, 64)
        both = score_scene(scene, [c1, c2]).values
        parts = score_scene(scene, [c1]).values + score_scene(scene, [c2]).values
        np.testing.assert_allclose(both, parts, rtol=1e-12, atol=0)

    def test_occluded_gaussian_scores_low(self):
        cam = CameraModel.looking_down_z(50.0, 50.0, 32, 32)
        scene = Scene([[0, 0, 2.0], [0, 0, 4.0]], [[0.2, 0.2, 0.01], [0.05, 0.05, 0.01]], [Q] * 2,
                      [0.99, 0.5], [[1, 1, 1]] * 2)
        s = score_scene(scene, cam).values
        assert s[1] < 1e-3 * s[0]


class TestPrune:
    def test_counts(self):
        scene = synth_scene(0, 10)
        assert len(prune(scene, np.arange(10.0), 0.3)) == 7
        assert len(prune(synth_scene(0, 100), np.arange(100.0), 0.5)) == 50

    def test_equal_scores_remove_last(self):
        assert prune_mask(np.ones(6), 0.5).tolist() == [True] * 3 + [False] * 3

    def test_example(self):
        assert np.flatnonzero(~prune_mask([5, 1, 3, 0], 0.5)).tolist() == [1, 3]

    def test_ratio_zero_identity(self):
        scene = synth_scene(4, 20)
        out = prune(scene, np.random.default_rng(0).random(20), 0.0)
        for f in ("means", "scales", "rotations", "opacities", "colors"):
            assert np.array_equal(getattr(out, f), getattr(scene, f))

    def test_survivor_order(self):
        scene = synth_scene(5, 8)
        out = prune(scene, [3, 1, 4, 1, 5, 9, 2, 6], 0.25)
        np.testing.assert_array_equal(out.means, scene.means[[0, 2, 4, 5, 6, 7]])

    def test_bad_inputs(self):
        with pytest.raises(ValueError):
            prune_mask([1, 2], 1.0)
        with pytest.raises(ValueError):
            prune(synth_scene(0, 3), [1.0, 2.0], 0.5)

    @settings(max_examples=200, deadline=None)
    @given(
        scores=st.lists(st.floats(0, 1e6).filter(lambda v: v == 0 or v > 1e-200), min_size=1, max_size=60),
        ratio=st.floats(0, 0.99),
        exponent=st.integers(-40, 40),
    )
    def test_scale_invariance(self, scores, ratio, exponent):
        s = np.asarray(scores)
        k = 2.0**exponent  # exact, so no rounding-induced ties
        assert np.array_equal(prune_mask(s, ratio), prune_mask(s * k, ratio))

    @given(n=st.integers(0, 500), ratio=st.floats(0, 0.999))
    def test_removed_count(self, n, ratio):
        keep = prune_mask(np.zeros(n), ratio)
        assert n - keep.sum() == int(np.floor(round(ratio * n, 9)))

    def test_float_rounding_guard(self):
        # 0.29 * 100 evaluates to 28.999999999999996 and would floor to 28
        assert 0.29 * 100 < 29
        assert prune_mask(np.arange(100.0), 0.29).sum() == 71
        assert prune_mask(np.arange(100.0), 0.57).sum() == 43


class TestSchedule:
    def test_accounting(self):
        sched = PruneSchedule([(10, 0.8)], [(20, 0.5)], 30)
        assert schedule_counts(1000, sched) == [1000, 200, 100]

    def test_training_timeline(self):
        s = PruneSchedule.from_training_timeline(0.8, 0.3, scale=10, soft_events=3)
        assert s.soft_events == [(600, 0.8), (900, 0.8), (1200, 0.8)]
        assert [it for it, _ in s.hard_events] == [1500, 1800, 2100, 2400, 2700]
        assert s.total_iterations == 3000
        default = PruneSchedule.from_training_timeline()
        assert len(default.soft_events) == 1

    def test_zero_ratios_drop_events(self):
        s = PruneSchedule.from_training_timeline(0.0, 0.0)
        assert s.events() == []

    def test_validation(self):
        with pytest.raises(ValueError):
            PruneSchedule([(5, 0.5), (5, 0.5)], [], 10)
        with pytest.raises(ValueError):
            PruneSchedule([(5, 1.0)], [], 10)
        with pytest.raises(ValueError):
            PruneSchedule([(50, 0.5)], [], 10)

    def test_events_sorted(self):
        s = PruneSchedule([(10, 0.5)], [(5, 0.1), (10, 0.2)], 20)
        assert [(it, kind) for it, _, kind in s.events()] == [(5, "hard"), (10, "soft"), (10, "hard")]
