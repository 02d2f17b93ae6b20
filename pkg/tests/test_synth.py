"""Sprite world generator, dataset persistence and the three frozen-feature probes."""

import math

import numpy as np
import pytest

from constcl.backbone import BackboneConfig
from constcl.regions import Region
from constcl.sampling import SamplingConfig
from constcl.synth import (
    EvalConfig,
    Sprite,
    SpriteWorld,
    backbone_track_features,
    box_iou,
    correspondence_accuracy,
    correspondence_score,
    direction_label,
    generate_dataset,
    generate_sprite_video,
    linear_probe_eval,
    linear_probe_from_features,
    load_dataset,
    model_features,
    render_sprite,
    save_dataset,
    search_grid,
    toy_track_eval,
)
from constcl.train import model_init

SMALL = SpriteWorld(height=20, width=20, sprite_count=3, length=12, size_range=[4, 6])


class TestGenerator:
    def test_deterministic(self):
        a, b = generate_sprite_video(SMALL, 5), generate_sprite_video(SMALL, 5)
        np.testing.assert_array_equal(a.frames, b.frames)
        assert a.boxes == b.boxes and a.label == b.label

    def test_shapes_and_range(self):
        v = generate_sprite_video(SMALL, 1)
        assert v.frames.shape == (12, 20, 20, 3) and v.frames.dtype == np.float32
        assert 0 <= v.frames.min() and v.frames.max() <= 1
        assert all(len(frame) == 3 for frame in v.boxes)

    def test_boxes_track_rendered_pixels(self):
        world = SpriteWorld(height=24, width=24, sprite_count=1, length=10, size_range=[6, 6], shapes=["square"],
                            texture_strength=0.0)
        v = generate_sprite_video(world, 2)
        for t in range(10):
            _, r = v.boxes[t][0]
            diff = np.abs(v.frames[t] - v.frames[t, 0, 0]).sum(-1) > 1e-6
            ys, xs = np.nonzero(diff)
            if ys.size == 0:
                continue
            # a covered pixel's center lies inside the analytic box
            assert (xs + 0.5).min() >= r.xmin * 24 and (xs + 0.5).max() <= r.xmax * 24
            assert (ys + 0.5).min() >= r.ymin * 24 and (ys + 0.5).max() <= r.ymax * 24

    def test_labels_round_robin_and_direction(self):
        world = SpriteWorld(height=20, width=20, sprite_count=3, length=4, size_range=[4, 6], direction_jitter=0.1)
        videos = generate_dataset(world, 8, seed=3)
        assert [v.label for v in videos] == [0, 1, 2, 3, 0, 1, 2, 3]
        for v in videos:
            vy = np.mean([s.vy for s in v.sprites])
            vx = np.mean([s.vx for s in v.sprites])
            assert direction_label(vy, vx, 4) == v.label

    def test_direction_label_bins(self):
        assert direction_label(0.0, 1.0, 4) == 0
        assert direction_label(-1.0, 0.0, 4) == 1  # up on screen
        assert direction_label(0.0, -1.0, 4) == 2
        assert direction_label(1.0, 0.0, 4) == 3
        assert direction_label(-1.0, 1.0, 8) == 1

    def test_sprites_stay_inside(self):
        world = SpriteWorld(height=16, width=16, sprite_count=4, length=60, size_range=[3, 5], speed_range=[1.5, 2])
        v = generate_sprite_video(world, 4)
        for frame in v.boxes:
            for _, r in frame:
                assert 0 <= r.xmin and r.xmax <= 1 and 0 <= r.ymin and r.ymax <= 1

    def test_static_world(self):
        v = generate_sprite_video(SpriteWorld(height=16, width=16, length=5, size_range=[3, 4], static=True), 0)
        np.testing.assert_array_equal(v.frames[0], v.frames[4])

    def test_shared_background(self):
        world = SpriteWorld(height=16, width=16, sprite_count=0, length=2, size_range=[3, 4], background_seed=3)
        a, b = generate_sprite_video(world, 0), generate_sprite_video(world, 1)
        np.testing.assert_array_equal(a.frames[0], b.frames[0])

    def test_infeasible_sizes(self):
        with pytest.raises(ValueError):
            generate_sprite_video(SpriteWorld(height=8, width=8, size_range=[4, 12]), 0)

    def test_render_disc_and_triangle_cover_less_than_square(self):
        counts = {}
        for shape in ("square", "disc", "triangle"):
            canvas = np.zeros((12, 12, 3))
            render_sprite(canvas, Sprite(shape, (1.0, 1.0, 1.0), 8.0, 2.0, 2.0, 0.0, 0.0))
            counts[shape] = int(canvas[..., 0].sum())
        assert counts["square"] == 64 and counts["triangle"] < counts["disc"] < counts["square"]


class TestPersistence:
    def test_round_trip(self, tmp_path):
        videos = generate_dataset(SMALL, 3, seed=0)
        save_dataset(tmp_path, videos, SMALL)
        loaded = load_dataset(tmp_path)
        for a, b in zip(videos, loaded):
            np.testing.assert_array_equal(a.frames, b.frames)
            assert a.label == b.label
            for fa, fb in zip(a.boxes, b.boxes):
                assert fa == fb


class TestCorrespondence:
    def test_identity_oracle_is_perfect(self):
        ids = [0, 1, 2, 3]
        eye = np.eye(4)
        assert correspondence_score(eye, eye[[2, 0, 3, 1]], ids, [2, 0, 3, 1]) == (4, 4)

    def test_random_features_converge_to_chance(self):
        rng = np.random.default_rng(0)
        trials, correct = 1000, 0
        for _ in range(trials):
            c, _ = correspondence_score(rng.normal(size=(4, 8)), rng.normal(size=(4, 8)), range(4), range(4))
            correct += c
        p = 1 / 4
        sigma = math.sqrt(p * (1 - p) / (4 * trials))
        assert abs(correct / (4 * trials) - p) < 3 * sigma * 2  # rows within a trial are correlated

    def test_accuracy_on_small_dataset(self):
        world = SpriteWorld(height=16, width=16, sprite_count=3, length=12, size_range=[4, 5])
        data = generate_dataset(world, 4, seed=1)
        sampling = SamplingConfig(clip_length=4, frame_stride=1, out_size=[16, 16], flip_prob=0.0)

        def pixels(clips):
            # raw pixels as features, temporal stride 1
            return clips.astype(np.float64), clips.mean(axis=(1, 2, 3)), 1

        acc = correspondence_accuracy(pixels, data, sampling, EvalConfig(correspondence_pairs=20))
        assert 0.5 < acc <= 1.0


class TestLinearProbe:
    def test_one_hot_oracle(self):
        labels = np.repeat(np.arange(4), 8)
        owners = np.arange(32) // 2
        assert linear_probe_from_features(np.eye(4)[labels], labels, owners) == 1.0

    def test_single_class(self):
        assert linear_probe_from_features(np.random.default_rng(0).normal(size=(6, 3)), np.zeros(6), np.arange(6)) == 1.0

    def test_random_features_near_chance(self):
        accs = []
        for seed in range(10):
            rng = np.random.default_rng(seed)
            labels = np.repeat(np.arange(4), 16)
            accs.append(linear_probe_from_features(rng.normal(size=(64, 8)), labels, np.arange(64), seed=seed))
        assert abs(np.mean(accs) - 0.25) < 0.1

    def test_never_trains_on_test_video(self):
        # features identify the video, not the class: a probe that leaked videos would score 1.0
        labels = np.repeat(np.arange(4), 8)
        owners = np.arange(32) // 2
        feats = np.eye(16)[owners]
        assert linear_probe_from_features(feats, labels, owners) < 0.6

    def test_eval_runs_frozen(self):
        model = model_init(BackboneConfig(widths=[4, 4, 4, 4], strides=[[1, 1, 1], [2, 2, 2], [1, 1, 1], [1, 1, 1]]))
        data = generate_dataset(SMALL, 8, seed=2)
        sampling = SamplingConfig(clip_length=8, frame_stride=1, out_size=[16, 16])
        before = {k: v.data.copy() for k, v in model.parameters().items()}
        acc = linear_probe_eval(model_features(model), data, sampling, EvalConfig())
        assert 0.0 <= acc <= 1.0
        for k, v in model.parameters().items():
            np.testing.assert_array_equal(v.data, before[k])


def painted_features(video, sampling):
    """Two-channel map per frame: inside / outside the tracked sprite's ground-truth box, at pixel resolution."""
    def fn(clip):
        t_len, h, w = clip.shape[:3]
        out = np.zeros((t_len, h, w, 2))
        out[..., 1] = 1.0
        for t in range(t_len):
            r = video.gt_regions(t * sampling.frame_stride)[0]
            y0, y1 = int(round(r.ymin * h)), int(round(r.ymax * h))
            x0, x1 = int(round(r.xmin * w)), int(round(r.xmax * w))
            out[t, y0:y1, x0:x1] = [1.0, 0.0]
        return out, 1
    return fn


class TestTracking:
    def test_static_world_is_perfect(self):
        world = SpriteWorld(height=16, width=16, sprite_count=2, length=8, size_range=[4, 5], static=True)
        v = generate_sprite_video(world, 0)
        sampling = SamplingConfig(clip_length=8, frame_stride=1)
        init = v.boxes[0][0][1]

        def raw(clip):
            return clip.astype(np.float64), 1

        assert toy_track_eval(raw, v, init, sampling) == pytest.approx(1.0)

    def test_oracle_features_reach_grid_ceiling(self):
        world = SpriteWorld(height=32, width=32, sprite_count=1, length=16, size_range=[8, 8], shapes=["square"],
                            speed_range=[1.0, 1.0])
        v = generate_sprite_video(world, 3)
        sampling = SamplingConfig(clip_length=16, frame_stride=1)
        init = v.boxes[0][0][1]
        ceiling = np.mean([max(box_iou(c, v.gt_regions(t)[0]) for c in search_grid(init, 16, t)) for t in range(1, 16)])
        iou = toy_track_eval(painted_features(v, sampling), v, init, sampling, grid=16)
        assert ceiling - 0.05 <= iou <= ceiling + 1e-9

    def test_random_features_below_ceiling(self):
        world = SpriteWorld(height=32, width=32, sprite_count=1, length=16, size_range=[8, 8], speed_range=[1.0, 1.0])
        v = generate_sprite_video(world, 4)
        sampling = SamplingConfig(clip_length=16, frame_stride=1)
        init = v.boxes[0][0][1]
        rng = np.random.default_rng(0)
        oracle = toy_track_eval(painted_features(v, sampling), v, init, sampling)
        rand = toy_track_eval(lambda clip: (rng.normal(size=(16, 8, 8, 4)), 1), v, init, sampling)
        assert rand < oracle

    def test_init_must_match_ground_truth(self):
        v = generate_sprite_video(SMALL, 0)
        with pytest.raises(ValueError):
            toy_track_eval(lambda c: (np.zeros((1, 2, 2, 1)), 1), v, Region(0, 0.0, 0.0, 0.01, 0.01),
                           SamplingConfig(clip_length=4))

    def test_search_grid_contains_init(self):
        init = Region(0, 0.123, 0.2, 0.4, 0.5)
        grid = search_grid(init, 8, 2)
        assert Region(2, init.xmin, init.ymin, init.xmax, init.ymax) in grid
        assert all(abs(c.width - init.width) < 1e-12 and c.t == 2 for c in grid)

    def test_backbone_tracker_runs(self):
        model = model_init(BackboneConfig(widths=[4, 4, 4, 4], strides=[[1, 1, 1], [2, 2, 2], [1, 1, 1], [1, 1, 1]]))
        v = generate_sprite_video(SMALL, 1)
        iou = toy_track_eval(backbone_track_features(model), v, v.boxes[0][0][1], SamplingConfig(clip_length=8,
                                                                                               frame_stride=1))
        assert 0.0 <= iou <= 1.0

    def test_box_iou(self):
        a = Region(0, 0, 0, 0.5, 0.5)
        assert box_iou(a, a) == 1.0
        assert box_iou(a, Region(0, 0.25, 0, 0.75, 0.5)) == pytest.approx(1 / 3)
        assert box_iou(a, Region(0, 0.6, 0.6, 1, 1)) == 0.0
