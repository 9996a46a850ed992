import numpy as np
import pytest

from egomtl.errors import ConfigurationError
from egomtl.synthdata import (COLORS, MARGIN, SynthConfig, gaze_error_floor, generate_dataset, generate_sample,
                              load_dataset, nearest_template_verb, noun_appearance, render_frame, save_dataset,
                              split_ids, verb_trajectory)

SMALL = SynthConfig(num_clips=40, frames_per_clip=8, frame_size=16, seed=11)


def test_same_config_is_bitwise_identical():
    a, b = generate_dataset(SMALL), generate_dataset(SMALL)
    assert a.splits == b.splits
    for x, y in zip(a.samples, b.samples):
        assert x.clip.tobytes() == y.clip.tobytes()
        assert x.gaze.points.tobytes() == y.gaze.points.tobytes()
        assert x.hands.points.tobytes() == y.hands.points.tobytes()


def test_sample_depends_only_on_index():
    a = generate_sample(SMALL, 7)
    b = generate_dataset(SMALL).samples[7]
    assert np.array_equal(a.clip, b.clip)


def test_zero_jitter_gaze_equals_centroid():
    ds = generate_dataset(SynthConfig(num_clips=20, coord_jitter_sigma=0.0, seed=2))
    for s in ds.samples:
        np.testing.assert_array_equal(s.gaze.points[:, 0], s.centroid)


def test_class_histogram_within_three_sigma():
    w = (1, 2, 3, 1, 1, 2, 1, 1, 3, 1, 2, 1)
    cfg = SynthConfig(num_clips=1000, frames_per_clip=2, frame_size=16, class_weights=w, seed=4)
    counts = np.bincount([generate_sample(cfg, i).action for i in range(1000)], minlength=12)
    p = np.asarray(w, float) / sum(w)
    band = 3 * np.sqrt(1000 * p * (1 - p))
    assert np.all(np.abs(counts - 1000 * p) <= band)


def test_labels_and_coordinates_are_consistent():
    ds = generate_dataset(SynthConfig(num_clips=100, seed=5))
    for s in ds.samples:
        assert SMALL.valid_action_pairs[s.action] == (s.verb, s.noun)
        assert 0.0 <= s.clip.min() and s.clip.max() <= 1.0 and s.clip.dtype == np.float32
        assert np.abs(s.gaze.points[s.gaze.valid]).max() <= 1
        assert np.abs(s.hands.points).max() <= MARGIN + 1e-9
        assert np.abs(s.centroid).max() <= MARGIN + 1e-9


def test_splits_are_disjoint_with_ratios():
    sp = split_ids([f"c{i}" for i in range(2000)], 0)
    assert [len(sp[k]) for k in ("train", "val", "test")] == [1400, 300, 300]
    assert not (set(sp["train"]) & set(sp["val"])) and not (set(sp["val"]) & set(sp["test"]))


def test_gaze_invalid_fraction_is_respected():
    ds = generate_dataset(SynthConfig(num_clips=200, seed=6))
    frac = 1 - np.mean([s.gaze.valid.mean() for s in ds.samples])
    assert abs(frac - 0.15) < 0.02


def test_verb_is_recoverable_from_centroid_track():
    ds = generate_dataset(SynthConfig(num_clips=300, frames_per_clip=16, seed=7))
    acc = np.mean([nearest_template_verb(s.centroid) == s.verb for s in ds.samples])
    assert acc > 0.95


def test_gaze_error_floor_matches_monte_carlo():
    rng = np.random.default_rng(0)
    d = np.linalg.norm(rng.normal(0, 0.05, (200000, 2)), axis=1).mean()
    assert d == pytest.approx(gaze_error_floor(0.05), rel=0.01)


def test_render_centroid_pixel_has_shape_colour():
    for noun in range(6):
        img = render_frame({"size": 32, "objects": [(noun, (0.0, 0.0), 3.5)], "hands": []})
        assert tuple(img[16, 16]) == noun_appearance(noun)[1]
        assert tuple(img[15, 15]) == noun_appearance(noun)[1]


def test_render_shift_by_k_pixels_moves_x_by_2k_over_w():
    k, W = 3, 32
    base = render_frame({"size": W, "objects": [(0, (0.0, 0.0), 3.5)]})
    moved = render_frame({"size": W, "objects": [(0, (2 * k / W, 0.0), 3.5)]})
    np.testing.assert_array_equal(np.roll(base, k, axis=1)[:, k:], moved[:, k:])


def test_render_centre_is_origin():
    img = render_frame({"size": 16, "objects": [(1, (0.0, 0.0), 2.0)]})
    ys, xs = np.nonzero((img == COLORS[0]).all(axis=-1))
    cx = (xs.mean() + 0.5) * 2 / 16 - 1
    cy = (ys.mean() + 0.5) * 2 / 16 - 1
    assert (cx, cy) == (0.0, 0.0)


def test_render_hands_drawn_on_top():
    img = render_frame({"size": 32, "objects": [(0, (0.0, 0.0), 5.0)], "hands": [(0.0, 0.0)]})
    assert tuple(img[16, 16]) == (1.0, 0.78, 0.62)


def test_verb_trajectories_differ():
    tracks = [verb_trajectory(v, 16)[0] for v in range(5)]
    for i in range(5):
        for j in range(i + 1, 5):
            assert not np.allclose(tracks[i], tracks[j])
    _, r = verb_trajectory(3, 16)
    assert r[-1] > r[0]
    with pytest.raises(ConfigurationError):
        verb_trajectory(7, 16)


@pytest.mark.parametrize("kw", [
    dict(valid_action_pairs=()),
    dict(valid_action_pairs=((0, 0), (0, 0))),
    dict(valid_action_pairs=((0, 0), (1, 1))),
    dict(valid_action_pairs=((9, 0),)),
    dict(frame_size=12),
    dict(class_weights=(1.0,)),
    dict(gaze_invalid_fraction=1.0),
])
def test_impossible_configs_rejected(kw):
    with pytest.raises(ConfigurationError):
        SynthConfig(**kw)


def test_small_frame_sizes_generate():
    for S in (16, 20, 24):
        s = generate_sample(SynthConfig(frame_size=S, seed=1), 0)
        assert s.clip.shape == (16, S, S, 3)


def test_save_load_round_trip(tmp_path):
    ds = generate_dataset(SMALL)
    save_dataset(ds, tmp_path)
    back = load_dataset(tmp_path)
    assert back.config == ds.config and back.splits == ds.splits
    for a, b in zip(ds.samples, back.samples):
        assert np.array_equal(a.clip, b.clip)
        assert np.array_equal(a.gaze.points, b.gaze.points) and np.array_equal(a.gaze.valid, b.gaze.valid)
        assert np.array_equal(a.hands.points, b.hands.points)
        assert (a.verb, a.noun, a.action) == (b.verb, b.noun, b.action)


def test_distractor_motion_flag_changes_only_the_distractor():
    still = generate_sample(SynthConfig(num_clips=4), 1)
    moving = generate_sample(SynthConfig(num_clips=4, distractor_motion=True), 1)
    assert (still.action, still.verb, still.noun) == (moving.action, moving.verb, moving.noun)
    np.testing.assert_array_equal(still.centroid, moving.centroid)
    np.testing.assert_array_equal(still.hands.points, moving.hands.points)
    np.testing.assert_array_equal(still.gaze.points, moving.gaze.points)
    assert not np.array_equal(still.clip, moving.clip)
    none = generate_sample(SynthConfig(num_clips=4, distractor_prob=0.0), 1)
    changed = np.any(none.clip != still.clip, axis=(0, 3))
    assert 0 < changed.sum() < 0.2 * changed.size  # one object's footprint
