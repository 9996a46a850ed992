import math

import numpy as np
import pytest

from egomtl.errors import ConfigurationError, StateError
from egomtl.model import ArchConfig, StageConfig, TaskSet, build_model
from egomtl.synthdata import SynthConfig, generate_dataset
from egomtl.tensor import Tensor
from egomtl.trainer import (EvalOptions, OptimizerState, TrainConfig, augment, bilinear_resize, cyclical_lr,
                            evaluate, fit, make_batch, sample_eval_clip, sample_training_clip,
                            sgd_nesterov_step)

CFG = TrainConfig()


@pytest.mark.parametrize("epoch,expected", [(0, 5e-4), (10, 5e-3), (20, 5e-4), (40, 5e-4), (30, 5e-3)])
def test_lr_anchor_points(epoch, expected):
    assert cyclical_lr(epoch, CFG) == pytest.approx(expected, rel=1e-12)


@pytest.mark.parametrize("epoch", [5, 15, 2.5, 17.5])
def test_lr_triangular_interpolation(epoch):
    pos = epoch % 20
    frac = pos / 10 if pos <= 10 else (20 - pos) / 10
    assert cyclical_lr(epoch, CFG) == pytest.approx(5e-4 + frac * 4.5e-3, rel=1e-12)
    assert cyclical_lr(5, CFG) == pytest.approx(2.75e-3)


def test_train_config_validation():
    with pytest.raises(ConfigurationError):
        TrainConfig(base_lr=1e-2, max_lr=1e-3)
    with pytest.raises(ConfigurationError):
        TrainConfig(clip_len=20, window_len=16)
    with pytest.raises(ConfigurationError):
        TrainConfig(crop_size=40)
    big = TrainConfig.full_scale()
    assert (big.batch_size, big.epochs, big.window_len, big.crop_size) == (32, 60, 32, 224)


def test_nesterov_step_by_hand():
    p = Tensor(np.array([1.0, -2.0]), requires_grad=True)
    p.grad = np.array([0.5, 0.25])
    st = OptimizerState()
    sgd_nesterov_step({"p": p}, st, lr=0.1, momentum=0.9, weight_decay=0.01)
    g = np.array([0.5, 0.25]) + 0.01 * np.array([1.0, -2.0])
    v = g
    expect = np.array([1.0, -2.0]) - 0.1 * (g + 0.9 * v)
    np.testing.assert_allclose(p.data, expect, rtol=1e-6)
    np.testing.assert_allclose(st.velocity["p"], v, rtol=1e-6)
    p2 = expect.copy()
    g2 = np.array([0.5, 0.25]) + 0.01 * p2
    v2 = 0.9 * v + g2
    sgd_nesterov_step({"p": p}, st, lr=0.1, momentum=0.9, weight_decay=0.01)
    np.testing.assert_allclose(p.data, p2 - 0.1 * (g2 + 0.9 * v2), rtol=1e-6)


def test_nesterov_rejects_bad_velocity():
    p = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(StateError):
        sgd_nesterov_step({"p": p}, OptimizerState({"p": np.zeros(2)}), 0.1)


def test_training_clip_sampling():
    rng = np.random.default_rng(0)
    for _ in range(50):
        idx = sample_training_clip(40, 16, 32, rng)
        assert len(idx) == 16 and np.all(np.diff(idx) == 2) and idx[-1] < 40
    short = sample_training_clip(10, 16, 32, rng)
    assert short[0] == 0 and short.max() == 9 and np.all(np.diff(short) >= 0)


def test_eval_clip_is_centred_and_deterministic():
    np.testing.assert_array_equal(sample_eval_clip(64, 16, 32), 16 + 2 * np.arange(16))
    np.testing.assert_array_equal(sample_eval_clip(16, 16, 16), np.arange(16))
    np.testing.assert_array_equal(sample_eval_clip(16, 16, 16), sample_eval_clip(16, 16, 16))


def test_bilinear_resize_constant_and_identity(rng):
    frames = np.full((2, 8, 8, 3), 0.3, np.float32)
    np.testing.assert_allclose(bilinear_resize(frames, 11, 13), 0.3, rtol=1e-6)
    x = rng.random((1, 5, 5, 3)).astype(np.float32)
    assert bilinear_resize(x, 5, 5) is x


def test_augment_eval_centre_crop_maps_points():
    cfg = TrainConfig(train_scale=37, crop_size=32)
    frames = np.zeros((1, 32, 32, 3), np.float32)
    pts = np.array([[[0.0, 0.0], [0.99, 0.0]]])
    val = np.ones((1, 2), bool)
    out, [(new, nv)] = augment(frames, [(pts, val)], cfg, mode="eval")
    assert out.shape == (1, 32, 32, 3)
    u = (0.0 + 1) * 37 / 2 - 2
    assert new[0, 0, 0] == pytest.approx(2 * u / 32 - 1)
    assert nv[0, 0] and not nv[0, 1]


def test_augment_train_is_seeded():
    cfg = TrainConfig()
    frames = np.random.default_rng(0).random((2, 32, 32, 3)).astype(np.float32)
    a, _ = augment(frames, [], cfg, np.random.default_rng(5))
    b, _ = augment(frames, [], cfg, np.random.default_rng(5))
    np.testing.assert_array_equal(a, b)
    with pytest.raises(ConfigurationError):
        augment(frames, [], cfg, mode="test")


@pytest.fixture(scope="module")
def tiny():
    ds = generate_dataset(SynthConfig(num_clips=30, frames_per_clip=8, frame_size=16, seed=3))
    cfg = TrainConfig(batch_size=4, epochs=2, clip_len=4, window_len=8, train_scale=18, crop_size=16,
                      eval_batch_size=8)
    arch = ArchConfig(stages=(StageConfig(4, (1, 2, 2)), StageConfig(8, (2, 2, 2))), input_frames=4,
                      input_size=(16, 16))
    return ds, cfg, arch


def test_make_batch_shapes(tiny):
    ds, cfg, _ = tiny
    b = make_batch(ds.split("train")[:3], cfg, ["A", "V", "G", "H"], np.random.default_rng(0))
    assert b.clips.shape == (3, 3, 4, 16, 16) and b.clips.dtype == np.float32
    assert b.labels["A"].shape == (3,) and b.tracks["G"][0].shape == (3, 4, 1, 2)
    assert b.tracks["H"][1].shape == (3, 4, 2)


def test_fit_logs_and_selects_best_epoch(tiny):
    ds, cfg, arch = tiny
    model = build_model(arch, TaskSet.parse("A+G", ds.config.num_actions, 5, 6), 0)
    records = []
    res = fit(model, ds, cfg, on_record=records.append)
    epochs = [r for r in records if r["type"] == "epoch"]
    steps = [r for r in records if r["type"] == "step"]
    assert len(epochs) == 2
    assert len(steps) == 2 * math.ceil(len(ds.split("train")) / 4)
    assert steps[0]["lr"] == pytest.approx(5e-4) and epochs[1]["lr"] == pytest.approx(cyclical_lr(1, cfg))
    tops = [e["val_main_top1"] for e in epochs]
    assert res.best_metric == max(tops) and res.best_epoch == tops.index(max(tops))
    assert set(res.best_velocity) <= set(res.best_state)


def test_fit_rejects_non_classification_main(tiny):
    ds, cfg, arch = tiny
    model = build_model(arch, TaskSet.parse("G", 12, 5, 6, main_task="G"), 0)
    with pytest.raises(ConfigurationError):
        fit(model, ds, cfg)


def test_evaluate_report_fields(tiny):
    ds, cfg, arch = tiny
    model = build_model(arch, TaskSet.parse("A+V+G", ds.config.num_actions, 5, 6), 0)
    model.forward(make_batch(ds.split("train")[:4], cfg, ["A"], np.random.default_rng(0)).clips)
    rep = evaluate(model, ds.split("val"), cfg, EvalOptions(), split="val")
    assert 0 <= rep.classification["A"].top1 <= rep.classification["A"].top5 <= 1
    assert rep.classification["V"].num_samples == len(ds.split("val"))
    g = rep.coordinate["G"]
    assert g.evaluated_frames + g.skipped_frames == len(ds.split("val")) * 4
    assert 0 <= g.auc <= 1


def test_optimizer_fixed_point_and_single_step():
    p = Tensor(np.array([0.3, -1.2]), requires_grad=True)
    sgd_nesterov_step({"p": p}, OptimizerState(), lr=0.1, weight_decay=0.0)
    np.testing.assert_array_equal(p.data, np.array([0.3, -1.2], np.float32))
    p.grad = np.array([1.0, -2.0], np.float32)
    sgd_nesterov_step({"p": p}, OptimizerState(), lr=0.1, momentum=0.9, weight_decay=0.0)
    np.testing.assert_allclose(p.data, np.array([0.3, -1.2]) - 0.1 * 1.9 * np.array([1.0, -2.0]), rtol=1e-6)


def test_two_steps_on_quadratic_match_scalar_simulation():
    a, lr, mu, wd = 3.0, 0.05, 0.9, 1e-3
    from egomtl.tensor import check_precision
    with check_precision():
        p = Tensor(np.array([2.0]), requires_grad=True)
        st = OptimizerState()
        for _ in range(2):
            p.grad = a * p.data  # d/dp of a p^2 / 2
            sgd_nesterov_step({"p": p}, st, lr, mu, wd)
    x, v = 2.0, 0.0
    for _ in range(2):
        g = a * x + wd * x
        v = mu * v + g
        x = x - lr * (g + mu * v)
    assert p.data[0] == pytest.approx(x, abs=1e-7)


def test_sampling_examples():
    np.testing.assert_array_equal(sample_training_clip(32, 16, 32, np.random.default_rng(0)), np.arange(0, 32, 2))
    np.testing.assert_array_equal(sample_training_clip(8, 16, 32, np.random.default_rng(0)),
                                  [0, 2, 4, 6] + [7] * 12)
    rng = np.random.default_rng(1)
    starts = [sample_training_clip(100, 16, 32, rng)[0] for _ in range(500)]
    assert min(starts) >= 0 and max(starts) <= 68 and len(set(starts)) > 50
    np.testing.assert_array_equal(sample_eval_clip(32, 16, 32), np.arange(0, 32, 2))


def test_augment_identity_config(rng):
    cfg = TrainConfig(clip_len=4, window_len=4, train_scale=16, crop_size=16)
    frames = rng.random((2, 16, 16, 3)).astype(np.float32)
    pts = rng.uniform(-1, 1, (2, 3, 2))
    out, [(new, nv)] = augment(frames, [(pts, np.ones((2, 3), bool))], cfg, rng, "train")
    np.testing.assert_array_equal(out, frames)
    np.testing.assert_allclose(new, pts, atol=1e-12)
    _, [(c, _)] = augment(np.zeros((1, 32, 32, 3), np.float32), [(np.zeros((1, 2)), np.ones(1, bool))],
                          TrainConfig(), mode="eval")
    np.testing.assert_allclose(c, 0, atol=0.05)


def test_random_crop_matches_pixel_space_oracle():
    cfg = TrainConfig()
    W = 32
    pts = np.array([[[0.1, -0.2], [0.5, 0.4]]])
    frames = np.zeros((1, W, W, 3), np.float32)
    rng = np.random.default_rng(9)
    oy, ox = (int(v) for v in np.random.default_rng(9).integers(0, cfg.train_scale - cfg.crop_size + 1, size=2))
    _, [(new, _)] = augment(frames, [(pts, np.ones((1, 2), bool))], cfg, rng, "train")
    for (x, y), (nx, ny) in zip(pts[0], new[0]):
        px, py = (x + 1) / 2 * W, (y + 1) / 2 * W  # pixel units in the source frame
        sx, sy = px * cfg.train_scale / W - ox, py * cfg.train_scale / W - oy
        assert (nx, ny) == (pytest.approx(sx / cfg.crop_size * 2 - 1, abs=1e-6),
                            pytest.approx(sy / cfg.crop_size * 2 - 1, abs=1e-6))


def test_log_lr_is_per_epoch_schedule(tiny):
    ds, cfg, arch = tiny
    cfg3 = TrainConfig(**{**cfg.__dict__, "epochs": 3})
    model = build_model(arch, TaskSet.parse("A", ds.config.num_actions, 5, 6), 1)
    res = fit(model, ds, cfg3)
    for rec in res.log:
        assert rec["lr"] == cyclical_lr(rec["epoch"], cfg3)


def test_shuffle_preserves_sample_multiset(tiny, monkeypatch):
    import egomtl.trainer as trainer
    ds, cfg, arch = tiny
    seen = {}
    real = trainer.make_batch

    def spy(samples, c, names, rng=None, mode="train"):
        if mode == "train":
            seen.setdefault(len(seen), []).extend(s.clip_id for s in samples)
        return real(samples, c, names, rng, mode)

    monkeypatch.setattr(trainer, "make_batch", spy)
    model = build_model(arch, TaskSet.parse("A", ds.config.num_actions, 5, 6), 2)
    fit(model, ds, TrainConfig(**{**cfg.__dict__, "bn_refresh_batches": 0}))
    ids = sorted(s.clip_id for s in ds.split("train"))
    per_epoch = [[], []]
    flat = [cid for k in sorted(seen) for cid in seen[k]]
    per_epoch[0], per_epoch[1] = flat[:len(ids)], flat[len(ids):]
    assert sorted(per_epoch[0]) == ids and sorted(per_epoch[1]) == ids
    assert per_epoch[0] != per_epoch[1]


def test_refresh_batch_stats_tracks_frozen_weights(tiny):
    from egomtl.trainer import refresh_batch_stats
    ds, cfg, arch = tiny
    model = build_model(arch, TaskSet.parse("A", ds.config.num_actions, 5, 6), 0)
    model.forward(make_batch(ds.split("train")[:4], cfg, ["A"], np.random.default_rng(0)).clips)
    params = {k: v.data.copy() for k, v in model.named_parameters().items()}
    before = {k: v.copy() for k, v in model.state_dict().items()}
    refresh_batch_stats(model, ds.split("train"), cfg, 0)
    after = model.state_dict()
    assert all(np.array_equal(params[k], v.data) for k, v in model.named_parameters().items())
    assert any(not np.array_equal(before[k], after[k]) for k in after if k.endswith("running_var"))
    snap = {k: v.copy() for k, v in after.items()}
    model.load_state_dict(before)
    refresh_batch_stats(model, ds.split("train"), cfg, 0)
    assert all(np.array_equal(snap[k], v) for k, v in model.state_dict().items())
    with pytest.raises(ConfigurationError):
        TrainConfig(bn_refresh_batches=-1)


@pytest.mark.slow
def test_desk_action_loss_halves_within_ten_epochs():
    from test_acceptance import desk_run  # shares the cached desk-scale STL run
    curve = desk_run("A", 0)["train_loss_A"]
    assert curve[9] <= 0.5 * curve[0]
