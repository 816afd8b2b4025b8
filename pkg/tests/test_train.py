import csv
import io
import math

import numpy as np
import pytest

from oracles import adam_scalar
from vinet.data import generate_synthetic, load_dataset, sample_clip
from vinet.model import ModelConfig, ViNet
from vinet.train import (Adam, AdamState, MetricsConfig, TrainConfig, TrainingDiverged, adam_step,
                         clip_pool, evaluate, predict_clip, predict_video, train)


# -------------------------------------------------------------------- Adam
def test_adam_first_step_moves_by_lr():
    cfg = TrainConfig(lr=1e-3)
    new, state = adam_step({"p": np.array(1.0)}, {"p": np.array(1.0)}, AdamState(), cfg)
    assert 1.0 - new["p"] == pytest.approx(1e-3, rel=1e-6)
    assert state.step == 1


def test_adam_matches_scalar_reference_over_100_steps():
    cfg = TrainConfig(lr=1e-2)
    grads = np.random.default_rng(0).standard_normal(100)
    p, state = {"p": np.array(0.3)}, AdamState()
    for g in grads:
        p, state = adam_step(p, {"p": np.array(g)}, state, cfg)
    assert abs(float(p["p"]) - adam_scalar(0.3, grads, 1e-2)) < 1e-12


def test_zero_gradient_keeps_params_and_decays_moments():
    cfg = TrainConfig()
    p, state = adam_step({"w": np.ones(3)}, {"w": np.ones(3)}, AdamState(), cfg)
    m_before = state.m["w"].copy()
    frozen, state = adam_step(p, {"w": np.zeros(3)}, state, cfg)
    np.testing.assert_allclose(state.m["w"], 0.9 * m_before)
    fresh, _ = adam_step({"w": np.ones(3)}, {"w": np.zeros(3)}, AdamState(), cfg)
    np.testing.assert_array_equal(fresh["w"], np.ones(3))


def test_adam_shape_and_name_checks():
    with pytest.raises(ValueError, match="shape"):
        adam_step({"w": np.ones(3)}, {"w": np.ones(2)}, AdamState(), TrainConfig())
    with pytest.raises(ValueError, match="names"):
        adam_step({"w": np.ones(3)}, {"v": np.ones(3)}, AdamState(), TrainConfig())


@pytest.mark.parametrize("kwargs", [{"lr": -1.0}, {"batch_size": 0}, {"patience": 0},
                                    {"beta1": 1.0}, {"eps": 0.0}])
def test_train_config_validation(kwargs):
    with pytest.raises(ValueError):
        TrainConfig(**kwargs)


# ----------------------------------------------------------------- training
@pytest.fixture(scope="module")
def pool(videos):
    return clip_pool(videos, ModelConfig.toy(), 2, 3.0, seed=0)


def test_zero_lr_leaves_weights_unchanged(pool):
    model = ViNet(ModelConfig.toy())
    before = model.state_dict()
    train(model, pool, None, TrainConfig(lr=0.0, max_steps=3, batch_size=2))
    assert all(np.array_equal(before[k], v) for k, v in model.state_dict().items())


def test_single_batch_loss_decreases(pool):
    model = ViNet(ModelConfig.toy())
    result = train(model, pool, None, TrainConfig(max_steps=60, batch_size=2))
    losses = np.array([c[1] for c in result.curve])
    assert np.all(np.diff(losses[:50]) < 0)


def test_same_seed_gives_identical_curves(videos):
    cfg = TrainConfig(max_steps=6, batch_size=2, val_interval=3, seed=4)
    a = train(ViNet(ModelConfig.toy()), videos[:2], videos[2:], cfg)
    b = train(ViNet(ModelConfig.toy()), videos[:2], videos[2:], cfg)
    assert a.curve_text() == b.curve_text()


def test_early_stopping_keeps_best_validation_weights(videos, tmp_path):
    model = ViNet(ModelConfig.toy())
    cfg = TrainConfig(max_steps=40, batch_size=2, val_interval=2, patience=2, lr=3e-3)
    result = train(model, videos[:2], videos[2:], cfg, out_dir=tmp_path)
    vals = [v for _, _, v in result.curve if not math.isnan(v)]
    assert result.best_val_cc == max(vals)
    if result.stopped_early:
        assert vals.index(max(vals)) == len(vals) - 1 - cfg.patience
    from vinet.train import mean_cc, validation_clips
    clips = validation_clips(videos[2:], model.config, cfg.density_sigma)
    assert mean_cc(model, clips) == pytest.approx(result.best_val_cc, abs=1e-12)
    lines = (tmp_path / "loss_curve.txt").read_text().splitlines()
    assert lines[0] == "step kldiv val_cc" and len(lines) == result.steps + 1
    assert (tmp_path / "best.vnt").exists()


def test_non_finite_loss_aborts_with_state_dump(pool, tmp_path):
    model = ViNet(ModelConfig.toy())
    with pytest.raises(TrainingDiverged) as info:
        train(model, pool, None, TrainConfig(lr=1e30, max_steps=20, batch_size=2), tmp_path)
    assert info.value.dump_path is not None and info.value.dump_path.exists()
    assert (tmp_path / "nan_dump.vnt.json").exists()


def test_empty_training_set_is_rejected():
    with pytest.raises(ValueError):
        train(ViNet(ModelConfig.toy()), [], None, TrainConfig())


def test_adam_wrapper_updates_module_in_place(pool):
    model = ViNet(ModelConfig.toy())
    opt = Adam(model.named_parameters(), TrainConfig(lr=0.1))
    before = model.state_dict()
    from vinet.train import batch_loss
    loss, _ = batch_loss(model, pool)
    loss.backward()
    opt.step()
    assert any(not np.array_equal(before[k], v) for k, v in model.state_dict().items())


# ---------------------------------------------------------------- inference
def test_sliding_window_is_bit_identical_to_standalone(videos):
    model = ViNet(ModelConfig.toy(), seed=1)
    sweep = predict_video(model, videos[0])
    assert len(sweep) == videos[0].n_frames
    for t in (0, 4, 9):
        alone = predict_clip(model, sample_clip(videos[0], t, model.config))
        assert np.array_equal(alone, sweep[t])


def test_one_frame_video_gives_one_map(tmp_path):
    generate_synthetic(tmp_path, 1, 1, 32, 32, seed=0)
    video = load_dataset(tmp_path)[0]
    model = ViNet(ModelConfig.toy())
    maps = predict_video(model, video)
    assert len(maps) == 1 and maps[0].shape == (32, 32)


def test_predict_video_rejects_config_mismatch(videos):
    with pytest.raises(ValueError):
        predict_video(ViNet(ModelConfig.toy()), videos[0], ModelConfig.toy(clip_len=16))


# --------------------------------------------------------------- evaluation
class DensityOracle:
    def __init__(self, config):
        self.config = config

    def predict_clip(self, sample):
        return sample.density


class Constant:
    def __init__(self, config):
        self.config = config

    def predict_clip(self, sample):
        return np.ones(sample.frames.shape[-2:])


def test_perfect_oracle_scores(tmp_path):
    generate_synthetic(tmp_path, 2, 5, 32, 32, seed=0, fixations_per_frame=1)
    result = evaluate(DensityOracle(ModelConfig.toy()), load_dataset(tmp_path),
                      MetricsConfig(n_splits=5))
    assert result.summary["cc"] == pytest.approx(1.0, abs=1e-12)
    assert result.summary["sim"] == pytest.approx(1.0, abs=1e-12)
    assert result.summary["auc_judd"] == 1.0


def test_constant_model_scores(videos):
    result = evaluate(Constant(ModelConfig.toy()), videos, MetricsConfig(n_splits=5))
    assert result.summary["auc_judd"] == 0.5
    assert result.summary["nss"] == 0.0
    assert result.summary["sauc"] == 0.5


def test_summary_is_mean_of_frame_rows_then_videos(videos):
    result = evaluate(ViNet(ModelConfig.toy(), seed=2), videos, MetricsConfig(n_splits=5))
    rows = list(csv.DictReader(io.StringIO(result.frame_csv())))
    assert len(rows) == sum(v.n_frames for v in videos)
    per_video = {}
    for r in rows:
        per_video.setdefault(r["video_id"], []).append(float(r["cc"]))
    hand = np.mean([np.mean(v) for v in per_video.values()])
    assert result.summary["cc"] == pytest.approx(hand, abs=1e-9)
    summary = list(csv.reader(io.StringIO(result.summary_csv())))
    assert summary[0][:2] == ["video_id", "cc"] and summary[-1][0] == "mean"
