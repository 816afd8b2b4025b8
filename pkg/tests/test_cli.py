import json

import numpy as np
from PIL import Image

from vinet.cli import run
from vinet.data import load_dataset
from vinet.model import ModelConfig, ViNet
from vinet.train import predict_video


def test_shapes_paper_preset(capsys):
    assert run(["shapes", "--preset", "paper"]) == 0
    out = capsys.readouterr().out
    assert "input = 3×32×224×384" in out
    assert "X4 = 1024×4×7×12" in out


def test_unknown_flag_and_command_exit_1(capsys):
    assert run(["shapes", "--frobnicate"]) == 1
    assert "usage" in capsys.readouterr().err
    assert run(["teleport"]) == 1


def test_invalid_config_values_exit_1(tmp_path, capsys):
    assert run(["shapes", "--clip-size", "12"]) == 1
    assert run(["shapes", "--set", "nonsense=1"]) == 1
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"height": 50}))
    assert run(["shapes", "--config", str(cfg)]) == 1
    assert "multiple of 32" in capsys.readouterr().err


def test_overrides_win_over_config_file(tmp_path, capsys):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"clip_len": 16, "width": 64}))
    assert run(["shapes", "--config", str(cfg), "--clip-size", "24"]) == 0
    out = capsys.readouterr().out
    assert "input = 3×24×32×64" in out


def test_missing_dataset_is_a_runtime_error(tmp_path):
    assert run(["eval", str(tmp_path / "missing"), "--out", str(tmp_path / "o")]) == 2


def test_gradcheck_ops_passes(tmp_path):
    assert run(["gradcheck", "--seed", "0", "--ops-only", "--out", str(tmp_path)]) == 0
    assert "worst relative error" in (tmp_path / "gradcheck.txt").read_text()


def test_synth_train_infer_eval(tmp_path):
    data, run_dir = tmp_path / "data", tmp_path / "run"
    assert run(["synth", "--out", str(data), "--videos", "2", "--frames", "5", "--seed", "1"]) == 0
    assert run(["train", str(data), "--steps", "4", "--set", "batch_size=2",
                "--set", "val_interval=2", "--out", str(run_dir)]) == 0
    ckpt = run_dir / "best.vnt"
    assert ckpt.exists() and (run_dir / "loss_curve.txt").exists()

    maps_dir = tmp_path / "maps"
    assert run(["infer", str(data), "--checkpoint", str(ckpt), "--out", str(maps_dir)]) == 0
    videos = load_dataset(data)
    model = ViNet(ModelConfig.toy())
    from vinet.checkpoint import load_checkpoint
    load_checkpoint(ckpt, model)
    for v in videos:
        pngs = sorted((maps_dir / v.id).glob("*.png"))
        assert len(pngs) == v.n_frames
        ref = predict_video(model, v)[3]
        img = np.asarray(Image.open(pngs[3]))
        assert img.dtype == np.uint8 and img.shape == (32, 32)
        np.testing.assert_array_equal(img, np.round(255 * ref / ref.max()).astype(np.uint8))

    ev = tmp_path / "ev"
    assert run(["eval", str(data), "--checkpoint", str(ckpt), "--out", str(ev),
                "--splits", "5"]) == 0
    assert (ev / "metrics_frames.csv").read_text().startswith("video_id,frame_id,cc,sim,auc_judd")


def test_probe_audio_control(tmp_path, capsys):
    assert run(["probe-audio", "--steps", "0", "--videos", "2", "--frames", "3",
                "--out", str(tmp_path)]) == 0
    rows = (tmp_path / "probe_audio.csv").read_text().splitlines()
    assert rows[1:] == ["zeroed_audio,1.000000,1.000000", "random_audio,1.000000,1.000000"]


def test_ablate_clip_rejects_bad_sizes(tmp_path):
    assert run(["ablate-clip", "8,x", "--out", str(tmp_path)]) == 1
    assert run(["ablate-clip", "8,12", "--out", str(tmp_path)]) == 1
