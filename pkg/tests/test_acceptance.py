"""End-to-end acceptance checks, one test per criterion.

Each test records a PASS/FAIL line; the lines are printed in the terminal
summary (and directly when this file is run as a script).
"""

import hashlib
import math
import time

import numpy as np
import pytest

from oracles import (auc_judd_loop, bilinear_triple_loop, cc_loop, kldiv_loop, nss_loop,
                     sauc_expectation, sim_loop)
from vinet.checkpoint import load_checkpoint, payload_digest, save_checkpoint
from vinet.cli import run
from vinet.data import generate_synthetic, load_dataset, sample_clip
from vinet.experiments import ablate_hierarchy, probe_audio
from vinet.fusion import BilinearFusionParams, bilinear_form
from vinet.metrics import auc_judd, cc, kldiv, normalize_distribution, nss, sauc, sim
from vinet.model import ModelConfig, ViNet, pyramid_shapes
from vinet.selfcheck import gradcheck_suite
from vinet.tensor import Tensor, precision
from vinet.train import TrainConfig, clip_pool, predict_clip, predict_video, train

RESULTS: list[str] = []


def record(n: int, title: str, ok: bool, detail: str) -> None:
    line = f"[{'PASS' if ok else 'FAIL'}] criterion {n:2d} {title}: {detail}"
    RESULTS.append(line)
    print(line)
    assert ok, line


def _tree_digest(root):
    h = hashlib.sha256()
    for p in sorted(root.rglob("*")):
        if p.is_file():
            h.update(str(p.relative_to(root)).encode())
            h.update(p.read_bytes())
    return h.hexdigest()


def test_c01_shape_contract(capsys):
    start = time.perf_counter()
    code = run(["shapes", "--preset", "paper"])
    out = capsys.readouterr().out
    toy_ok = all(
        pyramid_shapes(ModelConfig.toy(clip_len=t, height=h, width=w))["x4"][1:]
        == (t // 8, h // 32, w // 32)
        for t, h, w in [(8, 32, 32), (8, 32, 64), (16, 64, 96), (48, 32, 32)])
    elapsed = time.perf_counter() - start
    ok = code == 0 and "X4 = 1024×4×7×12" in out and "input = 3×32×224×384" in out
    record(1, "shape contract", ok and toy_ok and elapsed < 1.0,
           f"full-size preset X4 line present={ok}, toy /8 /32 rule={toy_ok}, {elapsed:.2f}s (< 1 s)")


def test_c02_gradient_suite():
    start = time.perf_counter()
    worst = {seed: gradcheck_suite(seed).worst for seed in range(5)}
    elapsed = time.perf_counter() - start
    top = max(worst.values())
    record(2, "gradient suite", top < 1e-4 and elapsed < 120,
           f"max rel err {top:.2e} over seeds 0-4 (< 1e-4), {elapsed:.1f}s (< 120 s)")


def test_c03_metric_oracles():
    start = time.perf_counter()
    rng = np.random.default_rng(2024)
    worst = 0.0
    for _ in range(200):
        p = rng.random((8, 8)) + 1e-3
        q = rng.random((8, 8)) ** 2 + 1e-3
        flat = rng.choice(64, size=int(rng.integers(1, 10)), replace=False)
        fix = np.stack([flat % 8, flat // 8], axis=1)
        pn, qn = normalize_distribution(p), normalize_distribution(q)
        pairs = [(cc(p, q), cc_loop(p, q)), (sim(pn, qn), sim_loop(p, q)),
                 (kldiv(pn, qn), kldiv_loop(pn, qn, 1e-7)), (nss(p, fix), nss_loop(p, fix)),
                 (auc_judd(p, fix), auc_judd_loop(p, fix))]
        worst = max(worst, max(abs(a - b) for a, b in pairs))
    n_splits, within = 400, 0
    trials = 10
    for trial in range(trials):
        p = rng.random((6, 6))
        fix = rng.integers(0, 6, size=(int(rng.integers(1, 4)), 2))
        pool = rng.integers(0, 6, size=(int(rng.integers(1, 5)), 2))
        mean, std = sauc_expectation(p, fix, pool)
        got = sauc(p, fix, [pool], n_splits=n_splits, rng_seed=trial)
        within += abs(got - mean) <= 2 * std / math.sqrt(n_splits) + 1e-12
    elapsed = time.perf_counter() - start
    record(3, "metric oracles", worst < 1e-10 and within == trials and elapsed < 60,
           f"max |metric - oracle| {worst:.1e} on 200 maps (< 1e-10); sauc within 2 SE "
           f"{within}/{trials}; {elapsed:.1f}s (< 60 s)")


def test_c04_kldiv_hand_values():
    a = kldiv(np.array([[0.9, 0.1]]), np.array([[0.5, 0.5]]), eps=1e-12)
    b = kldiv(np.full((2, 2), 0.25), np.array([[1.0, 0.0], [0.0, 0.0]]), eps=1e-12)
    ok = abs(a - 0.5108) <= 1e-3 and abs(b - math.log(4)) <= 1e-3
    record(4, "kldiv hand values", ok, f"two-bin {a:.4f} (0.5108), one-hot vs uniform "
                                       f"{b:.4f} (ln 4 = {math.log(4):.4f})")


def test_c05_overfit(tmp_path):
    start = time.perf_counter()
    generate_synthetic(tmp_path, 4, 16, 32, 32, audio_informative=True, seed=0)
    config = ModelConfig.toy()
    clips = clip_pool(load_dataset(tmp_path), config, 4, 3.0, seed=0)
    model = ViNet(config, seed=0)
    state = {"kl": math.inf, "cc": -1.0}

    def check(step, _loss):
        if step % 100:
            return False
        preds = [predict_clip(model, c) for c in clips]
        state["kl"] = float(np.mean([kldiv(normalize_distribution(p), c.density)
                                     for p, c in zip(preds, clips)]))
        state["cc"] = float(np.mean([cc(p, c.density) for p, c in zip(preds, clips)]))
        state["step"] = step
        return state["kl"] < 0.05 and state["cc"] > 0.95

    train(model, clips, None, TrainConfig(lr=1e-4, batch_size=4, max_steps=2000, seed=0),
          callback=check)
    elapsed = time.perf_counter() - start
    ok = state["kl"] < 0.05 and state["cc"] > 0.95 and elapsed < 600
    record(5, "overfit", ok, f"step {state.get('step')}: train kldiv {state['kl']:.4f} (< 0.05), "
                             f"train CC {state['cc']:.4f} (> 0.95), {elapsed:.0f}s (< 600 s)")


def test_c06_hierarchy_trend(tmp_path):
    wins, detail = 0, []
    for seed in range(5):
        root = tmp_path / f"s{seed}"
        generate_synthetic(root, 6, 16, 32, 32, audio_informative=True, seed=seed)
        videos = load_dataset(root)
        table = ablate_hierarchy(ModelConfig.toy(), videos[:4], videos[4:],
                                 TrainConfig(batch_size=4, max_steps=300, seed=seed))
        without, with_ = (r["cc"] for r in table.rows)
        wins += with_ >= without
        detail.append(f"{with_:.3f}/{without:.3f}")
    record(6, "hierarchy trend", wins >= 3,
           f"with >= without in {wins}/5 seeds (need >= 3); val CC with/without: {', '.join(detail)}")


def test_c07_clip_ablation_format(tmp_path, capsys):
    outs = []
    for k in range(2):
        code = run(["ablate-clip", "8,16,32,48", "--steps", "2", "--videos", "3", "--frames", "6",
                    "--seed", "0", "--out", str(tmp_path / f"r{k}")])
        capsys.readouterr()
        outs.append((code, (tmp_path / f"r{k}" / "ablate_clip.csv").read_bytes()))
    lines = outs[0][1].decode().splitlines()
    ok = (all(c == 0 for c, _ in outs) and lines[0] == "clip_size,cc,sim,nss"
          and [l.split(",")[0] for l in lines[1:]] == ["8", "16", "32", "48"])
    same = outs[0][1] == outs[1][1]
    record(7, "clip ablation format", ok and same,
           f"{len(lines) - 1} rows with cc/sim/nss={ok}, rerun byte-identical={same}")


def test_c08_sliding_window(tmp_path):
    generate_synthetic(tmp_path, 1, 11, 32, 32, seed=3)
    video = load_dataset(tmp_path)[0]
    model = ViNet(ModelConfig.toy(), seed=5)
    sweep = predict_video(model, video)
    identical = all(np.array_equal(predict_clip(model, sample_clip(video, t, model.config)),
                                   sweep[t]) for t in range(video.n_frames))
    first = sample_clip(video, 0, model.config).frames
    padded = all(np.array_equal(first[:, k], video.frame(0)) for k in range(first.shape[1]))
    record(8, "sliding window", identical and len(sweep) == video.n_frames and padded,
           f"standalone == sweep bit-exact={identical}, {len(sweep)} maps for "
           f"{video.n_frames} frames, frame-0 clip repeats frame 0 {first.shape[1]}x={padded}")


def test_c09_audio_probe(tmp_path):
    generate_synthetic(tmp_path, 4, 12, 32, 32, audio_informative=True, seed=1)
    videos = load_dataset(tmp_path)
    control = probe_audio(ViNet(ModelConfig.toy()), videos, seed=0).summary()
    control_ok = all(v == (1.0, 1.0) for v in control.values())
    model = ViNet(ModelConfig.toy(fusion_mode="bilinear"), seed=1)
    train(model, videos, None, TrainConfig(batch_size=4, max_steps=100, seed=1))
    report = probe_audio(model, videos, seed=0)
    fused = report.summary()
    header = report.to_csv().splitlines()[0]
    fused_ok = all(c < 1.0 for c, _ in fused.values())
    record(9, "audio probe", control_ok and fused_ok and header == "method,cc,sim",
           f"fusion-free pairs {control} (exactly 1); trained AViNet pair CC "
           f"zeroed {fused['zeroed_audio'][0]:.6f}, random {fused['random_audio'][0]:.6f} (< 1)")


def test_c10_bilinear_oracle():
    rng = np.random.default_rng(10)
    worst = 0.0
    for _ in range(100):
        C, x0, x, y0 = (int(v) for v in rng.integers(1, 6, size=4))
        x1, x2 = rng.standard_normal((C, x0)), rng.standard_normal((C, y0))
        A, b = rng.standard_normal((x0, x, y0)), rng.standard_normal((x, 1))
        with precision(np.float64):
            got = bilinear_form(Tensor(x1), Tensor(x2), BilinearFusionParams(Tensor(A), Tensor(b)))
        worst = max(worst, float(np.abs(got.numpy() - bilinear_triple_loop(x1, x2, A, b)).max()))
    with precision(np.float64):
        scalar = bilinear_form(Tensor([[2.0]]), Tensor([[3.0]]),
                               BilinearFusionParams(Tensor([[[0.5]]]), Tensor([[1.0]]))).item()
    record(10, "bilinear fusion oracle", worst < 1e-6 and scalar == 4.0,
           f"max |form - triple loop| {worst:.1e} on 100 instances (< 1e-6); scalar case {scalar}")


def test_c11_persistence(tmp_path):
    model = ViNet(ModelConfig.toy(fusion_mode="concat"), seed=11)
    save_checkpoint(model, tmp_path / "m.vnt", {"step": 0, "seed": 11})
    restored = ViNet(ModelConfig.toy(fusion_mode="concat"), seed=99)
    load_checkpoint(tmp_path / "m.vnt", restored)
    ck_ok = payload_digest(model.state_dict()) == payload_digest(restored.state_dict())
    generate_synthetic(tmp_path / "a", 2, 5, 32, 32, seed=7)
    generate_synthetic(tmp_path / "b", 2, 5, 32, 32, seed=7)
    data_ok = _tree_digest(tmp_path / "a") == _tree_digest(tmp_path / "b")
    record(11, "persistence", ck_ok and data_ok,
           f"checkpoint payload hash equal={ck_ok}, synthetic regeneration byte-identical={data_ok}")


if __name__ == "__main__":
    raise SystemExit(pytest.main([__file__, "-q", "-s"]))
