"""Clip-length and hierarchy ablations and the audio-agnosticism probe."""

from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .data import ClipSample, VideoRecord, sample_clip
from .fusion import zero_audio
from .metrics import cc, nss, normalize_distribution, sim
from .model import ModelConfig, ViNet
from .train import TrainConfig, audio_input, predict_clip, predict_video, train

log = logging.getLogger(__name__)


def _csv(header: Sequence[str], rows: Sequence[Sequence]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([f"{v:.6f}" if isinstance(v, float) else v for v in row])
    return buf.getvalue()


def score_videos(model, videos: Sequence[VideoRecord], sigma: float) -> dict[str, float]:
    """Mean CC, SIM and NSS over frames with fixations, then over videos."""
    per_video = []
    for video in videos:
        scores = []
        for t, pred in enumerate(predict_video(model, video, model.config, sigma)):
            s = sample_clip(video, t, model.config, sigma)
            if s.density is None:
                continue
            scores.append((float(cc(pred, s.density)),
                           sim(normalize_distribution(pred), s.density),
                           float(nss(pred, s.fixations))))
        if scores:
            per_video.append(np.mean(scores, axis=0))
    if not per_video:
        raise ValueError("no frame with fixations to score")
    m = np.mean(per_video, axis=0)
    return {"cc": float(m[0]), "sim": float(m[1]), "nss": float(m[2])}


@dataclass
class AblationTable:
    key: str
    rows: list = field(default_factory=list)  # dicts with key, cc, sim, nss (+ extras)
    extra: tuple = ()

    def to_csv(self) -> str:
        cols = (self.key, "cc", "sim", "nss") + self.extra
        return _csv(cols, [[r[c] for c in cols] for r in self.rows])


def _train_and_score(config: ModelConfig, train_videos, val_videos, tcfg: TrainConfig,
                     model_seed: int) -> tuple[ViNet, dict]:
    model = ViNet(config, seed=model_seed)
    train(model, train_videos, None, tcfg)
    return model, score_videos(model, val_videos, tcfg.density_sigma)


def ablate_clip_size(sizes: Sequence[int], base: ModelConfig, train_videos: Sequence[VideoRecord],
                     val_videos: Sequence[VideoRecord], tcfg: TrainConfig) -> AblationTable:
    """Train one model per clip length with the same seeds and step budget."""
    configs = [base.replace(clip_len=int(s)) for s in sizes]  # validates every size up front
    table = AblationTable("clip_size")
    for size, config in zip(sizes, configs):
        _, scores = _train_and_score(config, train_videos, val_videos, tcfg, tcfg.seed)
        log.info("clip %d: %s", size, scores)
        table.rows.append({"clip_size": int(size), **scores})
    return table


def ablate_hierarchy(base: ModelConfig, train_videos: Sequence[VideoRecord],
                     val_videos: Sequence[VideoRecord], tcfg: TrainConfig) -> AblationTable:
    """Two trainings differing only in whether the decoder uses encoder skip connections."""
    table = AblationTable("variant", extra=("params",))
    for label, flag in (("Without Hierarchy", False), ("With Hierarchy", True)):
        model, scores = _train_and_score(base.replace(use_hierarchy=flag), train_videos,
                                         val_videos, tcfg, tcfg.seed)
        table.rows.append({"variant": label, **scores, "params": model.num_parameters()})
    return table


# --------------------------------------------------------------------- probe
PROBE_METHODS = ("zeroed_audio", "random_audio")


@dataclass
class ProbeReport:
    per_video: dict  # video id -> {method: (cc, sim)}
    partner: dict  # video id -> id of the video whose audio was swapped in

    def summary(self) -> dict[str, tuple[float, float]]:
        out = {}
        for method in PROBE_METHODS:
            vals = np.array([v[method] for v in self.per_video.values()])
            out[method] = (float(vals[:, 0].mean()), float(vals[:, 1].mean()))
        return out

    def to_csv(self) -> str:
        return _csv(("method", "cc", "sim"), [(m, c, s) for m, (c, s) in self.summary().items()])

    def detail_csv(self) -> str:
        rows = [(vid, self.partner[vid], m, *self.per_video[vid][m])
                for vid in self.per_video for m in PROBE_METHODS]
        return _csv(("video_id", "audio_from", "method", "cc", "sim"), rows)


def _pair(a: np.ndarray, b: np.ndarray) -> tuple[float, float]:
    return float(cc(a, b)), sim(normalize_distribution(a), normalize_distribution(b))


def probe_audio(model: ViNet, videos: Sequence[VideoRecord], seed: int = 0,
                sigma: float = 3.0) -> ProbeReport:
    """Compare predictions under true, zeroed and swapped-in audio.

    Pair scores are averaged over each video's frames, then reported per
    video. The swap partner for each video is drawn uniformly from the
    other videos; its clip ending at the same (wrapped) frame supplies the audio.
    """
    if len(videos) < 2:
        raise ValueError("the audio probe needs at least two videos")
    fused = model.fusion is not None
    if fused:
        missing = [v.id for v in videos if v.waveform is None and v.audio_features is None]
        if missing:
            raise ValueError(f"videos without audio: {missing}")
    rng = np.random.default_rng(seed)
    per_video, partner = {}, {}
    for i, video in enumerate(videos):
        j = int(rng.integers(len(videos) - 1))
        other = videos[j + (j >= i)]
        partner[video.id] = other.id
        pairs = {m: [] for m in PROBE_METHODS}
        for t in range(video.n_frames):
            sample = sample_clip(video, t, model.config, sigma)
            true = predict_clip(model, sample)
            if fused:
                feats = model.audio_features(audio_input(model, sample))
                swap_clip = sample_clip(other, t % other.n_frames, model.config, sigma)
                swapped = predict_clip(model, sample, audio_input(model, swap_clip))
                zeroed = predict_clip(model, sample, zero_audio(feats))
            else:
                swapped = zeroed = predict_clip(model, sample)
            pairs["zeroed_audio"].append(_pair(true, zeroed))
            pairs["random_audio"].append(_pair(true, swapped))
        per_video[video.id] = {m: tuple(float(x) for x in np.mean(p, axis=0))
                               for m, p in pairs.items()}
    return ProbeReport(per_video, partner)
