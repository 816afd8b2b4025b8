"""Adam training with validation-based early stopping, sliding-window inference and evaluation."""

from __future__ import annotations

import csv
import io
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Optional, Sequence, Union

import numpy as np

from . import functional as F
from .checkpoint import save_checkpoint, write_tensors
from .data import ClipSample, VideoRecord, sample_clip
from .fusion import AudioFeatures, prepare_waveform, zero_audio
from .metrics import DEFAULT_EPS, all_metrics, cc, kldiv
from .model import ViNet
from .tensor import Tensor, no_grad

log = logging.getLogger(__name__)

METRIC_NAMES = ("cc", "sim", "auc_judd", "sauc", "nss", "kldiv")
TOY_SIGMA = 3.0  # density blur at 32-pixel maps


@dataclass
class TrainConfig:
    batch_size: int = 8
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    max_steps: int = 2000
    patience: int = 5
    val_interval: int = 100
    seed: int = 0
    density_sigma: float = TOY_SIGMA

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if not self.lr >= 0:
            raise ValueError(f"lr must be >= 0, got {self.lr}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.patience < 1:
            raise ValueError(f"patience must be >= 1, got {self.patience}")
        if self.max_steps < 0 or self.val_interval < 1:
            raise ValueError("max_steps must be >= 0 and val_interval >= 1")
        if not 0 <= self.beta1 < 1 or not 0 <= self.beta2 < 1 or self.eps <= 0:
            raise ValueError("betas must lie in [0, 1) and eps must be positive")
        if self.density_sigma <= 0:
            raise ValueError("density_sigma must be positive")

    @classmethod
    def from_dict(cls, d: Mapping) -> "TrainConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown training config keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------------- Adam
@dataclass
class AdamState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray],
              state: AdamState, config: TrainConfig) -> tuple[dict, AdamState]:
    """One bias-corrected Adam update; returns new parameter arrays and the advanced state."""
    if set(params) != set(grads):
        raise ValueError(f"parameter and gradient names differ: {sorted(set(params) ^ set(grads))}")
    t = state.step + 1
    b1, b2 = config.beta1, config.beta2
    new_params, m_new, v_new = {}, {}, {}
    for name, p in params.items():
        g = np.asarray(grads[name])
        if g.shape != np.shape(p):
            raise ValueError(f"{name}: gradient shape {g.shape} != parameter shape {np.shape(p)}")
        m = b1 * state.m.get(name, 0.0) + (1 - b1) * g
        v = b2 * state.v.get(name, 0.0) + (1 - b2) * g * g
        m_hat = m / (1 - b1 ** t)
        v_hat = v / (1 - b2 ** t)
        new_params[name] = p - config.lr * m_hat / (np.sqrt(v_hat) + config.eps)
        m_new[name], v_new[name] = m, v
    return new_params, AdamState(t, m_new, v_new)


class Adam:
    """Applies ``adam_step`` in place to a module's parameters."""

    def __init__(self, named_params: Sequence, config: TrainConfig):
        self.params = dict(named_params)
        self.config = config
        self.state = AdamState()

    def step(self) -> None:
        values = {n: p.data for n, p in self.params.items()}
        grads = {n: p.grad if p.grad is not None else np.zeros_like(p.data)
                 for n, p in self.params.items()}
        new, self.state = adam_step(values, grads, self.state, self.config)
        for n, p in self.params.items():
            p.data = new[n].astype(p.data.dtype, copy=False)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None


# ----------------------------------------------------------------- inference
def audio_input(model: ViNet, sample: ClipSample, override: Optional[object] = None):
    """Audio argument for ``model`` from a clip: precomputed features, else the raw segment."""
    if model.fusion is None:
        return None
    if override is not None:
        return override
    if sample.audio_features is not None:
        return AudioFeatures(Tensor(sample.audio_features), source="precomputed_file")
    if sample.audio is None:
        raise ValueError(f"video {sample.video_id} has no audio but the model fuses audio")
    wav = prepare_waveform(sample.audio, model.config.audio_len)
    return Tensor(wav.reshape(1, -1))


def predict_clip(model, sample: ClipSample, audio=None) -> np.ndarray:
    """Saliency map ``[H0, W0]`` for one clip; ``model`` may also expose its own ``predict_clip``."""
    if not isinstance(model, ViNet):
        return np.asarray(model.predict_clip(sample), dtype=np.float64)
    with no_grad():
        out = model(Tensor(sample.frames), audio_input(model, sample, audio))
    return out.numpy().astype(np.float64)


def predict_video(model, video: VideoRecord, config=None, sigma: float = TOY_SIGMA,
                  audio_for: Optional[Callable[[ClipSample], object]] = None) -> list[np.ndarray]:
    """One map per frame; frame ``t`` sees frames ``t-T+1..t`` padded with frame 0.

    Each clip is run on its own so a frame's map never depends on what else
    is processed in the same call.
    """
    if video.n_frames == 0:
        raise ValueError(f"video {video.id} has no frames")
    config = config if config is not None else model.config
    if isinstance(model, ViNet) and config != model.config:
        raise ValueError("config does not match the model's configuration")
    maps = []
    for t in range(video.n_frames):
        sample = sample_clip(video, t, config, sigma)
        maps.append(predict_clip(model, sample, audio_for(sample) if audio_for else None))
    return maps


# ---------------------------------------------------------------- evaluation
@dataclass
class MetricsConfig:
    sigma: float = TOY_SIGMA
    n_splits: int = 100
    seed: int = 0
    eps: float = DEFAULT_EPS


@dataclass
class EvalResult:
    rows: list  # per-frame dicts
    per_video: dict  # video id -> metric means
    summary: dict  # metric -> mean over videos

    def frame_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(("video_id", "frame_id") + METRIC_NAMES)
        for r in self.rows:
            w.writerow([r["video_id"], r["frame_id"]] + [f"{r[m]:.10g}" for m in METRIC_NAMES])
        return buf.getvalue()

    def summary_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(("video_id",) + METRIC_NAMES)
        for vid, means in self.per_video.items():
            w.writerow([vid] + [f"{means[m]:.10g}" for m in METRIC_NAMES])
        w.writerow(["mean"] + [f"{self.summary[m]:.10g}" for m in METRIC_NAMES])
        return buf.getvalue()


def _shuffle_pool(videos: Sequence[VideoRecord], own: int, config) -> list[np.ndarray]:
    from .data import scale_fixations
    size = (config.height, config.width)
    others = [v for i, v in enumerate(videos) if i != own] or [videos[own]]
    return [scale_fixations(f, v.size, size) for v in others for f in v.fixations if len(f)]


def evaluate(model, videos: Sequence[VideoRecord], metrics_config: Optional[MetricsConfig] = None,
             config=None) -> EvalResult:
    """Every metric on every frame that has fixations; means over frames, then over videos."""
    mc = metrics_config or MetricsConfig()
    config = config if config is not None else model.config
    rows, per_video = [], {}
    for vi, video in enumerate(videos):
        pool = _shuffle_pool(videos, vi, config)
        maps = predict_video(model, video, config, mc.sigma)
        vid_rows = []
        for t, pred in enumerate(maps):
            sample = sample_clip(video, t, config, mc.sigma)
            if sample.density is None:
                continue
            m = all_metrics(pred, sample.density, sample.fixations, pool, mc.n_splits, mc.seed, mc.eps)
            vid_rows.append({"video_id": video.id, "frame_id": t, **m})
        if vid_rows:
            per_video[video.id] = {k: float(np.mean([r[k] for r in vid_rows])) for k in METRIC_NAMES}
            rows.extend(vid_rows)
    if not per_video:
        raise ValueError("no frame with fixations to evaluate")
    summary = {k: float(np.mean([v[k] for v in per_video.values()])) for k in METRIC_NAMES}
    return EvalResult(rows, per_video, summary)


# ------------------------------------------------------------------ training
class TrainingDiverged(FloatingPointError):
    def __init__(self, message: str, dump_path: Optional[Path] = None):
        super().__init__(message)
        self.dump_path = dump_path


@dataclass
class TrainResult:
    best_state: dict
    best_step: int
    best_val_cc: float
    curve: list  # (step, kldiv, val_cc or nan)
    steps: int
    stopped_early: bool

    def curve_text(self) -> str:
        lines = ["step kldiv val_cc"]
        lines += [f"{s} {k:.8g} {v:.8g}" for s, k, v in self.curve]
        return "\n".join(lines) + "\n"


def _stack_batch(model: ViNet, batch: Sequence[ClipSample]) -> tuple[Tensor, object, np.ndarray]:
    frames = Tensor(np.stack([s.frames for s in batch]))
    density = np.stack([s.density for s in batch])
    audio = None
    if model.fusion is not None:
        items = [audio_input(model, s) for s in batch]
        if isinstance(items[0], AudioFeatures):
            audio = AudioFeatures(Tensor(np.stack([a.tensor.data for a in items])), items[0].source)
        else:
            audio = Tensor(np.stack([a.data for a in items]))
    return frames, audio, density


def batch_loss(model: ViNet, batch: Sequence[ClipSample]) -> tuple[Tensor, np.ndarray]:
    frames, audio, density = _stack_batch(model, batch)
    pred = model(frames, audio)
    return kldiv(F.normalize_to_distribution(pred), density), pred.numpy()


def validation_clips(videos: Sequence[VideoRecord], config, sigma: float) -> list[ClipSample]:
    clips = [sample_clip(v, t, config, sigma) for v in videos for t in range(v.n_frames)]
    return [c for c in clips if c.density is not None]


def mean_cc(model, clips: Sequence[ClipSample]) -> float:
    return float(np.mean([cc(predict_clip(model, c), c.density) for c in clips]))


def _dump_state(model: ViNet, out_dir: Optional[Path], step: int, batch, loss) -> Optional[Path]:
    if out_dir is None:
        return None
    path = Path(out_dir) / "nan_dump.vnt"
    write_tensors(path, model.state_dict())
    info = {"step": step, "loss": repr(loss), "clips": [[s.video_id, s.t] for s in batch],
            "nonfinite_params": [n for n, p in model.named_parameters()
                                 if not np.all(np.isfinite(p.data))]}
    Path(str(path) + ".json").write_text(json.dumps(info, indent=2))
    return path


def train(model: ViNet, train_data: Sequence[Union[VideoRecord, ClipSample]],
          val_data: Optional[Sequence[Union[VideoRecord, ClipSample]]], cfg: TrainConfig,
          out_dir: Optional[Union[str, Path]] = None,
          callback: Optional[Callable[[int, float], bool]] = None) -> TrainResult:
    """Minimize KL divergence with Adam; keep the weights with the best validation CC.

    ``train_data`` is either videos (each step draws a video and an end frame
    uniformly) or a fixed pool of clips (drawn without replacement per step;
    a pool no larger than the batch is used whole every step). Validation
    runs every ``val_interval`` steps and after the last step; training stops
    once ``patience`` validations in a row fail to improve, or when
    ``callback(step, loss)`` returns True.
    """
    if not train_data:
        raise ValueError("training set is empty")
    out_dir = Path(out_dir) if out_dir is not None else None
    rng = np.random.default_rng(cfg.seed)
    config = model.config
    from_videos = isinstance(train_data[0], VideoRecord)
    val_clips = []
    if val_data:
        val_clips = (validation_clips(val_data, config, cfg.density_sigma)
                     if isinstance(val_data[0], VideoRecord) else list(val_data))

    def draw() -> list[ClipSample]:
        if not from_videos:
            if len(train_data) <= cfg.batch_size:
                return list(train_data)
            return [train_data[i] for i in rng.choice(len(train_data), cfg.batch_size, replace=False)]
        out = []
        while len(out) < cfg.batch_size:
            v = train_data[rng.integers(len(train_data))]
            s = sample_clip(v, int(rng.integers(v.n_frames)), config, cfg.density_sigma)
            if s.density is not None:
                out.append(s)
        return out

    opt = Adam(model.named_parameters(), cfg)
    curve = []
    best_state, best_step, best_cc = model.state_dict(), 0, -math.inf
    since_best, stopped, step = 0, False, 0
    for step in range(1, cfg.max_steps + 1):
        batch = draw()
        try:
            loss, _ = batch_loss(model, batch)
            value = loss.item()
            if not math.isfinite(value):
                raise FloatingPointError(f"loss is {value}")
            opt.zero_grad()
            loss.backward()
        except FloatingPointError as e:
            dump = _dump_state(model, out_dir, step, batch, e)
            raise TrainingDiverged(f"non-finite value at step {step}: {e}"
                                   + (f"; state dumped to {dump}" if dump else ""), dump) from e
        opt.step()
        val = math.nan
        if val_clips and (step % cfg.val_interval == 0 or step == cfg.max_steps):
            val = mean_cc(model, val_clips)
            if val > best_cc:
                best_state, best_step, best_cc, since_best = model.state_dict(), step, val, 0
            else:
                since_best += 1
            log.info("step %d kldiv %.5f val_cc %.4f", step, value, val)
        curve.append((step, value, val))
        if since_best >= cfg.patience or (callback is not None and callback(step, value)):
            stopped = True
            break
    if not val_clips:
        best_state, best_step = model.state_dict(), step
    model.load_state_dict(best_state)
    result = TrainResult(best_state, best_step, best_cc if val_clips else math.nan, curve, step, stopped)
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "loss_curve.txt").write_text(result.curve_text())
        save_checkpoint(best_state, out_dir / "best.vnt",
                        {"step": best_step, "seed": cfg.seed, "val_cc": result.best_val_cc,
                         "config_hash": config.config_hash(), "model_config": config.to_dict(),
                         "train_config": cfg.to_dict()})
    return result


def clip_pool(videos: Sequence[VideoRecord], config, n_clips: int, sigma: float,
              seed: int = 0) -> list[ClipSample]:
    """A fixed set of clips with fixations, end frames drawn uniformly per video in turn."""
    rng = np.random.default_rng(seed)
    out, guard = [], 0
    while len(out) < n_clips:
        v = videos[len(out) % len(videos)]
        s = sample_clip(v, int(rng.integers(v.n_frames)), config, sigma)
        guard += 1
        if s.density is not None:
            out.append(s)
        elif guard > 100 * n_clips:
            raise ValueError("too few frames with fixations")
    return out


def zero_audio_for(model: ViNet) -> Callable[[ClipSample], object]:
    def fn(sample: ClipSample):
        if model.fusion is None:
            return None
        feats = model.audio_features(audio_input(model, sample))
        return zero_audio(feats)
    return fn
