"""Dataset layout, synthetic data generation and clip sampling.

On-disk layout, one directory per video::

    <root>/<video_id>/frames/00000.png     8-bit RGB frames, numbered from 0
    <root>/<video_id>/fixations.csv        header ``frame,x,y``
    <root>/<video_id>/maps/00000.png       optional 8-bit grayscale density maps
    <root>/<video_id>/audio.wav            optional PCM16 mono waveform
    <root>/<video_id>/audio_features.vnt   optional precomputed [frames, Ca, 3, 1] features

The waveform is assumed to span the video evenly, so frame ``i`` owns
samples ``[i * spf, (i + 1) * spf)`` with ``spf = n_samples // n_frames``.
"""

from __future__ import annotations

import csv
import logging
import re
import wave
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Union

import numpy as np
from PIL import Image

from .checkpoint import read_tensors, write_tensors
from .functional import interp_matrix
from .metrics import DEFAULT_SIGMA, fixations_to_density

log = logging.getLogger(__name__)

FRAME_RE = re.compile(r"^(\d{5})\.png$")


class DatasetError(ValueError):
    pass


@dataclass
class VideoRecord:
    id: str
    frame_paths: list[Path]
    fixations: list[np.ndarray]
    size: tuple[int, int]  # (H, W) of the stored frames
    map_paths: Optional[list[Path]] = None
    waveform: Optional[np.ndarray] = None
    sample_rate: Optional[int] = None
    audio_features: Optional[np.ndarray] = None
    _frames: dict = field(default_factory=dict, repr=False, compare=False)

    @property
    def n_frames(self) -> int:
        return len(self.frame_paths)

    @property
    def samples_per_frame(self) -> int:
        if self.waveform is None:
            raise DatasetError(f"{self.id}: no audio")
        return self.waveform.size // self.n_frames

    def frame(self, i: int, size: Optional[tuple[int, int]] = None) -> np.ndarray:
        """Frame ``i`` as float32 ``[3, H, W]`` in [0, 1], bilinearly resized to ``size``."""
        size = tuple(size) if size is not None else self.size
        key = (i, size)
        if key not in self._frames:
            with Image.open(self.frame_paths[i]) as im:
                arr = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
            arr = arr.transpose(2, 0, 1)
            if size != self.size:
                arr = resize_bilinear(arr, size)
            self._frames[key] = arr.astype(np.float32)
        return self._frames[key]


@dataclass
class ClipSample:
    video_id: str
    t: int
    frames: np.ndarray  # [3, T0, H0, W0]
    density: Optional[np.ndarray]  # [H0, W0], sums to 1
    fixations: np.ndarray  # [n, 2] (x, y) at model resolution
    audio: Optional[np.ndarray] = None  # raw waveform segment for the clip's frames
    audio_features: Optional[np.ndarray] = None  # precomputed [Ca, 3, 1]


def resize_bilinear(arr: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    """Resize the last two axes with half-pixel-center bilinear interpolation."""
    mh = interp_matrix(arr.shape[-2], size[0])
    mw = interp_matrix(arr.shape[-1], size[1])
    return np.einsum("ah,...hw,bw->...ab", mh, arr, mw)


def scale_fixations(points: np.ndarray, src: tuple[int, int], dst: tuple[int, int]) -> np.ndarray:
    if points.size == 0 or src == dst:
        return points.reshape(-1, 2).copy()
    (sh, sw), (dh, dw) = src, dst
    x = np.clip(np.floor((points[:, 0] + 0.5) * dw / sw), 0, dw - 1)
    y = np.clip(np.floor((points[:, 1] + 0.5) * dh / sh), 0, dh - 1)
    return np.stack([x, y], axis=1).astype(np.int64)


# ------------------------------------------------------------------ loading
def _read_wav(path: Path) -> tuple[np.ndarray, int]:
    try:
        with wave.open(str(path), "rb") as w:
            if w.getnchannels() != 1 or w.getsampwidth() != 2:
                raise DatasetError(f"{path}: expected PCM16 mono audio")
            rate = w.getframerate()
            raw = w.readframes(w.getnframes())
    except wave.Error as e:
        raise DatasetError(f"{path}: {e}") from e
    return np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32767.0, rate


def _list_numbered(directory: Path) -> list[Path]:
    files = {}
    for p in directory.iterdir():
        m = FRAME_RE.match(p.name)
        if m:
            files[int(m.group(1))] = p
    for i in range(len(files)):
        if i not in files:
            raise DatasetError(f"{directory}: missing frame {i:05d}.png")
    return [files[i] for i in range(len(files))]


def _read_fixations(path: Path, n_frames: int, size: tuple[int, int]) -> list[np.ndarray]:
    h, w = size
    per_frame: list[list[tuple[int, int]]] = [[] for _ in range(n_frames)]
    with open(path, newline="") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if header is None or [c.strip() for c in header] != ["frame", "x", "y"]:
            raise DatasetError(f"{path}:1: expected header 'frame,x,y', got {header}")
        for line, row in enumerate(reader, start=2):
            if not row:
                continue
            try:
                frame, x, y = (int(v) for v in row)
            except ValueError:
                raise DatasetError(f"{path}:{line}: malformed row {row}") from None
            if not 0 <= frame < n_frames:
                raise DatasetError(f"{path}:{line}: frame {frame} out of range [0, {n_frames})")
            if not (0 <= x < w and 0 <= y < h):
                raise DatasetError(f"{path}:{line}: fixation ({x}, {y}) out of range for "
                                   f"{w}x{h} frames")
            per_frame[frame].append((x, y))
    return [np.asarray(p, dtype=np.int64).reshape(-1, 2) for p in per_frame]


def load_video(vdir: Path) -> VideoRecord:
    frames = _list_numbered(vdir / "frames")
    if not frames:
        raise DatasetError(f"{vdir}: no frames")
    with Image.open(frames[0]) as im:
        size = (im.height, im.width)
    fix_path = vdir / "fixations.csv"
    if not fix_path.exists():
        raise DatasetError(f"{fix_path}: missing fixation file")
    fixations = _read_fixations(fix_path, len(frames), size)

    map_paths = None
    if (vdir / "maps").is_dir():
        map_paths = _list_numbered(vdir / "maps")
        if len(map_paths) != len(frames):
            raise DatasetError(f"{vdir / 'maps'}: {len(map_paths)} maps for {len(frames)} frames")

    waveform, rate = None, None
    if (vdir / "audio.wav").exists():
        waveform, rate = _read_wav(vdir / "audio.wav")
        if waveform.size < len(frames):
            raise DatasetError(f"{vdir / 'audio.wav'}: {waveform.size} samples cannot cover "
                               f"{len(frames)} frames")

    features = None
    if (vdir / "audio_features.vnt").exists():
        features = next(iter(read_tensors(vdir / "audio_features.vnt").values()))
        if features.ndim != 4 or features.shape[0] != len(frames) or features.shape[2:] != (3, 1):
            raise DatasetError(f"{vdir / 'audio_features.vnt'}: expected [{len(frames)}, Ca, 3, 1], "
                               f"got {list(features.shape)}")
    return VideoRecord(vdir.name, frames, fixations, size, map_paths, waveform, rate, features)


def load_dataset(root: Union[str, Path]) -> list[VideoRecord]:
    root = Path(root)
    if not root.is_dir():
        raise DatasetError(f"{root}: not a directory")
    return [load_video(d) for d in sorted(root.iterdir()) if d.is_dir() and (d / "frames").is_dir()]


# ------------------------------------------------------------ clip sampling
def clip_indices(t: int, clip_len: int) -> list[int]:
    """Frame indices ``t-T+1 .. t``, with indices before 0 replaced by frame 0."""
    return [max(0, i) for i in range(t - clip_len + 1, t + 1)]


def sample_clip(video: VideoRecord, t: int, config, sigma: float = DEFAULT_SIGMA) -> ClipSample:
    """Build the input clip ending at frame ``t`` plus its targets and aligned audio."""
    if not 0 <= t < video.n_frames:
        raise IndexError(f"frame {t} out of range for {video.id} with {video.n_frames} frames")
    size = (config.height, config.width)
    idx = clip_indices(t, config.clip_len)
    frames = np.stack([video.frame(i, size) for i in idx], axis=1)
    fix = scale_fixations(video.fixations[t], video.size, size)
    density = fixations_to_density(fix, size[0], size[1], sigma) if len(fix) else None
    audio = None
    if video.waveform is not None:
        spf = video.samples_per_frame
        audio = np.concatenate([video.waveform[i * spf:(i + 1) * spf] for i in idx])
    feats = video.audio_features[t] if video.audio_features is not None else None
    return ClipSample(video.id, t, frames, density, fix, audio, feats)


# --------------------------------------------------------------- synthesis
def _trajectory(rng: np.random.Generator, n: int, height: int, width: int) -> np.ndarray:
    t = np.arange(n, dtype=np.float64)
    out = []
    for extent in (width, height):
        centre = extent / 2 + rng.uniform(-0.1, 0.1) * extent
        amp = rng.uniform(0.12, 0.28) * extent
        period = rng.uniform(12.0, 30.0)
        phase = rng.uniform(0, 2 * np.pi)
        out.append(centre + amp * np.sin(2 * np.pi * t / period + phase))
    return np.stack(out, axis=1)  # [n, 2] of (cx, cy)


def _render(rng: np.random.Generator, centre: np.ndarray, colour: np.ndarray,
            height: int, width: int) -> np.ndarray:
    yy, xx = np.mgrid[0:height, 0:width].astype(np.float64)
    s = height / 10.0
    blob = np.exp(-((xx - centre[0]) ** 2 + (yy - centre[1]) ** 2) / (2 * s * s))
    noise = rng.uniform(0.0, 0.35, size=(height, width, 3))
    img = np.clip(noise + 0.9 * blob[..., None] * colour, 0.0, 1.0)
    return np.round(img * 255).astype(np.uint8)


def _tone(freqs: np.ndarray, spf: int, rate: int, rng: np.random.Generator) -> np.ndarray:
    f = np.repeat(freqs, spf)
    phase = 2 * np.pi * np.cumsum(f) / rate
    return 0.6 * np.sin(phase) + rng.normal(0.0, 0.02, size=f.size)


def _write_wav(path: Path, samples: np.ndarray, rate: int) -> None:
    pcm = np.round(np.clip(samples, -1.0, 1.0) * 32767).astype("<i2")
    with wave.open(str(path), "wb") as w:
        w.setnchannels(1)
        w.setsampwidth(2)
        w.setframerate(rate)
        w.writeframes(pcm.tobytes())


def generate_synthetic(root: Union[str, Path], n_videos: int, frames_per_video: int,
                       height: int, width: int, audio_informative: bool = True, seed: int = 0,
                       fixations_per_frame: int = 4, fixation_spread: float = 1.0,
                       fps: int = 8, sample_rate: int = 2048,
                       sigma: float = DEFAULT_SIGMA) -> list[str]:
    """Write a dataset of bright blobs drifting over noise.

    Fixations scatter around the blob centre. With ``audio_informative`` the
    tone frequency tracks the blob's horizontal position; otherwise it is a
    random walk drawn from its own RNG stream, independent of the visuals.
    Output is byte-identical for a fixed ``seed``.
    """
    if min(n_videos, frames_per_video, height, width, fixations_per_frame) < 1:
        raise ValueError("sizes must be >= 1")
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    spf = sample_rate // fps
    ids = []
    for v, ss in enumerate(np.random.SeedSequence(seed).spawn(n_videos)):
        vis_ss, audio_ss = ss.spawn(2)
        rng, arng = np.random.default_rng(vis_ss), np.random.default_rng(audio_ss)
        vid = f"video_{v:03d}"
        ids.append(vid)
        vdir = root / vid
        (vdir / "frames").mkdir(parents=True, exist_ok=True)
        (vdir / "maps").mkdir(exist_ok=True)
        traj = _trajectory(rng, frames_per_video, height, width)
        colour = rng.uniform(0.7, 1.0, size=3)
        rows, traj_rows = [], []
        for i, centre in enumerate(traj):
            Image.fromarray(_render(rng, centre, colour, height, width)).save(
                vdir / "frames" / f"{i:05d}.png", format="PNG")
            pts = np.round(centre + rng.normal(0.0, fixation_spread, size=(fixations_per_frame, 2)))
            pts[:, 0] = np.clip(pts[:, 0], 0, width - 1)
            pts[:, 1] = np.clip(pts[:, 1], 0, height - 1)
            pts = pts.astype(np.int64)
            rows.extend((i, int(x), int(y)) for x, y in pts)
            density = fixations_to_density(pts, height, width, sigma)
            Image.fromarray(np.round(255 * density / density.max()).astype(np.uint8), mode="L").save(
                vdir / "maps" / f"{i:05d}.png", format="PNG")
            traj_rows.append((i, f"{centre[0]:.6f}", f"{centre[1]:.6f}"))
        with open(vdir / "fixations.csv", "w", newline="") as f:
            wr = csv.writer(f, lineterminator="\n")
            wr.writerow(["frame", "x", "y"])
            wr.writerows(rows)
        with open(vdir / "trajectory.csv", "w", newline="") as f:
            wr = csv.writer(f, lineterminator="\n")
            wr.writerow(["frame", "cx", "cy"])
            wr.writerows(traj_rows)
        if audio_informative:
            freqs = 40.0 + 160.0 * traj[:, 0] / width
        else:
            freqs = np.clip(120.0 + np.cumsum(arng.normal(0.0, 10.0, size=frames_per_video)),
                            40.0, 200.0)
        _write_wav(vdir / "audio.wav", _tone(freqs, spf, sample_rate, arng), sample_rate)
    log.info("wrote %d synthetic videos to %s", n_videos, root)
    return ids


def read_trajectory(vdir: Union[str, Path]) -> np.ndarray:
    with open(Path(vdir) / "trajectory.csv", newline="") as f:
        rows = list(csv.reader(f))[1:]
    return np.array([[float(r[1]), float(r[2])] for r in rows])


def write_audio_features(vdir: Union[str, Path], features: np.ndarray) -> None:
    write_tensors(Path(vdir) / "audio_features.vnt", {"audio_features": features})
