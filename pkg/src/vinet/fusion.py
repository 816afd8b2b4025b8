"""Audio feature branch and the two audio-visual fusion schemes."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import functional as F
from .nn import Conv1d, Conv3d, Module, Parameter, uniform_init
from .tensor import Tensor, get_default_dtype

AUDIO_EXTENT = 3  # temporal cells in the audio feature map, [Ca, 3, 1]
SOURCES = ("computed_from_waveform", "precomputed_file", "zeroed")


@dataclass
class AudioFeatures:
    """Audio embedding of shape ``[Ca, 3, 1]`` (or ``[N, Ca, 3, 1]``)."""

    tensor: Tensor
    source: str = "computed_from_waveform"

    def __post_init__(self):
        if self.source not in SOURCES:
            raise ValueError(f"unknown audio source {self.source!r}")
        if self.tensor.ndim not in (3, 4) or self.tensor.shape[-2:] != (AUDIO_EXTENT, 1):
            raise ValueError(f"audio features must be [Ca, 3, 1], got {self.tensor.shape}")

    @property
    def channels(self) -> int:
        return self.tensor.shape[-3]


def zero_audio(like: AudioFeatures) -> AudioFeatures:
    return AudioFeatures(Tensor(np.zeros_like(like.tensor.data)), source="zeroed")


def prepare_waveform(segment: np.ndarray, length: int) -> np.ndarray:
    """Resample a mono segment to the fixed branch input length (linear, half-pixel)."""
    segment = np.asarray(segment, dtype=np.float64).reshape(-1)
    if segment.size == 0:
        raise ValueError("empty waveform")
    return F.interp_matrix(segment.size, length) @ segment


class AudioBranch(Module):
    """Three conv1d + relu + maxpool stages mapping ``[1, L]`` audio to ``[Ca, 3, 1]``.

    ``L`` must be a multiple of 48: the first two pools divide by 4 and the
    last pool leaves exactly three cells.
    """

    def __init__(self, out_channels: int, length: int, rng: Optional[np.random.Generator] = None,
                 widths: tuple = (8, 16), kernel: int = 9):
        if length % (16 * AUDIO_EXTENT):
            raise ValueError(f"audio length {length} must be a multiple of 48")
        rng = rng if rng is not None else np.random.default_rng(0)
        pad = kernel // 2
        self.conv1 = Conv1d(1, widths[0], kernel, pad, rng)
        self.conv2 = Conv1d(widths[0], widths[1], kernel, pad, rng)
        self.conv3 = Conv1d(widths[1], out_channels, kernel, pad, rng)
        self.length = length
        self.pools = (4, 4, length // (16 * AUDIO_EXTENT))

    def stages(self, waveform: Tensor) -> list[Tensor]:
        """Outputs after each conv+relu+pool stage."""
        if waveform.shape[-1] != self.length:
            raise ValueError(f"expected {self.length} samples, got {waveform.shape[-1]}")
        out, x = [], waveform
        for conv, pool in zip((self.conv1, self.conv2, self.conv3), self.pools):
            x = F.maxpool1d(conv(x).relu(), pool)
            out.append(x)
        return out

    def forward(self, waveform: Tensor) -> AudioFeatures:
        if waveform.size == 0:
            raise ValueError("empty waveform")
        x = self.stages(waveform)[-1]
        return AudioFeatures(x.reshape(x.shape + (1,)), source="computed_from_waveform")


def _flat_audio(audio: AudioFeatures) -> Tensor:
    t = audio.tensor
    return t.reshape(t.shape[:-2] + (t.shape[-2] * t.shape[-1],))


def concat_audio(visual: Tensor, audio: AudioFeatures) -> Tensor:
    """Tile the per-channel audio mean over ``T x H x W`` and stack it after ``visual``."""
    c = visual.shape[-4]
    if audio.channels != c:
        raise ValueError(f"audio has {audio.channels} channels, visual has {c}")
    batched = visual.ndim == 5
    if audio.tensor.ndim == 4 and not batched:
        raise ValueError("batched audio with unbatched visual features")
    mean = _flat_audio(audio).mean(axis=-1)
    if batched and mean.ndim == 1:
        mean = mean.reshape(1, c).broadcast_to((visual.shape[0], c))
    tiled = mean.reshape(mean.shape + (1, 1, 1)).broadcast_to(visual.shape)
    return F.concat([visual, tiled], axis=-4)


def fuse_concat(visual: Tensor, audio: AudioFeatures, reduce: Conv3d) -> Tensor:
    """Channel concatenation of tiled audio, reduced back to ``C`` by a 1x1x1 conv."""
    return reduce(concat_audio(visual, audio))


@dataclass
class BilinearFusionParams:
    A: Tensor  # [x0, x, y0]
    b: Tensor  # [x, 1]

    def __post_init__(self):
        if self.A.ndim != 3 or min(self.A.shape) < 1:
            raise ValueError(f"A must be [x0, x, y0] with positive dims, got {self.A.shape}")
        if self.b.shape != (self.A.shape[1], 1):
            raise ValueError(f"b must be [{self.A.shape[1]}, 1], got {self.b.shape}")

    @property
    def dims(self) -> tuple[int, int, int]:
        x0, x, y0 = self.A.shape
        return x0, x, y0

    def num_parameters(self) -> int:
        return self.A.size + self.b.size


def bilinear_form(x1: Tensor, x2: Tensor, params: BilinearFusionParams) -> Tensor:
    """``y[c, k] = sum_ij x1[c, i] A[i, k, j] x2[c, j] + b[k]`` with ``A`` shared over channels.

    ``x1`` is ``[..., C, x0]`` and ``x2`` is ``[..., C, y0]``; returns ``[..., C, x]``.
    """
    x0, x, y0 = params.dims
    if x1.shape[-1] != x0 or x2.shape[-1] != y0:
        raise ValueError(f"expected x1[..., {x0}] and x2[..., {y0}], got {x1.shape} and {x2.shape}")
    if x1.shape[:-1] != x2.shape[:-1]:
        raise ValueError(f"channel axes differ: {x1.shape} vs {x2.shape}")
    outer = x1.reshape(x1.shape + (1,)) * x2.reshape(x2.shape[:-1] + (1, y0))
    outer = outer.reshape(x1.shape[:-1] + (x0 * y0,))
    a = params.A.transpose(0, 2, 1).reshape(x0 * y0, x)
    return outer @ a + params.b.reshape(x)


def pooled_shape(shape: tuple, pool) -> tuple[int, int, int]:
    kernel = tuple(min(k, d) for k, d in zip(F._triple(pool), shape))
    return tuple(d // k for d, k in zip(shape, kernel))


def fuse_bilinear(visual: Tensor, audio: AudioFeatures, params: BilinearFusionParams,
                  pool=(2, 2, 2), out_shape: Optional[tuple] = None) -> Tensor:
    """Max-pool and flatten ``visual``, apply the bilinear form, reshape to ``out_shape``.

    ``out_shape`` (``T', H', W'``) defaults to the unpooled visual extent; its
    volume must equal the form's output size ``x``.
    """
    c = visual.shape[-4]
    if audio.channels != c:
        raise ValueError(f"audio has {audio.channels} channels, visual has {c}")
    spatial = visual.shape[-3:]
    out_shape = tuple(out_shape) if out_shape is not None else spatial
    x0, x, y0 = params.dims
    if int(np.prod(out_shape)) != x:
        raise ValueError(f"output extent {out_shape} does not hold x={x} values")
    kernel = tuple(min(k, d) for k, d in zip(F._triple(pool), spatial))
    pooled = F.maxpool3d(visual, kernel)
    x1 = pooled.reshape(pooled.shape[:-3] + (int(np.prod(pooled.shape[-3:])),))
    x2 = _flat_audio(audio)
    if x2.ndim < x1.ndim:
        x2 = x2.reshape((1,) + x2.shape).broadcast_to(x1.shape[:-1] + (x2.shape[-1],))
    y = bilinear_form(x1, x2, params)
    return y.reshape(y.shape[:-1] + out_shape)


class ConcatFusion(Module):
    def __init__(self, channels: int, rng: Optional[np.random.Generator] = None):
        self.reduce = Conv3d(2 * channels, channels, 1, rng=rng)

    def forward(self, visual: Tensor, audio: AudioFeatures) -> Tensor:
        return fuse_concat(visual, audio, self.reduce)


class BilinearFusion(Module):
    def __init__(self, visual_shape: tuple, pool=(2, 2, 2), audio_extent: int = AUDIO_EXTENT,
                 rng: Optional[np.random.Generator] = None):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.visual_shape = tuple(visual_shape)
        self.pool = F._triple(pool)
        x0 = int(np.prod(pooled_shape(self.visual_shape, self.pool)))
        x = int(np.prod(self.visual_shape))
        dtype = get_default_dtype()
        self.A = Parameter(uniform_init(rng, (x0, x, audio_extent), x0 * audio_extent), dtype=dtype)
        self.b = Parameter(np.zeros((x, 1)), dtype=dtype)

    @property
    def params(self) -> BilinearFusionParams:
        return BilinearFusionParams(self.A, self.b)

    def forward(self, visual: Tensor, audio: AudioFeatures) -> Tensor:
        return fuse_bilinear(visual, audio, self.params, self.pool, self.visual_shape)
