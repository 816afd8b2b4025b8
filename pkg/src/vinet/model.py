"""Encoder-decoder video saliency network with optional audio fusion.

The encoder is four separable-3D-conv stages whose max pools shrink the clip
by 8 in time and 32 in space. The decoder climbs back up in five
upsample+conv blocks, merging the three finer encoder levels through skip
connections, then collapses the remaining frames into one sigmoid map for
the clip's last frame.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from typing import Optional, Union

import numpy as np

from . import functional as F
from .fusion import (AUDIO_EXTENT, AudioBranch, AudioFeatures, BilinearFusion, ConcatFusion,
                     pooled_shape)
from .nn import Conv3d, ConvTranspose3d, Module, SepConv3d
from .tensor import Tensor

# max-pool kernel/stride of each encoder stage, (T, H, W)
STAGE_POOLS = ((1, 4, 4), (2, 2, 2), (2, 2, 2), (2, 2, 2))
SKIP_MODES = ("temporal", "channel")
UPSAMPLE_MODES = ("trilinear", "transpose_conv")
FUSION_MODES = ("none", "concat", "bilinear")
N_SKIP_BLOCKS = 3
N_UP_BLOCKS = 5


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    clip_len: int = 8
    height: int = 32
    width: int = 32
    channels: tuple = (4, 8, 16, 16)
    decoder_channels: Optional[tuple] = None
    use_hierarchy: bool = True
    skip_concat_mode: str = "temporal"
    upsample_mode: str = "trilinear"
    fusion_mode: str = "none"
    audio_channels: Optional[int] = None
    audio_len: int = 768
    bilinear_pool: tuple = (2, 2, 2)
    preset: str = "toy"

    def __post_init__(self):
        object.__setattr__(self, "channels", tuple(int(c) for c in self.channels))
        object.__setattr__(self, "bilinear_pool", tuple(int(c) for c in self.bilinear_pool))
        if self.decoder_channels is None:
            c1, c2, c3, _ = self.channels if len(self.channels) == 4 else (1, 1, 1, 1)
            object.__setattr__(self, "decoder_channels", (c3, c2, c1, c1, c1))
        else:
            object.__setattr__(self, "decoder_channels", tuple(int(c) for c in self.decoder_channels))
        if self.audio_channels is None and len(self.channels) == 4:
            object.__setattr__(self, "audio_channels", self.channels[3])
        self.validate()

    def validate(self) -> None:
        if self.clip_len < 8 or self.clip_len % 8:
            raise ConfigError(f"clip_len must be a positive multiple of 8, got {self.clip_len}")
        for name in ("height", "width"):
            v = getattr(self, name)
            if v < 32 or v % 32:
                raise ConfigError(f"{name} must be a positive multiple of 32, got {v}")
        if len(self.channels) != 4 or min(self.channels) < 1:
            raise ConfigError(f"channels must be 4 positive widths, got {self.channels}")
        if len(self.decoder_channels) != N_UP_BLOCKS or min(self.decoder_channels) < 1:
            raise ConfigError(f"decoder_channels must be 5 positive widths, got {self.decoder_channels}")
        if self.skip_concat_mode not in SKIP_MODES:
            raise ConfigError(f"skip_concat_mode must be one of {SKIP_MODES}")
        if self.upsample_mode not in UPSAMPLE_MODES:
            raise ConfigError(f"upsample_mode must be one of {UPSAMPLE_MODES}")
        if self.fusion_mode not in FUSION_MODES:
            raise ConfigError(f"fusion_mode must be one of {FUSION_MODES}")
        if self.fusion_mode != "none" and self.audio_channels != self.channels[3]:
            raise ConfigError(f"audio_channels ({self.audio_channels}) must equal the deepest "
                              f"encoder width ({self.channels[3]}) when fusing audio")
        if self.audio_len < 48 or self.audio_len % 48:
            raise ConfigError(f"audio_len must be a positive multiple of 48, got {self.audio_len}")

    @classmethod
    def toy(cls, **overrides) -> "ModelConfig":
        return cls(**{"preset": "toy", **overrides})

    @classmethod
    def paper(cls, **overrides) -> "ModelConfig":
        base = dict(clip_len=32, height=224, width=384, channels=(192, 480, 832, 1024),
                    decoder_channels=(832, 480, 192, 64, 32), preset="paper")
        return cls(**{**base, **overrides})

    @classmethod
    def from_preset(cls, name: str, **overrides) -> "ModelConfig":
        if name == "toy":
            return cls.toy(**overrides)
        if name == "paper":
            return cls.paper(**overrides)
        raise ConfigError(f"unknown preset {name!r}")

    def replace(self, **changes) -> "ModelConfig":
        if "channels" in changes and "decoder_channels" not in changes:
            changes["decoder_channels"] = None
        if "channels" in changes and "audio_channels" not in changes:
            changes["audio_channels"] = None
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)

    def config_hash(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


# ----------------------------------------------------------- shape arithmetic
def pyramid_shapes(config: ModelConfig) -> dict[str, tuple[int, int, int, int]]:
    """Shapes of X1..X4 for a ``[3, T0, H0, W0]`` clip, computed without any weights."""
    t, h, w = config.clip_len, config.height, config.width
    shapes = {}
    for i, (pool, c) in enumerate(zip(STAGE_POOLS, config.channels), start=1):
        t, h, w = t // pool[0], h // pool[1], w // pool[2]
        shapes[f"x{i}"] = (c, t, h, w)
    return shapes


def decoder_plan(config: ModelConfig) -> list[dict]:
    """Per-block channel and extent bookkeeping shared by the decoder and parameter counting."""
    pyr = pyramid_shapes(config)
    c, t, h, w = pyr["x4"]
    plan = []
    for k in range(1, N_UP_BLOCKS + 1):
        t_scale = 2 if k <= N_SKIP_BLOCKS else 1
        t, h, w = t * t_scale, h * 2, w * 2
        d = config.decoder_channels[k - 1]
        block = {"in": c, "out": d, "t_scale": t_scale, "extent": (t, h, w), "skip": None}
        if config.use_hierarchy and k <= N_SKIP_BLOCKS:
            block["skip"] = pyr[f"x{4 - k}"]
        plan.append(block)
        c = d
    return plan


def count_parameters(obj: Union[ModelConfig, Module]) -> int:
    """Exact number of scalar weights of a config's network (or of a built module)."""
    if isinstance(obj, Module):
        return obj.num_parameters()
    cfg = obj

    def conv(ci, co, k=(1, 1, 1)):
        return ci * co * int(np.prod(k)) + co

    total = 0
    c_prev = 3
    for c in cfg.channels:
        total += conv(c_prev, c, (1, 3, 3)) + conv(c, c, (3, 1, 1))
        c_prev = c
    for block in decoder_plan(cfg):
        ci, d = block["in"], block["out"]
        if cfg.upsample_mode == "transpose_conv":
            total += conv(ci, ci, (block["t_scale"], 2, 2))
        total += conv(ci, d, (3, 3, 3))
        if block["skip"] is not None:
            cs = block["skip"][0]
            if cfg.skip_concat_mode == "temporal":
                total += conv(cs, d) + conv(d, d, (3, 3, 3))
            else:
                total += conv(d + cs, d, (3, 3, 3))
    d5 = cfg.decoder_channels[-1]
    total += conv(d5, d5, (cfg.clip_len, 3, 3)) + conv(d5, 1)
    if cfg.fusion_mode != "none":
        ca = cfg.audio_channels
        total += conv(1, 8, (9,)) + conv(8, 16, (9,)) + conv(16, ca, (9,))
        c4 = cfg.channels[3]
        if cfg.fusion_mode == "concat":
            total += conv(2 * c4, c4)
        else:
            x4 = pyramid_shapes(cfg)["x4"][1:]
            x0 = int(np.prod(pooled_shape(x4, cfg.bilinear_pool)))
            x = int(np.prod(x4))
            total += x0 * x * AUDIO_EXTENT + x
    return total


# ------------------------------------------------------------------- modules
@dataclass
class FeaturePyramid:
    x1: Tensor
    x2: Tensor
    x3: Tensor
    x4: Tensor

    def levels(self) -> list[Tensor]:
        return [self.x1, self.x2, self.x3, self.x4]


class Encoder(Module):
    def __init__(self, channels: tuple, rng: np.random.Generator):
        c_prev = 3
        self.stages = []
        for i, c in enumerate(channels, start=1):
            stage = SepConv3d(c_prev, c, 3, rng)
            setattr(self, f"base{i}", stage)
            self.stages.append(stage)
            c_prev = c

    def forward(self, clip: Tensor) -> FeaturePyramid:
        outs, x = [], clip
        for stage, pool in zip(self.stages, STAGE_POOLS):
            x = F.maxpool3d(stage(x).relu(), pool)
            outs.append(x)
        return FeaturePyramid(*outs)


def skip_concat(state: Tensor, skip: Tensor, mode: str, align: Optional[Module] = None) -> Tensor:
    """Concatenate a skip feature onto the decoder state, before the merging conv.

    ``temporal``: the skip is brought to the state's channel width by
    ``align`` (a 1x1x1 conv) and stacked along T. ``channel``: the skip is
    resampled to the state's T x H x W and stacked along C.
    """
    if mode == "temporal":
        if skip.shape[-2:] != state.shape[-2:]:
            skip = F.trilinear_upsample(skip, (skip.shape[-3],) + state.shape[-2:])
        if align is not None:
            skip = align(skip)
        if skip.shape[-4] != state.shape[-4]:
            raise ValueError(f"skip has {skip.shape[-4]} channels, state has {state.shape[-4]}")
        return F.concat([state, skip], axis=-3)
    if mode == "channel":
        if skip.shape[-3:] != state.shape[-3:]:
            skip = F.trilinear_upsample(skip, state.shape[-3:])
        return F.concat([state, skip], axis=-4)
    raise ValueError(f"unknown skip mode {mode!r}")


def skip_fuse(state: Tensor, skip: Tensor, mode: str, merge: Module,
              align: Optional[Module] = None) -> Tensor:
    return merge(skip_concat(state, skip, mode, align)).relu()


class SkipFuse(Module):
    def __init__(self, width: int, skip_channels: int, mode: str, rng: np.random.Generator):
        self.mode = mode
        if mode == "temporal":
            self.align = Conv3d(skip_channels, width, 1, rng=rng)
            # stride 2 in time folds the doubled temporal extent back
            self.merge = Conv3d(width, width, 3, stride=(2, 1, 1), padding=1, rng=rng)
        elif mode == "channel":
            self.align = None
            self.merge = Conv3d(width + skip_channels, width, 3, padding=1, rng=rng)
        else:
            raise ValueError(f"unknown skip mode {mode!r}")

    def forward(self, state: Tensor, skip: Tensor) -> Tensor:
        return skip_fuse(state, skip, self.mode, self.merge, self.align)


class DecoderBlock(Module):
    def __init__(self, block: dict, config: ModelConfig, rng: np.random.Generator):
        ci, d = block["in"], block["out"]
        self.extent = block["extent"]
        if config.upsample_mode == "transpose_conv":
            self.up = ConvTranspose3d(ci, ci, (block["t_scale"], 2, 2), rng=rng)
        else:
            self.up = None
        self.conv = Conv3d(ci, d, 3, padding=1, rng=rng)
        if block["skip"] is not None:
            self.fuse = SkipFuse(d, block["skip"][0], config.skip_concat_mode, rng)
        else:
            self.fuse = None

    def forward(self, x: Tensor, skip: Optional[Tensor] = None) -> Tensor:
        x = self.up(x).relu() if self.up is not None else F.trilinear_upsample(x, self.extent)
        x = self.conv(x).relu()
        if self.fuse is not None:
            x = self.fuse(x, skip)
        return x


class Decoder(Module):
    def __init__(self, config: ModelConfig, rng: np.random.Generator):
        self.blocks = []
        for k, block in enumerate(decoder_plan(config), start=1):
            b = DecoderBlock(block, config, rng)
            setattr(self, f"block{k}", b)
            self.blocks.append(b)
        d5 = config.decoder_channels[-1]
        self.block6 = Conv3d(d5, d5, (config.clip_len, 3, 3), padding=(0, 1, 1), rng=rng)
        self.head = Conv3d(d5, 1, 1, rng=rng)

    def forward(self, pyramid: FeaturePyramid) -> Tensor:
        skips = [pyramid.x3, pyramid.x2, pyramid.x1]
        x = pyramid.x4
        for k, block in enumerate(self.blocks):
            x = block(x, skips[k] if k < len(skips) else None)
        x = self.block6(x).relu()
        x = self.head(x).sigmoid()
        # [.., 1, 1, H, W] -> [.., H, W]
        return x.reshape(x.shape[:-4] + x.shape[-2:])


class ViNet(Module):
    """Saliency network; with ``fusion_mode != "none"`` it carries an audio branch."""

    def __init__(self, config: ModelConfig, seed: int = 0):
        self.config = config
        rng = np.random.default_rng(seed)
        self.encoder = Encoder(config.channels, rng)
        self.decoder = Decoder(config, rng)
        self.audio_branch = None
        self.fusion = None
        if config.fusion_mode != "none":
            self.audio_branch = AudioBranch(config.audio_channels, config.audio_len, rng)
            if config.fusion_mode == "concat":
                self.fusion = ConcatFusion(config.channels[3], rng)
            else:
                x4 = pyramid_shapes(config)["x4"][1:]
                self.fusion = BilinearFusion(x4, config.bilinear_pool, rng=rng)

    def check_clip(self, clip: Tensor) -> None:
        cfg = self.config
        expected = (3, cfg.clip_len, cfg.height, cfg.width)
        if clip.shape[-4:] != expected or clip.ndim not in (4, 5):
            raise ValueError(f"clip shape {clip.shape} does not match config {expected}")

    def encode(self, clip: Tensor) -> FeaturePyramid:
        self.check_clip(clip)
        return self.encoder(clip)

    def decode(self, pyramid: FeaturePyramid) -> Tensor:
        expected = pyramid_shapes(self.config)
        for name, t in zip(("x1", "x2", "x3", "x4"), pyramid.levels()):
            if t.shape[-4:] != expected[name]:
                raise ValueError(f"{name} has shape {t.shape}, config expects {expected[name]}")
        return self.decoder(pyramid)

    def audio_features(self, audio: Union[AudioFeatures, Tensor]) -> AudioFeatures:
        if isinstance(audio, AudioFeatures):
            return audio
        return self.audio_branch(audio)

    def fuse(self, pyramid: FeaturePyramid, audio) -> FeaturePyramid:
        if self.fusion is None:
            return pyramid
        if audio is None:
            raise ValueError("this model fuses audio; an audio input is required")
        feats = self.audio_features(audio)
        return dataclasses.replace(pyramid, x4=self.fusion(pyramid.x4, feats))

    def forward(self, clip: Tensor, audio: Union[AudioFeatures, Tensor, None] = None) -> Tensor:
        pyramid = self.encode(clip)
        return self.decode(self.fuse(pyramid, audio))
