"""Finite-difference gradient suite over every differentiable op and the end-to-end model."""

from __future__ import annotations

from typing import Callable

import numpy as np

from . import functional as F
from .fusion import (AudioFeatures, BilinearFusionParams, bilinear_form, concat_audio,
                     fuse_bilinear)
from .gradcheck import GradCheckReport, check_op, grad_check
from .metrics import kldiv
from .model import ModelConfig, ViNet
from .tensor import Tensor, precision


def _positive(rng, shape):
    return rng.random(shape) + 0.2


def _distribution(rng, shape):
    q = rng.random(shape) + 0.05
    return q / q.sum(axis=(-2, -1), keepdims=True)


def op_cases(rng: np.random.Generator) -> dict[str, tuple[Callable, list]]:
    """Name -> (op, inputs). Shapes are small enough for exhaustive probing."""
    n = rng.standard_normal
    q = _distribution(rng, (2, 4, 5))
    return {
        "add_broadcast": (lambda a, b: a + b, [n((3, 4)), n((4,))]),
        "mul_broadcast": (lambda a, b: a * b, [n((2, 3, 4)), n((3, 1))]),
        "sub": (lambda a, b: a - b, [n((3, 4)), n((3, 4))]),
        "div": (lambda a, b: a / b, [n((3, 4)), _positive(rng, (3, 4))]),
        "pow": (lambda a: a ** 3.0, [n((3, 4))]),
        "exp": (lambda a: a.exp(), [n((3, 4))]),
        "log": (lambda a: a.log(), [_positive(rng, (3, 4))]),
        "relu": (lambda a: a.relu(), [n((4, 5))]),
        "sigmoid": (lambda a: a.sigmoid(), [n((4, 5)) * 3]),
        "matmul": (lambda a, b: a @ b, [n((2, 3, 4)), n((4, 5))]),
        "sum_axis": (lambda a: a.sum(axis=(0, 2), keepdims=True), [n((2, 3, 4))]),
        "mean": (lambda a: a.mean(axis=1), [n((2, 3, 4))]),
        "reshape_transpose": (lambda a: a.reshape(4, 6).transpose(1, 0), [n((2, 3, 4))]),
        "broadcast_to": (lambda a: a.broadcast_to((3, 2, 4)), [n((2, 1))]),
        "getitem": (lambda a: a[1:, ::2], [n((3, 5))]),
        "concat": (lambda a, b: F.concat([a, b], axis=1), [n((2, 3, 2)), n((2, 1, 2))]),
        "split": (lambda a: F.split(a, [1, 3], axis=1)[1] * 2.0, [n((2, 4))]),
        "conv3d": (lambda x, w, b: F.conv3d(x, w, b, stride=(1, 2, 1), padding=1),
                   [n((2, 4, 5, 4)), n((3, 2, 3, 3, 3)), n((3,))]),
        "conv3d_batched": (lambda x, w: F.conv3d(x, w, stride=2, padding=(0, 1, 1)),
                           [n((2, 2, 4, 4, 4)), n((2, 2, 2, 3, 3))]),
        "sep_conv3d": (lambda x, ws, wt, bs, bt: F.sep_conv3d(x, ws, wt, bs, bt),
                       [n((2, 4, 4, 4)), n((3, 2, 1, 3, 3)), n((3, 3, 3, 1, 1)), n((3,)), n((3,))]),
        "conv1d": (lambda x, w, b: F.conv1d(x, w, b, padding=2),
                   [n((2, 12)), n((3, 2, 5)), n((3,))]),
        "conv_transpose3d": (lambda x, w, b: F.conv_transpose3d(x, w, b, stride=(1, 2, 2)),
                             [n((2, 2, 3, 3)), n((2, 3, 1, 2, 2)), n((3,))]),
        "maxpool3d": (lambda x: F.maxpool3d(x, (1, 2, 2)), [n((2, 2, 4, 4))]),
        "maxpool1d": (lambda x: F.maxpool1d(x, 3), [n((2, 9))]),
        "trilinear_upsample": (lambda x: F.trilinear_upsample(x, (4, 5, 7)),
                               [n((2, 2, 3, 4))]),
        "normalize_to_distribution": (F.normalize_to_distribution, [_positive(rng, (2, 4, 5))]),
        "kldiv": (lambda p: kldiv(F.normalize_to_distribution(p), q),
                  [_positive(rng, (2, 4, 5))]),
        "bilinear_form": (lambda x1, x2, a, b: bilinear_form(x1, x2, BilinearFusionParams(a, b)),
                          [n((3, 4)), n((3, 3)), n((4, 5, 3)), n((5, 1))]),
        "fuse_bilinear": (lambda v, a, A, b: fuse_bilinear(v, AudioFeatures(a),
                                                           BilinearFusionParams(A, b)),
                          [n((2, 2, 2, 4)), n((2, 3, 1)), n((2, 16, 3)), n((16, 1))]),
        "fuse_concat": (lambda v, a, w, b: F.conv3d(concat_audio(v, AudioFeatures(a)), w, b),
                        [n((2, 2, 2, 3)), n((2, 3, 1)), n((2, 4, 1, 1, 1)), n((2,))]),
    }


def op_suite(seed: int = 0) -> GradCheckReport:
    rng = np.random.default_rng(seed)
    report = GradCheckReport()
    for name, (op, inputs) in op_cases(rng).items():
        report.merge(check_op(op, inputs, seed=seed), prefix=name + ".")
    return report


def model_check(seed: int = 0, fusion_mode: str = "none", entries: int = 2) -> GradCheckReport:
    """End-to-end check of a toy network's KL loss w.r.t. a sample of every weight tensor."""
    rng = np.random.default_rng(seed)
    with precision(np.float64):
        config = ModelConfig.toy(fusion_mode=fusion_mode)
        model = ViNet(config, seed=seed)
        # zero biases put dead units exactly on the relu kink; move to a generic point
        for name, p in model.named_parameters():
            if name.endswith("bias"):
                p.data = rng.uniform(-0.1, 0.1, p.shape)
        clip = Tensor(rng.random((1, 3, config.clip_len, config.height, config.width)))
        target = _distribution(rng, (1, config.height, config.width))
        audio = Tensor(rng.standard_normal((1, 1, config.audio_len))) if fusion_mode != "none" else None

        def loss() -> Tensor:
            pred = model(clip, audio)
            return kldiv(F.normalize_to_distribution(pred), target)

        return grad_check(loss, dict(model.named_parameters()), max_entries=entries, seed=seed)


def gradcheck_suite(seed: int = 0, include_model: bool = True) -> GradCheckReport:
    report = op_suite(seed)
    if include_model:
        for mode in ("none", "bilinear"):
            report.merge(model_check(seed, mode), prefix=f"model[{mode}].")
    return report
