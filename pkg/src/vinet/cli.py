"""Command-line entry point.

Exit codes: 0 success, 1 invalid usage or configuration, 2 runtime failure.
Every output file goes under ``--out``; logs go to standard error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from PIL import Image

from .checkpoint import CheckpointError, load_checkpoint, load_metadata
from .data import DatasetError, generate_synthetic, load_dataset
from .experiments import ablate_clip_size, ablate_hierarchy, probe_audio
from .model import ConfigError, ModelConfig, ViNet, count_parameters, decoder_plan, pyramid_shapes
from .selfcheck import gradcheck_suite
from .train import MetricsConfig, TrainConfig, evaluate, predict_video, train

log = logging.getLogger("vinet")

MODEL_KEYS = set(ModelConfig.__dataclass_fields__)
TRAIN_KEYS = set(TrainConfig.__dataclass_fields__)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


def _dims(shape) -> str:
    return "×".join(str(d) for d in shape)


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def resolve_configs(args, base: Optional[dict] = None) -> tuple[ModelConfig, TrainConfig]:
    """Preset, then checkpoint metadata, then config file, then flags, then ``--set`` overrides."""
    settings: dict = dict(base or {})
    if args.config:
        try:
            loaded = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as e:
            raise UsageError(f"cannot read config {args.config}: {e}") from None
        if not isinstance(loaded, dict):
            raise UsageError(f"{args.config}: expected a JSON object")
        settings.update(loaded)
    if args.preset:
        settings["preset"] = args.preset
    if args.clip_size is not None:
        settings["clip_len"] = args.clip_size
    if args.fusion:
        settings["fusion_mode"] = args.fusion
    if args.seed is not None:
        settings["seed"] = args.seed
    for item in args.set or []:
        key, sep, value = item.partition("=")
        if not sep:
            raise UsageError(f"--set expects key=value, got {item!r}")
        settings[key.strip()] = _parse_value(value)
    unknown = set(settings) - MODEL_KEYS - TRAIN_KEYS
    if unknown:
        raise UsageError(f"unknown configuration keys: {sorted(unknown)}")
    model_kw = {k: v for k, v in settings.items() if k in MODEL_KEYS and k != "preset"}
    train_kw = {k: v for k, v in settings.items() if k in TRAIN_KEYS}
    try:
        model_cfg = ModelConfig.from_preset(settings.get("preset", "toy"), **model_kw)
        train_cfg = TrainConfig(**train_kw)
    except (ConfigError, ValueError, TypeError) as e:
        raise UsageError(f"invalid configuration: {e}") from None
    return model_cfg, train_cfg


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load_model(args) -> tuple[ViNet, TrainConfig]:
    base = None
    if args.checkpoint:
        meta = load_metadata(args.checkpoint) or {}
        base = meta.get("model_config")
    model_cfg, train_cfg = resolve_configs(args, base)
    model = ViNet(model_cfg, seed=train_cfg.seed)
    if args.checkpoint:
        load_checkpoint(args.checkpoint, model)
    return model, train_cfg


def _videos(path: str):
    videos = load_dataset(path)
    if not videos:
        raise DatasetError(f"{path}: no videos found")
    return videos


def _experiment_data(args, model_cfg: ModelConfig, seed: int):
    """Videos from ``--data`` or a freshly generated synthetic set; last two held out."""
    root = args.data
    if root is None:
        root = Path(args.out) / "data"
        generate_synthetic(root, args.videos, args.frames, model_cfg.height, model_cfg.width,
                           audio_informative=True, seed=seed)
    videos = _videos(root)
    if len(videos) < 2:
        raise DatasetError(f"{root}: need at least two videos for a train/validation split")
    n_val = max(1, min(2, len(videos) // 3))
    return videos[:-n_val], videos[-n_val:]


# ---------------------------------------------------------------- commands
def cmd_shapes(args) -> None:
    cfg, _ = resolve_configs(args)
    print(f"input = {_dims((3, cfg.clip_len, cfg.height, cfg.width))}")
    for name, shape in pyramid_shapes(cfg).items():
        print(f"{name.upper()} = {_dims(shape)}")
    for k, block in enumerate(decoder_plan(cfg), start=1):
        print(f"decoder block {k} = {_dims((block['out'],) + block['extent'])}")
    print(f"output = {_dims((cfg.height, cfg.width))}")
    print(f"parameters = {count_parameters(cfg)}")


def cmd_synth(args) -> None:
    cfg, tcfg = resolve_configs(args)
    height = args.height or cfg.height
    width = args.width or cfg.width
    ids = generate_synthetic(_out_dir(args), args.videos, args.frames, height, width,
                             audio_informative=not args.uninformative_audio, seed=tcfg.seed)
    print(f"wrote {len(ids)} videos to {args.out}")


def cmd_train(args) -> None:
    model, tcfg = _load_model(args)
    if args.steps is not None:
        tcfg.max_steps = args.steps
        tcfg.validate()
    videos = _videos(args.data)
    if args.val:
        train_v, val_v = videos, _videos(args.val)
    elif len(videos) >= 2:
        train_v, val_v = videos[:-1], videos[-1:]
    else:
        train_v, val_v = videos, None
    result = train(model, train_v, val_v, tcfg, _out_dir(args))
    print(f"steps={result.steps} best_step={result.best_step} best_val_cc={result.best_val_cc:.6f}"
          f" stopped_early={result.stopped_early}")


def cmd_eval(args) -> None:
    model, tcfg = _load_model(args)
    result = evaluate(model, _videos(args.data),
                      MetricsConfig(sigma=tcfg.density_sigma, n_splits=args.splits, seed=tcfg.seed))
    out = _out_dir(args)
    (out / "metrics_frames.csv").write_text(result.frame_csv())
    (out / "metrics_summary.csv").write_text(result.summary_csv())
    sys.stdout.write(result.summary_csv())


def cmd_infer(args) -> None:
    model, tcfg = _load_model(args)
    out = _out_dir(args)
    total = 0
    for video in _videos(args.data):
        vdir = out / video.id
        vdir.mkdir(parents=True, exist_ok=True)
        for t, m in enumerate(predict_video(model, video, model.config, tcfg.density_sigma)):
            peak = m.max()
            img = np.round(255.0 * m / peak) if peak > 0 else np.zeros_like(m)
            Image.fromarray(img.astype(np.uint8), mode="L").save(vdir / f"{t:05d}.png")
            total += 1
    print(f"wrote {total} maps to {out}")


def cmd_ablate_clip(args) -> None:
    try:
        sizes = [int(s) for s in args.sizes.split(",") if s.strip()]
    except ValueError:
        raise UsageError(f"clip sizes must be comma-separated integers, got {args.sizes!r}") from None
    if not sizes:
        raise UsageError("no clip sizes given")
    cfg, tcfg = resolve_configs(args)
    tcfg.max_steps = args.steps
    try:
        configs = [cfg.replace(clip_len=s) for s in sizes]
    except ConfigError as e:
        raise UsageError(f"invalid clip size: {e}") from None
    del configs
    train_v, val_v = _experiment_data(args, cfg, tcfg.seed)
    table = ablate_clip_size(sizes, cfg, train_v, val_v, tcfg)
    (_out_dir(args) / "ablate_clip.csv").write_text(table.to_csv())
    sys.stdout.write(table.to_csv())


def cmd_ablate_hierarchy(args) -> None:
    cfg, tcfg = resolve_configs(args)
    tcfg.max_steps = args.steps
    train_v, val_v = _experiment_data(args, cfg, tcfg.seed)
    table = ablate_hierarchy(cfg, train_v, val_v, tcfg)
    (_out_dir(args) / "ablate_hierarchy.csv").write_text(table.to_csv())
    sys.stdout.write(table.to_csv())


def cmd_probe_audio(args) -> None:
    model, tcfg = _load_model(args)
    train_v, val_v = _experiment_data(args, model.config, tcfg.seed)
    if not args.checkpoint and args.steps > 0:
        tcfg.max_steps = args.steps
        train(model, train_v, None, tcfg)
    report = probe_audio(model, train_v + val_v, seed=tcfg.seed, sigma=tcfg.density_sigma)
    out = _out_dir(args)
    (out / "probe_audio.csv").write_text(report.to_csv())
    (out / "probe_audio_videos.csv").write_text(report.detail_csv())
    sys.stdout.write(report.to_csv())


def cmd_gradcheck(args) -> None:
    _, tcfg = resolve_configs(args)
    report = gradcheck_suite(tcfg.seed, include_model=not args.ops_only)
    text = "\n".join(report.lines()) + f"\nworst relative error {report.worst:.3e}\n"
    (_out_dir(args) / "gradcheck.txt").write_text(text)
    sys.stdout.write(text)
    if not report.passed(1e-4):
        raise RuntimeError(f"gradient check failed: worst relative error {report.worst:.3e}")


# ------------------------------------------------------------------ parser
def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="JSON file of model and training settings")
    common.add_argument("--out", default="out", help="output directory (default: out)")
    common.add_argument("--seed", type=int, help="RNG seed for data, initialization and training")
    common.add_argument("--preset", choices=("toy", "paper"))
    common.add_argument("--clip-size", type=int, dest="clip_size", help="frames per input clip")
    common.add_argument("--fusion", choices=("none", "concat", "bilinear"))
    common.add_argument("--checkpoint", help="weights file to load")
    common.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="override any configuration key (repeatable)")

    parser = _Parser(prog="vinet", description="Video saliency prediction toolkit.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def add(name, func, help_text):
        p = sub.add_parser(name, parents=[common], help=help_text)
        p.set_defaults(func=func)
        return p

    add("shapes", cmd_shapes, "print the symbolic shape contract")
    p = add("synth", cmd_synth, "generate a synthetic dataset")
    p.add_argument("--videos", type=int, default=6)
    p.add_argument("--frames", type=int, default=16)
    p.add_argument("--height", type=int)
    p.add_argument("--width", type=int)
    p.add_argument("--uninformative-audio", action="store_true",
                   help="draw audio independently of the visual trajectory")
    p = add("train", cmd_train, "train a model")
    p.add_argument("data")
    p.add_argument("--val", help="validation dataset (default: hold out the last video)")
    p.add_argument("--steps", type=int, help="maximum optimizer steps")
    p = add("eval", cmd_eval, "evaluate a model on a dataset")
    p.add_argument("data")
    p.add_argument("--splits", type=int, default=100, help="shuffled-AUC resampling rounds")
    p = add("infer", cmd_infer, "write one saliency PNG per frame")
    p.add_argument("data")
    for name, func, text in (("ablate-clip", cmd_ablate_clip, "clip length ablation"),
                             ("ablate-hierarchy", cmd_ablate_hierarchy, "skip connection ablation"),
                             ("probe-audio", cmd_probe_audio, "audio sensitivity probe")):
        p = add(name, func, text)
        if name == "ablate-clip":
            p.add_argument("sizes", help="comma-separated clip lengths, e.g. 8,16,32,48")
        p.add_argument("--data", help="dataset root (default: generate a synthetic set)")
        p.add_argument("--steps", type=int, default=50, help="training steps per model")
        p.add_argument("--videos", type=int, default=6)
        p.add_argument("--frames", type=int, default=16)
    p = add("gradcheck", cmd_gradcheck, "finite-difference gradient suite")
    p.add_argument("--ops-only", action="store_true", help="skip the end-to-end model check")
    return parser


def run(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as e:
        print(e, file=sys.stderr)
        return 1
    except SystemExit as e:  # --help
        return int(e.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except UsageError as e:
        print(f"vinet {args.command}: {e}", file=sys.stderr)
        return 1
    except (DatasetError, CheckpointError, OSError, ValueError, RuntimeError,
            FloatingPointError) as e:
        print(f"vinet {args.command}: {type(e).__name__}: {e}", file=sys.stderr)
        return 2
    return 0


def main() -> None:
    sys.exit(run())
