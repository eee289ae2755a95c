"""Command-line entry point: data generation, training, evaluation, streaming
inference, threshold calibration, and benchmark grids.

Run configuration is a flat key=value text file ('#' comments); every model,
training, and scene field is a key, unknown keys are rejected, and --help
lists each key with its default. Exit codes: 2 config error, 3 training
failure, 4 checkpoint error, 5 stream-input error.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import os
import re
import sys
from pathlib import Path

import numpy as np

from .bench import GRIDS, run_ablation
from .config import ModelConfig, SceneConfig, TrainConfig
from .data import (VideoFormatError, generate_video, load_video_dir,
                   write_video_dir)
from .memory import calibrate_thresholds
from .model import DMNet, TrainingError

EXIT_CONFIG, EXIT_TRAINING, EXIT_CKPT, EXIT_STREAM = 2, 3, 4, 5

# keys shared by more than one section apply to every section that has them
_SECTIONS = (("model", ModelConfig), ("train", TrainConfig), ("scene", SceneConfig))
_EXTRA_KEYS = {"val_videos": (int, 2), "data_dir": (str, ""), "out_dir": (str, "")}


def _config_keys():
    """Ordered {key: (type, default)} across all sections plus extras."""
    keys = {}
    for _, cls in _SECTIONS:
        for f in dataclasses.fields(cls):
            keys.setdefault(f.name, (f.type, f.default))
    for k, (typ, default) in _EXTRA_KEYS.items():
        keys[k] = (typ, default)
    return keys


_TYPE_PARSERS = {
    "int": int, int: int,
    "float": float, float: float,
    "str": str, str: str,
}


def _parse_value(key, typ, raw):
    if typ in ("bool", bool):
        low = raw.strip().lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ConfigFileError(f"key '{key}': expected a boolean, got '{raw}'")
    try:
        return _TYPE_PARSERS[typ](raw.strip())
    except (KeyError, ValueError) as exc:
        raise ConfigFileError(f"key '{key}': cannot parse '{raw}'") from exc


class ConfigFileError(ValueError):
    pass


class RunConfig:
    """All settings of one run: model, training, and scene sections."""

    def __init__(self, values: dict | None = None):
        values = dict(values or {})
        known = _config_keys()
        for key in values:
            if key not in known:
                raise ConfigFileError(f"unknown config key '{key}'")
        self.extras = {k: values.get(k, d) for k, (_, d) in _EXTRA_KEYS.items()}
        section_kwargs = {}
        for name, cls in _SECTIONS:
            fields = {f.name for f in dataclasses.fields(cls)}
            section_kwargs[name] = {k: v for k, v in values.items() if k in fields}
        try:
            self.model = ModelConfig(**section_kwargs["model"])
            self.train = TrainConfig(**section_kwargs["train"])
            self.scene = SceneConfig(**section_kwargs["scene"])
        except ValueError as exc:
            raise ConfigFileError(str(exc)) from exc

    def override_seed(self, seed: int):
        self.model.seed = seed
        self.scene.seed = seed

    def to_values(self) -> dict:
        out = {}
        for name, _ in _SECTIONS:
            obj = getattr(self, name)
            for f in dataclasses.fields(type(obj)):
                out.setdefault(f.name, getattr(obj, f.name))
        out.update(self.extras)
        return out

    def serialize(self) -> str:
        lines = [f"{k}={v}" for k, v in self.to_values().items()]
        return "\n".join(lines) + "\n"

    @classmethod
    def parse(cls, text: str) -> "RunConfig":
        known = _config_keys()
        values = {}
        for ln, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigFileError(f"line {ln}: expected key=value, got '{line}'")
            key, raw = (part.strip() for part in line.split("=", 1))
            if key not in known:
                raise ConfigFileError(f"unknown config key '{key}'")
            values[key] = _parse_value(key, known[key][0], raw)
        return cls(values)

    @classmethod
    def load(cls, path) -> "RunConfig":
        path = Path(path)
        if not path.exists():
            raise ConfigFileError(f"config file not found: {path}")
        return cls.parse(path.read_text())


def _load_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    env_seed = os.environ.get("DMNET_SEED")
    if env_seed is not None:
        try:
            cfg.override_seed(int(env_seed))
        except ValueError as exc:
            raise ConfigFileError(f"DMNET_SEED must be an integer, got '{env_seed}'") from exc
    return cfg


def _load_videos(data_dir, num_classes):
    data_dir = Path(data_dir)
    if not data_dir.is_dir():
        raise VideoFormatError(f"data directory not found: {data_dir}")
    dirs = sorted(d for d in data_dir.iterdir() if d.is_dir())
    if not dirs:
        raise VideoFormatError(f"no video directories under {data_dir}")
    return [load_video_dir(d, num_classes=num_classes) for d in dirs]


def _split(videos, val_videos):
    n_val = max(1, min(int(val_videos), len(videos) - 1)) if len(videos) > 1 else 0
    if n_val == 0:
        return videos, videos
    return videos[:-n_val], videos[-n_val:]


def _fail(code, message):
    print(f"error: {message}", file=sys.stderr)
    raise SystemExit(code)


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen_data(args):
    try:
        cfg = _load_config(args)
    except ConfigFileError as exc:
        _fail(EXIT_CONFIG, exc)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for i in range(args.videos):
        scene = dataclasses.replace(cfg.scene, seed=cfg.scene.seed + i)
        sample = generate_video(scene)
        write_video_dir(sample, out / f"video_{i:03d}")
        blur = sum(e["blur"] for e in sample.events)
        occ = sum(e["occlusion"] for e in sample.events)
        bright = sum(e["brightness"] for e in sample.events)
        print(f"video_{i:03d}: {len(sample)} frames, blur={blur}, "
              f"occlusion={occ}, brightness={bright}")


def cmd_train(args):
    try:
        cfg = _load_config(args)
    except ConfigFileError as exc:
        _fail(EXIT_CONFIG, exc)
    out = Path(args.out)
    if out.exists() and not args.force:
        _fail(EXIT_CONFIG, f"{out} exists; pass --force to overwrite")
    try:
        videos = _load_videos(args.data, cfg.model.classes)
    except VideoFormatError as exc:
        _fail(EXIT_CONFIG, exc)
    train_videos, val_videos = _split(videos, cfg.extras["val_videos"])
    model = DMNet(cfg.model)
    try:
        log = model.train(train_videos, cfg.train, val_videos=val_videos,
                          progress=lambda e: print(
                              f"epoch {e['epoch']:3d} loss {e['mean_loss']:.4f} "
                              f"val_miou {e['val_miou']:.4f}"))
    except TrainingError as exc:
        _fail(EXIT_TRAINING, exc)
    out.parent.mkdir(parents=True, exist_ok=True)
    model.save(out)
    log_path = Path(str(out) + ".log.csv")
    with open(log_path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=("epoch", "mean_loss", "lr", "val_miou"))
        writer.writeheader()
        writer.writerows(log)
    print(f"checkpoint written to {out}")
    print(f"final validation mIoU: {100 * log[-1]['val_miou']:.2f}")


_VARIANTS = {
    "baseline": dict(local_aggregator="none", use_aga=False),
    "ela": dict(local_aggregator="ela", use_aga=False),
    "aga": dict(local_aggregator="none", use_aga=True),
    "full": dict(local_aggregator="ela", use_aga=True),
}


def _load_model(path) -> DMNet:
    path = Path(path)
    if not path.exists():
        raise ValueError(f"checkpoint not found: {path}")
    try:
        return DMNet.load(path)
    except Exception as exc:
        raise ValueError(f"cannot load checkpoint {path}: {exc}") from exc


def cmd_eval(args):
    try:
        model = _load_model(args.ckpt)
    except ValueError as exc:
        _fail(EXIT_CKPT, exc)
    if args.variant:
        if args.variant not in _VARIANTS:
            _fail(EXIT_CONFIG, f"unknown variant '{args.variant}'")
        overrides = _VARIANTS[args.variant]
        trained = {"local_aggregator": model.cfg.local_aggregator,
                   "use_aga": model.cfg.use_aga}
        # a module can be switched off at evaluation, never switched on
        if (overrides["use_aga"] and not trained["use_aga"]) or (
                overrides["local_aggregator"] != "none"
                and overrides["local_aggregator"] != trained["local_aggregator"]):
            _fail(EXIT_CKPT, f"checkpoint lacks parameters for variant '{args.variant}'")
        model.cfg.local_aggregator = overrides["local_aggregator"]
        model.cfg.use_aga = overrides["use_aga"]
    try:
        videos = _load_videos(args.data, model.cfg.classes)
    except VideoFormatError as exc:
        _fail(EXIT_CONFIG, exc)
    metrics = model.evaluate(videos)
    rows = []
    for c in range(model.cfg.classes):
        iou = metrics["per_class_iou"][c]
        dice = metrics["per_class_dice"][c]
        rows.append({"class": c,
                     "iou": "" if iou is None else f"{100 * iou:.4f}",
                     "dice": "" if dice is None else f"{100 * dice:.4f}"})
        print(f"class {c}: IoU {rows[-1]['iou'] or 'n/a'} Dice {rows[-1]['dice'] or 'n/a'}")
    rows.append({"class": "mean", "iou": f"{100 * metrics['miou']:.4f}",
                 "dice": f"{100 * metrics['mdice']:.4f}"})
    print(f"mIoU {rows[-1]['iou']}  mDice {rows[-1]['dice']}")
    with open(args.out, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=("class", "iou", "dice"))
        writer.writeheader()
        writer.writerows(rows)


def cmd_stream(args):
    try:
        model = _load_model(args.ckpt)
    except ValueError as exc:
        _fail(EXIT_CKPT, exc)
    in_dir = Path(args.indir)
    matches = []
    for f in sorted(in_dir.glob("frame_*.ppm")):
        m = re.fullmatch(r"frame_(\d+)\.ppm", f.name)
        if m:
            matches.append((int(m.group(1)), f))
    if not matches:
        _fail(EXIT_STREAM, f"no frame_*.ppm files in {in_dir}")
    matches.sort()
    indices = [i for i, _ in matches]
    if indices != list(range(len(indices))):
        _fail(EXIT_STREAM, f"frame files out of order in {in_dir}: "
                           f"expected 0..{len(indices) - 1}, got {indices}")
    frame_files = [f for _, f in matches]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    from .data import _read_pnm, _write_pnm
    state = model.new_stream()
    trace = []
    for t, f in enumerate(frame_files):
        try:
            img = _read_pnm(f, "P6").astype(np.float64) / 255.0
        except VideoFormatError as exc:
            _fail(EXIT_STREAM, exc)
        mask, probs = model.process_frame(state, img)
        _write_pnm(out / f"mask_{t:05d}.pgm", "P5", mask)
        if state.last_admission is not None:
            admitted, r, s = state.last_admission
        else:
            from .memory import representativeness
            admitted, r, s = False, representativeness(probs), float("-inf")
        trace.append({"frame": t, "r": f"{r:.6f}",
                      "s": s if s == float("-inf") else f"{s:.6f}",
                      "admitted": int(admitted),
                      "global_size": len(state.global_mem)})
    with open(out / "memory_trace.csv", "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=("frame", "r", "s", "admitted",
                                                "global_size"))
        writer.writeheader()
        writer.writerows(trace)
    print(f"streamed {len(frame_files)} frames; trace in {out / 'memory_trace.csv'}")


def cmd_calibrate(args):
    try:
        model = _load_model(args.ckpt)
    except ValueError as exc:
        _fail(EXIT_CKPT, exc)
    try:
        videos = _load_videos(args.data, model.cfg.classes)
    except VideoFormatError as exc:
        _fail(EXIT_CONFIG, exc)
    alpha, beta = calibrate_thresholds(videos, model)
    model.cfg.alpha, model.cfg.beta = alpha, beta
    model.save(args.ckpt)
    print(f"alpha={alpha:.6f}")
    print(f"beta={beta:.6f}")
    print(f"thresholds persisted to {args.ckpt}")


def cmd_bench(args):
    try:
        cfg = _load_config(args)
    except ConfigFileError as exc:
        _fail(EXIT_CONFIG, exc)
    if args.grid not in GRIDS:
        _fail(EXIT_CONFIG, f"unknown grid '{args.grid}' (choose from {sorted(GRIDS)})")
    try:
        videos = _load_videos(args.data, cfg.model.classes)
    except VideoFormatError as exc:
        _fail(EXIT_CONFIG, exc)
    train_videos, val_videos = _split(videos, cfg.extras["val_videos"])
    seeds = [int(s) for s in args.seeds.split(",")] if args.seeds \
        else [cfg.model.seed + i for i in range(3)]
    report = run_ablation(train_videos, val_videos, args.grid, seeds,
                          base_cfg=cfg.model, train_cfg=cfg.train,
                          latency_repeats=args.repeats,
                          progress=lambda row: print(
                              f"{row['variant']} seed={row['seed']} "
                              f"miou={row['miou']:.2f} fps={row['fps']:.1f}"))
    report.write_csv(args.out)
    print(f"report written to {args.out}")


# ---------------------------------------------------------------------------
# argument parsing


def _config_help():
    lines = ["config file keys (key=value, '#' comments):"]
    for key, (_, default) in _config_keys().items():
        lines.append(f"  {key} (default: {default})")
    return "\n".join(lines)


def build_parser():
    parser = argparse.ArgumentParser(
        prog="dmnet",
        description="Dual-memory real-time video segmentation toolkit.",
        epilog=_config_help(),
        formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate synthetic videos")
    p.add_argument("--config", default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--videos", type=int, default=8)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train a model")
    p.add_argument("--config", default=None)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--variant", default=None)
    p.add_argument("--out", default="metrics.csv")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("stream", help="online inference over a frame directory")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--in", dest="indir", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_stream)

    p = sub.add_parser("calibrate", help="calibrate admission thresholds")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("bench", help="run an ablation grid")
    p.add_argument("--config", default=None)
    p.add_argument("--data", required=True)
    p.add_argument("--grid", required=True)
    p.add_argument("--out", default="bench.csv")
    p.add_argument("--seeds", default=None)
    p.add_argument("--repeats", type=int, default=100)
    p.set_defaults(func=cmd_bench)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    args.func(args)
    return 0


if __name__ == "__main__":
    sys.exit(main())
