"""Efficiency accounting and ablation harness: parameter counts, per-frame
FLOP analogs (reported as 2 x MAC), 100-repeat latency/FPS measurement, and
the component/fashion ablation grids with CSV reports.
"""

from __future__ import annotations

import csv
import json
import platform
import sys
import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import blocks
from . import tensor as T
from .config import ModelConfig, TrainConfig
from .data import VideoSample
from .memory import calibrate_thresholds
from .model import DMNet, TrainingError
from .tensor import FLOPS_PER_MAC, Tensor, counter, no_grad

CSV_COLUMNS = ("variant", "seed", "miou", "mdice", "params", "flops",
               "latency_ms", "fps")

# Table rows: component ablations and local-aggregation fashions
COMPONENT_GRID = {
    "baseline": dict(local_aggregator="none", use_aga=False),
    "ela": dict(local_aggregator="ela", use_aga=False),
    "aga": dict(local_aggregator="none", use_aga=True),
    "full": dict(local_aggregator="ela", use_aga=True),
}
FASHION_GRID = {
    "nl": dict(local_aggregator="nl", use_aga=False),
    "clstm": dict(local_aggregator="clstm", use_aga=False),
    "blstm": dict(local_aggregator="blstm", use_aga=False),
    "ela": dict(local_aggregator="ela", use_aga=False),
}
GRIDS = {"components": COMPONENT_GRID, "fashions": FASHION_GRID}


def count_params(cfg: ModelConfig) -> int:
    """Total parameter scalars for the configured variant."""
    return blocks.param_count(blocks.init_params(cfg, np.random.default_rng(0)))


def count_model_flops(cfg: ModelConfig, occupancy: int | None = None) -> dict:
    """FLOPs (2 x MAC) of one steady-state frame, itemized per block.

    Steady state means a full local window (tau stored maps) and, when the
    global memory is enabled, `occupancy` sampled maps (default n_sample).
    Pure function of the config; independent of weights and wall clock."""
    if occupancy is None:
        occupancy = cfg.n_sample
    model = DMNet(cfg)
    h, w = cfg.height // 8, cfg.width // 8
    img = Tensor(np.zeros((3, cfg.height, cfg.width)))
    stored = [np.zeros((cfg.channels, h, w)) for _ in range(cfg.tau)]
    sample = [np.zeros((cfg.channels, h, w)) for _ in range(occupancy)]
    items = {}
    prev_enabled = counter.enabled
    with no_grad():
        counter.enabled = True
        counter.reset()
        f_t = blocks.encoder_forward(img, model.params, cfg)
        items["encoder"] = FLOPS_PER_MAC * counter.macs
        counter.reset()
        clip = [Tensor(m) for m in stored] + [f_t]
        f_local = model._aggregate_local(clip, f_t)
        items["local_aggregation"] = FLOPS_PER_MAC * counter.macs
        counter.reset()
        if cfg.use_aga and sample:
            f_global = f_local + blocks.memory_read(f_local, sample, model.params, cfg)
        else:
            f_global = f_local
        items["global_read"] = FLOPS_PER_MAC * counter.macs
        counter.reset()
        blocks.decoder_forward(f_global, model.params, cfg)
        items["decoder"] = FLOPS_PER_MAC * counter.macs
        counter.reset()
    counter.enabled = prev_enabled
    items["total"] = sum(items.values())
    return items


def measure_latency(model: DMNet, video: VideoSample, repeats: int = 100,
                    warmup: int = 5) -> dict:
    """Wall-clock per-frame cost at steady state.

    Streams `warmup` frames first (excluded), then times `repeats` runs of
    process_frame, advancing through the video and wrapping if needed."""
    n = len(video.frames)
    if n <= warmup:
        raise ValueError(f"video too short for warm-up ({n} <= {warmup})")
    state = model.new_stream()
    t = 0
    for _ in range(warmup):
        model.process_frame(state, video.frames[t % n])
        t += 1
    times = []
    for _ in range(repeats):
        start = time.perf_counter()
        model.process_frame(state, video.frames[t % n])
        times.append((time.perf_counter() - start) * 1000.0)
        t += 1
    mean_ms = float(np.mean(times))
    return {"mean_ms": mean_ms, "std_ms": float(np.std(times)),
            "fps": 1000.0 / mean_ms, "repeats": repeats}


@dataclass
class BenchReport:
    """Per-(variant, seed) result rows plus an environment echo."""

    grid: str
    rows: list[dict] = field(default_factory=list)
    environment: dict = field(default_factory=dict)

    def summary_rows(self):
        """One seed-averaged row per variant (seed column reads 'mean')."""
        out = []
        for variant in dict.fromkeys(r["variant"] for r in self.rows):
            group = [r for r in self.rows
                     if r["variant"] == variant and not r.get("failed")]
            if not group:
                continue
            out.append({
                "variant": variant, "seed": "mean",
                "miou": float(np.mean([r["miou"] for r in group])),
                "mdice": float(np.mean([r["mdice"] for r in group])),
                "params": group[0]["params"], "flops": group[0]["flops"],
                "latency_ms": float(np.mean([r["latency_ms"] for r in group])),
                "fps": float(np.mean([r["fps"] for r in group])),
            })
        return out

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=CSV_COLUMNS, extrasaction="ignore")
            writer.writeheader()
            for row in self.rows + self.summary_rows():
                writer.writerow(row)
        sidecar = str(path) + ".env.json"
        with open(sidecar, "w") as fh:
            json.dump(self.environment, fh, indent=2, sort_keys=True)


def _environment(cfg: ModelConfig, seeds):
    return {
        "precision": "float64",
        "image_size": [cfg.height, cfg.width],
        "seeds": list(seeds),
        "flop_convention": f"{FLOPS_PER_MAC}x MAC",
        "python": sys.version.split()[0],
        "platform": platform.platform(),
        "numpy": np.__version__,
    }


def run_ablation(train_videos, val_videos, grid: str, seeds,
                 base_cfg: ModelConfig | None = None,
                 train_cfg: TrainConfig | None = None,
                 calibrate: bool = True, latency_repeats: int = 100,
                 progress=None) -> BenchReport:
    """Train/evaluate/profile every grid variant with identical schedules.

    A variant whose training diverges is recorded as a failed row; the rest
    of the grid still runs."""
    if grid not in GRIDS:
        raise ValueError(f"unknown grid '{grid}' (choose from {sorted(GRIDS)})")
    if not train_videos or not val_videos:
        raise ValueError("empty dataset")
    base_cfg = base_cfg if base_cfg is not None else ModelConfig()
    train_cfg = train_cfg if train_cfg is not None else TrainConfig()
    report = BenchReport(grid=grid, environment=_environment(base_cfg, seeds))
    for variant, overrides in GRIDS[grid].items():
        for seed in seeds:
            cfg = replace(base_cfg, seed=seed, **overrides)
            flops = count_model_flops(cfg)["total"]
            params = count_params(cfg)
            row = {"variant": variant, "seed": seed,
                   "params": params, "flops": flops}
            try:
                model = DMNet(cfg)
                model.train(train_videos, train_cfg)
                if cfg.use_aga and calibrate:
                    alpha, beta = calibrate_thresholds(train_videos, model)
                    model.cfg.alpha, model.cfg.beta = alpha, beta
                metrics = model.evaluate(val_videos)
                lat = measure_latency(model, val_videos[0], repeats=latency_repeats)
                row.update(miou=100.0 * metrics["miou"],
                           mdice=100.0 * metrics["mdice"],
                           latency_ms=lat["mean_ms"], fps=lat["fps"])
            except TrainingError as exc:
                row.update(miou=float("nan"), mdice=float("nan"),
                           latency_ms=float("nan"), fps=float("nan"),
                           failed=True, error=str(exc))
            report.rows.append(row)
            if progress:
                progress(row)
    return report
