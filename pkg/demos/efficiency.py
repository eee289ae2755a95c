"""Cost accounting across the temporal-aggregation variants.

Prints parameter counts and deterministic per-frame FLOPs (2 x MAC) for each
local-aggregation fashion plus the dual-memory combinations, then measures
real per-frame latency of the full model at 64x80.

Run:  python3 demos/efficiency.py
"""

from dmnet.bench import count_model_flops, count_params, measure_latency
from dmnet.config import ModelConfig, SceneConfig
from dmnet.data import generate_video
from dmnet.model import DMNet

VARIANTS = {
    "baseline (per-frame)": dict(local_aggregator="none", use_aga=False),
    "blstm": dict(local_aggregator="blstm", use_aga=False),
    "ela": dict(local_aggregator="ela", use_aga=False),
    "nl": dict(local_aggregator="nl", use_aga=False),
    "clstm": dict(local_aggregator="clstm", use_aga=False),
    "aga only": dict(local_aggregator="none", use_aga=True),
    "full (ela + aga)": dict(local_aggregator="ela", use_aga=True),
}


def main():
    print(f"{'variant':22s} {'params':>10s} {'flops/frame':>14s} "
          f"{'local agg':>12s} {'global read':>12s}")
    for name, overrides in VARIANTS.items():
        cfg = ModelConfig(lstm_channels=32, value_channels=32, key_channels=8,
                          **overrides)
        items = count_model_flops(cfg)
        print(f"{name:22s} {count_params(cfg):10,d} {items['total']:14,d} "
              f"{items['local_aggregation']:12,d} {items['global_read']:12,d}")

    print("\nmeasuring full-model latency at 64x80 (100 repeats) ...")
    cfg = ModelConfig(lstm_channels=32, value_channels=32, key_channels=8)
    video = generate_video(SceneConfig(video_length=16, seed=0))
    lat = measure_latency(DMNet(cfg), video, repeats=100)
    print(f"per-frame {lat['mean_ms']:.1f} ms +- {lat['std_ms']:.1f} ms "
          f"-> {lat['fps']:.1f} FPS")


if __name__ == "__main__":
    main()
