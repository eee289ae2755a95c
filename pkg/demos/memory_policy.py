"""How the gated global memory decides what to keep.

Streams a blur-heavy synthetic video through a model and plots (as text) the
per-frame representativeness r (prediction confidence, near 0 = confident)
and similarity s to the latest stored frame (near 0 = near-duplicate). A
frame is admitted iff r > alpha and s < beta. Blur bursts visibly depress r,
which is exactly what the gate is for: confused frames never enter the
long-term store.

Run:  python3 demos/memory_policy.py
"""

import numpy as np

from dmnet.config import ModelConfig, SceneConfig, TrainConfig
from dmnet.data import generate_video
from dmnet.memory import calibrate_thresholds
from dmnet.model import DMNet


def bar(value, lo, hi, width=30):
    frac = 0.0 if hi == lo else (value - lo) / (hi - lo)
    n = int(round(np.clip(frac, 0.0, 1.0) * width))
    return "#" * n + "." * (width - n)


def main():
    scene = lambda seed: SceneConfig(
        height=32, width=40, part_mode=False, num_instruments=2,
        blur_prob=0.4, blur_strength=30, motion_amplitude=1.5,
        video_length=40, seed=seed)

    print("training a small model so confidence is informative ...")
    train_videos = [generate_video(scene(s)) for s in range(4)]
    model = DMNet(ModelConfig(channels=8, classes=3, height=32, width=40,
                              tau=2, lstm_channels=8, key_channels=4,
                              value_channels=8, local_aggregator="none",
                              seed=0))
    model.train(train_videos,
                TrainConfig(learning_rate=1e-3, epochs=40, clips_per_video=4))
    model.cfg.alpha, model.cfg.beta = calibrate_thresholds(train_videos, model)
    print(f"calibrated alpha = {model.cfg.alpha:.4f}  "
          f"beta = {model.cfg.beta:.4f}\n")

    video = generate_video(scene(50))
    state = model.new_stream()
    rows = []
    for t in range(len(video.frames)):
        model.process_frame(state, video.frames[t])
        admitted, r, s = state.last_admission
        rows.append((t, video.events[t]["blur"], r, s, admitted,
                     len(state.global_mem)))

    r_hi = max(row[2] for row in rows)
    r_lo = min(row[2] for row in rows)
    print(" frame blur  r (confidence)                   admitted  memory")
    for t, blur, r, s, admitted, size in rows:
        flag = " <-- admitted" if admitted else ""
        print(f"  {t:3d}   {int(blur)}   {bar(r, r_lo, r_hi)} {r:7.4f}"
              f"   {size:3d}{flag}")
    kept = sum(row[4] for row in rows)
    blurred_kept = sum(row[4] for row in rows if row[1])
    print(f"\nadmitted {kept}/{len(rows)} frames; "
          f"blurred frames admitted: {blurred_kept}")


if __name__ == "__main__":
    main()
