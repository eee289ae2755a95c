"""End-to-end tour in a couple of minutes on one CPU core.

Generates a small synthetic dataset, trains a compact dual-memory model,
evaluates it on a held-out video, and streams that video frame by frame while
printing the global-memory admission trace.

Run:  python3 demos/quickstart.py
"""

import numpy as np

from dmnet.config import ModelConfig, SceneConfig, TrainConfig
from dmnet.data import generate_video
from dmnet.memory import calibrate_thresholds
from dmnet.model import DMNet


def scene(seed):
    return SceneConfig(height=32, width=40, part_mode=False,
                       num_instruments=2, blur_prob=0.4, blur_strength=30,
                       motion_amplitude=1.5, video_length=24, seed=seed)


def main():
    print("generating 4 training videos and 1 held-out video ...")
    train_videos = [generate_video(scene(s)) for s in range(4)]
    held_out = generate_video(scene(100))

    model = DMNet(ModelConfig(channels=8, classes=3, height=32, width=40,
                              tau=2, lstm_channels=8, key_channels=4,
                              value_channels=8, seed=0))
    print("training (30 epochs) ...")
    model.train(train_videos,
                TrainConfig(learning_rate=1e-3, epochs=30, clips_per_video=4),
                progress=lambda e: e["epoch"] % 10 == 0 and print(
                    f"  epoch {e['epoch']:2d}  loss {e['mean_loss']:.4f}"))

    print("calibrating admission thresholds on the training set ...")
    model.cfg.alpha, model.cfg.beta = calibrate_thresholds(train_videos, model)
    print(f"  alpha = {model.cfg.alpha:.4f}  beta = {model.cfg.beta:.4f}")

    metrics = model.evaluate([held_out])
    print(f"held-out mIoU {100 * metrics['miou']:.2f}  "
          f"mDice {100 * metrics['mdice']:.2f}")

    print("\nstreaming the held-out video (admission trace):")
    print(" frame  blur  r        s        admitted  memory")
    state = model.new_stream()
    for t in range(len(held_out.frames)):
        model.process_frame(state, held_out.frames[t])
        admitted, r, s = state.last_admission
        s_txt = "  -inf " if s == float("-inf") else f"{s:7.3f}"
        print(f"  {t:3d}    {int(held_out.events[t]['blur'])}   {r:7.4f} "
              f"{s_txt}      {int(admitted)}      {len(state.global_mem)}")


if __name__ == "__main__":
    main()
