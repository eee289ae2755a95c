"""Model, training, and scene configuration records."""

from __future__ import annotations

from dataclasses import dataclass, field

LOCAL_AGGREGATORS = ("none", "ela", "nl", "clstm", "blstm")


@dataclass
class ModelConfig:
    """Architecture and memory-policy settings for one model."""

    tau: int = 4                    # local window length
    n_sample: int = 4               # global frames read per step
    alpha: float = -0.08            # representativeness threshold (recalibrate per dataset)
    beta: float = -4.65             # similarity threshold (recalibrate per dataset)
    channels: int = 32              # encoder output width C
    classes: int = 4                # background + instrument classes
    height: int = 64
    width: int = 80
    local_aggregator: str = "ela"   # none | ela | nl | clstm | blstm
    use_aga: bool = True
    lstm_channels: int = 0          # 0 -> channels // 2
    key_channels: int = 0           # 0 -> max(channels // 8, 4)
    value_channels: int = 0         # 0 -> channels // 2
    global_capacity: int = 256
    seed: int = 0

    def __post_init__(self):
        if self.lstm_channels <= 0:
            self.lstm_channels = max(self.channels // 2, 2)
        if self.key_channels <= 0:
            self.key_channels = max(self.channels // 8, 4)
        if self.value_channels <= 0:
            self.value_channels = max(self.channels // 2, 4)
        self.validate()

    def validate(self):
        if self.tau < 1 or self.n_sample < 1:
            raise ValueError("tau and n_sample must be >= 1")
        if self.classes < 2:
            raise ValueError("need at least 2 classes")
        if self.height % 8 or self.width % 8:
            raise ValueError("image size must be divisible by 8")
        if self.local_aggregator not in LOCAL_AGGREGATORS:
            raise ValueError(f"unknown local_aggregator '{self.local_aggregator}'")

    @property
    def encoder_channels(self):
        c = self.channels
        return (max(c // 2, 4), max(3 * c // 4, 6), c)

    @property
    def decoder_channels(self):
        c = self.channels
        return (max(c // 2, 4), max(3 * c // 8, 3), max(c // 4, 2))


@dataclass
class TrainConfig:
    """Optimizer and schedule settings (Adam with decoupled weight decay)."""

    learning_rate: float = 1e-4
    weight_decay: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    epochs: int = 30
    clips_per_video: int = 4
    prefill_frames: int = 4         # frames scanned to seed the global memory per clip
    lr_drop_at: float = 0.7         # lr x0.1 at this fraction of epochs
    # photometric input augmentation (training clips only, labels untouched)
    noise_std: float = 0.02         # per-pixel gaussian noise
    gain_jitter: float = 0.1        # per-clip multiplicative range: 1 +- gain
    bias_jitter: float = 0.05       # per-clip additive range: +- bias
    # geometric augmentation (applied to clip and label together)
    shift_jitter: int = 8           # circular shift of up to +- this many px
    flip_prob: float = 0.5          # chance of a horizontal flip per clip

    def __post_init__(self):
        if self.learning_rate <= 0 or self.epochs < 1:
            raise ValueError("learning rate must be positive and epochs >= 1")
        if min(self.noise_std, self.gain_jitter, self.bias_jitter,
               self.shift_jitter) < 0:
            raise ValueError("augmentation strengths must be non-negative")
        if not 0.0 <= self.flip_prob <= 1.0:
            raise ValueError("flip_prob must lie in [0,1]")


@dataclass
class SceneConfig:
    """Synthetic moving-shapes video generator settings."""

    height: int = 64
    width: int = 80
    num_instruments: int = 2
    part_mode: bool = True          # 3 part classes; False -> per-instrument type classes
    motion_amplitude: float = 3.0   # peak tip speed, px per frame
    trajectory_period: int = 16     # frames per motion cycle (scenes repeat)
    blur_prob: float = 0.3
    blur_strength: int = 3          # repeated 5x5 box-filter passes
    brightness_prob: float = 0.15
    occlusion: bool = True
    video_length: int = 60
    seed: int = 0

    def __post_init__(self):
        for p in (self.blur_prob, self.brightness_prob):
            if not 0.0 <= p <= 1.0:
                raise ValueError("probabilities must lie in [0,1]")
        if self.video_length < 3:
            raise ValueError("video_length too short")
        if self.trajectory_period < 4:
            raise ValueError("trajectory_period must be >= 4")
