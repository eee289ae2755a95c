"""Online per-frame pipeline assembling encoder, local aggregation, global
memory read, and decoder; plus training (Adam, Dice loss), evaluation, and
checkpoint round-trip.
"""

from __future__ import annotations

import json

import numpy as np

from . import blocks
from . import tensor as T
from .config import ModelConfig, TrainConfig
from .data import miou as frame_miou, mdice as frame_mdice
from .memory import FeatureMap, GlobalMemory, LocalMemory
from .tensor import Tensor, no_grad


class TrainingError(RuntimeError):
    """Raised when optimization produces a non-finite loss."""


class StreamState:
    """Per-video mutable state: both memories, the frame counter, and the rng
    driving global-memory sampling."""

    def __init__(self, cfg: ModelConfig):
        self.cfg = cfg
        self.reset()

    def reset(self):
        self.local = LocalMemory(self.cfg.tau)
        self.global_mem = GlobalMemory(self.cfg.alpha, self.cfg.beta,
                                       self.cfg.global_capacity)
        self.t = 0
        self.rng = np.random.default_rng(self.cfg.seed)
        self.last_admission = None      # (admitted, r, s) of the newest frame


def one_hot(mask, num_classes):
    return np.eye(num_classes)[mask].transpose(2, 0, 1)


def _augment_clip(frames, mask, tcfg: TrainConfig, rng):
    """Training-clip augmentation: photometric jitter on the frames only,
    plus a circular shift and optional horizontal flip applied to frames and
    label together (breaking any fixed position-to-class shortcut)."""
    frames = [np.asarray(f) for f in frames]
    mask = np.asarray(mask)
    if tcfg.noise_std or tcfg.gain_jitter or tcfg.bias_jitter:
        gain = 1.0 + rng.uniform(-tcfg.gain_jitter, tcfg.gain_jitter)
        bias = rng.uniform(-tcfg.bias_jitter, tcfg.bias_jitter)
        frames = [f * gain + bias
                  + rng.normal(0.0, tcfg.noise_std, size=f.shape)
                  for f in frames]
    if tcfg.shift_jitter:
        dy = int(rng.integers(-tcfg.shift_jitter, tcfg.shift_jitter + 1))
        dx = int(rng.integers(-tcfg.shift_jitter, tcfg.shift_jitter + 1))
        frames = [np.roll(f, (dy, dx), axis=(1, 2)) for f in frames]
        mask = np.roll(mask, (dy, dx), axis=(0, 1))
    if tcfg.flip_prob and rng.random() < tcfg.flip_prob:
        frames = [f[:, :, ::-1] for f in frames]
        mask = mask[:, ::-1]
    return frames, mask


class Adam:
    """Adam with decoupled weight decay (biases exempt from decay)."""

    def __init__(self, params: dict, lr=1e-4, weight_decay=1e-4, betas=(0.9, 0.999),
                 eps=1e-8):
        self.params = params
        self.lr = lr
        self.weight_decay = weight_decay
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def step(self):
        self.t += 1
        for k, p in self.params.items():
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            self.m[k] = self.b1 * self.m[k] + (1 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1 - self.b2) * g * g
            mhat = self.m[k] / (1 - self.b1 ** self.t)
            vhat = self.v[k] / (1 - self.b2 ** self.t)
            update = mhat / (np.sqrt(vhat) + self.eps)
            if self.weight_decay and p.data.ndim > 1:
                update = update + self.weight_decay * p.data
            p.data -= self.lr * update


class DMNet:
    """The dual-memory segmentation model."""

    def __init__(self, cfg: ModelConfig, params: dict | None = None):
        self.cfg = cfg
        if params is None:
            params = blocks.init_params(cfg, np.random.default_rng(cfg.seed))
        self.params = params

    # ------------------------------------------------------------------
    # forward pipeline

    def new_stream(self) -> StreamState:
        return StreamState(self.cfg)

    def _aggregate_local(self, clip_tensors, f_t):
        """Temporal aggregation added residually onto the current-frame feature,
        so every variant refines (rather than replaces) the per-frame baseline."""
        agg = self.cfg.local_aggregator
        if agg == "none":
            return f_t
        if agg == "ela":
            enriched = blocks.run_local_lstm(clip_tensors, self.params, self.cfg)
            return f_t + blocks.self_attend(enriched, self.params, self.cfg)
        if agg == "blstm":
            return f_t + blocks.run_local_lstm(clip_tensors, self.params, self.cfg)
        if agg == "clstm":
            return f_t + blocks.run_stacked_conv_lstm(clip_tensors, self.params, self.cfg)
        if agg == "nl":
            return f_t + blocks.clip_attend(f_t, clip_tensors, self.params, self.cfg)
        raise ValueError(f"unknown local aggregator '{agg}'")

    def _forward(self, stored_maps, img_tensor, memory_sample):
        """Full pipeline for one frame; returns (f_t, probs) as Tensors.

        stored_maps: detached feature arrays of the preceding local window.
        memory_sample: detached feature arrays from the global memory (may be
        empty, in which case the global read is bypassed).
        """
        f_t = blocks.encoder_forward(img_tensor, self.params, self.cfg)
        clip = [Tensor(m) for m in stored_maps] + [f_t]
        f_local = self._aggregate_local(clip, f_t)
        if self.cfg.use_aga and memory_sample:
            f_global = f_local + blocks.memory_read(f_local, memory_sample,
                                                    self.params, self.cfg)
        else:
            f_global = f_local
        logits = blocks.decoder_forward(f_global, self.params, self.cfg)
        probs = T.softmax(logits, axis=0)
        return f_t, probs

    def process_frame(self, state: StreamState, img):
        """Online step: predict for this frame, then update both memories.

        Returns (mask [H,W] int, probs [K,H,W] float). The prediction depends
        only on frames seen so far (strict causality)."""
        img = np.asarray(img, dtype=np.float64)
        if img.shape != (3, self.cfg.height, self.cfg.width):
            raise ValueError(f"frame shape {img.shape}, expected "
                             f"(3, {self.cfg.height}, {self.cfg.width})")
        with no_grad():
            stored = [m.values for m in state.local.entries]
            sample = []
            if self.cfg.use_aga and len(state.global_mem):
                sample = [m.values for m in
                          state.global_mem.sample(self.cfg.n_sample, state.rng)]
            f_t, probs = self._forward(stored, Tensor(img), sample)
        probs_np = probs.data
        mask = np.argmax(probs_np, axis=0)
        fmap = FeatureMap(f_t.data.copy(), state.t)
        state.local.push(fmap)
        if self.cfg.use_aga:
            state.last_admission = state.global_mem.consider(fmap, probs_np)
        state.t += 1
        return mask, probs_np

    # ------------------------------------------------------------------
    # training

    def _prefill_global(self, video_frames, clip_start, n_frames, seed):
        """Seed a fresh global memory for a training clip from evenly spaced
        frames preceding it (features detached, cheap encoder+decoder
        confidence pass). The same admission policy as streaming applies, so
        the read pathway trains on memories shaped like the ones it will see."""
        mem = GlobalMemory(self.cfg.alpha, self.cfg.beta, self.cfg.global_capacity)
        if clip_start == 0 or n_frames == 0:
            return mem
        idx = np.unique(np.linspace(0, clip_start - 1,
                                    min(n_frames, clip_start)).astype(int))
        with no_grad():
            for t in idx:
                f = blocks.encoder_forward(Tensor(np.asarray(video_frames[t])),
                                           self.params, self.cfg)
                logits = blocks.decoder_forward(f, self.params, self.cfg)
                probs = T.softmax(logits, axis=0)
                mem.consider(FeatureMap(f.data, int(t)), probs.data)
        return mem

    def train_step(self, clip_frames, target_mask, optimizer, rng,
                   prefilled: GlobalMemory | None = None):
        """One optimization step on a clip ending at the supervised frame."""
        with no_grad():
            stored = [blocks.encoder_forward(Tensor(np.asarray(f)), self.params,
                                             self.cfg).data
                      for f in clip_frames[:-1]]
        sample = []
        if self.cfg.use_aga and prefilled is not None and len(prefilled):
            sample = [m.values for m in prefilled.sample(self.cfg.n_sample, rng)]
        _, probs = self._forward(stored, Tensor(np.asarray(clip_frames[-1])), sample)
        target = Tensor(one_hot(target_mask, self.cfg.classes))
        loss = blocks.dice_loss(probs, target)
        loss_val = loss.item()
        if not np.isfinite(loss_val):
            norms = {k: float(np.linalg.norm(p.data)) for k, p in self.params.items()}
            worst = max(norms, key=norms.get)
            raise TrainingError(
                f"non-finite loss {loss_val}; largest parameter norm {worst}={norms[worst]:.3g}")
        optimizer.zero_grad()
        loss.backward()
        optimizer.step()
        return loss_val

    def train(self, videos, tcfg: TrainConfig, val_videos=None, progress=None):
        """Train over shuffled clips; returns a per-epoch log of mean loss and
        validation mIoU. Deterministic given the model seed."""
        if not videos:
            raise ValueError("empty dataset")
        rng = np.random.default_rng(self.cfg.seed)
        opt = Adam(self.params, lr=tcfg.learning_rate, weight_decay=tcfg.weight_decay,
                   betas=(tcfg.beta1, tcfg.beta2))
        drop_epoch = int(tcfg.lr_drop_at * tcfg.epochs)   # e.g. 30 epochs -> drop at 21
        log = []
        for epoch in range(1, tcfg.epochs + 1):
            dropped = drop_epoch >= 1 and epoch >= drop_epoch
            opt.lr = tcfg.learning_rate * (0.1 if dropped else 1.0)
            clips = []
            for vi, video in enumerate(videos):
                length = len(video.frames)
                ends = rng.choice(length, size=min(tcfg.clips_per_video, length),
                                  replace=False)
                clips.extend((vi, int(t)) for t in ends)
            rng.shuffle(clips)
            losses = []
            for vi, t in clips:
                video = videos[vi]
                start = max(0, t - self.cfg.tau)
                mem = None
                if self.cfg.use_aga:
                    mem = self._prefill_global(video.frames, start,
                                               tcfg.prefill_frames, self.cfg.seed)
                clip, target = _augment_clip(video.frames[start:t + 1],
                                             video.masks[t], tcfg, rng)
                loss = self.train_step(clip, target, opt, rng, mem)
                losses.append(loss)
            entry = {"epoch": epoch, "mean_loss": float(np.mean(losses)),
                     "lr": opt.lr, "val_miou": float("nan")}
            if val_videos:
                metrics = self.evaluate(val_videos)
                entry["val_miou"] = metrics["miou"]
            log.append(entry)
            if progress:
                progress(entry)
        return log

    # ------------------------------------------------------------------
    # evaluation

    def evaluate(self, videos):
        """Stream each video with a fresh state; per-frame means of IoU/Dice
        over instrument classes, averaged over all frames of all videos."""
        ious, dices = [], []
        per_class_iou = {c: [] for c in range(self.cfg.classes)}
        per_class_dice = {c: [] for c in range(self.cfg.classes)}
        for video in videos:
            state = self.new_stream()
            for t in range(len(video.frames)):
                pred, _ = self.process_frame(state, video.frames[t])
                m_iou, iou_c = frame_miou(pred, video.masks[t], self.cfg.classes)
                m_dice, dice_c = frame_mdice(pred, video.masks[t], self.cfg.classes)
                ious.append(m_iou)
                dices.append(m_dice)
                for c in range(self.cfg.classes):
                    if iou_c[c] is not None:
                        per_class_iou[c].append(iou_c[c])
                    if dice_c[c] is not None:
                        per_class_dice[c].append(dice_c[c])
        return {
            "miou": float(np.mean(ious)) if ious else 0.0,
            "mdice": float(np.mean(dices)) if dices else 0.0,
            "per_class_iou": {c: (float(np.mean(v)) if v else None)
                              for c, v in per_class_iou.items()},
            "per_class_dice": {c: (float(np.mean(v)) if v else None)
                               for c, v in per_class_dice.items()},
        }

    # ------------------------------------------------------------------
    # checkpointing

    CKPT_VERSION = 1

    def save(self, path):
        """Versioned container: config echo + named parameter arrays."""
        meta = {"version": self.CKPT_VERSION, "config": self.cfg.__dict__}
        arrays = {f"param/{k}": p.data for k, p in self.params.items()}
        with open(path, "wb") as fh:
            np.savez(fh, __meta__=np.frombuffer(
                json.dumps(meta).encode("utf-8"), dtype=np.uint8), **arrays)

    @classmethod
    def load(cls, path):
        with np.load(path) as z:
            meta = json.loads(bytes(z["__meta__"]).decode("utf-8"))
            if meta.get("version") != cls.CKPT_VERSION:
                raise ValueError(f"unsupported checkpoint version {meta.get('version')}")
            cfg = ModelConfig(**{k: v for k, v in meta["config"].items()})
            params = {k[len("param/"):]: Tensor(z[k].copy(), requires_grad=True)
                      for k in z.files if k.startswith("param/")}
        return cls(cfg, params)
