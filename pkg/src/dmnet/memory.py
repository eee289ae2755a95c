"""The two temporal memories and their policies: a FIFO window of recent
encoder features, and a gated global store admitting frames by prediction
confidence (negative entropy) and dissimilarity to the latest stored frame.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np


@dataclass
class FeatureMap:
    """Encoder output for one frame, detached from any autodiff graph."""

    values: np.ndarray          # [C,h,w]
    frame_index: int

    def __post_init__(self):
        if not np.all(np.isfinite(self.values)):
            raise ValueError(f"non-finite feature map at frame {self.frame_index}")
        if self.frame_index < 0:
            raise ValueError("frame_index must be non-negative")


class LocalMemory:
    """Ring buffer of the `capacity` most recent feature maps, oldest first."""

    def __init__(self, capacity):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = capacity
        self.entries: list[FeatureMap] = []

    def __len__(self):
        return len(self.entries)

    def push(self, f: FeatureMap):
        if self.entries and f.frame_index <= self.entries[-1].frame_index:
            raise ValueError(
                f"out-of-order push: frame {f.frame_index} after {self.entries[-1].frame_index}")
        self.entries.append(f)
        if len(self.entries) > self.capacity:
            self.entries.pop(0)

    def window(self, f_t: FeatureMap):
        """Ordered clip [stored..., f_t]; f_t itself is not yet in the memory."""
        return self.entries + [f_t]


NEG_INF = float("-inf")


class GlobalMemory:
    """Gated store of admitted feature maps with per-entry (r, s) metadata.

    A candidate is admitted iff r > alpha (confident enough) and s < beta
    (dissimilar enough to the latest admitted frame). The first frame is
    admitted unconditionally with s recorded as -inf.
    """

    def __init__(self, alpha, beta, capacity=256):
        self.alpha = alpha
        self.beta = beta
        self.capacity = capacity
        self.entries: list[tuple[FeatureMap, float, float]] = []
        self.latest: FeatureMap | None = None
        self.similarity_calls = 0   # comparisons performed (one per non-empty consider)

    def __len__(self):
        return len(self.entries)

    def feature_maps(self):
        return [e[0] for e in self.entries]

    def consider(self, f: FeatureMap, probs: np.ndarray):
        """Apply the admission policy; returns (admitted, r, s)."""
        if self.entries and f.frame_index <= self.entries[-1][0].frame_index:
            raise ValueError(
                f"out-of-order frame {f.frame_index} after {self.entries[-1][0].frame_index}")
        r = representativeness(probs)
        if self.latest is None:
            s = NEG_INF
            admitted = True
        else:
            self.similarity_calls += 1
            s = frame_similarity(f, self.latest)
            admitted = (r > self.alpha) and (s < self.beta)
        if admitted:
            self.entries.append((f, r, s))
            self.latest = f
            if self.capacity is not None and len(self.entries) > self.capacity:
                self.entries.pop(0)
        return admitted, r, s

    def sample(self, n, rng):
        """Uniform sample of up to n stored maps, without replacement."""
        if n < 1:
            raise ValueError("n must be >= 1")
        maps = self.feature_maps()
        if len(maps) <= n:
            return maps
        idx = rng.choice(len(maps), size=n, replace=False)
        return [maps[i] for i in sorted(idx)]


def representativeness(probs: np.ndarray) -> float:
    """Mean over pixels of sum_c p log p (natural log, 0 log 0 := 0).

    Lies in [-log K, 0]; values near 0 mean confident predictions."""
    if probs.ndim != 3:
        raise ValueError(f"expected [K,H,W] probabilities, got {probs.shape}")
    colsum = probs.sum(axis=0)
    if np.max(np.abs(colsum - 1.0)) > 1e-4:
        raise ValueError("per-pixel probabilities must sum to 1")
    n = probs.shape[1] * probs.shape[2]
    with np.errstate(divide="ignore", invalid="ignore"):
        plogp = np.where(probs > 0.0, probs * np.log(probs), 0.0)
    return float(plogp.sum() / n)


def frame_similarity(f: FeatureMap, latest: FeatureMap) -> float:
    """Negative Euclidean (Frobenius) distance between two feature maps."""
    a, b = f.values, latest.values
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    return float(-np.sqrt(np.sum((a - b) ** 2)))


def calibrate_thresholds(videos, model):
    """Run the model over every frame of every video; alpha is the mean of the
    per-frame representativeness values, beta the mean per-frame similarity of
    consecutive encoder features. Returns (alpha, beta)."""
    if not videos:
        raise ValueError("empty dataset")
    r_values, s_values = [], []
    for video in videos:
        state = model.new_stream()
        prev = None
        for t in range(len(video.frames)):
            _, probs = model.process_frame(state, video.frames[t])
            f = state.local.entries[-1]     # feature just pushed for this frame
            r_values.append(representativeness(probs))
            if prev is not None:
                s_values.append(frame_similarity(f, prev))
            prev = f
    alpha = float(np.mean(r_values))
    beta = float(np.mean(s_values)) if s_values else 0.0
    return alpha, beta
