"""Synthetic surgical-video analogs: articulated moving tools with occlusion,
motion-blur and brightness events, a PPM/PGM on-disk video format, and
segmentation metrics.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .config import SceneConfig


@dataclass
class VideoSample:
    frames: np.ndarray          # [T,3,H,W] in [0,1]
    masks: np.ndarray           # [T,H,W] int labels
    events: list[dict]          # per-frame {"blur","occlusion","brightness"} bools

    def __len__(self):
        return len(self.frames)


# ---------------------------------------------------------------------------
# rendering


def _box_blur5(img):
    """5x5 box filter per channel with edge padding; img is [3,H,W]."""
    p = np.pad(img, ((0, 0), (2, 2), (2, 2)), mode="edge")
    win = sliding_window_view(p, (5, 5), axis=(1, 2))
    return win.mean(axis=(3, 4))


def _tool_geometry(cfg, rng, idx):
    """Random smooth trajectory parameters for one tool."""
    H, W = cfg.height, cfg.width
    length = 0.7 * min(H, W)
    width = max(4.0, 0.2 * min(H, W))
    if length >= min(H, W) or width >= min(H, W):
        raise ValueError(f"tool (length {length:.0f}, width {width:.0f}) larger than frame {H}x{W}")
    # occlusion mode pulls both trajectories toward the frame center so paths cross
    if cfg.occlusion:
        cx = W * (0.5 + 0.08 * rng.normal())
        cy = H * (0.5 + 0.08 * rng.normal())
        amp = (0.22 * W, 0.22 * H)
    else:
        cx = W * (0.28 + 0.44 * idx + 0.04 * rng.normal())
        cy = H * (0.30 + 0.40 * rng.random())
        amp = (0.12 * W, 0.15 * H)
    # all motion components are harmonics of one shared cycle, so the scene
    # configuration repeats exactly every trajectory_period frames
    w0 = 2 * np.pi / cfg.trajectory_period
    k1 = int(rng.integers(1, 3))
    k2 = int(rng.integers(1, 3))
    w1, w2 = k1 * w0, k2 * w0
    # amplitudes capped so the peak tip speed stays near motion_amplitude px
    ax = min(amp[0], cfg.motion_amplitude / w1)
    ay = min(amp[1], cfg.motion_amplitude / w2)
    return {
        "length": length, "width": width,
        "cx": cx, "cy": cy, "ax": ax, "ay": ay,
        "w1": w1, "w2": w2,
        "p1": rng.uniform(0, 2 * np.pi), "p2": rng.uniform(0, 2 * np.pi),
        "angle0": rng.uniform(0, 2 * np.pi),
        "w0": w0,
        "wobble": rng.uniform(0.12, 0.3) * rng.choice([-1.0, 1.0]),
        "p3": rng.uniform(0, 2 * np.pi),
    }


# part fractions along the tool axis: shaft, wrist, jaw
_PART_SPLITS = (0.6, 0.8)

# base colors per instrument (part mode) and per-part brightness
_TOOL_COLORS = np.array([[0.85, 0.75, 0.60], [0.55, 0.70, 0.90],
                         [0.75, 0.85, 0.55], [0.90, 0.60, 0.75]])
_PART_SHADE = (1.0, 0.72, 0.45)

# type mode: instruments share one metallic base color and are told apart only
# by their fine stripe texture (solid / coarse / fine banding along the shaft)
_TYPE_BASE_COLOR = np.array([0.82, 0.80, 0.78])
_STRIPE_PERIODS = (None, 16.0, 8.0, 24.0)   # px along the axis; None = solid
_STRIPE_DARK = 0.30

# persistence of a blur episode: mean episode length 1/(1-_BLUR_STAY) frames
_BLUR_STAY = 0.75


def _render_tool(cfg, geo, t, yy, xx):
    """Rasterize one tool at time t; returns (inside mask, part ids, axis dist)."""
    tip_x = geo["cx"] + geo["ax"] * np.sin(geo["w1"] * t + geo["p1"])
    tip_y = geo["cy"] + geo["ay"] * np.cos(geo["w2"] * t + geo["p2"])
    ang = geo["angle0"] + geo["wobble"] * np.sin(geo["w0"] * t + geo["p3"])
    bx = tip_x - geo["length"] * np.cos(ang)
    by = tip_y - geo["length"] * np.sin(ang)
    dx, dy = tip_x - bx, tip_y - by
    seg2 = dx * dx + dy * dy
    u = ((xx - bx) * dx + (yy - by) * dy) / seg2          # position along axis
    uc = np.clip(u, 0.0, 1.0)
    px, py = bx + uc * dx, by + uc * dy
    dist = np.hypot(xx - px, yy - py)
    half = geo["width"] / 2.0
    taper = np.where(u > _PART_SPLITS[1], 1.0 - 0.5 * (u - _PART_SPLITS[1]) / 0.2, 1.0)
    inside = dist <= half * np.clip(taper, 0.3, 1.0)
    part = np.where(u <= _PART_SPLITS[0], 0, np.where(u <= _PART_SPLITS[1], 1, 2))
    return inside, part, uc * geo["length"]


def generate_video(cfg: SceneConfig) -> VideoSample:
    """Deterministic (seeded) video of moving multi-part tools with events."""
    rng = np.random.default_rng(cfg.seed)
    H, W, T = cfg.height, cfg.width, cfg.video_length
    yy, xx = np.mgrid[0:H, 0:W].astype(np.float64)
    tools = [_tool_geometry(cfg, rng, i) for i in range(cfg.num_instruments)]

    # static background: smooth diagonal gradient plus low-frequency texture
    base = 0.18 + 0.12 * (xx / W + yy / H) / 2
    texture = 0.05 * np.sin(2 * np.pi * xx / (W / 3) + rng.uniform(0, 6)) \
        * np.cos(2 * np.pi * yy / (H / 3) + rng.uniform(0, 6))
    bg = np.stack([base + texture, base * 0.7 + texture, base * 0.65 + texture])

    frames = np.empty((T, 3, H, W))
    masks = np.empty((T, H, W), dtype=np.int64)
    events = []
    blur_state = False
    for t in range(T):
        img = bg.copy()
        mask = np.zeros((H, W), dtype=np.int64)
        per_tool = []
        for i, geo in enumerate(tools):     # later tools drawn on top (z-order)
            inside, part, axial = _render_tool(cfg, geo, t, yy, xx)
            per_tool.append(inside)
            if cfg.part_mode:
                color = _TOOL_COLORS[i % len(_TOOL_COLORS)]
                for pid in range(3):
                    sel = inside & (part == pid)
                    shade = _PART_SHADE[pid]
                    for ch in range(3):
                        img[ch][sel] = color[ch] * shade
                    mask[sel] = pid + 1
            else:
                # identity is carried only by the stripe texture
                period = _STRIPE_PERIODS[i % len(_STRIPE_PERIODS)]
                if period is None:
                    mod = np.ones_like(axial)
                else:
                    mod = np.where(np.sin(2 * np.pi * axial / period) >= 0.0,
                                   1.0, _STRIPE_DARK)
                for ch in range(3):
                    img[ch][inside] = (_TYPE_BASE_COLOR[ch] * mod)[inside]
                mask[inside] = (i % 3) + 1
        occluded = False
        if len(per_tool) > 1:
            overlap = np.zeros((H, W), dtype=bool)
            for i in range(len(per_tool)):
                for j in range(i + 1, len(per_tool)):
                    overlap |= per_tool[i] & per_tool[j]
            occluded = bool(overlap.any())
        # blur arrives in multi-frame episodes (a sticky two-state chain whose
        # stationary on-fraction equals blur_prob)
        if cfg.blur_prob <= 0.0:
            blur_state = False
        elif cfg.blur_prob >= 1.0:
            blur_state = True
        elif blur_state:
            blur_state = rng.random() < _BLUR_STAY
        else:
            p_enter = cfg.blur_prob * (1.0 - _BLUR_STAY) / (1.0 - cfg.blur_prob)
            blur_state = rng.random() < p_enter
        blur = bool(blur_state)
        bright = bool(rng.random() < cfg.brightness_prob)
        if blur:
            for _ in range(max(1, cfg.blur_strength)):
                img = _box_blur5(img)
        if bright:
            img = np.clip(img * 1.3, 0.0, 1.0)
        frames[t] = np.clip(img, 0.0, 1.0)
        masks[t] = mask
        events.append({"blur": blur, "occlusion": occluded, "brightness": bright})
    return VideoSample(frames, masks, events)


# ---------------------------------------------------------------------------
# on-disk format: PPM (P6) frames, PGM (P5) masks, events.csv


class VideoFormatError(ValueError):
    pass


def _write_pnm(path, magic, arr2d_or_rgb):
    h, w = arr2d_or_rgb.shape[-2:]
    with open(path, "wb") as fh:
        fh.write(f"{magic}\n{w} {h}\n255\n".encode("ascii"))
        if magic == "P6":
            fh.write(arr2d_or_rgb.transpose(1, 2, 0).astype(np.uint8).tobytes())
        else:
            fh.write(arr2d_or_rgb.astype(np.uint8).tobytes())


def _read_pnm(path, magic):
    path = Path(path)
    if not path.exists():
        raise VideoFormatError(f"missing file {path}")
    raw = path.read_bytes()
    try:
        parts = raw.split(b"\n", 3)
        got_magic = parts[0].decode("ascii")
        w, h = (int(v) for v in parts[1].split())
        maxval = int(parts[2])
        body = parts[3]
    except (ValueError, IndexError, UnicodeDecodeError) as exc:
        raise VideoFormatError(f"malformed header in {path}") from exc
    if got_magic != magic or maxval != 255:
        raise VideoFormatError(f"unexpected header {got_magic}/{maxval} in {path}")
    nch = 3 if magic == "P6" else 1
    if len(body) != w * h * nch:
        raise VideoFormatError(f"payload size mismatch in {path}")
    arr = np.frombuffer(body, dtype=np.uint8)
    if magic == "P6":
        return arr.reshape(h, w, 3).transpose(2, 0, 1)
    return arr.reshape(h, w)


def write_video_dir(sample: VideoSample, path):
    """Frames as frame_%05d.ppm, masks as mask_%05d.pgm, plus events.csv."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    for t in range(len(sample)):
        rgb = np.clip(np.round(sample.frames[t] * 255.0), 0, 255)
        _write_pnm(path / f"frame_{t:05d}.ppm", "P6", rgb)
        _write_pnm(path / f"mask_{t:05d}.pgm", "P5", sample.masks[t])
    with open(path / "events.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        for t, ev in enumerate(sample.events):
            writer.writerow([t, int(ev["blur"]), int(ev["occlusion"]), int(ev["brightness"])])


def load_video_dir(path, num_classes=None) -> VideoSample:
    """Exact inverse of write_video_dir up to 8-bit frame quantization."""
    path = Path(path)
    ev_path = path / "events.csv"
    if not ev_path.exists():
        raise VideoFormatError(f"missing file {ev_path}")
    events = []
    with open(ev_path, newline="") as fh:
        for row in csv.reader(fh):
            events.append({"blur": bool(int(row[1])), "occlusion": bool(int(row[2])),
                           "brightness": bool(int(row[3]))})
    frames, masks = [], []
    for t in range(len(events)):
        frames.append(_read_pnm(path / f"frame_{t:05d}.ppm", "P6").astype(np.float64) / 255.0)
        mask = _read_pnm(path / f"mask_{t:05d}.pgm", "P5").astype(np.int64)
        if num_classes is not None and mask.max() >= num_classes:
            raise VideoFormatError(
                f"mask value {mask.max()} >= num_classes {num_classes} in mask_{t:05d}.pgm")
        masks.append(mask)
    return VideoSample(np.stack(frames), np.stack(masks), events)


# ---------------------------------------------------------------------------
# metrics


def class_iou_dice(pred, gt, num_classes):
    """Per-class IoU and Dice; classes absent from both sides return None."""
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {gt.shape}")
    if pred.max() >= num_classes or gt.max() >= num_classes:
        raise ValueError("label value exceeds num_classes")
    iou, dice = {}, {}
    for c in range(num_classes):
        p = pred == c
        g = gt == c
        inter = int(np.sum(p & g))
        union = int(np.sum(p | g))
        denom = int(p.sum()) + int(g.sum())
        iou[c] = inter / union if union else None
        dice[c] = 2 * inter / denom if denom else None
    return iou, dice


def miou(pred, gt, num_classes, include_background=False):
    """Mean IoU over instrument classes (background excluded by default)."""
    iou, _ = class_iou_dice(pred, gt, num_classes)
    return _mean_over_classes(iou, include_background), iou


def mdice(pred, gt, num_classes, include_background=False):
    """Mean Dice over instrument classes (background excluded by default)."""
    _, dice = class_iou_dice(pred, gt, num_classes)
    return _mean_over_classes(dice, include_background), dice


def _mean_over_classes(per_class, include_background):
    vals = [v for c, v in per_class.items()
            if v is not None and (include_background or c != 0)]
    return float(np.mean(vals)) if vals else 0.0
