"""Network blocks: bottleneck ConvLSTM, key/value projections, the non-local
self-attention read over the LSTM-enriched feature, the cross-frame memory
read, a small strided encoder / upsampling decoder, and the Dice loss.

All blocks are pure functions of (inputs, params); params is a flat dict of
named Tensors created by init_params.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .tensor import Tensor, DimensionError
from .config import ModelConfig

DICE_EPS = 1e-5


# ---------------------------------------------------------------------------
# parameter construction


def _conv_init(rng, cout, cin, k):
    scale = np.sqrt(2.0 / (cin * k * k))
    return Tensor(rng.normal(0.0, scale, size=(cout, cin, k, k)), requires_grad=True)


def _bias_init(cout):
    return Tensor(np.zeros(cout), requires_grad=True)


def _residual_proj_init(rng, cout, cin, k):
    """Down-scaled init for projections feeding a residual sum, so every
    variant starts close to the plain per-frame baseline."""
    t = _conv_init(rng, cout, cin, k)
    t.data *= 0.1
    return t


def init_params(cfg: ModelConfig, rng) -> dict:
    """Create every parameter tensor the configured variant needs."""
    c = cfg.channels
    cl = cfg.lstm_channels
    ck, cv = cfg.key_channels, cfg.value_channels
    e1, e2, e3 = cfg.encoder_channels
    d1, d2, d3 = cfg.decoder_channels
    p = {}

    for name, cin, cout in (("enc1", 3, e1), ("enc2", e1, e2), ("enc3", e2, e3)):
        p[name + "_w"] = _conv_init(rng, cout, cin, 3)
        p[name + "_b"] = _bias_init(cout)

    if cfg.local_aggregator in ("ela", "blstm"):
        p["lstm_bottleneck_w"] = _conv_init(rng, cl, c + cl, 1)
        p["lstm_bottleneck_b"] = _bias_init(cl)
        for gate in "ifog":
            p[f"lstm_{gate}_dw"] = _conv_init(rng, cl, 1, 3)
            p[f"lstm_{gate}_pw"] = _conv_init(rng, cl, cl, 1)
            p[f"lstm_{gate}_b"] = _bias_init(cl)
        if cl != c:
            out_init = _residual_proj_init if cfg.local_aggregator == "blstm" else _conv_init
            p["lstm_out_w"] = out_init(rng, c, cl, 1)
            p["lstm_out_b"] = _bias_init(c)

    if cfg.local_aggregator == "ela":
        p["self_key_w"] = _conv_init(rng, ck, c + N_COORD_CHANNELS, 1)
        p["self_key_b"] = _bias_init(ck)
        p["self_value_w"] = _conv_init(rng, cv, c, 1)
        p["self_value_b"] = _bias_init(cv)
        p["self_fuse_w"] = _residual_proj_init(rng, c, 2 * cv, 1)
        p["self_fuse_b"] = _bias_init(c)

    if cfg.local_aggregator == "nl":
        # plain non-local over the whole clip at matched (full) channel width
        p["nl_key_w"] = _conv_init(rng, c, c + N_COORD_CHANNELS, 1)
        p["nl_key_b"] = _bias_init(c)
        p["nl_value_w"] = _conv_init(rng, c, c, 1)
        p["nl_value_b"] = _bias_init(c)
        p["nl_fuse_w"] = _residual_proj_init(rng, c, 2 * c, 1)
        p["nl_fuse_b"] = _bias_init(c)

    if cfg.local_aggregator == "clstm":
        # 2 stacked standard ConvLSTM layers, full-channel 3x3 gate convs
        for layer in (1, 2):
            for gate in "ifog":
                p[f"clstm{layer}_{gate}_w"] = _conv_init(rng, c, 2 * c, 3)
                p[f"clstm{layer}_{gate}_b"] = _bias_init(c)
        p["clstm_out_w"] = _residual_proj_init(rng, c, c, 1)
        p["clstm_out_b"] = _bias_init(c)

    if cfg.use_aga:
        for which in ("memq", "mem"):
            p[f"{which}_key_w"] = _conv_init(rng, ck, c + N_COORD_CHANNELS, 1)
            p[f"{which}_key_b"] = _bias_init(ck)
            p[f"{which}_value_w"] = _conv_init(rng, cv, c, 1)
            p[f"{which}_value_b"] = _bias_init(cv)
        p["mem_fuse_w"] = _residual_proj_init(rng, c, 2 * cv, 1)
        p["mem_fuse_b"] = _bias_init(c)

    for name, cin, cout in (("dec1", e3, d1), ("dec2", d1, d2), ("dec3", d2, d3)):
        p[name + "_w"] = _conv_init(rng, cout, cin, 3)
        p[name + "_b"] = _bias_init(cout)
    p["dec_out_w"] = _conv_init(rng, cfg.classes, d3, 1)
    p["dec_out_b"] = _bias_init(cfg.classes)
    return p


def param_count(params: dict) -> int:
    return sum(t.size for t in params.values())


# ---------------------------------------------------------------------------
# encoder / decoder


def encoder_forward(img: Tensor, p: dict, cfg: ModelConfig) -> Tensor:
    """Three downsampling blocks (2x2 avg-pool then conv+relu): [3,H,W] -> [C,H/8,W/8]."""
    _, H, W = img.shape
    if H % 8 or W % 8:
        raise T.ConfigError(f"image size {H}x{W} not divisible by 8")
    x = img
    for name in ("enc1", "enc2", "enc3"):
        x = T.relu(T.conv2d(T.avgpool2x2(x), p[name + "_w"], p[name + "_b"],
                            stride=1, pad=1))
    return x


def decoder_forward(f: Tensor, p: dict, cfg: ModelConfig) -> Tensor:
    """Three x2-upsample conv+relu blocks then a 1x1 head: [C,h,w] -> [K,8h,8w]."""
    x = f
    for name in ("dec1", "dec2", "dec3"):
        x = T.relu(T.conv2d(T.upsample2x(x), p[name + "_w"], p[name + "_b"], stride=1, pad=1))
    return T.conv2d(x, p["dec_out_w"], p["dec_out_b"])


# ---------------------------------------------------------------------------
# bottleneck ConvLSTM


def bottleneck_lstm_step(x: Tensor, h: Tensor, c: Tensor, p: dict):
    """One LSTM step: pointwise bottleneck on [x,h], depthwise-separable gates."""
    if x.shape[1:] != h.shape[1:]:
        raise DimensionError(f"spatial mismatch: input {x.shape}, state {h.shape}")
    b = T.relu(T.conv2d(T.concat([x, h], axis=0),
                        p["lstm_bottleneck_w"], p["lstm_bottleneck_b"]))

    def gate(name, act):
        z = T.depthwise_separable_conv(b, p[f"lstm_{name}_dw"], p[f"lstm_{name}_pw"],
                                       p[f"lstm_{name}_b"], stride=1, pad=1)
        return act(z)

    i = gate("i", T.sigmoid)
    f = gate("f", T.sigmoid)
    o = gate("o", T.sigmoid)
    g = gate("g", T.tanh)
    c_new = f * c + i * g
    h_new = o * T.tanh(c_new)
    return h_new, c_new


def run_local_lstm(clip, p: dict, cfg: ModelConfig) -> Tensor:
    """Step a zero-initialized LSTM through the clip (oldest first); returns the
    final hidden map projected back to C channels."""
    if not clip:
        raise ValueError("empty clip")
    _, H, W = clip[0].shape
    h = Tensor(np.zeros((cfg.lstm_channels, H, W)))
    c = Tensor(np.zeros((cfg.lstm_channels, H, W)))
    for x in clip:
        h, c = bottleneck_lstm_step(x, h, c, p)
    if "lstm_out_w" in p:
        h = T.conv2d(h, p["lstm_out_w"], p["lstm_out_b"])
    return h


def conv_lstm_step(x: Tensor, h: Tensor, c: Tensor, p: dict, layer: int):
    """Standard ConvLSTM step with full-channel 3x3 gate convolutions."""
    xh = T.concat([x, h], axis=0)

    def gate(name, act):
        return act(T.conv2d(xh, p[f"clstm{layer}_{name}_w"], p[f"clstm{layer}_{name}_b"],
                            stride=1, pad=1))

    i = gate("i", T.sigmoid)
    f = gate("f", T.sigmoid)
    o = gate("o", T.sigmoid)
    g = gate("g", T.tanh)
    c_new = f * c + i * g
    h_new = o * T.tanh(c_new)
    return h_new, c_new


def run_stacked_conv_lstm(clip, p: dict, cfg: ModelConfig) -> Tensor:
    """Two stacked standard ConvLSTM layers over the clip; hidden width = C."""
    if not clip:
        raise ValueError("empty clip")
    _, H, W = clip[0].shape
    zeros = lambda: Tensor(np.zeros((cfg.channels, H, W)))
    h1, c1, h2, c2 = zeros(), zeros(), zeros(), zeros()
    for x in clip:
        h1, c1 = conv_lstm_step(x, h1, c1, p, layer=1)
        h2, c2 = conv_lstm_step(h1, h2, c2, p, layer=2)
    return T.conv2d(h2, p["clstm_out_w"], p["clstm_out_b"])


# ---------------------------------------------------------------------------
# attention reads


# coordinate channels (x, y, x^2, y^2) appended to the key-projection input;
# the squares let the separate query/memory key embeddings express Gaussian
# spatial-locality kernels through a plain dot product
N_COORD_CHANNELS = 4
_coord_cache: dict = {}


def _coord_channels(H, W):
    if (H, W) not in _coord_cache:
        y = np.broadcast_to(np.linspace(-1.0, 1.0, H)[:, None], (H, W)).copy()
        x = np.broadcast_to(np.linspace(-1.0, 1.0, W)[None, :], (H, W)).copy()
        _coord_cache[(H, W)] = np.stack([x, y, x * x, y * y])
    return _coord_cache[(H, W)]


def project_key_value(f: Tensor, p: dict, which: str):
    """Pointwise key/value projections; spatial size preserved.

    Keys see the feature map plus coordinate channels, so attention can match
    by position as well as appearance; values stay appearance-only."""
    fk = T.concat([f, Tensor(_coord_channels(f.shape[1], f.shape[2]))], axis=0)
    k = T.conv2d(fk, p[f"{which}_key_w"], p[f"{which}_key_b"])
    v = T.conv2d(f, p[f"{which}_value_w"], p[f"{which}_value_b"])
    return k, v


def sim(x, y):
    """exp(dot product): strictly positive similarity of two key vectors."""
    return T.exp(T.sum_(x * y))


def _flat(t):
    c = t.shape[0]
    return T.reshape(t, (c, t.shape[1] * t.shape[2]))


def _attend(kq: Tensor, km: Tensor, vm: Tensor):
    """Softmax over exp-dot-product similarities of query positions against
    memory positions; returns the weighted sum of memory values [C_v, Nq]."""
    scores = T.matmul(T.transpose(kq, (1, 0)), km)   # [Nq, Nm]
    weights = T.softmax(scores, axis=1)              # rows sum to 1 (max-subtracted)
    return T.matmul(vm, T.transpose(weights, (1, 0)))


def self_attend(f: Tensor, p: dict, cfg: ModelConfig) -> Tensor:
    """Non-local read of a feature map against itself, fused back to C channels."""
    k, v = project_key_value(f, p, "self")
    c_v, H, W = v.shape
    retrieved = _attend(_flat(k), _flat(k), _flat(v))
    out = T.concat([v, T.reshape(retrieved, (c_v, H, W))], axis=0)
    return T.conv2d(out, p["self_fuse_w"], p["self_fuse_b"])


def clip_attend(f_t: Tensor, clip, p: dict, cfg: ModelConfig) -> Tensor:
    """Plain non-local aggregation: the current frame attends jointly over all
    positions of every clip frame at full channel width."""
    kq, vq = project_key_value(f_t, p, "nl")
    keys = [kq if x is f_t else project_key_value(x, p, "nl")[0] for x in clip]
    vals = [vq if x is f_t else project_key_value(x, p, "nl")[1] for x in clip]
    km = T.concat([_flat(k) for k in keys], axis=1)
    vm = T.concat([_flat(v) for v in vals], axis=1)
    c_v, H, W = vq.shape
    retrieved = _attend(_flat(kq), km, vm)
    out = T.concat([vq, T.reshape(retrieved, (c_v, H, W))], axis=0)
    return T.conv2d(out, p["nl_fuse_w"], p["nl_fuse_b"])


def memory_read(f_local: Tensor, memory, p: dict, cfg: ModelConfig) -> Tensor:
    """Relate the current feature to each sampled memory frame separately
    (per-frame softmax), average the reads, and fuse back to C channels.

    Memory maps enter as constants: no gradient reaches stored features."""
    if not memory:
        raise ValueError("memory_read needs at least one stored frame")
    kq, vq = project_key_value(f_local, p, "memq")
    for m in memory:
        if m.shape != f_local.shape:
            raise DimensionError(f"memory map {m.shape} vs query {f_local.shape}")
    kq_f = _flat(kq)
    reads = []
    for m in memory:
        mk, mv = project_key_value(Tensor(m) if isinstance(m, np.ndarray) else m, p, "mem")
        reads.append(_attend(kq_f, _flat(mk), _flat(mv)))
    agg = reads[0]
    for r in reads[1:]:
        agg = agg + r
    agg = agg * (1.0 / len(reads))
    c_v, H, W = vq.shape
    out = T.concat([vq, T.reshape(agg, (c_v, H, W))], axis=0)
    return T.conv2d(out, p["mem_fuse_w"], p["mem_fuse_b"])


# ---------------------------------------------------------------------------
# loss


def dice_loss(probs: Tensor, target: Tensor) -> Tensor:
    """Soft Dice loss in [0,1], averaged over classes; target is one-hot."""
    if probs.shape != target.shape:
        raise DimensionError(f"probs {probs.shape} vs target {target.shape}")
    colsum = probs.data.sum(axis=0)
    if np.max(np.abs(colsum - 1.0)) > 1e-4:
        raise ValueError("per-pixel class probabilities must sum to 1")
    K = probs.shape[0]
    inter = T.sum_(probs * target, axes=(1, 2))
    psum = T.sum_(probs, axes=(1, 2))
    tsum = Tensor(target.data.sum(axis=(1, 2)))
    eps = Tensor(np.full(K, DICE_EPS))
    dice = T.div(inter + inter + eps, psum + tsum + eps)
    return Tensor(np.array(1.0)) - T.mean(dice)
