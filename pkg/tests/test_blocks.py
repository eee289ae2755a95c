import numpy as np
import pytest

from dmnet import tensor as T
from dmnet.tensor import Tensor, finite_diff_check, counter
from dmnet.config import ModelConfig
from dmnet import blocks
from dmnet.blocks import (
    init_params, param_count, encoder_forward, decoder_forward,
    bottleneck_lstm_step, run_local_lstm, project_key_value, sim,
    self_attend, memory_read, dice_loss, _attend, _flat,
)

from oracles import (self_attend_reference, memory_read_reference,
                     attend_reference, key_input)


def small_cfg(**kw):
    defaults = dict(channels=8, classes=3, height=32, width=40, lstm_channels=4,
                    key_channels=4, value_channels=4)
    defaults.update(kw)
    return ModelConfig(**defaults)


def make_params(cfg, seed=0):
    return init_params(cfg, np.random.default_rng(seed))


def zero_lstm_params(c, cl):
    p = {"lstm_bottleneck_w": Tensor(np.zeros((cl, c + cl, 1, 1))),
         "lstm_bottleneck_b": Tensor(np.zeros(cl))}
    for g in "ifog":
        p[f"lstm_{g}_dw"] = Tensor(np.zeros((cl, 1, 3, 3)))
        p[f"lstm_{g}_pw"] = Tensor(np.zeros((cl, cl, 1, 1)))
        p[f"lstm_{g}_b"] = Tensor(np.zeros(cl))
    return p


class TestBottleneckLstm:
    def test_zero_fixed_point(self):
        p = zero_lstm_params(1, 1)
        z = Tensor(np.zeros((1, 1, 1)))
        h, c = bottleneck_lstm_step(z, z, z, p)
        assert np.all(h.data == 0) and np.all(c.data == 0)

    def test_zero_weight_hand_values(self):
        p = zero_lstm_params(1, 1)
        z = Tensor(np.zeros((1, 1, 1)))
        c0 = Tensor(np.full((1, 1, 1), 2.0))
        h, c = bottleneck_lstm_step(z, z, c0, p)
        # gates all sigmoid(0)=0.5, g=tanh(0)=0 -> c'=1.0, h'=0.5*tanh(1)
        assert c.data[0, 0, 0] == pytest.approx(1.0)
        assert h.data[0, 0, 0] == pytest.approx(0.5 * np.tanh(1.0))

    def test_step_mac_count(self):
        cfg = ModelConfig(channels=8, lstm_channels=8, local_aggregator="blstm",
                          use_aga=False)
        p = make_params(cfg)
        x = Tensor(np.zeros((8, 4, 4)))
        s = Tensor(np.zeros((8, 4, 4)))
        counter.enabled = True
        counter.reset()
        bottleneck_lstm_step(x, s, s, p)
        counter.enabled = False
        hw, c, cl = 16, 8, 8
        expected = hw * cl * (c + cl)                       # bottleneck 1x1
        expected += 4 * (hw * cl * 9 + hw * cl * cl)        # dwsep gates
        assert counter.macs == expected

    def test_spatial_mismatch(self):
        p = zero_lstm_params(1, 1)
        with pytest.raises(T.DimensionError):
            bottleneck_lstm_step(Tensor(np.zeros((1, 2, 2))),
                                 Tensor(np.zeros((1, 3, 3))),
                                 Tensor(np.zeros((1, 3, 3))), p)

    def test_gradient(self):
        cfg = small_cfg(local_aggregator="blstm", use_aga=False)
        p = make_params(cfg, 3)
        rng = np.random.default_rng(4)
        x = Tensor(rng.normal(size=(8, 3, 3)), requires_grad=True)
        s = Tensor(rng.normal(size=(4, 3, 3)))

        def f(t):
            h, c = bottleneck_lstm_step(t, s, s, p)
            return T.sum_(h * h) + T.sum_(c)

        assert finite_diff_check(f, x) < 1e-4


class TestRunLocalLstm:
    def test_single_frame_equals_one_step(self):
        cfg = small_cfg(local_aggregator="blstm", use_aga=False)
        p = make_params(cfg, 1)
        rng = np.random.default_rng(2)
        f = Tensor(rng.normal(size=(8, 4, 5)))
        out = run_local_lstm([f], p, cfg)
        z = Tensor(np.zeros((4, 4, 5)))
        h, _ = bottleneck_lstm_step(f, z, z, p)
        ref = T.conv2d(h, p["lstm_out_w"], p["lstm_out_b"])
        np.testing.assert_allclose(out.data, ref.data, atol=1e-14)

    def test_three_step_unrolling(self):
        cfg = small_cfg(local_aggregator="blstm", use_aga=False)
        p = make_params(cfg, 5)
        rng = np.random.default_rng(6)
        clip = [Tensor(rng.normal(size=(8, 4, 5))) for _ in range(3)]
        out = run_local_lstm(clip, p, cfg)
        h = Tensor(np.zeros((4, 4, 5)))
        c = Tensor(np.zeros((4, 4, 5)))
        for x in clip:
            h, c = bottleneck_lstm_step(x, h, c, p)
        ref = T.conv2d(h, p["lstm_out_w"], p["lstm_out_b"])
        np.testing.assert_allclose(out.data, ref.data, atol=1e-14)

    def test_order_sensitivity(self):
        cfg = small_cfg(local_aggregator="blstm", use_aga=False)
        p = make_params(cfg, 7)
        rng = np.random.default_rng(8)
        clip = [Tensor(rng.normal(size=(8, 4, 5))) for _ in range(3)]
        a = run_local_lstm(clip, p, cfg).data
        b = run_local_lstm(clip[::-1], p, cfg).data
        assert np.max(np.abs(a - b)) > 1e-6

    def test_empty_clip(self):
        cfg = small_cfg(local_aggregator="blstm", use_aga=False)
        with pytest.raises(ValueError):
            run_local_lstm([], make_params(cfg), cfg)


class TestKeyValueProjection:
    def test_default_widths(self):
        cfg = ModelConfig()
        assert cfg.key_channels == 4 and cfg.value_channels == 16

    def test_shapes(self):
        cfg = ModelConfig()
        p = make_params(cfg, 0)
        f = Tensor(np.random.default_rng(0).normal(size=(32, 8, 10)))
        k, v = project_key_value(f, p, "self")
        assert k.shape == (4, 8, 10)
        assert v.shape == (16, 8, 10)

    def test_zero_weights(self):
        cfg = small_cfg()
        p = make_params(cfg, 0)
        for name in ("self_key_w", "self_key_b", "self_value_w", "self_value_b"):
            p[name].data[...] = 0.0
        k, v = project_key_value(Tensor(np.ones((8, 4, 5))), p, "self")
        assert np.all(k.data == 0) and np.all(v.data == 0)


class TestSim:
    def test_orthogonal(self):
        assert sim(Tensor([1.0, 2.0]), Tensor([2.0, -1.0])).item() == pytest.approx(1.0)

    def test_unit(self):
        assert sim(Tensor([1.0]), Tensor([1.0])).item() == pytest.approx(np.e)

    def test_zero_dot(self):
        assert sim(Tensor([0.0, 5.0]), Tensor([3.0, 0.0])).item() == pytest.approx(1.0)


class TestSelfAttend:
    def test_two_position_hand_values(self):
        kq = Tensor(np.array([[1.0, 0.0]]))
        vm = Tensor(np.array([[2.0, 4.0]]))
        out = _attend(kq, kq, vm).data
        e = np.e
        assert out[0, 0] == pytest.approx((2 * e + 4) / (e + 1))

    def test_uniform_keys_give_spatial_mean(self):
        cfg = small_cfg()
        p = make_params(cfg, 9)
        p["self_key_w"].data[...] = 0.0
        p["self_key_b"].data[...] = 1.0   # identical key at every position
        rng = np.random.default_rng(10)
        f = Tensor(rng.normal(size=(8, 4, 5)))
        k, v = project_key_value(f, p, "self")
        retrieved = _attend(_flat(k), _flat(k), _flat(v)).data
        mean = v.data.reshape(4, -1).mean(axis=1)
        np.testing.assert_allclose(retrieved, np.tile(mean[:, None], (1, 20)), atol=1e-12)

    @pytest.mark.parametrize("seed", range(6))
    def test_matches_double_loop_oracle(self, seed):
        cfg = small_cfg()
        p = make_params(cfg, seed)
        rng = np.random.default_rng(100 + seed)
        f = Tensor(rng.normal(size=(8, 4, 5)))
        out = self_attend(f, p, cfg)
        ref = self_attend_reference(f.data, p)
        assert np.max(np.abs(out.data - ref)) < 1e-9

    def test_attention_weights_normalized(self):
        cfg = small_cfg()
        p = make_params(cfg, 11)
        rng = np.random.default_rng(12)
        f = Tensor(rng.normal(size=(8, 4, 5)))
        k, _ = project_key_value(f, p, "self")
        kf = k.data.reshape(k.shape[0], -1)
        scores = kf.T @ kf
        w = np.exp(scores - scores.max(axis=1, keepdims=True))
        w /= w.sum(axis=1, keepdims=True)
        assert np.all(w >= 0)
        np.testing.assert_allclose(w.sum(axis=1), 1.0, atol=1e-6)

    def test_gradient(self):
        cfg = small_cfg()
        p = make_params(cfg, 13)
        rng = np.random.default_rng(14)
        x = Tensor(rng.normal(size=(8, 3, 4)), requires_grad=True)
        assert finite_diff_check(lambda t: T.sum_(T.tanh(self_attend(t, p, cfg))), x) < 1e-4


class TestMemoryRead:
    def test_uniform_memory_keys_give_frame_mean(self):
        cfg = small_cfg()
        p = make_params(cfg, 15)
        p["mem_key_w"].data[...] = 0.0
        p["mem_key_b"].data[...] = 0.5
        rng = np.random.default_rng(16)
        f = Tensor(rng.normal(size=(8, 4, 5)))
        m = rng.normal(size=(8, 4, 5))
        out = memory_read(f, [m], p, cfg).data
        ref = memory_read_reference(f.data, [m], p)
        np.testing.assert_allclose(out, ref, atol=1e-9)
        # with uniform memory keys the retrieved content is position-independent
        mk = np.tensordot(p["mem_value_w"].data[:, :, 0, 0], m, axes=1) \
            + p["mem_value_b"].data[:, None, None]
        mean = mk.reshape(4, -1).mean(axis=1)
        kq, vq = project_key_value(f, p, "memq")
        fused_in = np.concatenate([vq.data, np.tile(mean[:, None, None], (1, 4, 5))], axis=0)
        ref2 = np.tensordot(p["mem_fuse_w"].data[:, :, 0, 0], fused_in, axes=1) \
            + p["mem_fuse_b"].data[:, None, None]
        np.testing.assert_allclose(out, ref2, atol=1e-9)

    def test_duplicate_memory_equals_single(self):
        cfg = small_cfg()
        p = make_params(cfg, 17)
        rng = np.random.default_rng(18)
        f = Tensor(rng.normal(size=(8, 4, 5)))
        m = rng.normal(size=(8, 4, 5))
        a = memory_read(f, [m], p, cfg).data
        b = memory_read(f, [m, m.copy()], p, cfg).data
        np.testing.assert_allclose(a, b, atol=1e-12)

    @pytest.mark.parametrize("seed", range(6))
    def test_matches_double_loop_oracle(self, seed):
        cfg = small_cfg()
        p = make_params(cfg, seed)
        rng = np.random.default_rng(200 + seed)
        f = Tensor(rng.normal(size=(8, 4, 5)))
        mems = [rng.normal(size=(8, 4, 5)) for _ in range(3)]
        out = memory_read(f, mems, p, cfg)
        ref = memory_read_reference(f.data, mems, p)
        assert np.max(np.abs(out.data - ref)) < 1e-9

    def test_permutation_invariance(self):
        cfg = small_cfg()
        p = make_params(cfg, 19)
        rng = np.random.default_rng(20)
        f = Tensor(rng.normal(size=(8, 4, 5)))
        mems = [rng.normal(size=(8, 4, 5)) for _ in range(4)]
        a = memory_read(f, mems, p, cfg).data
        b = memory_read(f, mems[::-1], p, cfg).data
        np.testing.assert_allclose(a, b, atol=1e-12)

    def test_empty_memory_rejected(self):
        cfg = small_cfg()
        with pytest.raises(ValueError):
            memory_read(Tensor(np.zeros((8, 4, 5))), [], make_params(cfg), cfg)

    def test_no_gradient_into_stored_maps(self):
        cfg = small_cfg()
        p = make_params(cfg, 21)
        rng = np.random.default_rng(22)
        f = Tensor(rng.normal(size=(8, 4, 5)), requires_grad=True)
        stored = Tensor(rng.normal(size=(8, 4, 5)))
        T.sum_(memory_read(f, [stored], p, cfg)).backward()
        assert f.grad is not None
        assert stored.grad is None

    def test_gradient(self):
        cfg = small_cfg()
        p = make_params(cfg, 23)
        rng = np.random.default_rng(24)
        x = Tensor(rng.normal(size=(8, 3, 4)), requires_grad=True)
        mems = [rng.normal(size=(8, 3, 4)) for _ in range(2)]
        f = lambda t: T.sum_(T.sigmoid(memory_read(t, mems, p, cfg)))
        assert finite_diff_check(f, x) < 1e-4


class TestEncoderDecoder:
    def test_encoder_shape(self):
        cfg = ModelConfig()
        p = make_params(cfg, 0)
        f = encoder_forward(Tensor(np.zeros((3, 64, 80))), p, cfg)
        assert f.shape == (32, 8, 10)

    def test_encoder_zero_weights(self):
        cfg = small_cfg()
        p = make_params(cfg, 0)
        for n in ("enc1", "enc2", "enc3"):
            p[n + "_w"].data[...] = 0.0
            p[n + "_b"].data[...] = 0.0
        f = encoder_forward(Tensor(np.ones((3, 32, 40))), p, cfg)
        assert np.all(f.data == 0)

    def test_encoder_indivisible_size(self):
        cfg = small_cfg()
        with pytest.raises(T.ConfigError):
            encoder_forward(Tensor(np.zeros((3, 30, 40))), make_params(cfg), cfg)

    def test_encoder_param_count(self):
        cfg = ModelConfig(local_aggregator="none", use_aga=False)
        p = make_params(cfg, 0)
        enc = sum(p[n + "_w"].size + p[n + "_b"].size for n in ("enc1", "enc2", "enc3"))
        expected = (16 * 3 * 9 + 16) + (24 * 16 * 9 + 24) + (32 * 24 * 9 + 32)
        assert enc == expected

    def test_decoder_shape(self):
        cfg = ModelConfig()
        p = make_params(cfg, 0)
        logits = decoder_forward(Tensor(np.zeros((32, 8, 10))), p, cfg)
        assert logits.shape == (4, 64, 80)

    def test_decoder_zero_weights_uniform_probs(self):
        cfg = small_cfg()
        p = make_params(cfg, 0)
        for n in ("dec1", "dec2", "dec3", "dec_out"):
            p[n + "_w"].data[...] = 0.0
            p[n + "_b"].data[...] = 0.0
        logits = decoder_forward(Tensor(np.ones((8, 4, 5))), p, cfg)
        probs = T.softmax(logits, axis=0).data
        np.testing.assert_allclose(probs, 1.0 / 3.0)

    def test_decoder_dice_gradient(self):
        cfg = small_cfg()
        p = make_params(cfg, 25)
        rng = np.random.default_rng(26)
        x = Tensor(rng.normal(size=(8, 4, 5)), requires_grad=True)
        labels = rng.integers(0, 3, size=(32, 40))
        onehot = np.eye(3)[labels].transpose(2, 0, 1)

        def f(t):
            probs = T.softmax(decoder_forward(t, p, cfg), axis=0)
            return dice_loss(probs, Tensor(onehot))

        assert finite_diff_check(f, x) < 1e-4


class TestDiceLoss:
    def test_perfect_match(self):
        labels = np.random.default_rng(0).integers(0, 3, size=(6, 8))
        onehot = np.eye(3)[labels].transpose(2, 0, 1)
        loss = dice_loss(Tensor(onehot), Tensor(onehot)).item()
        assert loss <= 1e-4

    def test_fully_disjoint(self):
        # prediction puts all mass on class 0 where target is class 1 and v.v.
        t = np.zeros((2, 4, 4))
        t[1, :, :2] = 1.0
        t[0, :, 2:] = 1.0
        probs = t[::-1].copy()
        loss = dice_loss(Tensor(probs), Tensor(t)).item()
        assert loss >= 1 - 1e-3

    def test_half_probability_hand_value(self):
        H, W = 6, 8
        t1 = np.zeros((H, W))
        t1[:4, :5] = 1.0            # 20-pixel target region
        target = np.stack([1 - t1, t1])
        probs = np.stack([1 - 0.5 * t1, 0.5 * t1])
        A = 20.0
        dice1 = (2 * 0.5 * A + 1e-5) / (0.5 * A + A + 1e-5)
        inter0 = (H * W - A)
        dice0 = (2 * inter0 + 1e-5) / ((H * W - 0.5 * A) + (H * W - A) + 1e-5)
        expected = 1 - (dice0 + dice1) / 2
        assert dice_loss(Tensor(probs), Tensor(target)).item() == pytest.approx(expected)
        assert dice1 == pytest.approx(2 / 3, abs=1e-5)

    def test_range_and_normalization_check(self):
        rng = np.random.default_rng(1)
        raw = rng.random(size=(3, 5, 5))
        probs = raw / raw.sum(axis=0)
        labels = rng.integers(0, 3, size=(5, 5))
        onehot = np.eye(3)[labels].transpose(2, 0, 1)
        loss = dice_loss(Tensor(probs), Tensor(onehot)).item()
        assert 0.0 <= loss <= 1.0
        with pytest.raises(ValueError):
            dice_loss(Tensor(raw), Tensor(onehot))

    def test_shape_mismatch(self):
        with pytest.raises(T.DimensionError):
            dice_loss(Tensor(np.ones((2, 3, 3)) / 2), Tensor(np.ones((3, 3, 3))))


class TestClipAttend:
    def test_matches_joint_double_loop(self):
        cfg = small_cfg(local_aggregator="nl", use_aga=False)
        p = make_params(cfg, 30)
        rng = np.random.default_rng(31)
        clip = [Tensor(rng.normal(size=(8, 3, 4)) * 0.3) for _ in range(3)]
        out = blocks.clip_attend(clip[-1], clip, p, cfg)

        def proj(f, which):
            src = key_input(f) if which == "key" else f
            return (np.tensordot(p[f"nl_{which}_w"].data[:, :, 0, 0], src, axes=1)
                    + p[f"nl_{which}_b"].data[:, None, None])

        kq = proj(clip[-1].data, "key").reshape(8, -1)
        vq = proj(clip[-1].data, "value")
        km = np.concatenate([proj(x.data, "key").reshape(8, -1) for x in clip], axis=1)
        vm = np.concatenate([proj(x.data, "value").reshape(8, -1) for x in clip], axis=1)
        retrieved = attend_reference(kq, km, vm).reshape(8, 3, 4)
        fused_in = np.concatenate([vq, retrieved], axis=0)
        ref = (np.tensordot(p["nl_fuse_w"].data[:, :, 0, 0], fused_in, axes=1)
               + p["nl_fuse_b"].data[:, None, None])
        np.testing.assert_allclose(out.data, ref, atol=1e-9)


def test_param_count_monotone_in_channels():
    small = param_count(init_params(ModelConfig(channels=16), np.random.default_rng(0)))
    big = param_count(init_params(ModelConfig(channels=32), np.random.default_rng(0)))
    assert big > small
