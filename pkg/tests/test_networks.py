import numpy as np
import pytest

from snider.autodiff import ShapeError, Tape, Tensor, backward
from snider.autodiff import functional as F
from snider.networks import (
    SNIDER_SPEC,
    SNIDER_TINY_SPEC,
    UNet,
    Variant,
    build_snider,
    forward_aux,
    forward_main,
    recover,
)


def conv_params(k, cin, cout, bn=True):
    """Weights + bias (+ gamma, beta when batch-normalised)."""
    return k * k * cin * cout + cout + (2 * cout if bn else 0)


def tiny_param_count(size):
    unet = (conv_params(7, 3, 32) + conv_params(7, 32, 64) + conv_params(5, 64, 128)
            + conv_params(5, 128, 64) + conv_params(7, 64 + 64, 32) + conv_params(7, 32 + 32, 3, bn=False))
    seg = conv_params(5, 128, 64) + conv_params(7, 128, 32) + conv_params(7, 64, 1, bn=False)
    n = size // 4
    count = conv_params(n, 128, 128, bn=False) + conv_params(1, 128, 64, bn=False) + conv_params(1, 64, 1, bn=False)
    return 2 * unet + seg + count


def snider_param_count(size):
    enc = [(3, 32), (32, 32), (32, 64), (64, 64), (64, 128), (128, 128), (128, 256), (256, 256), (256, 512), (512, 512)]
    dec = [(768, 256), (256, 256), (384, 128), (128, 128), (192, 64), (64, 64), (96, 32), (32, 32)]
    e = sum(conv_params(3, i, o) for i, o in enc)
    d = sum(conv_params(3, i, o) for i, o in dec)
    n = size // 16
    count = (conv_params(n, 512, 512, bn=False) + conv_params(1, 512, 256, bn=False) + conv_params(1, 256, 128, bn=False)
             + conv_params(1, 128, 64, bn=False) + conv_params(1, 64, 1, bn=False))
    return 2 * (e + d + conv_params(1, 32, 3, bn=False)) + d + conv_params(1, 32, 1, bn=False) + count


@pytest.fixture(scope="module")
def tiny():
    return build_snider("tiny", 32, seed=3)


@pytest.fixture
def batch():
    return Tensor(np.random.default_rng(0).uniform(size=(2, 3, 32, 32)))


class TestSpecs:
    def test_snider_layout(self):
        convs = [[l.channels for l in blk if l.kind == "conv"] for blk in SNIDER_SPEC.encoder_spec]
        assert convs == [[32, 32], [64, 64], [128, 128], [256, 256], [512, 512]]
        assert sum(l.kind == "pool" for blk in SNIDER_SPEC.encoder_spec for l in blk) == 4
        assert sum(l.kind == "up" for blk in SNIDER_SPEC.decoder_spec for l in blk) == 4
        last = SNIDER_SPEC.decoder_spec[-1][-1]
        assert (last.kernel, last.channels) == (1, 3)
        assert all(l.factor == 1 for blk in SNIDER_SPEC.encoder_spec for l in blk if l.kind == "conv")

    def test_tiny_layout(self):
        assert [blk[0].channels for blk in SNIDER_TINY_SPEC.encoder_spec] == [32, 64, 128]
        assert len(SNIDER_TINY_SPEC.decoder_spec) == 3
        assert SNIDER_TINY_SPEC.decoder_spec[-1][-1].channels == 3

    def test_divisors(self):
        assert SNIDER_SPEC.divisor == 16 and SNIDER_TINY_SPEC.divisor == 4

    @pytest.mark.parametrize("text,expect", [("tiny", Variant.SNIDER_TINY), ("SNIDER", Variant.SNIDER),
                                             ("snider-tiny", Variant.SNIDER_TINY)])
    def test_variant_parse(self, text, expect):
        assert Variant.parse(text) is expect

    def test_unknown_variant(self):
        with pytest.raises(ValueError):
            Variant.parse("huge")


class TestBuild:
    def test_indivisible_size_rejected(self):
        with pytest.raises(ValueError):
            build_snider("tiny", 30, 0)
        with pytest.raises(ValueError):
            build_snider("snider", 40, 0)

    def test_same_seed_bit_identical(self):
        a, b = build_snider("tiny", 16, 5), build_snider("tiny", 16, 5)
        for (na, pa), (nb, pb) in zip(a.named_parameters(), b.named_parameters()):
            assert na == nb and pa.data.tobytes() == pb.data.tobytes()

    def test_different_seed_differs(self):
        a, b = build_snider("tiny", 16, 5), build_snider("tiny", 16, 6)
        assert a.g_d.enc.parameters()[0].data.tobytes() != b.g_d.enc.parameters()[0].data.tobytes()

    def test_init_statistics(self):
        m = build_snider("tiny", 16, 0)
        named = dict(m.named_parameters())
        weights = np.concatenate([p.data.ravel() for n, p in named.items() if n.endswith("weight")])
        assert abs(weights.std() - 0.01) < 2e-4 and abs(weights.mean()) < 1e-4
        assert all(np.all(p.data == 0) for n, p in named.items() if n.endswith("bias") or n.endswith("beta"))
        assert all(np.all(p.data == 1) for n, p in named.items() if n.endswith("gamma"))

    def test_g_d_and_g_r_independent(self):
        m = build_snider("tiny", 16, 0)
        pd, pr = m.g_d.parameters(), m.g_r.parameters()
        assert [p.shape for p in pd] == [p.shape for p in pr]
        assert all(a is not b for a, b in zip(pd, pr))
        assert pd[0].data.tobytes() != pr[0].data.tobytes()

    def test_parameter_names_unique(self):
        names = [n for n, _ in build_snider("tiny", 16, 0).named_parameters()]
        assert len(names) == len(set(names))

    @pytest.mark.parametrize("size", [16, 64])
    def test_tiny_parameter_count(self, size):
        assert build_snider("tiny", size, 0).parameter_count() == tiny_param_count(size)

    def test_tiny_count_regression(self):
        assert build_snider("tiny", 64, 0).parameter_count() == 6_063_144

    def test_snider_parameter_count(self):
        m = build_snider("snider", 32, 0)
        assert m.parameter_count() == snider_param_count(32) == 20_063_208


class TestForward:
    def test_snider_unet_at_320(self):
        net = UNet(np.random.default_rng(0), SNIDER_SPEC)
        x = Tensor(np.random.default_rng(1).uniform(size=(1, 3, 320, 320)))
        y, feats = net(x, False)
        assert y.shape == (1, 3, 320, 320)
        assert feats.last.shape == (1, 512, 20, 20)

    def test_tiny_g_d_at_64(self):
        m = build_snider("tiny", 64, 0)
        y, _ = m.g_d(Tensor(np.zeros((1, 3, 64, 64))), False)
        assert y.shape == (1, 3, 64, 64)

    def test_main_shapes_and_range(self, tiny, batch):
        out = forward_main(tiny, batch, training=True)
        for img in (out.denoised, out.rectified):
            assert img.shape == batch.shape
            assert img.data.min() >= 0 and img.data.max() <= 1
        assert out.fused.shape == (2, 128, 8, 8)

    def test_snider_fused_shape(self):
        m = build_snider("snider", 32, 0)
        out = forward_main(m, Tensor(np.zeros((1, 3, 32, 32))), training=False)
        assert out.fused.shape == (1, 512, 2, 2)
        seg, count = forward_aux(m, out.fused, out.fused_skips, training=False)
        assert seg.shape == (1, 1, 32, 32) and count.shape == (1, 1)

    def test_aux_shapes_and_range(self, tiny, batch):
        out = forward_main(tiny, batch, training=True)
        seg, count = forward_aux(tiny, out.fused, out.fused_skips, training=True)
        assert seg.shape == (2, 1, 32, 32) and count.shape == (2, 1)
        assert np.all(seg.data > 0) and np.all(seg.data < 1)

    def test_wrong_input_shape_rejected(self, tiny):
        with pytest.raises(ShapeError):
            forward_main(tiny, Tensor(np.zeros((1, 3, 16, 16))))
        with pytest.raises(ShapeError):
            recover(tiny, Tensor(np.zeros((1, 1, 32, 32))))

    def test_wrong_fused_shape_rejected(self, tiny):
        with pytest.raises(ShapeError):
            forward_aux(tiny, Tensor(np.zeros((1, 64, 8, 8))), [])

    def test_fusion_is_additive(self, tiny, batch, monkeypatch):
        enc_d = tiny.g_d.enc(batch, False)
        real_enc = tiny.g_r.enc

        class ZeroEncoder:
            def __call__(self, x, training):
                feats = real_enc(x, training)
                feats.last = Tensor(np.zeros(feats.last.shape))
                feats.skips = [Tensor(np.zeros(s.shape)) for s in feats.skips]
                return feats

        monkeypatch.setattr(tiny.g_r, "enc", ZeroEncoder())
        out = forward_main(tiny, batch, training=False)
        np.testing.assert_array_equal(out.fused.data, enc_d.last.data)

    def test_eval_mode_bit_identical(self, tiny, batch):
        a = forward_main(tiny, batch, training=False)
        b = forward_main(tiny, batch, training=False)
        assert a.rectified.data.tobytes() == b.rectified.data.tobytes()
        sa, ca = forward_aux(tiny, a.fused, a.fused_skips, training=False)
        sb, cb = forward_aux(tiny, b.fused, b.fused_skips, training=False)
        assert sa.data.tobytes() == sb.data.tobytes() and ca.data.tobytes() == cb.data.tobytes()

    def test_recover_equals_eval_forward(self, tiny, batch):
        rec = recover(tiny, batch)
        main = forward_main(tiny, batch, training=False)
        assert rec.data.tobytes() == main.rectified.data.tobytes()
        assert rec.shape == batch.shape and 0 <= rec.data.min() and rec.data.max() <= 1

    def test_recover_without_rectify_is_denoiser(self, tiny, batch):
        main = forward_main(tiny, batch, training=False)
        assert recover(tiny, batch, rectify=False).data.tobytes() == main.denoised.data.tobytes()

    def test_recover_leaves_running_stats(self, batch):
        m = build_snider("tiny", 32, 0)
        before = [s.running_mean.copy() for _, s in m.named_bn_states()]
        recover(m, batch)
        assert all(np.array_equal(a, s.running_mean) for a, (_, s) in zip(before, m.named_bn_states()))


class TestGradientFlow:
    @pytest.mark.parametrize("variant,size", [("tiny", 16), ("snider", 16)])
    def test_every_parameter_receives_gradient(self, variant, size):
        m = build_snider(variant, size, 0)
        r = np.random.default_rng(1)
        x = Tensor(r.uniform(size=(2, 3, size, size)))
        seg_t = Tensor((r.uniform(size=(2, 1, size, size)) > 0.5).astype(np.float32))
        with Tape() as tape:
            out = forward_main(m, x)
            seg, count = forward_aux(m, out.fused, out.fused_skips)
            loss = F.weighted_sum(
                [F.mse_loss(out.denoised, x), F.l1_loss(out.rectified, x), F.bce_loss(seg, seg_t),
                 F.mse_loss(count, Tensor(np.full((2, 1), 5.0)))],
                [0.4, 0.4, 0.15, 0.05],
            )
        backward(loss, tape)
        missing = [n for n, p in m.named_parameters() if p.grad is None or not np.any(p.grad)]
        assert missing == []
