import numpy as np
import pytest
import torch

from cartseg.errors import ConfigError, ParseError, ShapeError
from cartseg.networks import (
    AsppConfig,
    DiscriminatorConfig,
    PredictionBatch,
    SegNetConfig,
    build_discriminator,
    build_segmenter,
    count_parameters,
    forward_segmenter,
    load_checkpoint,
    save_checkpoint,
)

TINY = SegNetConfig(base_filters=4, depth=2, use_batchnorm=False)
TINY_DISC = DiscriminatorConfig(filter_sequence=(2, 2, 1))


def conv_params(cin, cout, k):
    return cin * cout * k * k + cout


def segmenter_param_oracle(cfg: SegNetConfig) -> int:
    """Enumerate every convolution (and batchnorm affine pair) by hand."""
    channels = [cfg.base_filters * 2**d for d in range(cfg.depth)]
    total = 0
    in_ch = cfg.input_channels
    blocks = []
    for ch in channels:
        blocks.append((in_ch, ch))
        in_ch = ch
    for d in range(cfg.depth - 2, -1, -1):
        blocks.append((channels[d + 1] + channels[d], channels[d]))
    for cin, cout in blocks:
        total += conv_params(cin, cout, 3) + conv_params(cout, cout, 3)
        if cfg.use_batchnorm:
            total += 2 * 2 * cout
    total += conv_params(channels[0], cfg.class_count, 1)
    return total


class TestConfigs:
    def test_depth_lower_bound(self):
        with pytest.raises(ConfigError):
            SegNetConfig(depth=1)

    def test_disc_last_filter_must_be_one(self):
        with pytest.raises(ConfigError):
            DiscriminatorConfig(filter_sequence=(64, 2))

    def test_aspp_duplicate_rates(self):
        with pytest.raises(ConfigError):
            AsppConfig(dilation_rates=(6, 6, 12))


class TestSegmenter:
    def test_default_shape_contract(self):
        net = build_segmenter(SegNetConfig(), seed=0)
        pred = forward_segmenter(net, torch.zeros(1, 1, 300, 300))
        assert pred.probabilities.shape == (1, 5, 300, 300)
        sums = pred.probabilities.sum(dim=1)
        assert torch.allclose(sums, torch.ones_like(sums), atol=1e-5)

    def test_channel_doubling(self):
        net = build_segmenter(SegNetConfig(base_filters=3, depth=4, use_batchnorm=False))
        out_channels = [enc[-2].out_channels for enc in net.encoders]
        assert out_channels == [3, 6, 12, 24]

    def test_param_count_tiny_hand_enumeration(self):
        # depth 2, base 4, no norm: encoder blocks (1->4->4, 4->8->8),
        # one decoder block (12->4->4), 1x1 head (4->5)
        expected = (40 + 148) + (296 + 584) + (436 + 148) + 25
        assert expected == 1677
        assert count_parameters(build_segmenter(TINY)) == expected

    def test_param_count_matches_oracle_with_batchnorm(self):
        cfg = SegNetConfig(base_filters=4, depth=3)
        assert count_parameters(build_segmenter(cfg)) == segmenter_param_oracle(cfg)

    def test_param_count_default_matches_oracle(self):
        cfg = SegNetConfig()
        assert count_parameters(build_segmenter(cfg)) == segmenter_param_oracle(cfg)

    def test_seeded_init_deterministic(self):
        a = build_segmenter(TINY, seed=5)
        b = build_segmenter(TINY, seed=5)
        for (na, pa), (nb, pb) in zip(a.state_dict().items(), b.state_dict().items()):
            assert na == nb
            assert torch.equal(pa, pb)

    def test_different_seeds_differ(self):
        a = build_segmenter(TINY, seed=1)
        b = build_segmenter(TINY, seed=2)
        assert not torch.equal(a.head.weight, b.head.weight)

    def test_arbitrary_size_round_trip(self):
        net = build_segmenter(SegNetConfig(base_filters=2, depth=4, use_batchnorm=False), seed=0)
        out = net(torch.randn(2, 1, 45, 37))
        assert out.shape == (2, 5, 45, 37)

    def test_too_small_input(self):
        net = build_segmenter(SegNetConfig(base_filters=2, depth=6, use_batchnorm=False))
        with pytest.raises(ConfigError):
            net(torch.zeros(1, 1, 16, 16))

    def test_wrong_channel_count(self):
        net = build_segmenter(TINY)
        with pytest.raises(ShapeError):
            net(torch.zeros(1, 3, 32, 32))

    def test_uniform_probs_through_zeroed_head(self):
        net = build_segmenter(TINY, seed=0)
        with torch.no_grad():
            net.head.weight.zero_()
            net.head.bias.zero_()
        pred = forward_segmenter(net, torch.zeros(1, 1, 32, 32))
        assert torch.allclose(pred.probabilities, torch.full_like(pred.probabilities, 0.2), atol=1e-6)

    def test_aux_head_shapes(self):
        net = build_segmenter(SegNetConfig(base_filters=4, depth=3, use_batchnorm=False), seed=0,
                              aspp=AsppConfig())
        pred = forward_segmenter(net, torch.randn(1, 1, 64, 64), with_aux=True)
        assert pred.aux_probabilities is not None
        assert pred.aux_probabilities.shape == pred.probabilities.shape

    def test_aux_requested_without_head(self):
        net = build_segmenter(TINY)
        with pytest.raises(ConfigError):
            net(torch.zeros(1, 1, 32, 32), with_aux=True)


class TestDiscriminator:
    def test_shape_contract(self):
        disc = build_discriminator(DiscriminatorConfig(), in_channels=5, seed=0)
        out = disc(torch.rand(1, 5, 304, 304))
        assert out.shape == (1, 1, 304, 304)

    def test_accepts_class_count_channels(self):
        disc = build_discriminator(DiscriminatorConfig(), in_channels=5)
        assert disc.body[0].in_channels == 5

    def test_param_count_tiny_hand_enumeration(self):
        # filters (2,2,1), kernel 4, from 5 channels:
        # 5*2*16+2 = 162, 2*2*16+2 = 66, 2*1*16+1 = 33
        disc = build_discriminator(TINY_DISC, in_channels=5)
        assert count_parameters(disc) == 162 + 66 + 33

    def test_param_count_default(self):
        disc = build_discriminator(DiscriminatorConfig(), in_channels=5)
        expected = sum(
            conv_params(cin, cout, 4)
            for cin, cout in zip((5, 64, 128, 256, 512), (64, 128, 256, 512, 1))
        )
        assert count_parameters(disc) == expected

    def test_internal_downsampling(self):
        disc = build_discriminator(DiscriminatorConfig(), in_channels=5)
        assert disc.body(torch.rand(1, 5, 96, 96)).shape == (1, 1, 3, 3)


class TestPredictionBatch:
    def test_rejects_unnormalized(self):
        with pytest.raises(ShapeError):
            PredictionBatch(probabilities=torch.rand(1, 5, 4, 4))

    def test_rejects_wrong_rank(self):
        with pytest.raises(ShapeError):
            PredictionBatch(probabilities=torch.ones(5, 4, 4))


class TestCheckpoints:
    def test_bit_exact_round_trip(self, tmp_path):
        src = build_segmenter(SegNetConfig(base_filters=4, depth=3), seed=7)
        save_checkpoint(tmp_path / "c", src, {"epoch": 3, "setting": "BASELINE"})
        dst = build_segmenter(SegNetConfig(base_filters=4, depth=3), seed=99)
        meta = load_checkpoint(tmp_path / "c", dst)
        assert meta == {"epoch": 3, "setting": "BASELINE"}
        for (na, pa), (nb, pb) in zip(src.state_dict().items(), dst.state_dict().items()):
            assert na == nb
            assert torch.equal(pa.float(), pb.float()), na

    def test_discriminator_round_trip(self, tmp_path):
        src = build_discriminator(TINY_DISC, in_channels=5, seed=1)
        save_checkpoint(tmp_path / "d", src, {})
        dst = build_discriminator(TINY_DISC, in_channels=5, seed=2)
        load_checkpoint(tmp_path / "d", dst)
        x = torch.rand(1, 5, 32, 32)
        assert torch.equal(src(x), dst(x))

    def test_shape_mismatch_rejected(self, tmp_path):
        save_checkpoint(tmp_path / "c", build_segmenter(TINY), {})
        other = build_segmenter(SegNetConfig(base_filters=8, depth=2, use_batchnorm=False))
        with pytest.raises(ShapeError):
            load_checkpoint(tmp_path / "c", other)

    def test_missing_metadata(self, tmp_path):
        with pytest.raises(ParseError):
            load_checkpoint(tmp_path / "nope", build_segmenter(TINY))

    def test_truncated_blob_missing_params(self, tmp_path):
        save_checkpoint(tmp_path / "c", build_discriminator(TINY_DISC, in_channels=5), {})
        blob = (tmp_path / "c" / "params.bin").read_bytes()
        (tmp_path / "c" / "params.bin").write_bytes(blob[: len(blob) // 2 - 100])
        with pytest.raises((ShapeError, ParseError, Exception)):
            load_checkpoint(tmp_path / "c", build_discriminator(TINY_DISC, in_channels=5))
