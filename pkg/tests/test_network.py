"""Full-model tests: configuration plumbing, forward contracts and output
ranges, temporal alignment math, parameter/MAC accounting, and checkpoint
round-trips."""

import numpy as np
import pytest
import torch

from conftest import pcm_valued_stereo

from stereoseld.errors import InputError
from stereoseld.frontend import TARGET_RATE_HZ
from stereoseld.network import (
    INTERP_PER_LABEL_FRAME,
    ConvEncoder,
    ModelConfig,
    SeldModel,
    build_model,
    config_from_text,
    config_to_text,
    conv2d_macs,
    count_macs,
    count_params,
    count_params_and_macs,
    depthwise_1d_macs,
    load_model,
    save_model,
    temporal_align,
)


class TestModelConfig:
    def test_tiny_defaults(self):
        config = ModelConfig.tiny()
        assert config.variant == "tiny"
        assert config.encoder_channels == (16, 32, 64, 64, 64, 64)
        assert config.d_model == 64 and config.d_state == 16

    def test_full_scales_up(self):
        config = ModelConfig.full()
        assert config.variant == "full"
        assert config.encoder_channels == (64, 128, 256, 512, 1024, 2048)
        assert config.d_model == 128 and config.d_state == 64
        assert config.time_pool == (2, 2, 2, 2, 1, 1)
        assert config.freq_pool == (2, 2, 2, 2, 4, 1)

    def test_overrides(self):
        config = ModelConfig.full(bidirectional=False, chunk_len=32)
        assert not config.bidirectional
        assert config.chunk_len == 32
        assert config.d_model == 128  # untouched

    def test_block_config_mapping(self):
        block = ModelConfig.tiny(n_blocks=3).block_config()
        assert (block.d_model, block.d_state, block.n_blocks) == (64, 16, 3)

    def test_text_round_trip(self):
        for config in (ModelConfig.tiny(), ModelConfig.full(),
                       ModelConfig.full(bidirectional=False, chunk_len=16)):
            assert config_from_text(config_to_text(config)) == config

    def test_unknown_key_rejected(self):
        with pytest.raises(InputError):
            config_from_text("variant=tiny\nnot_a_field=3\n")


@pytest.fixture(scope="module")
def model():
    return build_model(ModelConfig.tiny(), seed=0).eval()


class TestForwardContract:
    def test_shapes(self, model):
        x = torch.randn(2, 7, 251, 64)
        with torch.no_grad():
            y = model(x)
        assert y.shape == (2, 50, 3, 13, 3)

    def test_output_ranges(self, model):
        x = 5.0 * torch.randn(2, 7, 251, 64)
        with torch.no_grad():
            y = model(x)
        assert torch.all(y[..., 0].abs() <= 1.0)
        assert torch.all(y[..., 1].abs() <= 1.0)
        assert torch.all(y[..., 2] >= 0.0)
        assert torch.all(torch.isfinite(y))

    def test_short_clip_still_runs(self, model):
        # 26 feature frames pool down to T'=2, the minimum for alignment
        x = torch.randn(1, 7, 26, 64)
        with torch.no_grad():
            assert model(x).shape == (1, 50, 3, 13, 3)

    def test_too_short_clip_rejected(self, model):
        with pytest.raises(InputError, match="T' >= 2"):
            with torch.no_grad():
                model(torch.randn(1, 7, 10, 64))

    def test_bad_channel_count_rejected(self, model):
        with pytest.raises(InputError):
            model(torch.randn(1, 4, 251, 64))
        with pytest.raises(InputError):
            model(torch.randn(7, 251, 64))

    def test_build_is_deterministic(self):
        a = build_model(ModelConfig.tiny(), seed=3)
        b = build_model(ModelConfig.tiny(), seed=3)
        for (na, pa), (nb, pb) in zip(a.named_parameters(), b.named_parameters()):
            assert na == nb
            assert torch.equal(pa, pb), na
        c = build_model(ModelConfig.tiny(), seed=4)
        assert any(
            not torch.equal(pa, pc)
            for (_, pa), (_, pc) in zip(a.named_parameters(), c.named_parameters())
        )

    def test_forward_clip_numpy_out(self, model, rng):
        clip = pcm_valued_stereo(rng, 5 * TARGET_RATE_HZ, TARGET_RATE_HZ)
        out = model.forward_clip(clip)
        assert isinstance(out, np.ndarray)
        assert out.shape == (50, 3, 13, 3)

    def test_batch_consistency(self, model):
        x = torch.randn(3, 7, 251, 64)
        with torch.no_grad():
            batched = model(x)
            single = model(x[1:2])
        assert torch.allclose(batched[1], single[0], atol=1e-5)


class TestConvEncoder:
    def test_pooled_output_shape(self):
        encoder = ConvEncoder(ModelConfig.tiny())
        with torch.no_grad():
            z = encoder(torch.randn(1, 7, 251, 64))
        assert z.shape == (1, 64, 16, 1)  # ceil(251/16), 64 mels fully pooled

    def test_ceil_mode_keeps_odd_remainders(self):
        encoder = ConvEncoder(ModelConfig.tiny())
        with torch.no_grad():
            z = encoder(torch.randn(1, 7, 26, 64))
        assert z.shape[2] == 2  # 26 -> 13 -> 7 -> 4 -> 2


class TestTemporalAlign:
    def test_two_point_linear_exact(self):
        # T'=2 interpolates a straight line; each label frame averages 5
        # consecutive samples of it
        x = torch.tensor([[[0.0], [1.0]]])  # [1][2][1]
        y = temporal_align(x, 50)
        assert y.shape == (1, 50, 1)
        target = 50 * INTERP_PER_LABEL_FRAME
        positions = torch.arange(target, dtype=torch.float64) / (target - 1)
        expected = positions.reshape(50, 5).mean(dim=1)
        np.testing.assert_allclose(
            y[0, :, 0].numpy(), expected.numpy(), atol=1e-6
        )

    def test_constant_preserved(self):
        x = torch.full((2, 16, 3), 4.25)
        y = temporal_align(x, 50)
        assert torch.allclose(y, torch.full((2, 50, 3), 4.25), atol=1e-6)

    def test_endpoint_alignment(self):
        x = torch.zeros(1, 4, 1)
        x[0, -1, 0] = 1.0
        y = temporal_align(x, 50)
        # align_corners: the final label frame averages the last 5 samples,
        # all close to the endpoint value
        assert y[0, -1, 0] > 0.95
        assert y[0, 0, 0] == pytest.approx(0.0, abs=1e-6)

    def test_rejects_single_frame(self):
        with pytest.raises(InputError):
            temporal_align(torch.zeros(1, 1, 8), 50)


class TestCounting:
    def test_conv2d_macs_pin(self):
        assert conv2d_macs(3, 1, 1, 10, 10) == 900
        assert conv2d_macs(3, 2, 4, 5, 5) == 9 * 2 * 4 * 25

    def test_depthwise_macs_pin(self):
        assert depthwise_1d_macs(3, 8, 10) == 240

    def test_params_match_torch_exactly(self):
        for config in (
            ModelConfig.tiny(),
            ModelConfig.tiny(bidirectional=False),
            ModelConfig.tiny(encoder_channels=(8, 8, 16, 16, 32, 32),
                             d_model=32, d_state=8, n_blocks=1),
        ):
            model = SeldModel(config)
            torch_count = sum(p.numel() for p in model.parameters())
            assert count_params(config) == torch_count, config

    def test_tiny_budget(self):
        counts = count_params_and_macs(ModelConfig.tiny())
        assert counts["params"] < 1_000_000
        assert counts["macs"] < 300_000_000

    def test_full_pinned_totals(self):
        assert count_params(ModelConfig.full()) == 76_901_301
        assert count_macs(ModelConfig.full()) == 5_187_514_368

    def test_macs_grow_with_input_length(self):
        config = ModelConfig.tiny()
        assert count_macs(config, frames=251) > count_macs(config, frames=126)

    def test_unidirectional_costs_less(self):
        bi = count_params_and_macs(ModelConfig.full())
        uni = count_params_and_macs(ModelConfig.full(bidirectional=False))
        assert uni["params"] < bi["params"]
        assert uni["macs"] < bi["macs"]


class TestSaveLoad:
    def test_round_trip_forward_identical(self, tmp_path):
        model = build_model(ModelConfig.tiny(), seed=1).eval()
        path = str(tmp_path / "model.ckpt")
        save_model(path, model)
        restored = load_model(path).eval()
        assert restored.config == model.config
        x = torch.randn(1, 7, 251, 64)
        with torch.no_grad():
            assert torch.equal(model(x), restored(x))

    def test_missing_sidecar_rejected(self, tmp_path):
        model = build_model(ModelConfig.tiny(), seed=1)
        path = str(tmp_path / "model.ckpt")
        save_model(path, model)
        (tmp_path / "model.ckpt.cfg").unlink()
        with pytest.raises((InputError, OSError)):
            load_model(path)

    def test_tensor_name_mismatch_rejected(self, tmp_path):
        model = build_model(ModelConfig.tiny(), seed=1)
        path = str(tmp_path / "model.ckpt")
        save_model(path, model)
        # sidecar promises one extra block: names will not line up
        (tmp_path / "model.ckpt.cfg").write_text(
            config_to_text(ModelConfig.tiny(n_blocks=3))
        )
        with pytest.raises(InputError):
            load_model(path)
