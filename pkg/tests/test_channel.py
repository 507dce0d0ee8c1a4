"""Unit tests for latent decoding and the lossy channel models."""
import numpy as np
import pytest

from hammersim.channel import (
    ChannelConfig,
    clip_linf,
    decode_latent,
    emulate_audio_channel,
    emulate_image_channel,
    stft,
)
from hammersim.seeding import generator

import oracles


# -- latent decoding --------------------------------------------------------

def test_decode_latent_1d_segment_hold():
    z = np.array([1.0, -2.0, 3.0])
    out = decode_latent(z, (6,))
    np.testing.assert_array_equal(out, [1.0, 1.0, -2.0, -2.0, 3.0, 3.0])


def test_decode_latent_1d_uneven_segments():
    z = np.array([5.0, 7.0])
    out = decode_latent(z, (5,))
    # floor(i * 2 / 5): 0 0 0 1 1
    np.testing.assert_array_equal(out, [5.0, 5.0, 5.0, 7.0, 7.0])


def test_decode_latent_is_linear():
    rng = generator(3, "decode-linear")
    z1 = rng.standard_normal(10)
    z2 = rng.standard_normal(10)
    lhs = decode_latent(2.0 * z1 + z2, (100,))
    rhs = 2.0 * decode_latent(z1, (100,)) + decode_latent(z2, (100,))
    np.testing.assert_allclose(lhs, rhs, atol=1e-12)


def test_decode_latent_2d_grid():
    z = np.arange(4.0)
    out = decode_latent(z, (4, 4))
    assert out.shape == (4, 4)
    # top-left quadrant holds z[0], bottom-right z[3]
    assert out[0, 0] == 0.0 and out[0, 3] == 1.0
    assert out[3, 0] == 2.0 and out[3, 3] == 3.0


def test_decode_latent_rejects_bad_shapes():
    with pytest.raises(ValueError):
        decode_latent(np.ones(10), (5,))
    with pytest.raises(ValueError):
        decode_latent(np.ones(3), (8, 8))  # 3 is not a square grid
    with pytest.raises(ValueError):
        decode_latent(np.ones(4), (10, 10, 3))


def test_clip_linf():
    d = np.array([-5.0, -0.5, 0.0, 0.5, 5.0])
    np.testing.assert_array_equal(clip_linf(d, 1.0), [-1.0, -0.5, 0.0, 0.5, 1.0])
    with pytest.raises(ValueError):
        clip_linf(d, -1.0)


# -- audio path -------------------------------------------------------------

def test_audio_channel_identity_when_clean():
    cfg = ChannelConfig()
    x = generator(4, "audio-id").standard_normal(256)
    out = emulate_audio_channel(x, np.zeros_like(x), cfg, seed=0)
    np.testing.assert_array_equal(out, x)


def test_audio_channel_noise_is_seeded():
    cfg = ChannelConfig(noise_std=0.1)
    x = np.zeros(128)
    d = np.zeros(128)
    a = emulate_audio_channel(x, d, cfg, seed=9)
    b = emulate_audio_channel(x, d, cfg, seed=9)
    c = emulate_audio_channel(x, d, cfg, seed=10)
    np.testing.assert_array_equal(a, b)
    assert not np.array_equal(a, c)


def test_audio_channel_resampling_length():
    cfg = ChannelConfig(source_rate_hz=16_000, target_rate_hz=8_000)
    x = np.sin(np.linspace(0, 20, 400))
    out = emulate_audio_channel(x, np.zeros_like(x), cfg, seed=0)
    assert out.shape == (200,)
    # downsampling keeps every other sample up to interpolation
    np.testing.assert_allclose(out, x[::2], atol=1e-12)


def test_audio_channel_shape_mismatch():
    cfg = ChannelConfig()
    with pytest.raises(ValueError):
        emulate_audio_channel(np.zeros(10), np.zeros(11), cfg, seed=0)


# -- image path -------------------------------------------------------------

def test_image_channel_identity_when_clean():
    cfg = ChannelConfig(modality="image")
    x = generator(5, "image-id").uniform(0.2, 0.8, size=(16, 16))
    out = emulate_image_channel(x, np.zeros_like(x), cfg, seed=0)
    np.testing.assert_allclose(out, x, atol=1e-12)


def test_image_channel_blur_averages():
    cfg = ChannelConfig(modality="image", blur_radius=1)
    x = np.zeros((9, 9))
    x[4, 4] = 0.9
    out = emulate_image_channel(x, np.zeros_like(x), cfg, seed=0)
    # a 3x3 box blur spreads the impulse evenly
    np.testing.assert_allclose(out[3:6, 3:6], 0.1, atol=1e-12)
    assert out[0, 0] == 0.0


def test_image_channel_gamma_and_clamp():
    cfg = ChannelConfig(modality="image", gamma_value=2.0)
    x = np.full((4, 4), 0.5)
    out = emulate_image_channel(x, np.zeros_like(x), cfg, seed=0)
    np.testing.assert_allclose(out, 0.25, atol=1e-12)
    # delta pushing past 1.0 is clamped before the pipeline
    out2 = emulate_image_channel(x, np.full_like(x, 10.0), cfg, seed=0)
    np.testing.assert_allclose(out2, 1.0, atol=1e-12)


def test_image_channel_output_in_unit_range():
    cfg = ChannelConfig(modality="image", blur_radius=2, texture_strength=0.3,
                        gamma_value=0.8, rescale_factor=0.5)
    rng = generator(6, "image-range")
    x = rng.uniform(0, 1, size=(32, 32))
    d = rng.normal(0, 0.5, size=(32, 32))
    out = emulate_image_channel(x, d, cfg, seed=1)
    assert out.shape == x.shape
    assert out.min() >= 0.0 and out.max() <= 1.0


def test_config_validation():
    with pytest.raises(ValueError):
        ChannelConfig(modality="video")
    with pytest.raises(ValueError):
        ChannelConfig(noise_std=-0.1)
    with pytest.raises(ValueError):
        ChannelConfig(texture_strength=1.5)
    with pytest.raises(ValueError):
        ChannelConfig(gamma_value=0.0)


# -- spectrum ---------------------------------------------------------------

def test_stft_matches_direct_transform():
    rng = generator(8, "stft-test")
    x = rng.standard_normal(200)
    got = stft(x, frame_len=64, hop=16)
    want = oracles.stft_reference(x, 64, 16)
    assert got.shape == want.shape == (9, 33)
    np.testing.assert_allclose(got, want, atol=1e-9)


def test_stft_frame_count():
    x = np.zeros(256)
    assert stft(x, frame_len=256, hop=128).shape == (1, 129)
    assert stft(np.zeros(257), frame_len=256, hop=128).shape == (1, 129)
    assert stft(np.zeros(384), frame_len=256, hop=128).shape == (2, 129)
    with pytest.raises(ValueError):
        stft(np.zeros(100), frame_len=256, hop=128)
