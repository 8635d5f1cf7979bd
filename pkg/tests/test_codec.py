import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from worldmodel4d.codec import (Codec, CodecShapeError, codec_training_frames, denormalize_depth,
                                normalize_depth, pretrain_codec)
from worldmodel4d.config import CodecConfig
from worldmodel4d import world as W


@pytest.fixture()
def codec():
    return Codec(CodecConfig(), np.random.default_rng(0))


def test_latent_shape_and_determinism(codec):
    rgb = np.random.default_rng(1).uniform(size=(3, 32, 64))
    a, b = codec.encode_image(rgb), codec.encode_image(rgb.copy())
    assert a.shape == (1, 8, 8, 16) and a.modality == "image"
    assert np.array_equal(a.z.data, b.z.data)


def test_non_divisible_extent_rejected(codec):
    with pytest.raises(CodecShapeError):
        codec.encode_image(np.zeros((3, 30, 64)))
    with pytest.raises(CodecShapeError):
        codec.encode_depth(np.ones((1, 32, 62)))


def test_roundtrip_shapes(codec):
    rgb = np.random.default_rng(2).uniform(size=(2, 3, 32, 64))
    depth = np.random.default_rng(3).uniform(1, 9, size=(2, 1, 32, 64))
    assert codec.decode_image(codec.encode_image(rgb)).shape == rgb.shape
    assert codec.decode_depth(codec.encode_depth(depth)).shape == depth.shape


def test_one_parameter_set_serves_both_modalities(codec):
    assert codec.encoder_for("image") is codec.encoder_for("depth")
    assert codec.decoder_for("image") is codec.decoder_for("depth")
    img_ids = {id(p.data) for p in codec.encoder_for("image").parameters()}
    dep_ids = {id(p.data) for p in codec.encoder_for("depth").parameters()}
    assert img_ids == dep_ids


def test_perturbing_one_encoder_weight_moves_both_paths(codec):
    rng = np.random.default_rng(4)
    rgb = rng.uniform(size=(3, 32, 64))
    depth = rng.uniform(2, 30, size=(1, 32, 64))
    zi, zd = codec.encode_image(rgb).z.data, codec.encode_depth(depth).z.data
    codec.encoder.stem.weight.data[0, 0, 1, 1] += 0.5
    assert not np.array_equal(codec.encode_image(rgb).z.data, zi)
    assert not np.array_equal(codec.encode_depth(depth).z.data, zd)


def test_depth_is_replicated_and_decoded_as_channel_mean(codec):
    depth = np.random.default_rng(5).uniform(2, 30, size=(1, 1, 32, 64))
    norm, *_ = normalize_depth(depth)
    via_image = codec.encode_image(np.repeat(norm, 3, axis=1)).z.data
    assert np.array_equal(codec.encode_depth(depth).z.data, via_image)
    z = codec.encode_depth(depth)
    assert np.allclose(codec.decode_depth(z).data, codec.decode_image(z).data.mean(axis=1, keepdims=True), atol=1e-15)


def test_constant_depth_falls_back_and_is_flagged(codec):
    depth = np.full((2, 1, 32, 64), 7.0)
    depth[1, 0, :, :32] = 3.0
    lat = codec.encode_depth(depth)
    assert lat.degenerate.tolist() == [True, False]
    norm, *_ = normalize_depth(depth)
    assert np.all(norm[0] == 0.5)


def test_sky_goes_to_far_end():
    depth = np.array([[[[2.0, np.inf], [4.0, 6.0]]]])
    norm, lo, hi, flags = normalize_depth(depth)
    assert norm[0, 0].tolist() == [[0.0, 1.0], [0.5, 1.0]]
    assert (lo[0], hi[0], flags[0]) == (2.0, 6.0, False)


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 10_000), lo=st.floats(0.1, 50.0), span=st.floats(1e-3, 100.0))
def test_normalization_roundtrip(seed, lo, span):
    d = np.random.default_rng(seed).uniform(lo, lo + span, size=(3, 1, 4, 6))
    norm, mins, maxs, _ = normalize_depth(d)
    assert norm.min() >= 0.0 and norm.max() <= 1.0
    assert np.max(np.abs(denormalize_depth(norm, mins, maxs) - d)) <= 1e-9


def test_pretraining_reduces_heldout_error():
    cfg = CodecConfig(width=8, steps=60, eval_every=20)
    codec = Codec(cfg, np.random.default_rng(0))
    seqs = W.make_sequences(W.WorldConfig(), 4, seed=0)
    rgb, dep = codec_training_frames(seqs)
    frames = np.concatenate([rgb, dep])
    hist = pretrain_codec(codec, frames[:30], frames[30:], cfg.steps, np.random.default_rng(1),
                          lr=cfg.lr, batch=4, eval_every=cfg.eval_every)
    assert [s for s, _ in hist] == [0, 20, 40, 60]
    assert hist[-1][1] < hist[0][1]
    assert codec.latent_scale > 0
    assert not any(p.requires_grad for p in codec.parameters())
