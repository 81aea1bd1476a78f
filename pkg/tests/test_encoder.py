import numpy as np
import pytest

from protoskill import numkit as nk
from protoskill.encoder import (AugmentationConfig, ClipWindow, EncoderConfig, EncoderParams, augment,
                                augment_batch, clip_end_times, encode, encode_batch, load_encoder,
                                make_clips, save_encoder)
from protoskill.simgen import DemoEpisode, TaskScript


def episode(T, d=3, seed=0):
    frames = np.random.default_rng(seed).normal(size=(T, d))
    return DemoEpisode(frames, np.ones((T, 1)), "robot", 1.0, seed, TaskScript((0,), (), "simple"))


def test_clip_enumeration():
    clips = make_clips(episode(10), EncoderConfig(M=10, L=4, stride=2, d=4))
    assert [c.source[1] for c in clips] == [0, 2, 4, 6]
    assert np.array_equal(clips[1].frames, episode(10).frames[2:6])


def test_single_clip_when_m_equals_l():
    assert len(make_clips(episode(20), EncoderConfig(M=5, L=5, stride=1, d=4))) == 1


def test_stride_one_overlap():
    ep = episode(16)
    clips = make_clips(ep, EncoderConfig(M=16, L=8, stride=1, d=4))
    assert len(clips) == 9
    for a, b in zip(clips, clips[1:]):
        assert np.array_equal(a.frames[1:], b.frames[:-1])  # 7 shared frames


def test_short_episodes_are_stretched():
    cfg = EncoderConfig(M=8, L=4, stride=2, d=4)
    clips = make_clips(episode(3), cfg)
    assert len(clips) == cfg.n_clips
    assert clip_end_times(3, cfg)[-1] == 2


def test_invalid_config():
    with pytest.raises(ValueError):
        EncoderConfig(M=4, L=8)


def test_augment_identity_and_determinism():
    clip = ClipWindow(np.random.default_rng(1).normal(size=(8, 5)))
    assert np.array_equal(augment(clip, AugmentationConfig(), 3).frames, clip.frames)
    aug = AugmentationConfig(noise_sigma=0.1, temporal_jitter=1, dropout_rate=0.2, mix_sigma=0.1)
    assert np.array_equal(augment(clip, aug, 3).frames, augment(clip, aug, 3).frames)
    assert not np.array_equal(augment(clip, aug, 3).frames, augment(clip, aug, 4).frames)


def test_noise_augmentation_std():
    x = np.zeros((1000, 4, 3))
    out = augment_batch(x, AugmentationConfig(noise_sigma=0.1), np.random.default_rng(0))
    std = out.std(axis=0)
    assert np.all(np.abs(std - 0.1) < 0.01)


def test_augment_rejects_negative():
    with pytest.raises(ValueError):
        AugmentationConfig(noise_sigma=-0.1)


@pytest.fixture(scope="module")
def params():
    return EncoderParams(EncoderConfig(L=6, d=8, M=12), 5, np.random.default_rng(0))


def test_encode_unit_norm(params):
    z = encode(params, np.random.default_rng(2).normal(size=(6, 5)))
    assert z.shape == (8,)
    assert abs(np.linalg.norm(z) - 1.0) < 1e-9


def test_encode_is_order_sensitive(params):
    clip = np.random.default_rng(3).normal(size=(6, 5))
    cos = encode(params, clip) @ encode(params, clip[::-1])
    assert cos < 1 - 1e-6


def test_encode_shape_check(params):
    with pytest.raises(ValueError):
        encode_batch(params, np.zeros((2, 5, 5)))


def test_encoder_gradient_wrt_input(params):
    rng = np.random.default_rng(4)
    head = rng.normal(size=8)
    err = nk.grad_check(lambda x: nk.sum(nk.mul(encode_batch(params, x), head)), rng.normal(size=(2, 6, 5)))
    assert err < 1e-4


def test_encoder_gradient_wrt_weights():
    """Analytic weight gradients against central differences on the live parameters."""
    cfg = EncoderConfig(L=4, d=4, M=8, backbone_dims=(6,), temporal_dims=(5,))
    rng = np.random.default_rng(5)
    p = EncoderParams(cfg, 3, rng)
    clips = rng.normal(size=(3, 4, 3))
    head = rng.normal(size=4)

    def loss():
        return nk.sum(nk.mul(encode_batch(p, clips), head))

    nk.backward(loss())
    eps = 1e-5
    for w in (p.wq, p.wv, p.backbone[0][0], p.head[-1][0], p.head[0][1]):
        numeric = np.zeros_like(w.data)
        with nk.no_grad():
            for i in range(w.data.size):
                orig = w.data.flat[i]
                w.data.flat[i] = orig + eps
                up = loss().item()
                w.data.flat[i] = orig - eps
                down = loss().item()
                w.data.flat[i] = orig
                numeric.flat[i] = (up - down) / (2 * eps)
        rel = np.max(np.abs(w.grad - numeric) / (np.abs(numeric) + 1e-8))
        assert rel < 1e-4, (w.name, rel)


def test_encoder_checkpoint_roundtrip(tmp_path, params):
    save_encoder(tmp_path / "enc.ckpt", params)
    back = load_encoder(tmp_path / "enc.ckpt")
    clip = np.random.default_rng(6).normal(size=(6, 5))
    assert np.array_equal(encode(back, clip), encode(params, clip))
