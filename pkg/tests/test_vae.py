import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from hmrmerge.metrics import mpjpe
from hmrmerge.pose import MotionClip, generate_clip, make_scene
from hmrmerge.vae import (MotionVAE, PosteriorParams, VaeConfig, decode, decode_flat, encode, kl_divergence,
                          load_vae, reconstruct, save_vae, train_vae, vae_loss)

TINY = VaeConfig(frames=6, latent_tokens=2, latent_dim=8, layers=1, heads=2, ff_dim=16, n_joints=4)


def toy_clips(n, frames=6, seed=0):
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n):
        t = np.linspace(0, 1, frames)[:, None, None]
        joints = rng.normal(size=(1, 4, 3)) + t * rng.normal(size=(1, 4, 3))
        ang = rng.uniform(-np.pi, np.pi, (1, 3)) + 2 * t[..., 0] * rng.normal(size=(1, 3))
        out.append(MotionClip(joints, np.stack([np.cos(ang), np.sin(ang)], -1)))
    return out


def test_config_invariants():
    with pytest.raises(ValueError):
        VaeConfig(frames=3, latent_tokens=4)
    with pytest.raises(ValueError):
        VaeConfig(latent_dim=30, heads=4)
    with pytest.raises(ValueError):
        VaeConfig(kl_weight=-1.0)


def test_encode_shapes_determinism_and_zero_input():
    vae = MotionVAE(VaeConfig())
    clip = generate_clip(make_scene(0), 36).clip
    a, b = encode(vae, clip), encode(vae, clip)
    assert a.mean.shape == (4, 32) and np.array_equal(a.mean, b.mean)
    zero = MotionClip(np.zeros((36, 8, 3)), np.tile([1.0, 0.0], (36, 7, 1)))
    post = encode(vae, zero)
    assert np.all(np.isfinite(post.mean)) and np.all(np.isfinite(post.logvar))
    with pytest.raises(ValueError):
        encode(vae, generate_clip(make_scene(0), 30).clip)


def test_decode_unit_twists_and_determinism(rng):
    vae = MotionVAE(TINY)
    z = rng.normal(size=(2, 8))
    a, b = decode(vae, z), decode(vae, z)
    assert len(a) == 6 and np.array_equal(a.joints, b.joints)
    assert np.allclose(np.linalg.norm(a.twists, axis=-1), 1.0)
    with pytest.raises(ValueError):
        decode(vae, rng.normal(size=(3, 8)))
    with pytest.raises(ValueError):
        decode_flat(vae, rng.normal(size=(2, 8)))


@settings(max_examples=15, deadline=None)
@given(st.integers(1, 3), st.integers(1, 4), st.sampled_from([4, 8]), st.integers(2, 8), st.integers(2, 5))
def test_shape_contracts_random_configs(nz, layers, d, frames, joints):
    if nz > frames:
        return
    cfg = VaeConfig(frames=frames, latent_tokens=nz, latent_dim=d, layers=layers, heads=2, ff_dim=8,
                    n_joints=joints)
    vae = MotionVAE(cfg)
    clip = MotionClip(np.zeros((frames, joints, 3)), np.tile([1.0, 0.0], (frames, joints - 1, 1)))
    post = encode(vae, clip)
    assert post.mean.shape == (nz, d)
    assert decode(vae, post.mean).joints.shape == (frames, joints, 3)


def test_kl_closed_form_examples():
    assert kl_divergence(np.zeros((1, 2)), np.zeros((1, 2))) == 0.0
    assert kl_divergence(np.array([[1.0, 0.0]]), np.zeros((1, 2))) == pytest.approx(0.5)
    # torch path agrees with the numpy path
    m, lv = np.array([[0.3, -1.0]]), np.array([[0.2, -0.7]])
    assert kl_divergence(torch.as_tensor(m)[None], torch.as_tensor(lv)[None]).item() == pytest.approx(
        kl_divergence(m, lv))


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(-5, 5), min_size=2, max_size=2), st.lists(st.floats(-5, 5), min_size=2, max_size=2))
def test_kl_non_negative(mean, logvar):
    assert kl_divergence(np.array([mean]), np.array([logvar])) >= 0.0


def test_vae_loss_terms():
    clip = toy_clips(1)[0]
    std = PosteriorParams(np.zeros((2, 8)), np.zeros((2, 8)))
    total, mse, kl = vae_loss(clip, clip, std, kl_weight=0.1)
    assert (total, mse, kl) == (0.0, 0.0, 0.0)
    post = PosteriorParams(np.ones((2, 8)), np.zeros((2, 8)))
    shifted = MotionClip(clip.joints + 0.5, clip.twists)
    total, mse, kl = vae_loss(clip, shifted, post, kl_weight=0.1)
    n = clip.flat().size
    assert mse == pytest.approx(0.25 * clip.joints.size / n) and kl == pytest.approx(8.0)
    assert total == pytest.approx(mse + 0.1 * kl)
    with pytest.raises(ValueError):
        PosteriorParams(np.zeros(2), np.zeros(3))


def test_training_smoke_and_reproducibility():
    clips = toy_clips(1)
    _, log = train_vae(MotionVAE(TINY), clips, epochs=5, lr=3e-3, batch=1)
    assert min(log.losses[1:5]) < log.losses[0]
    _, again = train_vae(MotionVAE(TINY), clips, epochs=5, lr=3e-3, batch=1)
    assert again.losses == log.losses


def test_autoencoder_mode_improves():
    cfg = VaeConfig(frames=6, latent_tokens=2, latent_dim=8, layers=1, heads=2, ff_dim=16, n_joints=4,
                    kl_weight=0.0)
    _, log = train_vae(MotionVAE(cfg), toy_clips(8), epochs=50, lr=3e-3, batch=4)
    assert log.mse[-1] < log.mse[0]


def test_reconstruction_metric_matches_recomputation():
    clips = toy_clips(4, seed=2)
    vae, _ = train_vae(MotionVAE(TINY), clips, epochs=3, batch=2)
    recon = reconstruct(vae, clips)
    ours = np.mean([mpjpe(r.joints, c.joints) for r, c in zip(recon, clips)])
    manual = np.mean([np.sqrt(((r.joints - c.joints) ** 2).sum(-1)).mean() for r, c in zip(recon, clips)])
    assert ours == pytest.approx(manual, rel=1e-12)


def test_checkpoint_roundtrip(tmp_path, rng):
    vae, _ = train_vae(MotionVAE(TINY), toy_clips(2), epochs=1)
    loaded = load_vae(save_vae(vae, tmp_path / "v.npz"))
    z = rng.normal(size=(3, 2, 8))
    assert np.array_equal(decode_flat(vae, z), decode_flat(loaded, z))
