import numpy as np
import pytest

from meatrd import autodiff as ad
from meatrd.autodiff import Tensor, finite_difference_check
from meatrd.nn import CheckpointError, load_checkpoint, save_checkpoint
from meatrd.stage1 import PatchAutoencoder, image_recon_loss, pretrain_stage1, ssim, stage1_loss, to_nchw

rng = np.random.default_rng(3)


def test_ssim_self_is_one():
    x = rng.uniform(size=(8, 8, 3))
    assert abs(ssim(x, x) - 1.0) <= 1e-12


def test_stage1_loss_self_is_minus_one():
    p = rng.uniform(size=(8, 8, 3))
    assert abs(stage1_loss(p, p) + 1.0) <= 1e-12


def test_ssim_is_symmetric_and_bounded():
    x, y = rng.uniform(size=(2, 8, 8, 3))
    assert ssim(x, y) == pytest.approx(ssim(y, x), abs=1e-15)
    assert -1.0 <= ssim(x, y) < 1.0


def test_ssim_shape_mismatch():
    with pytest.raises(ValueError):
        ssim(np.zeros((4, 4, 3)), np.zeros((4, 5, 3)))


def test_ssim_loss_gradient_on_random_patches():
    p = rng.uniform(size=(1, 3, 8, 8))
    q = rng.uniform(size=(1, 3, 8, 8))
    f = lambda x: ad.sum_(image_recon_loss(Tensor(p), x))  # noqa: E731
    assert finite_difference_check(f, q) <= 1e-4


@pytest.mark.parametrize("embed_dim", [8, 32])
def test_autoencoder_shapes(embed_dim):
    model = PatchAutoencoder(embed_dim=embed_dim, patch_size=32, seed=0)
    patches = rng.uniform(size=(3, 32, 32, 3))
    assert model.encode(patches).shape == (3, embed_dim)
    rec = model.reconstruct(patches)
    assert rec.shape == patches.shape and rec.min() >= 0 and rec.max() <= 1


def test_autoencoder_requires_divisible_size():
    with pytest.raises(ValueError):
        PatchAutoencoder(patch_size=20)


def test_pretraining_memorises_a_smooth_patch():
    yy, xx = np.mgrid[0:32, 0:32] / 31.0
    patch = np.stack([0.3 + 0.4 * xx, 0.5 + 0.3 * yy, 0.6 - 0.2 * xx * yy], axis=-1)
    patches = np.repeat(patch[None], 8, axis=0)
    _, hist = pretrain_stage1(patches, epochs=30, batch_size=8, lr=1e-3, embed_dim=16, seed=0)
    assert hist[-1] < hist[0]
    assert np.mean(np.diff(hist) < 0) > 0.9
    assert hist[-1] < -0.5


def test_zero_epochs_returns_initial_model():
    patches = rng.uniform(size=(4, 32, 32, 3))
    m0 = PatchAutoencoder(embed_dim=8, seed=5)
    m1, hist = pretrain_stage1(patches, epochs=0, embed_dim=8, seed=5)
    assert len(hist) == 1
    for k, v in m0.state_dict().items():
        np.testing.assert_array_equal(v, m1.state_dict()[k])


def test_checkpoint_round_trip(tmp_path):
    m = PatchAutoencoder(embed_dim=8, seed=1)
    save_checkpoint(tmp_path / "s1.mprm", m.state_dict(), {"embed_dim": 8})
    state, meta = load_checkpoint(tmp_path / "s1.mprm")
    assert int(meta["embed_dim"]) == 8
    m2 = PatchAutoencoder(embed_dim=8, seed=99)
    m2.load_state_dict(state)
    x = rng.uniform(size=(2, 32, 32, 3))
    np.testing.assert_allclose(m2.encode(x), m.encode(x), atol=1e-4)


def test_checkpoint_errors(tmp_path):
    p = tmp_path / "bad.mprm"
    p.write_bytes(b"NOPE" + b"\0" * 10)
    with pytest.raises(CheckpointError):
        load_checkpoint(p)
    m = PatchAutoencoder(embed_dim=8, seed=1)
    save_checkpoint(p, m.state_dict())
    p.write_bytes(p.read_bytes()[:-3])
    with pytest.raises(CheckpointError):
        load_checkpoint(p)


def test_load_state_dict_shape_check():
    m = PatchAutoencoder(embed_dim=8, seed=1)
    state = m.state_dict()
    key = next(iter(state))
    state[key] = np.zeros(state[key].shape + (1,))
    with pytest.raises(ValueError):
        m.load_state_dict(state)


def test_nchw_layout():
    x = rng.uniform(size=(2, 4, 5, 3))
    assert to_nchw(x).shape == (2, 3, 4, 5)
