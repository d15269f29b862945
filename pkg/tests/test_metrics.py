import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from skimage.metrics import structural_similarity

from tetrasplat.errors import ShapeError
from tetrasplat.metrics import PSNR_CAP, photometric_loss, psnr, ssim, ssim_with_grad


def skimage_ssim(x, y):
    return structural_similarity(x, y, gaussian_weights=True, sigma=1.5, use_sample_covariance=False,
                                 data_range=1.0, channel_axis=2)


@pytest.mark.parametrize("seed", range(3))
def test_ssim_matches_reference_implementation(seed):
    rng = np.random.default_rng(seed)
    x = rng.uniform(size=(40, 36, 3))
    y = np.clip(x + rng.normal(0, 0.1, x.shape), 0, 1)
    assert ssim(x, y) == pytest.approx(skimage_ssim(x, y), abs=1e-9)


def test_ssim_identical_is_one():
    x = np.random.default_rng(0).uniform(size=(16, 16, 3))
    assert ssim(x, x) == pytest.approx(1.0, abs=1e-12)


@given(st.floats(0.05, 0.95), st.floats(0.05, 0.95))
def test_ssim_symmetric_and_bounded(a, b):
    rng = np.random.default_rng(1)
    x = np.clip(a + rng.normal(0, 0.1, (20, 20, 3)), 0, 1)
    y = np.clip(b + rng.normal(0, 0.1, (20, 20, 3)), 0, 1)
    s = ssim(x, y)
    assert s == pytest.approx(ssim(y, x), abs=1e-12)
    assert -1.0 <= s <= 1.0 + 1e-12


def test_ssim_gradient_matches_finite_differences():
    rng = np.random.default_rng(2)
    x = rng.uniform(size=(14, 15, 3))
    y = rng.uniform(size=(14, 15, 3))
    _, g = ssim_with_grad(x, y)
    h = 1e-6
    for idx in [(0, 0, 0), (7, 7, 1), (13, 14, 2), (5, 10, 0), (10, 3, 2)]:
        xp, xm = x.copy(), x.copy()
        xp[idx] += h
        xm[idx] -= h
        fd = (ssim(xp, y) - ssim(xm, y)) / (2 * h)
        assert g[idx] == pytest.approx(fd, rel=1e-5, abs=1e-10)


def test_psnr_examples():
    x = np.random.default_rng(3).uniform(0, 0.9, (8, 8, 3))
    assert psnr(x, x) == PSNR_CAP == 99.0
    assert psnr(x, x + 0.1) == pytest.approx(20.0, abs=1e-9)


def test_loss_identical_is_zero():
    x = np.random.default_rng(4).uniform(size=(16, 16, 3))
    loss, g = photometric_loss(x, x, 0.2)
    assert loss == pytest.approx(0.0, abs=1e-12)
    assert np.abs(g).max() < 1e-12


def test_loss_pure_l1():
    loss, g = photometric_loss(np.full((8, 8, 3), 0.75), np.full((8, 8, 3), 0.25), 0.0)
    assert loss == pytest.approx(0.5, abs=1e-15)
    np.testing.assert_allclose(g, 1.0 / g.size)


def test_loss_gradient_matches_finite_differences():
    rng = np.random.default_rng(5)
    x = rng.uniform(size=(32, 32, 3))
    y = rng.uniform(size=(32, 32, 3))
    _, g = photometric_loss(x, y, 0.2)
    h = 1e-6
    for _ in range(12):
        idx = tuple(rng.integers(0, s) for s in x.shape)
        if abs(x[idx] - y[idx]) < 1e-3:   # keep the L1 kink out of the stencil
            continue
        xp, xm = x.copy(), x.copy()
        xp[idx] += h
        xm[idx] -= h
        fd = (photometric_loss(xp, y, 0.2)[0] - photometric_loss(xm, y, 0.2)[0]) / (2 * h)
        assert g[idx] == pytest.approx(fd, rel=1e-4)


def test_shape_mismatch():
    with pytest.raises(ShapeError):
        photometric_loss(np.zeros((4, 4, 3)), np.zeros((4, 5, 3)))
    with pytest.raises(ShapeError):
        psnr(np.zeros((4, 4)), np.zeros((4, 4, 3)))
