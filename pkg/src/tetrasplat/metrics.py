"""Image metrics and the photometric training loss with analytic gradients.

SSIM uses an 11x11 Gaussian window (sigma 1.5), C1 = 0.01², C2 = 0.03²,
images in [0, 1]. The SSIM map is averaged over channels and over the pixels
whose whole window lies inside the image (all pixels when the image is
smaller than the window).
"""

import numpy as np
from scipy.ndimage import correlate1d

from .errors import ShapeError

WINDOW = 11
WINDOW_SIGMA = 1.5
C1 = 0.01 ** 2
C2 = 0.03 ** 2
PSNR_CAP = 99.0


def _kernel():
    x = np.arange(WINDOW) - WINDOW // 2
    k = np.exp(-(x ** 2) / (2 * WINDOW_SIGMA ** 2))
    return k / k.sum()


_K = _kernel()


def _blur(img):
    """Separable zero-padded Gaussian filter over the two spatial axes.

    Self-adjoint because the kernel is symmetric and padding is zero.
    """
    out = correlate1d(img, _K, axis=0, mode="constant", cval=0.0)
    return correlate1d(out, _K, axis=1, mode="constant", cval=0.0)


def _as_hwc(img):
    img = np.asarray(img, dtype=np.float64)
    return img[..., None] if img.ndim == 2 else img


def _check(a, b):
    if a.shape != b.shape:
        raise ShapeError(f"image shapes differ: {a.shape} vs {b.shape}")


def _ssim_terms(x, y):
    mx, my = _blur(x), _blur(y)
    mxx, myy, mxy = _blur(x * x), _blur(y * y), _blur(x * y)
    vx, vy, cxy = mxx - mx * mx, myy - my * my, mxy - mx * my
    A1, A2 = 2 * mx * my + C1, 2 * cxy + C2
    B1, B2 = mx * mx + my * my + C1, vx + vy + C2
    return mx, my, A1, A2, B1, B2


def _valid_weights(shape):
    """Per-pixel averaging weights for the SSIM map."""
    H, W = shape[:2]
    w = np.zeros(shape)
    r = WINDOW // 2
    if H > 2 * r and W > 2 * r:
        w[r:H - r, r:W - r] = 1.0
    else:
        w[:] = 1.0
    return w / w.sum()


def ssim(x, y):
    x, y = _as_hwc(x), _as_hwc(y)
    _check(x, y)
    _, _, A1, A2, B1, B2 = _ssim_terms(x, y)
    return float((A1 * A2 / (B1 * B2) * _valid_weights(x.shape)).sum())


def ssim_with_grad(x, y):
    """Mean SSIM and its gradient w.r.t. ``x``."""
    x, y = _as_hwc(x), _as_hwc(y)
    _check(x, y)
    mx, my, A1, A2, B1, B2 = _ssim_terms(x, y)
    S = A1 * A2 / (B1 * B2)
    g = _valid_weights(x.shape)
    d_mx = (2 * my * A2 - 2 * my * A1) / (B1 * B2) - S * (2 * mx / B1 - 2 * mx / B2)
    d_mxx = -S / B2
    d_mxy = 2 * A1 / (B1 * B2)
    grad = _blur(d_mx * g) + 2 * x * _blur(d_mxx * g) + y * _blur(d_mxy * g)
    return float((S * g).sum()), grad


def psnr(x, y, cap=PSNR_CAP):
    """PSNR in dB for [0, 1] images; identical images report ``cap``."""
    x, y = np.asarray(x, dtype=np.float64), np.asarray(y, dtype=np.float64)
    _check(x, y)
    mse = float(np.mean((x - y) ** 2))
    if mse == 0.0:
        return cap
    return min(cap, 10.0 * np.log10(1.0 / mse))


def photometric_loss(rendered, target, dssim_weight=0.2):
    """(1-λ)·L1 + λ·(1-SSIM) and its gradient w.r.t. ``rendered``."""
    x, y = np.asarray(rendered, dtype=np.float64), np.asarray(target, dtype=np.float64)
    _check(x, y)
    diff = x - y
    l1 = float(np.abs(diff).mean())
    g = (1.0 - dssim_weight) * np.sign(diff) / diff.size
    loss = (1.0 - dssim_weight) * l1
    if dssim_weight > 0:
        s, gs = ssim_with_grad(x, y)
        loss += dssim_weight * (1.0 - s)
        g = g - dssim_weight * gs.reshape(g.shape)
    return loss, g
