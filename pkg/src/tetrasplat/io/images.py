"""PNG image I/O with the standard sRGB transfer function."""

import numpy as np
from PIL import Image


def srgb_to_linear(c):
    c = np.asarray(c, dtype=np.float64)
    return np.where(c <= 0.04045, c / 12.92, ((c + 0.055) / 1.055) ** 2.4)


def linear_to_srgb(c):
    c = np.clip(np.asarray(c, dtype=np.float64), 0.0, 1.0)
    return np.where(c <= 0.0031308, 12.92 * c, 1.055 * c ** (1 / 2.4) - 0.055)


def to_uint8(img):
    return np.clip(np.round(np.asarray(img, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def write_png(path, img, linear=False):
    """Save an (H, W, 3) float image in [0, 1] as 8-bit RGB.

    With ``linear=True`` the values are sRGB-encoded first.
    """
    img = linear_to_srgb(img) if linear else np.asarray(img, dtype=np.float64)
    Image.fromarray(to_uint8(img)).save(path, format="PNG")


def read_png(path, linear=False):
    """Load a PNG as (H, W, 3) float64 in [0, 1], optionally linearized."""
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
    return srgb_to_linear(arr) if linear else arr
