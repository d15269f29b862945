"""Real spherical harmonics up to degree 3.

Constants and sign conventions follow the layout used by common splatting
checkpoints, so coefficients exchanged through PLY files mean the same thing
here as elsewhere. Colors carry a +0.5 offset on top of the SH sum.
"""

import numpy as np

from .errors import ShapeError

MAX_DEGREE = 3
COLOR_OFFSET = 0.5

C0 = 0.28209479177387814
C1 = 0.4886025119029199
C2 = (
    1.0925484305920792,
    -1.0925484305920792,
    0.31539156525252005,
    -1.0925484305920792,
    0.5462742152960396,
)
C3 = (
    -0.5900435899266435,
    2.890611442640554,
    -0.4570457994644658,
    0.3731763325901154,
    -0.4570457994644658,
    1.445305721320277,
    -0.5900435899266435,
)


def num_coeffs(degree):
    if not 0 <= degree <= MAX_DEGREE:
        raise ShapeError(f"SH degree must be in [0, {MAX_DEGREE}], got {degree}")
    return (degree + 1) ** 2


def degree_from_coeffs(n):
    for d in range(MAX_DEGREE + 1):
        if (d + 1) ** 2 == n:
            return d
    raise ShapeError(f"{n} coefficients per channel is not a valid SH block size")


def sh_basis(dirs, degree):
    """Evaluate the basis at unit directions.

    ``dirs`` is (N, 3); returns (N, (degree+1)**2).
    """
    dirs = np.asarray(dirs, dtype=np.float64)
    n = num_coeffs(degree)
    x, y, z = dirs[:, 0], dirs[:, 1], dirs[:, 2]
    out = np.empty((dirs.shape[0], n))
    out[:, 0] = C0
    if degree >= 1:
        out[:, 1] = -C1 * y
        out[:, 2] = C1 * z
        out[:, 3] = -C1 * x
    if degree >= 2:
        xx, yy, zz = x * x, y * y, z * z
        xy, yz, xz = x * y, y * z, x * z
        out[:, 4] = C2[0] * xy
        out[:, 5] = C2[1] * yz
        out[:, 6] = C2[2] * (2.0 * zz - xx - yy)
        out[:, 7] = C2[3] * xz
        out[:, 8] = C2[4] * (xx - yy)
    if degree >= 3:
        out[:, 9] = C3[0] * y * (3.0 * xx - yy)
        out[:, 10] = C3[1] * xy * z
        out[:, 11] = C3[2] * y * (4.0 * zz - xx - yy)
        out[:, 12] = C3[3] * z * (2.0 * zz - 3.0 * xx - 3.0 * yy)
        out[:, 13] = C3[4] * x * (4.0 * zz - xx - yy)
        out[:, 14] = C3[5] * z * (xx - yy)
        out[:, 15] = C3[6] * x * (xx - 3.0 * yy)
    return out


def sh_basis_jacobian(dirs, degree):
    """Partial derivatives of each basis function w.r.t. (x, y, z).

    Treats the three components as independent; callers project through the
    normalization themselves. Returns (N, (degree+1)**2, 3).
    """
    dirs = np.asarray(dirs, dtype=np.float64)
    n = num_coeffs(degree)
    x, y, z = dirs[:, 0], dirs[:, 1], dirs[:, 2]
    jac = np.zeros((dirs.shape[0], n, 3))
    if degree >= 1:
        jac[:, 1, 1] = -C1
        jac[:, 2, 2] = C1
        jac[:, 3, 0] = -C1
    if degree >= 2:
        jac[:, 4, 0] = C2[0] * y
        jac[:, 4, 1] = C2[0] * x
        jac[:, 5, 1] = C2[1] * z
        jac[:, 5, 2] = C2[1] * y
        jac[:, 6, 0] = C2[2] * -2.0 * x
        jac[:, 6, 1] = C2[2] * -2.0 * y
        jac[:, 6, 2] = C2[2] * 4.0 * z
        jac[:, 7, 0] = C2[3] * z
        jac[:, 7, 2] = C2[3] * x
        jac[:, 8, 0] = C2[4] * 2.0 * x
        jac[:, 8, 1] = C2[4] * -2.0 * y
    if degree >= 3:
        xx, yy, zz = x * x, y * y, z * z
        jac[:, 9, 0] = C3[0] * 6.0 * x * y
        jac[:, 9, 1] = C3[0] * (3.0 * xx - 3.0 * yy)
        jac[:, 10, 0] = C3[1] * y * z
        jac[:, 10, 1] = C3[1] * x * z
        jac[:, 10, 2] = C3[1] * x * y
        jac[:, 11, 0] = C3[2] * -2.0 * x * y
        jac[:, 11, 1] = C3[2] * (4.0 * zz - xx - 3.0 * yy)
        jac[:, 11, 2] = C3[2] * 8.0 * y * z
        jac[:, 12, 0] = C3[3] * -6.0 * x * z
        jac[:, 12, 1] = C3[3] * -6.0 * y * z
        jac[:, 12, 2] = C3[3] * (6.0 * zz - 3.0 * xx - 3.0 * yy)
        jac[:, 13, 0] = C3[4] * (4.0 * zz - 3.0 * xx - yy)
        jac[:, 13, 1] = C3[4] * -2.0 * x * y
        jac[:, 13, 2] = C3[4] * 8.0 * x * z
        jac[:, 14, 0] = C3[5] * 2.0 * x * z
        jac[:, 14, 1] = C3[5] * -2.0 * y * z
        jac[:, 14, 2] = C3[5] * (xx - yy)
        jac[:, 15, 0] = C3[6] * (3.0 * xx - 3.0 * yy)
        jac[:, 15, 1] = C3[6] * -6.0 * x * y
    return jac


def rgb_to_dc(rgb):
    """DC coefficient that reproduces ``rgb`` under the offset convention."""
    return (np.asarray(rgb, dtype=np.float64) - COLOR_OFFSET) / C0


def dc_to_rgb(dc):
    return np.asarray(dc, dtype=np.float64) * C0 + COLOR_OFFSET
