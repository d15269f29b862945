"""Gaussian primitives, cameras and the scene container.

Parameters are stored unconstrained and activated on read:

* rotation: raw quaternion (w, x, y, z), normalized
* scale: log of per-axis standard deviation, exponentiated and floored
* opacity: logit, passed through a sigmoid
* anchored position: barycentric logits, softmaxed and combined with the
  vertices of the anchor face
"""

from dataclasses import dataclass, field

import numpy as np

from . import sh as shmod
from .errors import DegenerateCovarianceError, ShapeError

SCALE_FLOOR = 1e-6
MAX_CONDITION = 1e14


# -- activations ----------------------------------------------------------


def sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    # split by sign so neither branch overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def logit(p):
    p = np.asarray(p, dtype=np.float64)
    return np.log(p) - np.log1p(-p)


def softmax(x, axis=-1):
    x = np.asarray(x, dtype=np.float64)
    e = np.exp(x - x.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def activate_scale(log_scale):
    return np.maximum(np.exp(np.asarray(log_scale, dtype=np.float64)), SCALE_FLOOR)


def normalize_quat(q):
    q = np.asarray(q, dtype=np.float64)
    return q / np.linalg.norm(q, axis=-1, keepdims=True)


def quat_to_rotmat(q):
    """Rotation matrices for (..., 4) quaternions in (w, x, y, z) order."""
    q = normalize_quat(q)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    R = np.empty(q.shape[:-1] + (3, 3))
    R[..., 0, 0] = 1 - 2 * (y * y + z * z)
    R[..., 0, 1] = 2 * (x * y - w * z)
    R[..., 0, 2] = 2 * (x * z + w * y)
    R[..., 1, 0] = 2 * (x * y + w * z)
    R[..., 1, 1] = 1 - 2 * (x * x + z * z)
    R[..., 1, 2] = 2 * (y * z - w * x)
    R[..., 2, 0] = 2 * (x * z - w * y)
    R[..., 2, 1] = 2 * (y * z + w * x)
    R[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return R


def rotmat_to_quat(R):
    """Inverse of ``quat_to_rotmat`` for (..., 3, 3) proper rotations, w >= 0."""
    R = np.asarray(R, dtype=np.float64)
    flat = R.reshape(-1, 3, 3)
    out = np.empty((flat.shape[0], 4))
    for i, m in enumerate(flat):
        tr = m[0, 0] + m[1, 1] + m[2, 2]
        if tr > 0:
            s = 2.0 * np.sqrt(tr + 1.0)
            q = [0.25 * s, (m[2, 1] - m[1, 2]) / s, (m[0, 2] - m[2, 0]) / s, (m[1, 0] - m[0, 1]) / s]
        elif m[0, 0] > m[1, 1] and m[0, 0] > m[2, 2]:
            s = 2.0 * np.sqrt(1.0 + m[0, 0] - m[1, 1] - m[2, 2])
            q = [(m[2, 1] - m[1, 2]) / s, 0.25 * s, (m[0, 1] + m[1, 0]) / s, (m[0, 2] + m[2, 0]) / s]
        elif m[1, 1] > m[2, 2]:
            s = 2.0 * np.sqrt(1.0 + m[1, 1] - m[0, 0] - m[2, 2])
            q = [(m[0, 2] - m[2, 0]) / s, (m[0, 1] + m[1, 0]) / s, 0.25 * s, (m[1, 2] + m[2, 1]) / s]
        else:
            s = 2.0 * np.sqrt(1.0 + m[2, 2] - m[0, 0] - m[1, 1])
            q = [(m[1, 0] - m[0, 1]) / s, (m[0, 2] + m[2, 0]) / s, (m[1, 2] + m[2, 1]) / s, 0.25 * s]
        q = np.asarray(q)
        if q[0] < 0:
            q = -q
        out[i] = q / np.linalg.norm(q)
    return out.reshape(R.shape[:-2] + (4,))


def covariance_from(rotations, log_scales):
    """Batched Σ = R S Sᵀ Rᵀ."""
    R = quat_to_rotmat(rotations)
    M = R * activate_scale(log_scales)[..., None, :]
    return M @ np.swapaxes(M, -1, -2)


# -- single Gaussian ------------------------------------------------------


@dataclass
class Gaussian:
    position: np.ndarray
    rotation: np.ndarray
    log_scale: np.ndarray
    opacity_logit: float
    sh: np.ndarray
    # (face_id, barycentric logits) when anchored to a mesh face
    anchor: tuple = None

    def __post_init__(self):
        self.position = np.asarray(self.position, dtype=np.float64).reshape(3)
        self.rotation = np.asarray(self.rotation, dtype=np.float64).reshape(4)
        self.log_scale = np.asarray(self.log_scale, dtype=np.float64).reshape(3)
        self.opacity_logit = float(self.opacity_logit)
        self.sh = np.asarray(self.sh, dtype=np.float64)
        if self.sh.ndim != 2 or self.sh.shape[1] != 3:
            raise ShapeError(f"SH block must be (C, 3), got {self.sh.shape}")
        shmod.degree_from_coeffs(self.sh.shape[0])

    @property
    def opacity(self):
        return float(sigmoid(np.array([self.opacity_logit]))[0])

    @property
    def scale(self):
        return activate_scale(self.log_scale)

    @property
    def unit_rotation(self):
        return normalize_quat(self.rotation)


def covariance(g):
    return covariance_from(g.rotation, g.log_scale)


def evaluate_gaussian(g, x):
    """Unnormalized density exp(-½ χᵀ Σ⁻¹ χ) with χ = x − μ."""
    cov = covariance(g)
    cond = np.linalg.cond(cov)
    if not np.isfinite(cond) or cond > MAX_CONDITION:
        raise DegenerateCovarianceError(f"covariance condition number {cond:.3g} exceeds {MAX_CONDITION:.0e}")
    chi = np.asarray(x, dtype=np.float64) - g.position
    return float(np.exp(-0.5 * chi @ np.linalg.solve(cov, chi)))


def evaluate_sh(sh, view_dir, degree, clamp=True):
    """View-dependent RGB from one SH block ((degree+1)**2, 3)."""
    sh = np.asarray(sh, dtype=np.float64)
    n = shmod.num_coeffs(degree)
    if sh.shape != (n, 3):
        raise ShapeError(f"degree {degree} needs SH block ({n}, 3), got {sh.shape}")
    d = np.asarray(view_dir, dtype=np.float64).reshape(1, 3)
    if abs(np.linalg.norm(d) - 1.0) > 1e-6:
        raise ShapeError("view direction must be a unit vector")
    rgb = shmod.sh_basis(d, degree)[0] @ sh + shmod.COLOR_OFFSET
    return np.maximum(rgb, 0.0) if clamp else rgb


# -- camera ---------------------------------------------------------------


@dataclass
class Camera:
    """Pinhole camera. ``R``, ``t`` map world points into the camera frame
    (x right, y down, z forward); pixel (u, v) is sampled at (u+0.5, v+0.5)."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    R: np.ndarray = field(default_factory=lambda: np.eye(3))
    t: np.ndarray = field(default_factory=lambda: np.zeros(3))
    name: str = ""

    def __post_init__(self):
        self.R = np.asarray(self.R, dtype=np.float64).reshape(3, 3)
        self.t = np.asarray(self.t, dtype=np.float64).reshape(3)
        if not (self.fx > 0 and self.fy > 0):
            raise ShapeError("focal lengths must be positive")
        if self.width < 1 or self.height < 1:
            raise ShapeError("image dimensions must be at least 1")
        if not np.allclose(self.R @ self.R.T, np.eye(3), atol=1e-6) or abs(np.linalg.det(self.R) - 1) > 1e-6:
            raise ShapeError("world_to_camera rotation must be orthonormal with det +1")
        self.width = int(self.width)
        self.height = int(self.height)

    @property
    def center(self):
        return -self.R.T @ self.t

    def world_to_camera(self, points):
        return np.asarray(points, dtype=np.float64) @ self.R.T + self.t

    def project(self, points):
        """Pixel coordinates and depths of world points."""
        pc = self.world_to_camera(points)
        z = pc[:, 2]
        uv = np.stack([self.fx * pc[:, 0] / z + self.cx, self.fy * pc[:, 1] / z + self.cy], axis=1)
        return uv, z

    @classmethod
    def look_at(cls, eye, target, up, fx, fy, width, height, cx=None, cy=None, name=""):
        eye = np.asarray(eye, dtype=np.float64)
        fwd = np.asarray(target, dtype=np.float64) - eye
        fwd /= np.linalg.norm(fwd)
        right = np.cross(fwd, up)
        right /= np.linalg.norm(right)
        down = np.cross(fwd, right)
        R = np.stack([right, down, fwd])
        return cls(
            fx, fy,
            width / 2 if cx is None else cx,
            height / 2 if cy is None else cy,
            width, height, R, -R @ eye, name,
        )


# -- scene ----------------------------------------------------------------


class SceneModel:
    """Structure-of-arrays Gaussian collection.

    Anchored Gaussians (``face_ids >= 0``) take their position from the mesh
    face and barycentric logits; ``free_positions`` is only read for the
    un-anchored ones.
    """

    def __init__(self, free_positions, rotations, log_scales, opacity_logits, sh,
                 face_ids=None, bary_logits=None, mesh=None, sh_degree=None):
        self.free_positions = np.asarray(free_positions, dtype=np.float64).reshape(-1, 3)
        n = len(self.free_positions)
        self.rotations = np.asarray(rotations, dtype=np.float64).reshape(n, 4)
        self.log_scales = np.asarray(log_scales, dtype=np.float64).reshape(n, 3)
        self.opacity_logits = np.asarray(opacity_logits, dtype=np.float64).reshape(n)
        sh = np.asarray(sh, dtype=np.float64)
        if sh.ndim != 3 or sh.shape[0] != n or sh.shape[2] != 3:
            if n == 0 and sh_degree is not None:
                sh = np.zeros((0, shmod.num_coeffs(sh_degree), 3))
            else:
                raise ShapeError(f"SH array must be (N, C, 3), got {sh.shape}")
        self.sh = sh
        deg = shmod.degree_from_coeffs(sh.shape[1])
        if sh_degree is not None and sh_degree != deg:
            raise ShapeError(f"sh_degree {sh_degree} does not match {sh.shape[1]} coefficients")
        self.sh_degree = deg
        self.face_ids = (np.full(n, -1, dtype=np.int64) if face_ids is None
                         else np.asarray(face_ids, dtype=np.int64).reshape(n))
        self.bary_logits = (np.zeros((n, 3)) if bary_logits is None
                            else np.asarray(bary_logits, dtype=np.float64).reshape(n, 3))
        self.mesh = mesh
        # bumped on every parameter change so stale render state is detectable
        self.version = 0
        if self.anchored.any():
            if mesh is None:
                raise ShapeError("anchored Gaussians require a mesh")
            if self.face_ids.max() >= len(mesh.faces):
                raise ShapeError("anchor face id out of range")

    # construction helpers

    @classmethod
    def empty(cls, sh_degree=3):
        return cls(np.zeros((0, 3)), np.zeros((0, 4)), np.zeros((0, 3)), np.zeros(0),
                   np.zeros((0, shmod.num_coeffs(sh_degree), 3)))

    @classmethod
    def from_gaussians(cls, gaussians, mesh=None, sh_degree=3):
        if not gaussians:
            s = cls.empty(sh_degree)
            s.mesh = mesh
            return s
        face_ids = [g.anchor[0] if g.anchor is not None else -1 for g in gaussians]
        bary = [g.anchor[1] if g.anchor is not None else np.zeros(3) for g in gaussians]
        return cls(
            [g.position for g in gaussians], [g.rotation for g in gaussians],
            [g.log_scale for g in gaussians], [g.opacity_logit for g in gaussians],
            np.stack([g.sh for g in gaussians]), face_ids, bary, mesh,
        )

    def __len__(self):
        return len(self.free_positions)

    @property
    def anchored(self):
        return self.face_ids >= 0

    @property
    def bary_weights(self):
        return softmax(self.bary_logits, axis=1)

    @property
    def positions(self):
        pos = self.free_positions.copy()
        a = self.anchored
        if a.any():
            tri = self.mesh.vertices[self.mesh.faces[self.face_ids[a]]]  # (m, 3, 3)
            pos[a] = np.einsum("mi,mij->mj", softmax(self.bary_logits[a], axis=1), tri)
        return pos

    @property
    def opacities(self):
        return sigmoid(self.opacity_logits)

    @property
    def scales(self):
        return activate_scale(self.log_scales)

    def covariances(self):
        return covariance_from(self.rotations, self.log_scales)

    def gaussian(self, i):
        anchor = None
        if self.face_ids[i] >= 0:
            anchor = (int(self.face_ids[i]), self.bary_logits[i].copy())
        return Gaussian(self.positions[i], self.rotations[i].copy(), self.log_scales[i].copy(),
                        self.opacity_logits[i], self.sh[i].copy(), anchor)

    def param_arrays(self):
        """Name -> array for every trainable parameter block."""
        return {
            "positions": self.free_positions,
            "bary_logits": self.bary_logits,
            "rotations": self.rotations,
            "log_scales": self.log_scales,
            "opacity_logits": self.opacity_logits,
            "sh": self.sh,
        }

    def select(self, index):
        """New scene holding the rows selected by a mask or index array, in order."""
        index = np.asarray(index)
        if index.dtype == bool:
            index = np.flatnonzero(index)
        return SceneModel(
            self.free_positions[index], self.rotations[index], self.log_scales[index],
            self.opacity_logits[index], self.sh[index], self.face_ids[index],
            self.bary_logits[index], self.mesh, self.sh_degree,
        )

    def concat(self, other):
        if other.sh_degree != self.sh_degree:
            raise ShapeError("cannot concatenate scenes with different SH degrees")
        return SceneModel(
            np.concatenate([self.free_positions, other.free_positions]),
            np.concatenate([self.rotations, other.rotations]),
            np.concatenate([self.log_scales, other.log_scales]),
            np.concatenate([self.opacity_logits, other.opacity_logits]),
            np.concatenate([self.sh, other.sh]),
            np.concatenate([self.face_ids, other.face_ids]),
            np.concatenate([self.bary_logits, other.bary_logits]),
            self.mesh if self.mesh is not None else other.mesh,
            self.sh_degree,
        )

    def copy(self):
        return self.select(np.arange(len(self)))

    def touch(self):
        self.version += 1

    def check_finite(self):
        """Index of the first Gaussian with a non-finite parameter, or None."""
        bad = ~np.isfinite(self.free_positions).all(1)
        bad |= ~np.isfinite(self.rotations).all(1)
        bad |= ~np.isfinite(self.log_scales).all(1)
        bad |= ~np.isfinite(self.opacity_logits)
        bad |= ~np.isfinite(self.sh).all(axis=(1, 2))
        bad |= ~np.isfinite(self.bary_logits).all(1)
        bad |= np.linalg.norm(self.rotations, axis=1) == 0
        idx = np.flatnonzero(bad)
        return int(idx[0]) if len(idx) else None
