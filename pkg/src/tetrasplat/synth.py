"""Closed-loop synthetic fixtures: a textured cube made of flat Gaussians,
rendered from cameras on a sphere, with a matching SfM bundle."""

import os
from dataclasses import dataclass

import numpy as np

from . import sh as shmod
from .errors import ConfigError
from .io.colmap import CameraIntrinsics, ImagePose, Point3D, SfmBundle, write_colmap_text
from .raster import rasterize
from .scene import Camera, SceneModel, logit, rotmat_to_quat

HALF = 1.0              # cube half-size
GRID = 14               # splats per face edge
RADIUS = 4.6            # camera distance from the origin
FOV_DEG = 45.0
GT_OPACITY = 0.98

# outward normal, and two in-plane axes for each cube face
_FACES = [
    (np.array([1.0, 0, 0]), np.array([0, 1.0, 0]), np.array([0, 0, 1.0])),
    (np.array([-1.0, 0, 0]), np.array([0, 0, 1.0]), np.array([0, 1.0, 0])),
    (np.array([0, 1.0, 0]), np.array([0, 0, 1.0]), np.array([1.0, 0, 0])),
    (np.array([0, -1.0, 0]), np.array([1.0, 0, 0]), np.array([0, 0, 1.0])),
    (np.array([0, 0, 1.0]), np.array([1.0, 0, 0]), np.array([0, 1.0, 0])),
    (np.array([0, 0, -1.0]), np.array([0, 1.0, 0]), np.array([1.0, 0, 0])),
]
_BASE = np.array([
    [0.80, 0.25, 0.20], [0.20, 0.60, 0.30], [0.25, 0.35, 0.80],
    [0.85, 0.75, 0.25], [0.65, 0.30, 0.70], [0.30, 0.70, 0.75],
])


@dataclass
class SynthScene:
    bundle: SfmBundle
    cameras: list
    images: list            # float (H, W, 3) linear renders
    gt: SceneModel
    points: np.ndarray
    colors: np.ndarray


def texture(face, a, b):
    """Smooth two-tone pattern on face coordinates a, b in [-1, 1]."""
    a, b = np.asarray(a), np.asarray(b)
    wave = 0.5 + 0.5 * np.sin(np.pi * (1.5 * a + 0.5 * face)) * np.cos(np.pi * 1.5 * b)
    base = _BASE[face]
    alt = 1.0 - 0.6 * base
    return np.clip(base[None] * (1 - 0.6 * wave[..., None]) + alt[None] * 0.6 * wave[..., None], 0, 1)


def cube_gaussians(grid=GRID, sh_degree=0):
    """Ground-truth cube: ``grid``² flat, nearly opaque splats per face."""
    pos, rot, col = [], [], []
    t = (np.arange(grid) + 0.5) / grid * 2 - 1
    A, B = np.meshgrid(t, t, indexing="ij")
    A, B = A.ravel(), B.ravel()
    for f, (n, u, w) in enumerate(_FACES):
        R = np.stack([u, w, n], axis=1)
        if np.linalg.det(R) < 0:
            R[:, 1] *= -1
        pos.append(HALF * (n[None] + A[:, None] * u[None] + B[:, None] * w[None]))
        rot.append(np.repeat(rotmat_to_quat(R)[None], len(A), axis=0))
        col.append(texture(f, A, B))
    pos, rot, col = np.concatenate(pos), np.concatenate(rot), np.concatenate(col)
    n = len(pos)
    spacing = 2 * HALF / grid
    log_scales = np.log(np.tile([0.6 * spacing, 0.6 * spacing, 0.02 * spacing], (n, 1)))
    sh = np.zeros((n, shmod.num_coeffs(sh_degree), 3))
    sh[:, 0, :] = shmod.rgb_to_dc(col)
    return SceneModel(pos, rot, log_scales, np.full(n, float(logit(GT_OPACITY))), sh,
                      sh_degree=sh_degree)


def sphere_cameras(n_views, resolution, seed=0):
    """Cameras on a sphere around the origin (Fibonacci layout, seeded jitter)."""
    rng = np.random.default_rng(seed)
    f = 0.5 * resolution / np.tan(np.radians(FOV_DEG) / 2)
    cams = []
    golden = np.pi * (3 - np.sqrt(5))
    for i in range(n_views):
        z = 0.85 - 1.5 * (i + 0.5) / n_views     # skip the poles
        r = np.sqrt(1 - z * z)
        phi = i * golden + rng.uniform(-0.1, 0.1)
        eye = RADIUS * np.array([r * np.cos(phi), r * np.sin(phi), z])
        cams.append(Camera.look_at(eye, np.zeros(3), [0, 0, 1], f, f, resolution, resolution,
                                   name=f"view_{i:03d}.png"))
    return cams


def surface_points(n_points, seed=0, noise=0.0):
    """Colored samples on the cube surface (an idealized SfM cloud)."""
    rng = np.random.default_rng(seed)
    face = rng.integers(0, 6, n_points)
    ab = rng.uniform(-1, 1, (n_points, 2))
    pts = np.empty((n_points, 3))
    cols = np.empty((n_points, 3))
    for f, (n, u, w) in enumerate(_FACES):
        m = face == f
        pts[m] = HALF * (n[None] + ab[m, :1] * u[None] + ab[m, 1:] * w[None])
        cols[m] = texture(f, ab[m, 0], ab[m, 1])
    if noise:
        pts += rng.normal(scale=noise, size=pts.shape)
    return pts, cols


def make_synth(n_views=20, resolution=128, n_points=400, seed=0, grid=GRID):
    if n_views < 2:
        raise ConfigError("synthetic fixture needs at least 2 views")
    if resolution < 1:
        raise ConfigError("resolution must be positive")
    if n_points < 4:
        raise ConfigError("need at least 4 SfM points")
    gt = cube_gaussians(grid)
    cams = sphere_cameras(n_views, resolution, seed)
    images = [np.clip(rasterize(gt, c).color, 0, 1) for c in cams]
    pts, cols = surface_points(n_points, seed + 1)

    cam_entries, img_entries, pt_entries = {}, {}, {}
    normals = np.array([f[0] for f in _FACES])
    face_of_pt = np.argmax(pts @ normals.T, axis=1)
    tracks = [[] for _ in range(n_points)]
    for i, c in enumerate(cams, start=1):
        cam_entries[i] = CameraIntrinsics(i, "PINHOLE", c.width, c.height, (c.fx, c.fy, c.cx, c.cy))
        uv, _ = c.project(pts)
        facing = ((c.center[None] - pts) * normals[face_of_pt]).sum(1) > 0
        vis = np.flatnonzero(facing)
        for k, j in enumerate(vis):
            tracks[j].append((i, k))
        img_entries[i] = ImagePose(i, rotmat_to_quat(c.R), c.t.copy(), i, c.name,
                                   uv[vis], vis.astype(np.int64) + 1)
    rgb = np.clip(np.round(cols * 255), 0, 255).astype(np.uint8)
    for j in range(n_points):
        pt_entries[j + 1] = Point3D(j + 1, pts[j], rgb[j], 0.0,
                                    np.array(tracks[j], dtype=np.int64).reshape(-1, 2))
    bundle = SfmBundle(cam_entries, img_entries, pt_entries)
    return SynthScene(bundle, cams, images, gt, pts, cols)


def write_synth(synth, out_dir):
    """Lay out a fixture directory: sparse/ (COLMAP text), images/ (PNG), gt.ea3d."""
    from .io.compact import save_compact
    from .io.images import write_png

    write_colmap_text(synth.bundle, os.path.join(out_dir, "sparse"))
    img_dir = os.path.join(out_dir, "images")
    os.makedirs(img_dir, exist_ok=True)
    for cam, img in zip(synth.cameras, synth.images):
        write_png(os.path.join(img_dir, cam.name), img, linear=True)
    save_compact(os.path.join(out_dir, "gt.ea3d"), synth.gt)
