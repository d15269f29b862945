"""Random scene and camera generators shared by the tests."""

import numpy as np

from tetrasplat.mesh import delaunay_tetrahedralize, init_gaussians_on_faces
from tetrasplat.scene import Camera, SceneModel


def random_scene(rng, n, sh_degree=1, depth=(2.0, 6.0), spread=1.0, log_scale=(-2.5, -1.0)):
    """``n`` free Gaussians in front of an identity camera."""
    pos = np.column_stack([rng.uniform(-spread, spread, (n, 2)), rng.uniform(*depth, n)])
    c = (sh_degree + 1) ** 2
    return SceneModel(
        pos, rng.normal(size=(n, 4)), rng.uniform(*log_scale, (n, 3)),
        rng.normal(0.0, 1.5, n), rng.normal(0.0, 0.4, (n, c, 3)),
    )


def axis_camera(size, f=None):
    f = size * 1.2 if f is None else f
    return Camera(f, f, size / 2, size / 2, size, size)


def orbit_camera(rng, size, radius=5.0):
    d = rng.normal(size=3)
    d /= np.linalg.norm(d)
    up = [0, 0, 1] if abs(d[2]) < 0.9 else [0, 1, 0]
    return Camera.look_at(d * radius, np.zeros(3), up, size * 1.1, size * 1.1, size, size)


def random_anchored_scene(rng, n_points=12, k=2, sh_degree=1):
    pts = rng.normal(size=(n_points, 3))
    mesh = delaunay_tetrahedralize(pts, rng.uniform(size=(n_points, 3)))
    s = init_gaussians_on_faces(mesh, k, sh_degree)
    s.bary_logits += rng.normal(0, 0.3, s.bary_logits.shape)
    s.opacity_logits[:] = rng.normal(0, 1.0, len(s))
    return s


def f32(a):
    return np.asarray(a, dtype=np.float32).astype(np.float64)


def f32_scene(rng, n, sh_degree=3):
    """Scene whose parameters are exactly representable in float32."""
    c = (sh_degree + 1) ** 2
    return SceneModel(f32(rng.normal(size=(n, 3))), f32(rng.normal(size=(n, 4))),
                      f32(rng.normal(-1, 0.5, (n, 3))), f32(rng.normal(size=n)),
                      f32(rng.normal(0, 0.3, (n, c, 3))))
