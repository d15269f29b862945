"""Tile-based Gaussian splatting: projection, compositing and the backward pass.

Conventions:

* pixel (u, v) is sampled at image coordinates (u + 0.5, v + 0.5)
* a splat covers a pixel only inside its 3-sigma ellipse (Mahalanobis
  power <= 9); with that support the per-tile lists built from the ellipse's
  bounding box are exact, so the tiled result does not depend on tiling
* per-splat alpha is min(0.99, opacity * exp(-power / 2)); compositing of a
  pixel stops once transmittance falls below 1e-4
"""

from dataclasses import dataclass

import numpy as np
from numba import njit

from . import sh as shmod
from .errors import RenderAbortError, StaleStateError
from .scene import SCALE_FLOOR, activate_scale, normalize_quat, quat_to_rotmat, sigmoid, softmax

TILE = 16
LOWPASS = 0.3
NEAR = 0.01
SIGMA_CUTOFF = 3.0
POWER_CUTOFF = SIGMA_CUTOFF * SIGMA_CUTOFF
ALPHA_MAX = 0.99
T_MIN = 1e-4


@dataclass
class Projected:
    """Screen-space state for the splats that survive culling (batched
    ProjectedSplat). Row i describes scene Gaussian ``index[i]``."""

    index: np.ndarray      # (M,)
    mean2d: np.ndarray     # (M, 2)
    cov2d: np.ndarray      # (M, 3) as (xx, xy, yy), low-pass floor included
    conic: np.ndarray      # (M, 3) inverse of cov2d, same layout
    depth: np.ndarray      # (M,)
    rgb: np.ndarray        # (M, 3)
    opacity: np.ndarray    # (M,)
    # kept for the backward pass
    means: np.ndarray = None
    t_cam: np.ndarray = None
    rot: np.ndarray = None
    scales: np.ndarray = None
    cov3d: np.ndarray = None
    T: np.ndarray = None
    dirs: np.ndarray = None
    dir_len: np.ndarray = None
    rgb_raw: np.ndarray = None
    basis: np.ndarray = None

    def __len__(self):
        return len(self.index)


@dataclass
class ProjectedSplat:
    mean2d: np.ndarray
    cov2d: np.ndarray      # 2x2
    conic: np.ndarray      # 2x2
    depth: float
    rgb: np.ndarray
    opacity: float
    source_index: int


@dataclass
class RenderState:
    scene_id: int
    scene_version: int
    n_gaussians: int
    camera_key: tuple
    tile: int
    background: np.ndarray
    projected: Projected
    tile_start: np.ndarray
    tile_end: np.ndarray
    order: np.ndarray
    final_T: np.ndarray
    last: np.ndarray


@dataclass
class RenderOutput:
    color: np.ndarray       # (H, W, 3)
    alpha: np.ndarray       # (H, W)
    n_contrib: np.ndarray   # (H, W) splats that contributed to each pixel
    hits: np.ndarray        # (N,) pixels each scene Gaussian contributed to
    state: RenderState = None


@dataclass
class SceneGradients:
    positions: np.ndarray
    bary_logits: np.ndarray
    rotations: np.ndarray
    log_scales: np.ndarray
    opacity_logits: np.ndarray
    sh: np.ndarray

    def as_dict(self):
        return dict(positions=self.positions, bary_logits=self.bary_logits,
                    rotations=self.rotations, log_scales=self.log_scales,
                    opacity_logits=self.opacity_logits, sh=self.sh)


def _camera_key(cam):
    return (cam.fx, cam.fy, cam.cx, cam.cy, cam.width, cam.height,
            cam.R.tobytes(), cam.t.tobytes())


# -- projection -----------------------------------------------------------


def project(scene, cam, index=None):
    """Project Gaussians of ``scene`` (optionally a subset) into ``cam``.

    Returns a ``Projected`` holding only splats in front of the near plane
    whose 3-sigma box touches the image.
    """
    bad = scene.check_finite()
    if bad is not None:
        raise RenderAbortError(f"Gaussian {bad} has non-finite parameters", bad)
    idx = np.arange(len(scene)) if index is None else np.asarray(index)
    means = scene.positions[idx]
    t_cam = cam.world_to_camera(means)
    z = t_cam[:, 2]
    front = z > NEAR
    idx, means, t_cam, z = idx[front], means[front], t_cam[front], z[front]

    rot = quat_to_rotmat(scene.rotations[idx])
    scales = activate_scale(scene.log_scales[idx])
    M = rot * scales[:, None, :]
    cov3d = M @ np.swapaxes(M, 1, 2)
    x, y = t_cam[:, 0], t_cam[:, 1]
    J = np.zeros((len(idx), 2, 3))
    J[:, 0, 0] = cam.fx / z
    J[:, 0, 2] = -cam.fx * x / (z * z)
    J[:, 1, 1] = cam.fy / z
    J[:, 1, 2] = -cam.fy * y / (z * z)
    T = J @ cam.R
    c2 = T @ cov3d @ np.swapaxes(T, 1, 2)
    cxx = c2[:, 0, 0] + LOWPASS
    cxy = c2[:, 0, 1]
    cyy = c2[:, 1, 1] + LOWPASS
    mean2d = np.stack([cam.fx * x / z + cam.cx, cam.fy * y / z + cam.cy], axis=1)

    hx = SIGMA_CUTOFF * np.sqrt(cxx)
    hy = SIGMA_CUTOFF * np.sqrt(cyy)
    onscreen = ((mean2d[:, 0] + hx > 0) & (mean2d[:, 0] - hx < cam.width)
                & (mean2d[:, 1] + hy > 0) & (mean2d[:, 1] - hy < cam.height))
    keep = np.flatnonzero(onscreen)
    idx, means, t_cam, z = idx[keep], means[keep], t_cam[keep], z[keep]
    rot, scales, cov3d, T, mean2d = rot[keep], scales[keep], cov3d[keep], T[keep], mean2d[keep]
    cxx, cxy, cyy = cxx[keep], cxy[keep], cyy[keep]

    det = cxx * cyy - cxy * cxy
    conic = np.stack([cyy / det, -cxy / det, cxx / det], axis=1)

    v = means - cam.center
    dir_len = np.linalg.norm(v, axis=1)
    dirs = v / dir_len[:, None]
    basis = shmod.sh_basis(dirs, scene.sh_degree)
    rgb_raw = np.einsum("mk,mkc->mc", basis, scene.sh[idx]) + shmod.COLOR_OFFSET
    return Projected(
        idx, mean2d, np.stack([cxx, cxy, cyy], axis=1), conic, z,
        np.maximum(rgb_raw, 0.0), sigmoid(scene.opacity_logits[idx]),
        means, t_cam, rot, scales, cov3d, T, dirs, dir_len, rgb_raw, basis,
    )


def project_gaussian(g, cam, sh_degree=None):
    """Project one Gaussian; returns a ProjectedSplat or None when culled."""
    from .scene import SceneModel

    scene = SceneModel([g.position], [g.rotation], [g.log_scale], [g.opacity_logit], g.sh[None])
    p = project(scene, cam)
    if len(p) == 0:
        return None
    a, b, c = p.cov2d[0]
    ia, ib, ic = p.conic[0]
    return ProjectedSplat(p.mean2d[0], np.array([[a, b], [b, c]]), np.array([[ia, ib], [ib, ic]]),
                          float(p.depth[0]), p.rgb[0], float(p.opacity[0]), 0)


# -- binning --------------------------------------------------------------


@njit(cache=True)
def _edge_min(a, b, c, fixed, lo, hi):
    # min over t in [lo, hi] of a·fixed² + 2b·fixed·t + c·t²
    t = -b * fixed / c
    if t < lo:
        t = lo
    elif t > hi:
        t = hi
    return a * fixed * fixed + 2.0 * b * fixed * t + c * t * t


@njit(cache=True)
def _rect_min_power(a, b, c, x0, x1, y0, y1):
    """Smallest conic power over the rectangle [x0,x1]×[y0,y1] of offsets."""
    if x0 <= 0.0 <= x1 and y0 <= 0.0 <= y1:
        return 0.0
    m = _edge_min(a, b, c, x0, y0, y1)
    m = min(m, _edge_min(a, b, c, x1, y0, y1))
    m = min(m, _edge_min(c, b, a, y0, x0, x1))
    m = min(m, _edge_min(c, b, a, y1, x0, x1))
    return m


@njit(cache=True)
def _tile_pairs(mean2d, conic, u0, u1, v0, v1, tile, ntx, width, height, fill, splat, tile_id):
    """Count (fill=False) or emit the (splat, tile) pairs whose ellipse reaches
    at least one pixel center of the tile."""
    k = 0
    cut = SIGMA_CUTOFF * SIGMA_CUTOFF * (1.0 + 1e-9) + 1e-9
    for j in range(mean2d.shape[0]):
        if u1[j] < u0[j] or v1[j] < v0[j]:
            continue
        a, b, c = conic[j, 0], conic[j, 1], conic[j, 2]
        for ty in range(v0[j] // tile, v1[j] // tile + 1):
            py0 = max(ty * tile, v0[j]) + 0.5 - mean2d[j, 1]
            py1 = min(ty * tile + tile - 1, v1[j]) + 0.5 - mean2d[j, 1]
            for tx in range(u0[j] // tile, u1[j] // tile + 1):
                px0 = max(tx * tile, u0[j]) + 0.5 - mean2d[j, 0]
                px1 = min(tx * tile + tile - 1, u1[j]) + 0.5 - mean2d[j, 0]
                if _rect_min_power(a, b, c, px0, px1, py0, py1) > cut:
                    continue
                if fill:
                    splat[k] = j
                    tile_id[k] = ty * ntx + tx
                k += 1
    return k


def _bin(proj, width, height, tile):
    """Sorted (tile, depth, index) splat lists and per-tile ranges.

    A splat is listed for a tile only when its 3-sigma ellipse reaches one of
    the tile's pixel centers, so the lists are exactly what the per-pixel
    cutoff would keep, up to a tiny safety margin.
    """
    ntx = (width + tile - 1) // tile
    nty = (height + tile - 1) // tile
    ntiles = ntx * nty
    if len(proj) == 0:
        z = np.zeros(ntiles, dtype=np.int64)
        return z, z.copy(), np.zeros(0, dtype=np.int64)
    # tiny margin so rounding never drops a pixel whose power is <= 9
    hx = SIGMA_CUTOFF * np.sqrt(proj.cov2d[:, 0]) * (1 + 1e-9) + 1e-9
    hy = SIGMA_CUTOFF * np.sqrt(proj.cov2d[:, 2]) * (1 + 1e-9) + 1e-9
    mx, my = proj.mean2d[:, 0], proj.mean2d[:, 1]
    u0 = np.clip(np.ceil(mx - hx - 0.5), 0, width - 1).astype(np.int64)
    u1 = np.clip(np.floor(mx + hx - 0.5), 0, width - 1).astype(np.int64)
    v0 = np.clip(np.ceil(my - hy - 0.5), 0, height - 1).astype(np.int64)
    v1 = np.clip(np.floor(my + hy - 0.5), 0, height - 1).astype(np.int64)
    # the clip can produce a one-pixel range for off-screen splats; drop them
    u1 = np.where(mx + hx - 0.5 < 0, -1, u1)
    v1 = np.where(my + hy - 0.5 < 0, -1, v1)
    u0 = np.where(mx - hx - 0.5 > width - 1, width, u0)
    v0 = np.where(my - hy - 0.5 > height - 1, height, v0)
    mean2d = np.ascontiguousarray(proj.mean2d)
    conic = np.ascontiguousarray(proj.conic)
    empty = np.zeros(0, dtype=np.int64)
    total = _tile_pairs(mean2d, conic, u0, u1, v0, v1, tile, ntx, width, height,
                        False, empty, empty)
    splat = np.empty(total, dtype=np.int64)
    tile_id = np.empty(total, dtype=np.int64)
    _tile_pairs(mean2d, conic, u0, u1, v0, v1, tile, ntx, width, height, True, splat, tile_id)
    order = np.lexsort((proj.index[splat], proj.depth[splat], tile_id))
    tile_sorted = tile_id[order]
    starts = np.searchsorted(tile_sorted, np.arange(ntiles), side="left")
    ends = np.searchsorted(tile_sorted, np.arange(ntiles), side="right")
    return starts.astype(np.int64), ends.astype(np.int64), splat[order].astype(np.int64)


# -- kernels --------------------------------------------------------------


@njit(cache=True)
def _gather(s0, s1, order, mean2d, conic, opacity, rgb):
    # per-tile copy of the splat attributes, contiguous for the pixel loops
    n = s1 - s0
    buf = np.empty((n, 9))
    for i in range(n):
        j = order[s0 + i]
        buf[i, 0] = mean2d[j, 0]
        buf[i, 1] = mean2d[j, 1]
        buf[i, 2] = conic[j, 0]
        buf[i, 3] = conic[j, 1]
        buf[i, 4] = conic[j, 2]
        buf[i, 5] = opacity[j]
        buf[i, 6] = rgb[j, 0]
        buf[i, 7] = rgb[j, 1]
        buf[i, 8] = rgb[j, 2]
    return buf


@njit(cache=True, nogil=True)
def _forward_kernel(width, height, tile, tile_start, tile_end, order,
                    mean2d, conic, opacity, rgb, bg):
    ntx = (width + tile - 1) // tile
    color = np.zeros((height, width, 3))
    final_T = np.ones((height, width))
    last = np.zeros((height, width), dtype=np.int64)
    n_contrib = np.zeros((height, width), dtype=np.int64)
    hits = np.zeros(mean2d.shape[0], dtype=np.int64)
    for t in range(tile_start.shape[0]):
        tx = t % ntx
        ty = t // ntx
        s0 = tile_start[t]
        s1 = tile_end[t]
        buf = _gather(s0, s1, order, mean2d, conic, opacity, rgb)
        local_hits = np.zeros(s1 - s0, dtype=np.int64)
        for v in range(ty * tile, min((ty + 1) * tile, height)):
            py = v + 0.5
            for u in range(tx * tile, min((tx + 1) * tile, width)):
                px = u + 0.5
                T = 1.0
                r = 0.0
                g = 0.0
                b = 0.0
                stop = s1
                cnt = 0
                for i in range(s1 - s0):
                    dx = px - buf[i, 0]
                    dy = py - buf[i, 1]
                    power = buf[i, 2] * dx * dx + 2.0 * buf[i, 3] * dx * dy + buf[i, 4] * dy * dy
                    if power > 9.0:
                        continue
                    alpha = buf[i, 5] * np.exp(-0.5 * power)
                    if alpha > 0.99:
                        alpha = 0.99
                    if alpha <= 0.0:
                        continue
                    w = alpha * T
                    r += buf[i, 6] * w
                    g += buf[i, 7] * w
                    b += buf[i, 8] * w
                    T = T * (1.0 - alpha)
                    local_hits[i] += 1
                    cnt += 1
                    if T < 1e-4:
                        stop = s0 + i + 1
                        break
                color[v, u, 0] = r + T * bg[0]
                color[v, u, 1] = g + T * bg[1]
                color[v, u, 2] = b + T * bg[2]
                final_T[v, u] = T
                last[v, u] = stop
                n_contrib[v, u] = cnt
        for i in range(s1 - s0):
            hits[order[s0 + i]] += local_hits[i]
    return color, final_T, last, n_contrib, hits


@njit(cache=True, nogil=True)
def _backward_kernel(width, height, tile, tile_start, tile_end, order, last, final_T,
                     mean2d, conic, opacity, rgb, bg, grad_color, grad_alpha):
    ntx = (width + tile - 1) // tile
    m = mean2d.shape[0]
    g_rgb = np.zeros((m, 3))
    g_op = np.zeros(m)
    g_conic = np.zeros((m, 3))
    g_mean = np.zeros((m, 2))
    for t in range(tile_start.shape[0]):
        tx = t % ntx
        ty = t // ntx
        s0 = tile_start[t]
        s1 = tile_end[t]
        buf = _gather(s0, s1, order, mean2d, conic, opacity, rgb)
        # local accumulators: rgb(3), opacity, conic(3), mean(2)
        acc = np.zeros((s1 - s0, 9))
        for v in range(ty * tile, min((ty + 1) * tile, height)):
            py = v + 0.5
            for u in range(tx * tile, min((tx + 1) * tile, width)):
                px = u + 0.5
                gr = grad_color[v, u, 0]
                gg = grad_color[v, u, 1]
                gb = grad_color[v, u, 2]
                ga = grad_alpha[v, u]
                T = final_T[v, u]
                Tf = T
                # S: color contributed behind the current splat, background included
                sr = T * bg[0]
                sg = T * bg[1]
                sb = T * bg[2]
                for i in range(last[v, u] - 1 - s0, -1, -1):
                    dx = px - buf[i, 0]
                    dy = py - buf[i, 1]
                    ca = buf[i, 2]
                    cb = buf[i, 3]
                    cc = buf[i, 4]
                    power = ca * dx * dx + 2.0 * cb * dx * dy + cc * dy * dy
                    if power > 9.0:
                        continue
                    G = np.exp(-0.5 * power)
                    raw = buf[i, 5] * G
                    alpha = raw
                    clamped = False
                    if alpha > 0.99:
                        alpha = 0.99
                        clamped = True
                    if alpha <= 0.0:
                        continue
                    inv = 1.0 / (1.0 - alpha)
                    T_i = T * inv
                    w = alpha * T_i
                    acc[i, 0] += w * gr
                    acc[i, 1] += w * gg
                    acc[i, 2] += w * gb
                    d_alpha = (gr * (buf[i, 6] * T_i - sr * inv)
                               + gg * (buf[i, 7] * T_i - sg * inv)
                               + gb * (buf[i, 8] * T_i - sb * inv))
                    # alpha image = 1 - final transmittance
                    d_alpha += ga * Tf * inv
                    sr += buf[i, 6] * w
                    sg += buf[i, 7] * w
                    sb += buf[i, 8] * w
                    T = T_i
                    if clamped:
                        continue
                    acc[i, 3] += d_alpha * G
                    d_power = -0.5 * d_alpha * raw
                    acc[i, 4] += d_power * dx * dx
                    acc[i, 5] += d_power * 2.0 * dx * dy
                    acc[i, 6] += d_power * dy * dy
                    acc[i, 7] -= d_power * (2.0 * ca * dx + 2.0 * cb * dy)
                    acc[i, 8] -= d_power * (2.0 * cb * dx + 2.0 * cc * dy)
        for i in range(s1 - s0):
            j = order[s0 + i]
            g_rgb[j, 0] += acc[i, 0]
            g_rgb[j, 1] += acc[i, 1]
            g_rgb[j, 2] += acc[i, 2]
            g_op[j] += acc[i, 3]
            g_conic[j, 0] += acc[i, 4]
            g_conic[j, 1] += acc[i, 5]
            g_conic[j, 2] += acc[i, 6]
            g_mean[j, 0] += acc[i, 7]
            g_mean[j, 1] += acc[i, 8]
    return g_rgb, g_op, g_conic, g_mean


# -- public API -----------------------------------------------------------


def rasterize(scene, cam, background=(0.0, 0.0, 0.0), tile=TILE):
    """Render ``scene`` from ``cam``; the returned state feeds ``rasterize_backward``."""
    bg = np.asarray(background, dtype=np.float64).reshape(3)
    proj = project(scene, cam)
    starts, ends, order = _bin(proj, cam.width, cam.height, tile)
    color, final_T, last, n_contrib, hits_vis = _forward_kernel(
        cam.width, cam.height, tile, starts, ends, order,
        proj.mean2d, proj.conic, proj.opacity, proj.rgb, bg)
    hits = np.zeros(len(scene), dtype=np.int64)
    hits[proj.index] = hits_vis
    state = RenderState(id(scene), scene.version, len(scene), _camera_key(cam), tile, bg,
                        proj, starts, ends, order, final_T, last)
    return RenderOutput(color, 1.0 - final_T, n_contrib, hits, state)


def _quat_rotmat_grad(qn, gR):
    """dL/d(unit quaternion) given dL/dR for R = quat_to_rotmat(qn)."""
    w, x, y, z = qn[:, 0], qn[:, 1], qn[:, 2], qn[:, 3]
    g = gR
    gw = 2 * (-z * g[:, 0, 1] + y * g[:, 0, 2] + z * g[:, 1, 0] - x * g[:, 1, 2] - y * g[:, 2, 0] + x * g[:, 2, 1])
    gx = 2 * (y * g[:, 0, 1] + z * g[:, 0, 2] + y * g[:, 1, 0] - 2 * x * g[:, 1, 1] - w * g[:, 1, 2]
              + z * g[:, 2, 0] + w * g[:, 2, 1] - 2 * x * g[:, 2, 2])
    gy = 2 * (-2 * y * g[:, 0, 0] + x * g[:, 0, 1] + w * g[:, 0, 2] + x * g[:, 1, 0] + z * g[:, 1, 2]
              - w * g[:, 2, 0] + z * g[:, 2, 1] - 2 * y * g[:, 2, 2])
    gz = 2 * (-2 * z * g[:, 0, 0] - w * g[:, 0, 1] + x * g[:, 0, 2] + w * g[:, 1, 0] - 2 * z * g[:, 1, 1]
              + y * g[:, 1, 2] + x * g[:, 2, 0] + y * g[:, 2, 1])
    return np.stack([gw, gx, gy, gz], axis=1)


def rasterize_backward(scene, cam, out, grad_color, grad_alpha=None):
    """Gradients of a scalar loss w.r.t. every scene parameter.

    ``grad_color`` is dL/d(out.color), ``grad_alpha`` optionally dL/d(out.alpha).
    Anchored Gaussians get position gradients routed into their barycentric
    logits; their ``positions`` rows are zero. The mesh itself is frozen.
    """
    st = out.state
    if (st is None or st.scene_id != id(scene) or st.scene_version != scene.version
            or st.n_gaussians != len(scene) or st.camera_key != _camera_key(cam)):
        raise StaleStateError("render state does not match this scene/camera; re-render first")
    H, W = cam.height, cam.width
    grad_color = np.ascontiguousarray(grad_color, dtype=np.float64).reshape(H, W, 3)
    grad_alpha = (np.zeros((H, W)) if grad_alpha is None
                  else np.ascontiguousarray(grad_alpha, dtype=np.float64).reshape(H, W))
    p = st.projected
    n = len(scene)
    grads = SceneGradients(np.zeros((n, 3)), np.zeros((n, 3)), np.zeros((n, 4)),
                           np.zeros((n, 3)), np.zeros(n), np.zeros_like(scene.sh))
    if len(p) == 0:
        return grads
    g_rgb, g_op, g_conic, g_mean = _backward_kernel(
        W, H, st.tile, st.tile_start, st.tile_end, st.order, st.last, st.final_T,
        p.mean2d, p.conic, p.opacity, p.rgb, st.background, grad_color, grad_alpha)

    # conic = inverse(cov2d)
    ia, ib, ic = p.conic[:, 0], p.conic[:, 1], p.conic[:, 2]
    K = np.empty((len(p), 2, 2))
    K[:, 0, 0], K[:, 0, 1], K[:, 1, 0], K[:, 1, 1] = ia, ib, ib, ic
    Gk = np.empty_like(K)
    Gk[:, 0, 0] = g_conic[:, 0]
    Gk[:, 0, 1] = Gk[:, 1, 0] = 0.5 * g_conic[:, 1]
    Gk[:, 1, 1] = g_conic[:, 2]
    G2 = -K @ Gk @ K                                            # dL/dcov2d (symmetric)

    # cov2d = T cov3d Tᵀ with T = J Rcam
    Tm = p.T
    G3 = np.swapaxes(Tm, 1, 2) @ G2 @ Tm                        # dL/dcov3d
    GT = 2.0 * G2 @ Tm @ p.cov3d
    GJ = GT @ cam.R.T
    x, y, z = p.t_cam[:, 0], p.t_cam[:, 1], p.t_cam[:, 2]
    fx, fy = cam.fx, cam.fy
    g_t = np.zeros((len(p), 3))
    g_t[:, 0] = GJ[:, 0, 2] * (-fx / z ** 2) + g_mean[:, 0] * fx / z
    g_t[:, 1] = GJ[:, 1, 2] * (-fy / z ** 2) + g_mean[:, 1] * fy / z
    g_t[:, 2] = (GJ[:, 0, 0] * (-fx / z ** 2) + GJ[:, 0, 2] * (2 * fx * x / z ** 3)
                 + GJ[:, 1, 1] * (-fy / z ** 2) + GJ[:, 1, 2] * (2 * fy * y / z ** 3)
                 - g_mean[:, 0] * fx * x / z ** 2 - g_mean[:, 1] * fy * y / z ** 2)
    g_mu = g_t @ cam.R

    # color = max(SH(dir) + 0.5, 0)
    g_rgb = g_rgb * (p.rgb_raw > 0)
    g_sh = p.basis[:, :, None] * g_rgb[:, None, :]
    if scene.sh_degree > 0:
        jac = shmod.sh_basis_jacobian(p.dirs, scene.sh_degree)      # (M, C, 3)
        coef = np.einsum("mkc,mc->mk", scene.sh[p.index], g_rgb)
        g_dir = np.einsum("mk,mkd->md", coef, jac)
        g_dir -= p.dirs * (p.dirs * g_dir).sum(1, keepdims=True)
        g_mu += g_dir / p.dir_len[:, None]

    # cov3d = M Mᵀ, M = R diag(s)
    Mm = p.rot * p.scales[:, None, :]
    GM = 2.0 * G3 @ Mm
    g_s = (GM * p.rot).sum(1)
    GR = GM * p.scales[:, None, :]
    ls = scene.log_scales[p.index]
    g_ls = g_s * p.scales * (np.exp(ls) > SCALE_FLOOR)
    q = scene.rotations[p.index]
    qnorm = np.linalg.norm(q, axis=1, keepdims=True)
    qn = q / qnorm
    g_qn = _quat_rotmat_grad(qn, GR)
    g_q = (g_qn - qn * (qn * g_qn).sum(1, keepdims=True)) / qnorm

    op = p.opacity
    g_logit = g_op * op * (1 - op)

    idx = p.index
    grads.rotations[idx] = g_q
    grads.log_scales[idx] = g_ls
    grads.opacity_logits[idx] = g_logit
    grads.sh[idx] = g_sh
    anchored = scene.face_ids[idx] >= 0
    free = idx[~anchored]
    grads.positions[free] = g_mu[~anchored]
    if anchored.any():
        ai = idx[anchored]
        tri = scene.mesh.vertices[scene.mesh.faces[scene.face_ids[ai]]]   # (a, 3, 3)
        w = softmax(scene.bary_logits[ai], axis=1)
        g_w = np.einsum("ad,avd->av", g_mu[anchored], tri)
        grads.bary_logits[ai] = w * (g_w - (w * g_w).sum(1, keepdims=True))
    return grads


def normalize_rotations(scene):
    """Renormalize stored quaternions in place (keeps raw values well scaled)."""
    scene.rotations[:] = normalize_quat(scene.rotations)
