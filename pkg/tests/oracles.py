"""Independent reference implementations used to check the fast paths.

Nothing here shares code with the routine it checks beyond the projection
step (projection is verified separately against hand-computed matrices).
"""

from fractions import Fraction

import numpy as np

from tetrasplat.raster import project


def brute_force_render(scene, cam, background=(0.0, 0.0, 0.0), early_exit=False):
    """Per-pixel global depth sort over every projected splat: no tiles.

    Returns (color, alpha, contributions) where contributions is a list of
    (v, u, gaussian_index) triples in compositing order.
    """
    bg = np.asarray(background, dtype=np.float64)
    p = project(scene, cam)
    H, W = cam.height, cam.width
    color = np.zeros((H, W, 3))
    alpha_img = np.zeros((H, W))
    order = sorted(range(len(p)), key=lambda i: (p.depth[i], p.index[i]))
    log = []
    for v in range(H):
        for u in range(W):
            px, py = u + 0.5, v + 0.5
            T = 1.0
            acc = np.zeros(3)
            for i in order:
                dx = px - p.mean2d[i, 0]
                dy = py - p.mean2d[i, 1]
                a, b, c = p.conic[i]
                power = a * dx * dx + 2.0 * b * dx * dy + c * dy * dy
                if power > 9.0:
                    continue
                alpha = min(p.opacity[i] * np.exp(-0.5 * power), 0.99)
                if alpha <= 0.0:
                    continue
                acc += p.rgb[i] * (alpha * T)
                T *= 1.0 - alpha
                log.append((v, u, int(p.index[i])))
                if early_exit and T < 1e-4:
                    break
            color[v, u] = acc + T * bg
            alpha_img[v, u] = 1.0 - T
    return color, alpha_img, log


def global_sort_render(scene, cam, background=(0.0, 0.0, 0.0)):
    """The early-exit global-sort compositor of ``brute_force_render``,
    vectorized over pixels instead of looping over them. Returns
    (color, alpha, hits) with hits the per-Gaussian contribution counts."""
    bg = np.asarray(background, dtype=np.float64)
    p = project(scene, cam)
    H, W = cam.height, cam.width
    py, px = np.mgrid[0:H, 0:W] + 0.5
    acc = np.zeros((H, W, 3))
    T = np.ones((H, W))
    active = np.ones((H, W), dtype=bool)
    hits = np.zeros(len(scene), dtype=np.int64)
    for i in sorted(range(len(p)), key=lambda i: (p.depth[i], p.index[i])):
        dx = px - p.mean2d[i, 0]
        dy = py - p.mean2d[i, 1]
        a, b, c = p.conic[i]
        power = a * dx * dx + 2.0 * b * dx * dy + c * dy * dy
        alpha = np.minimum(p.opacity[i] * np.exp(-0.5 * power), 0.99)
        use = active & (power <= 9.0) & (alpha > 0.0)
        w = np.where(use, alpha * T, 0.0)
        acc += w[..., None] * p.rgb[i]
        T = np.where(use, T * (1.0 - alpha), T)
        hits[p.index[i]] += int(use.sum())
        active &= ~(use & (T < 1e-4))
    return acc + T[..., None] * bg, 1.0 - T, hits


def contribution_hit_counts(scene, cam):
    """Per-Gaussian count of pixels it contributed to, from a logging re-render."""
    _, _, log = brute_force_render(scene, cam, early_exit=True)
    hits = np.zeros(len(scene), dtype=np.int64)
    for _, _, g in log:
        hits[g] += 1
    return hits


def brute_force_curvature(positions, K):
    """Exhaustive kNN (self included) plus a dense symmetric eigensolver."""
    P = np.asarray(positions, dtype=np.float64)
    d2 = ((P[:, None, :] - P[None, :, :]) ** 2).sum(-1)
    rho = np.empty(len(P))
    nbrs = np.empty((len(P), K), dtype=np.int64)
    for i in range(len(P)):
        # stable tie-break: distance then index
        order = np.lexsort((np.arange(len(P)), d2[i]))
        nb = order[:K + 1]
        nbrs[i] = order[1:K + 1]
        local = P[nb] - P[nb].mean(0)
        cov = local.T @ local / len(nb)
        lam = np.linalg.eigvalsh(cov)
        s = lam.sum()
        rho[i] = 0.0 if s <= 0 else max(lam[0], 0.0) / s
    return rho, nbrs


def _exact_det(m):
    """Determinant of a small square matrix of Fractions by cofactor expansion."""
    if len(m) == 1:
        return m[0][0]
    return sum((-1) ** j * m[0][j] * _exact_det([row[:j] + row[j + 1:] for row in m[1:]])
               for j in range(len(m)) if m[0][j])


def _strictly_inside_exact(tet, p):
    """True when p lies strictly inside the circumsphere of tet, in rationals."""
    q = [Fraction(float(x)) for x in p]
    rows = []
    for v in tet:
        r = [Fraction(float(x)) - y for x, y in zip(v, q)]
        rows.append(r + [sum(x * x for x in r)])
    orient = _exact_det([[Fraction(float(x)) - Fraction(float(y)) for x, y in zip(v, tet[0])]
                         for v in tet[1:]])
    # positively oriented tets have a negative lifted determinant for inside points
    return _exact_det(rows) * orient < 0


def empty_circumsphere_violations(mesh, slack=1e-6):
    """Number of (tetrahedron, vertex) pairs with the vertex strictly inside.

    Float circumspheres screen the pairs; anything within a relative slack of
    the sphere is settled with exact rational arithmetic.
    """
    V = mesh.vertices
    tets = V[mesh.tetrahedra]
    a = tets[:, 0]
    m = tets[:, 1:] - a[:, None]
    center = a + np.linalg.solve(m, 0.5 * (m * m).sum(-1)[..., None])[..., 0]
    r2 = ((tets[:, 0] - center) ** 2).sum(-1)
    violations = 0
    for s in range(0, len(tets), 256):
        d2 = ((V[None] - center[s:s + 256, None]) ** 2).sum(-1)
        rr = r2[s:s + 256, None]
        near = d2 < rr * (1 + slack)
        rows = np.arange(s, min(s + 256, len(tets)))
        near[np.repeat(rows - s, 4), mesh.tetrahedra[rows].ravel()] = False
        clear = d2 < rr * (1 - slack)
        violations += int((near & clear).sum())
        for i, j in zip(*np.nonzero(near & ~clear)):
            violations += _strictly_inside_exact(tets[s + i], V[j])
    return violations


def tet_containment(mesh, points, tol=1e-9):
    """For each point, number of tetrahedra containing it (closed, with tol)."""
    tets = mesh.vertices[mesh.tetrahedra]
    a = tets[:, 0]
    Minv = np.linalg.inv(np.swapaxes(tets[:, 1:] - a[:, None], 1, 2))
    lo, hi = tets.min(1) - tol, tets.max(1) + tol
    counts = np.zeros(len(points), dtype=np.int64)
    for s in range(0, len(points), 512):
        q = points[s:s + 512]
        box = ((q[:, None, :] >= lo[None]) & (q[:, None, :] <= hi[None])).all(-1)
        pi, ti = np.nonzero(box)
        lam = np.einsum("nij,nj->ni", Minv[ti], q[pi] - a[ti])
        lam0 = 1.0 - lam.sum(1)
        inside = (lam >= -tol).all(1) & (lam0 >= -tol)
        np.add.at(counts, pi[inside] + s, 1)
    return counts


def hull_samples(points, n, rng):
    """(inside, outside) samples relative to the convex hull of ``points``,
    built without any hull computation: convex combinations are inside, and
    points pushed past the farthest extent along a direction are outside."""
    P = np.asarray(points, dtype=np.float64)
    picks = rng.integers(0, len(P), size=(n, 4))
    w = rng.dirichlet(np.ones(4), size=n)
    inside = np.einsum("nk,nkd->nd", w, P[picks])
    dirs = rng.normal(size=(n, 3))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    extent = np.ptp(P, axis=0).max()
    support = (P @ dirs.T).max(0)
    base = P[rng.integers(0, len(P), n)]
    along = (base * dirs).sum(1)
    margin = extent * rng.uniform(1e-3, 0.5, n)
    outside = base + dirs * (support - along + margin)[:, None]
    return inside, outside


def kmeans_multi_restart(X, K, restarts, max_iters=100, seed=0):
    """Best inertia over independent k-means++ / Lloyd restarts (plain numpy)."""
    rng = np.random.default_rng(seed)
    X = np.asarray(X, dtype=np.float64)
    best = np.inf
    for _ in range(restarts):
        C = X[[rng.integers(len(X))]]
        for _ in range(1, K):
            d = ((X[:, None] - C[None]) ** 2).sum(-1).min(1)
            C = np.vstack([C, X[rng.choice(len(X), p=d / d.sum())]])
        for _ in range(max_iters):
            lab = ((X[:, None] - C[None]) ** 2).sum(-1).argmin(1)
            newC = np.array([X[lab == k].mean(0) if (lab == k).any() else C[k] for k in range(K)])
            if np.allclose(newC, C):
                break
            C = newC
        best = min(best, ((X - C[lab]) ** 2).sum())
    return best
