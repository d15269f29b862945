"""Orientation and in-sphere predicates.

Each predicate is evaluated in floating point first; when the result is too
close to zero to trust, it is recomputed exactly with rationals (every double
is a dyadic rational, so the exact sign is always available).
"""

from fractions import Fraction

import numpy as np

# |det| below FILTER * (product of row norms) is re-evaluated exactly
FILTER = 1e-10


def _det3(m):
    return (m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
            - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
            + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0]))


def _det4(m):
    total = 0
    for c in range(4):
        if m[0][c] == 0:
            continue
        minor = [[m[r][k] for k in range(4) if k != c] for r in range(1, 4)]
        term = m[0][c] * _det3(minor)
        total += term if c % 2 == 0 else -term
    return total


def _sign(x):
    return (x > 0) - (x < 0)


def orient3d_exact(a, b, c, d):
    fa = [Fraction(float(v)) for v in a]
    rows = [[Fraction(float(p[i])) - fa[i] for i in range(3)] for p in (b, c, d)]
    return _sign(_det3(rows))


def orient3d(a, b, c, d):
    """Sign of det[b-a, c-a, d-a]: +1 when (a, b, c, d) is right-handed."""
    m = np.array([b, c, d], dtype=np.float64) - np.asarray(a, dtype=np.float64)
    det = np.linalg.det(m)
    bound = FILTER * np.prod(np.linalg.norm(m, axis=1))
    if abs(det) > bound:
        return int(np.sign(det))
    return orient3d_exact(a, b, c, d)


def orient3d_batch(tets):
    """``orient3d`` for every row of a (T, 4, 3) coordinate array."""
    tets = np.asarray(tets, dtype=np.float64)
    m = tets[:, 1:] - tets[:, :1]
    det = np.linalg.det(m) if len(m) else np.zeros(0)
    bound = FILTER * np.prod(np.linalg.norm(m, axis=-1), axis=-1)
    out = np.sign(det).astype(np.int8)
    for i in np.flatnonzero(np.abs(det) <= bound):
        out[i] = orient3d_exact(*tets[i])
    return out


def _lifted_rows(a, b, c, d, e, exact):
    if exact:
        fe = [Fraction(float(v)) for v in e]
        rows = []
        for p in (a, b, c, d):
            r = [Fraction(float(p[i])) - fe[i] for i in range(3)]
            rows.append(r + [r[0] * r[0] + r[1] * r[1] + r[2] * r[2]])
        return rows
    m = np.array([a, b, c, d], dtype=np.float64) - np.asarray(e, dtype=np.float64)
    return np.hstack([m, (m * m).sum(1, keepdims=True)])


def insphere_exact(a, b, c, d, e):
    """+1 if e is strictly inside the circumsphere of tetrahedron abcd, -1 if
    strictly outside, 0 if on it. Requires abcd non-degenerate."""
    o = orient3d_exact(a, b, c, d)
    if o == 0:
        raise ValueError("in-sphere test on a flat tetrahedron")
    return -o * _sign(_det4(_lifted_rows(a, b, c, d, e, exact=True)))


def insphere(a, b, c, d, e):
    m = _lifted_rows(a, b, c, d, e, exact=False)
    det = np.linalg.det(m)
    bound = FILTER * np.prod(np.linalg.norm(m, axis=1))
    o = orient3d(a, b, c, d)
    if o == 0:
        raise ValueError("in-sphere test on a flat tetrahedron")
    if abs(det) > bound:
        return -o * int(np.sign(det))
    return insphere_exact(a, b, c, d, e)


def insphere_batch(tets, points):
    """Signs of the in-sphere predicate for every (tetrahedron, point) pair.

    ``tets`` is (T, 4, 3) coordinates, ``points`` (P, 3). Returns a (T, P)
    int8 array using the conventions of ``insphere``. Pairs the float filter
    cannot decide are evaluated exactly.
    """
    tets = np.asarray(tets, dtype=np.float64)
    points = np.asarray(points, dtype=np.float64)
    T, P = len(tets), len(points)
    orient = orient3d_batch(tets)
    if (orient == 0).any():
        raise ValueError("in-sphere test on a flat tetrahedron")
    out = np.empty((T, P), dtype=np.int8)
    chunk = max(1, 200_000 // max(P, 1))
    for s in range(0, T, chunk):
        tt = tets[s:s + chunk]
        rel = tt[:, None, :, :] - points[None, :, None, :]  # (t, P, 4, 3)
        lifted = np.concatenate([rel, (rel * rel).sum(-1, keepdims=True)], axis=-1)
        det = np.linalg.det(lifted)
        bound = FILTER * np.prod(np.linalg.norm(lifted, axis=-1), axis=-1)
        sign = -orient[s:s + chunk, None] * np.sign(det).astype(np.int8)
        unsure = np.abs(det) <= bound
        for i, j in zip(*np.nonzero(unsure)):
            sign[i, j] = insphere_exact(*tt[i], points[j])
        out[s:s + chunk] = sign
    return out


def circumsphere(a, b, c, d):
    """Circumcenter and radius of a non-degenerate tetrahedron (floating point)."""
    a = np.asarray(a, dtype=np.float64)
    m = np.array([b, c, d], dtype=np.float64) - a
    rhs = 0.5 * (m * m).sum(1)
    center = np.linalg.solve(m, rhs)
    return a + center, float(np.linalg.norm(center))


def circumspheres(tets):
    """Vectorized ``circumsphere`` for (T, 4, 3) arrays."""
    tets = np.asarray(tets, dtype=np.float64)
    a = tets[:, 0]
    m = tets[:, 1:] - a[:, None, :]
    rhs = 0.5 * (m * m).sum(-1)
    rel = np.linalg.solve(m, rhs[..., None])[..., 0]
    return a + rel, np.linalg.norm(rel, axis=1)
