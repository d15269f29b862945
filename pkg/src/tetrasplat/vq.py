"""K-Means codebooks for Gaussian attribute groups.

Four groups are quantized independently: DC color (3), higher-order SH
(3·((L+1)²-1)), log-scale (3) and unit rotation (4). Positions and opacities
stay raw.
"""

import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import ShapeError
from .scene import SceneModel, normalize_quat

log = logging.getLogger(__name__)

GROUPS = ("dc", "rest", "scale", "rotation")
DEFAULT_CODEBOOK_SIZE = 4096
REL_TOL = 1e-5
_CHUNK = 1 << 22  # distance-matrix entries per block


@dataclass
class KMeansResult:
    centroids: np.ndarray
    labels: np.ndarray
    inertia: float
    history: list = field(default_factory=list)   # inertia after every step
    n_iter: int = 0


def _sq_norms(X):
    return np.einsum("ij,ij->i", X, X)


def _direct_sq(X, C):
    return ((X - C) ** 2).sum(1)


def assign_nearest(X, C):
    """Index of the nearest centroid for each row of X (exact L2 ties resolved
    by direct evaluation, lowest index wins)."""
    X = np.asarray(X, dtype=np.float64)
    C = np.asarray(C, dtype=np.float64)
    n, k = len(X), len(C)
    labels = np.empty(n, dtype=np.int64)
    cc = _sq_norms(C)
    rows = max(1, _CHUNK // max(k, 1))
    for s in range(0, n, rows):
        xb = X[s:s + rows]
        d = _sq_norms(xb)[:, None] - 2.0 * xb @ C.T + cc[None]
        best = d.argmin(1)
        dmin = d[np.arange(len(xb)), best]
        # expansion error is ~eps·(|x|²+|c|²); re-check anything within that band
        band = 1e-10 * (_sq_norms(xb) + cc.max()) + 1e-300
        near = (d <= (dmin + band)[:, None]).sum(1) > 1
        for i in np.flatnonzero(near):
            cand = np.flatnonzero(d[i] <= dmin[i] + band[i])
            exact = _direct_sq(xb[i][None], C[cand])
            best[i] = cand[np.argmin(exact)]
        labels[s:s + rows] = best
    return labels


def _kmeanspp(X, K, rng):
    n = len(X)
    centers = [int(rng.integers(n))]
    d2 = _direct_sq(X, X[centers[0]][None])
    while len(centers) < K:
        total = d2.sum()
        if total <= 0:
            break
        nxt = int(rng.choice(n, p=d2 / total))
        centers.append(nxt)
        d2 = np.minimum(d2, _direct_sq(X, X[nxt][None]))
    return X[centers].copy()


def kmeans(vectors, K, max_iters=50, seed=0):
    """k-means++ seeding followed by Lloyd iterations.

    Stops after ``max_iters`` or when the relative inertia change drops below
    1e-5. The recorded inertia never increases: reassignments only happen
    when strictly better, a centroid update is rejected if it would raise its
    cluster's error, and empty clusters are re-seeded with the point farthest
    from its centroid.
    """
    X = np.asarray(vectors, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] == 0:
        raise ShapeError(f"vectors must be (N, d) with d >= 1, got {X.shape}")
    if len(X) == 0 or K < 1:
        raise ShapeError("k-means needs at least one vector and K >= 1")
    rng = np.random.default_rng(seed)
    C = _kmeanspp(X, K, rng)
    labels = assign_nearest(X, C)
    dist = _direct_sq(X, C[labels])
    history = [float(dist.sum())]
    it = 0
    for it in range(1, max_iters + 1):
        k = len(C)
        # update
        counts = np.bincount(labels, minlength=k)
        sums = np.zeros_like(C)
        np.add.at(sums, labels, X)
        newC = C.copy()
        filled = counts > 0
        newC[filled] = sums[filled] / counts[filled, None]
        new_dist = _direct_sq(X, newC[labels])
        old_sse = np.bincount(labels, dist, minlength=k)
        new_sse = np.bincount(labels, new_dist, minlength=k)
        reject = new_sse > old_sse
        newC[reject] = C[reject]
        C = newC
        dist = _direct_sq(X, C[labels])
        for e in np.flatnonzero(~filled):
            far = int(np.argmax(dist))
            if dist[far] <= 0:
                break
            C[e] = X[far]
            labels[far] = e
            dist[far] = 0.0
        # assignment, keeping the current label unless strictly improved
        cand = assign_nearest(X, C)
        cand_dist = _direct_sq(X, C[cand])
        better = cand_dist < dist
        labels = np.where(better, cand, labels)
        dist = np.where(better, cand_dist, dist)
        history.append(float(dist.sum()))
        prev, cur = history[-2], history[-1]
        if prev == 0 or (prev - cur) / prev < REL_TOL:
            break
    return KMeansResult(C, labels, history[-1], history, it)


# -- codebooks ------------------------------------------------------------


@dataclass
class Codebook:
    centroids: np.ndarray   # (K, d)
    indices: np.ndarray     # (N,)

    def decode(self):
        return self.centroids[self.indices]


@dataclass
class CodebookSet:
    sh_degree: int
    books: dict             # group name -> Codebook

    def __getitem__(self, name):
        return self.books[name]


@dataclass
class RawBlock:
    positions: np.ndarray
    opacity_logits: np.ndarray
    face_ids: np.ndarray = None
    bary_logits: np.ndarray = None


def _f32(a):
    return np.asarray(a, dtype=np.float32).astype(np.float64)


def group_vectors(scene):
    n = len(scene)
    return {
        "dc": scene.sh[:, 0, :].copy(),
        "rest": scene.sh[:, 1:, :].reshape(n, 3 * (scene.sh.shape[1] - 1)).copy(),
        "scale": scene.log_scales.copy(),
        "rotation": normalize_quat(scene.rotations) if n else scene.rotations.copy(),
    }


def quantize_scene(scene, codebook_size=DEFAULT_CODEBOOK_SIZE, max_iters=25, seed=0):
    """Fit one K-Means codebook per attribute group.

    ``codebook_size`` is an int or a per-group dict. Returns the codebooks and
    the raw (unquantized) block.
    """
    sizes = codebook_size if isinstance(codebook_size, dict) else {g: codebook_size for g in GROUPS}
    books = {}
    for gi, (name, vecs) in enumerate(group_vectors(scene).items()):
        if vecs.shape[1] == 0 or len(vecs) == 0:
            books[name] = Codebook(np.zeros((0, vecs.shape[1])), np.zeros(len(vecs), dtype=np.int64))
            continue
        distinct = np.unique(vecs, axis=0)
        K = int(sizes[name])
        if len(distinct) <= K:
            # exact cover: every distinct vector is its own centroid
            cent = distinct
        else:
            res = kmeans(vecs, K, max_iters=max_iters, seed=seed + gi)
            cent = res.centroids
            log.info("quantized %s: %d vectors -> %d centroids, inertia %.4g",
                     name, len(vecs), len(cent), res.inertia)
        # centroids are stored as f32, so snap them now and assign against
        # the stored values; a saved file then decodes to exactly this
        cent = _f32(cent)
        books[name] = Codebook(cent, assign_nearest(vecs, cent))
    raw = RawBlock(_f32(scene.positions), _f32(scene.opacity_logits),
                   scene.face_ids.copy(), _f32(scene.bary_logits))
    return CodebookSet(scene.sh_degree, books), raw


def encode_with(scene, codebooks):
    """Re-assign a scene's attributes to existing codebooks."""
    books = {}
    for name, vecs in group_vectors(scene).items():
        cb = codebooks[name]
        if vecs.shape[1] == 0 or len(cb.centroids) == 0:
            books[name] = Codebook(cb.centroids, np.zeros(len(vecs), dtype=np.int64))
        else:
            books[name] = Codebook(cb.centroids, assign_nearest(vecs, cb.centroids))
    return CodebookSet(codebooks.sh_degree, books)


def reconstruct(codebooks, raw, mesh=None):
    """Scene whose quantized attributes are replaced by their centroids."""
    n = len(raw.positions)
    deg = codebooks.sh_degree
    ncoef = (deg + 1) ** 2
    sh = np.zeros((n, ncoef, 3))
    sh[:, 0, :] = codebooks["dc"].decode() if n else 0
    if ncoef > 1 and n:
        sh[:, 1:, :] = codebooks["rest"].decode().reshape(n, ncoef - 1, 3)
    face_ids = raw.face_ids if mesh is not None else None
    bary = raw.bary_logits if mesh is not None else None
    return SceneModel(
        raw.positions, codebooks["rotation"].decode() if n else np.zeros((0, 4)),
        codebooks["scale"].decode() if n else np.zeros((0, 3)),
        raw.opacity_logits, sh, face_ids, bary, mesh, deg,
    )


def quantization_error(scene, codebooks):
    """Total squared reconstruction error per group."""
    return {name: float(((vecs - codebooks[name].decode()) ** 2).sum()) if vecs.size else 0.0
            for name, vecs in group_vectors(scene).items()}
