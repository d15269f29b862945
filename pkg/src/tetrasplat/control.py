"""Global importance scoring, ranked pruning and curvature-aware densification."""

import logging
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .errors import EmptyInputError, InsufficientPointsError, ShapeError
from .raster import rasterize
from .scene import SceneModel, quat_to_rotmat
from .threads import map_views

log = logging.getLogger(__name__)

VOLUME_PERCENTILE = 90.0
VOLUME_EXPONENT = 0.1
CLONE_OFFSET = 0.5
CLONE_SHRINK = 1.6


@dataclass
class ImportanceScores:
    scores: np.ndarray     # (N,) >= 0
    hits: np.ndarray       # (N,) pixels hit, summed over views
    gamma: np.ndarray      # (N,) volume term
    n_views: int
    height: int
    width: int


@dataclass
class CurvatureField:
    rho: np.ndarray        # (N,) in [0, 1/3]
    neighbors: np.ndarray  # (N, K)
    tau: float = None

    def protect_mask(self, tau=None):
        tau = self.tau if tau is None else tau
        return self.rho < tau


def volume_term(scene):
    """min(V / V90, 1) ** 0.1 with V the product of activated scales."""
    if len(scene) == 0:
        return np.zeros(0)
    vol = np.prod(scene.scales, axis=1)
    v90 = np.percentile(vol, VOLUME_PERCENTILE)
    return np.minimum(vol / v90, 1.0) ** VOLUME_EXPONENT


def accumulate_importance(scene, cameras, background=(0.0, 0.0, 0.0)):
    """Score every Gaussian by the training rays it contributes to.

    A ray "hits" a Gaussian when that Gaussian takes part in the pixel's
    composite before early termination. The score is
    hits · opacity · volume term.
    """
    cameras = list(cameras)
    if not cameras:
        raise EmptyInputError("importance scoring needs at least one camera")
    hits = np.zeros(len(scene), dtype=np.int64)
    # integer hit counts merge exactly, so the view order does not matter
    for h in map_views(lambda cam: rasterize(scene, cam, background).hits, cameras):
        hits += h
    gamma = volume_term(scene)
    scores = hits * scene.opacities * gamma
    return ImportanceScores(scores, hits, gamma, len(cameras),
                            cameras[0].height, cameras[0].width)


def select_prune(scores, ratio, protect=None):
    """Boolean keep-mask for ranked pruning.

    The floor(ratio·N) lowest scores (ties by index) form the removal quota;
    protected entries inside the quota are skipped, not substituted.
    Returns (keep, status) with status "ok", "nothing-to-prune" or
    "all-protected".
    """
    scores = np.asarray(scores, dtype=np.float64)
    if not 0.0 < ratio < 1.0:
        raise ShapeError(f"prune ratio must be in (0, 1), got {ratio}")
    n = len(scores)
    protect = np.zeros(n, dtype=bool) if protect is None else np.asarray(protect, dtype=bool)
    if protect.shape != (n,):
        raise ShapeError("protect mask must align with the scores")
    keep = np.ones(n, dtype=bool)
    if n and protect.all():
        log.warning("every Gaussian is protected; pruning skipped")
        return keep, "all-protected"
    quota = int(np.floor(ratio * n))
    if quota == 0:
        return keep, "nothing-to-prune"
    ranked = np.lexsort((np.arange(n), scores))[:quota]
    drop = ranked[~protect[ranked]]
    keep[drop] = False
    return keep, "ok"


def prune(scene, scores, ratio, mask=None):
    """Scene without the lowest-ranked unprotected Gaussians; order preserved."""
    s = scores.scores if isinstance(scores, ImportanceScores) else scores
    if len(s) != len(scene):
        raise ShapeError("scores do not align with the scene")
    keep, _ = select_prune(s, ratio, mask)
    return scene.select(keep)


def local_curvature(positions, K=16, tau=None):
    """Surface variation λ0 / (λ0 + λ1 + λ2) of each point's neighborhood.

    The neighborhood is the point plus its K nearest neighbors (exact search).
    """
    P = np.asarray(positions, dtype=np.float64)
    if K < 3:
        raise ShapeError("K must be at least 3")
    if len(P) < K + 1:
        raise InsufficientPointsError(f"need at least K+1={K + 1} points, got {len(P)}")
    _, nb = cKDTree(P).query(P, k=K + 1)
    # force self to the front so neighbor lists exclude it even under ties
    others = np.array([row[row != i][:K] for i, row in enumerate(nb)])
    hood = P[np.concatenate([np.arange(len(P))[:, None], others], axis=1)]
    local = hood - hood.mean(1, keepdims=True)
    cov = np.einsum("nki,nkj->nij", local, local) / (K + 1)
    lam = np.linalg.eigvalsh(cov)
    total = lam.sum(1)
    rho = np.zeros(len(P))
    ok = total > 0
    rho[ok] = np.clip(lam[ok, 0], 0.0, None) / total[ok]
    return CurvatureField(rho, others, tau)


def densify_low_curvature(scene, curvature, tau, seed=0):
    """Append one un-anchored clone for every Gaussian with rho < tau.

    A clone sits at a 0.5-scaled sample from its parent's covariance, copies
    its rotation, opacity and color, and has scales shrunk by 1/1.6.
    """
    rho = curvature.rho if isinstance(curvature, CurvatureField) else np.asarray(curvature)
    if len(rho) != len(scene):
        raise ShapeError("curvature does not align with the scene")
    trig = np.flatnonzero(rho < tau)
    if len(trig) == 0:
        return scene.copy()
    rng = np.random.default_rng(seed)
    R = quat_to_rotmat(scene.rotations[trig])
    z = rng.standard_normal((len(trig), 3))
    offset = CLONE_OFFSET * np.einsum("nij,nj->ni", R, scene.scales[trig] * z)
    clones = SceneModel(
        scene.positions[trig] + offset,
        scene.rotations[trig],
        scene.log_scales[trig] - np.log(CLONE_SHRINK),
        scene.opacity_logits[trig],
        scene.sh[trig],
        sh_degree=scene.sh_degree,
    )
    return scene.concat(clones)
