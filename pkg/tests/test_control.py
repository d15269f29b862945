import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from helpers import axis_camera, orbit_camera, random_scene
from oracles import brute_force_curvature, contribution_hit_counts
from tetrasplat import sh as shmod
from tetrasplat.control import (accumulate_importance, densify_low_curvature, local_curvature,
                                prune, select_prune, volume_term)
from tetrasplat.errors import EmptyInputError, InsufficientPointsError, ShapeError
from tetrasplat.scene import Camera, SceneModel


def one_splat(pos, logit=0.0):
    sh = np.zeros((1, 1, 3))
    sh[0, 0] = 0.5 / shmod.C0
    return SceneModel([pos], [[1.0, 0, 0, 0]], [[-4.0] * 3], [logit], sh)


# -- importance -------------------------------------------------------------


def test_single_pixel_single_view_score():
    # a 1x1 image: the splat covers exactly one pixel; a lone Gaussian has volume term 1
    cam = Camera(1, 1, 0.5, 0.5, 1, 1)
    s = one_splat([0, 0, 3.0])
    imp = accumulate_importance(s, [cam])
    assert imp.gamma[0] == 1.0
    assert imp.hits[0] == 1
    assert imp.scores[0] == pytest.approx(0.5, abs=1e-15)


def test_outside_every_frustum_scores_zero():
    s = one_splat([0, 0, 3.0]).concat(one_splat([0, 0, -3.0]))
    imp = accumulate_importance(s, [axis_camera(8), axis_camera(8, f=4)])
    assert imp.scores[1] == 0.0
    assert imp.scores[0] > 0.0


def test_importance_matches_contribution_log():
    rng = np.random.default_rng(0)
    s = random_scene(rng, 5, spread=0.5, log_scale=(-2.0, -1.2))
    cams = [axis_camera(16), orbit_camera(rng, 16, radius=6.0)]
    cams[1] = Camera.look_at([0.5, 0.3, -1.0], [0, 0, 4], [0, 1, 0], 18, 18, 16, 16)
    imp = accumulate_importance(s, cams)
    hits = sum(contribution_hit_counts(s, c) for c in cams)
    np.testing.assert_array_equal(imp.hits, hits)
    np.testing.assert_allclose(imp.scores, hits * s.opacities * volume_term(s), rtol=1e-14)


def test_importance_needs_cameras():
    with pytest.raises(EmptyInputError):
        accumulate_importance(one_splat([0, 0, 1.0]), [])


def test_volume_term_range():
    rng = np.random.default_rng(1)
    s = random_scene(rng, 200)
    g = volume_term(s)
    assert ((g > 0) & (g <= 1)).all()
    assert (g == 1.0).sum() >= 20


# -- ranked pruning -------------------------------------------------------


def test_prune_examples():
    keep, status = select_prune([5, 3, 1], 1 / 3)
    np.testing.assert_array_equal(keep, [True, True, False])
    assert status == "ok"
    keep, _ = select_prune([5, 3, 1], 1 / 3, [False, False, True])
    assert keep.all()
    keep, status = select_prune([5, 3, 1], 0.5, [True, True, True])
    assert keep.all() and status == "all-protected"
    with pytest.raises(ShapeError):
        select_prune([1, 2], 1.5)


@given(st.integers(0, 2**31 - 1))
def test_prune_matches_sort_oracle(seed):
    rng = np.random.default_rng(seed)
    scores = rng.integers(0, 50, 1000).astype(float)   # plenty of ties
    protect = rng.uniform(size=1000) < 0.1
    keep, _ = select_prune(scores, 0.2, protect)
    ranked = sorted(range(1000), key=lambda i: (scores[i], i))[:200]
    dropped = {i for i in ranked if not protect[i]}
    assert set(np.flatnonzero(~keep)) == dropped
    assert (~keep).sum() == 200 - protect[ranked].sum()


def test_prune_preserves_order():
    rng = np.random.default_rng(2)
    s = random_scene(rng, 10)
    scores = np.arange(10.0)[::-1]
    out = prune(s, scores, 0.3)
    np.testing.assert_array_equal(out.free_positions, s.free_positions[:7])


# -- curvature --------------------------------------------------------------


def test_planar_points_zero_curvature():
    rng = np.random.default_rng(3)
    P = np.column_stack([rng.uniform(size=(200, 2)), np.full(200, 0.7)])
    assert np.abs(local_curvature(P, 16).rho).max() < 1e-12


def test_symmetric_sphere_is_one_third():
    # the 20 vertices of a dodecahedron: one point's neighborhood is all the others
    phi = (1 + 5 ** 0.5) / 2
    pts = [(x, y, z) for x in (-1, 1) for y in (-1, 1) for z in (-1, 1)]
    for a in (-1, 1):
        for b in (-1, 1):
            pts += [(0, a / phi, b * phi), (a / phi, b * phi, 0), (a * phi, 0, b / phi)]
    P = np.array(pts, dtype=float)
    rho = local_curvature(P, K=len(P) - 1).rho
    np.testing.assert_allclose(rho, 1 / 3, atol=1e-12)


def test_curvature_matches_brute_force():
    rng = np.random.default_rng(4)
    P = rng.normal(size=(500, 3))
    field = local_curvature(P, 16)
    rho, nbrs = brute_force_curvature(P, 16)
    np.testing.assert_allclose(field.rho, rho, atol=1e-12)
    assert (field.rho >= 0).all() and (field.rho <= 1 / 3 + 1e-12).all()


def test_curvature_needs_points():
    with pytest.raises(InsufficientPointsError):
        local_curvature(np.zeros((5, 3)), 16)


# -- densification --------------------------------------------------------


def test_densify_tau_zero_is_noop():
    rng = np.random.default_rng(5)
    s = random_scene(rng, 50)
    assert len(densify_low_curvature(s, local_curvature(s.positions, 16), 0.0)) == 50


def test_densify_coplanar_doubles():
    rng = np.random.default_rng(6)
    s = random_scene(rng, 60)
    s.free_positions[:, 2] = 3.0
    out = densify_low_curvature(s, local_curvature(s.positions, 16), 0.01)
    assert len(out) == 120
    # clones inherit rotation, opacity and color and are smaller
    np.testing.assert_array_equal(out.opacity_logits[60:], s.opacity_logits)
    np.testing.assert_array_equal(out.sh[60:], s.sh)
    np.testing.assert_allclose(out.log_scales[60:], s.log_scales - np.log(1.6))


def test_densify_count_matches_oracle():
    rng = np.random.default_rng(7)
    s = random_scene(rng, 300)
    s.free_positions[:150, 2] = 3.0      # half flat, half volumetric
    rho, _ = brute_force_curvature(s.positions, 16)
    tau = 0.02
    out = densify_low_curvature(s, local_curvature(s.positions, 16), tau)
    assert len(out) - len(s) == (rho < tau).sum()
    assert 0 < (rho < tau).sum() < 300


def test_densify_deterministic():
    rng = np.random.default_rng(8)
    s = random_scene(rng, 40)
    s.free_positions[:, 2] = 3.0
    c = local_curvature(s.positions, 16)
    a = densify_low_curvature(s, c, 0.05, seed=3)
    b = densify_low_curvature(s, c, 0.05, seed=3)
    np.testing.assert_array_equal(a.positions, b.positions)
