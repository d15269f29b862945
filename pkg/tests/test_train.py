import numpy as np
import pytest

from helpers import axis_camera
from oracles import brute_force_curvature
from tetrasplat import sh as shmod
from tetrasplat.control import accumulate_importance
from tetrasplat.errors import ConfigError, NonFiniteLossError
from tetrasplat.mesh import delaunay_tetrahedralize, init_gaussians_on_faces
from tetrasplat.raster import rasterize
from tetrasplat.scene import Camera, SceneModel
from tetrasplat.synth import make_synth
from tetrasplat.train import (Adam, TrainConfig, _adaptive_event, load_checkpoint, run_training,
                              save_checkpoint, split_views, train)


def white_splat():
    sh = np.zeros((1, 1, 3))
    sh[0, 0] = 0.5 / shmod.C0
    return SceneModel([[0, 0, 4.0]], [[1.0, 0, 0, 0]], [[-1.5] * 3], [0.5], sh)


def two_views():
    return [axis_camera(16), Camera.look_at([0.4, 0, 0], [0, 0, 4], [0, 1, 0], 19, 19, 16, 16)]


def small_fixture(n_views=6, res=32, n_points=60, k=1, seed=0):
    syn = make_synth(n_views=n_views, resolution=res, n_points=n_points, seed=seed)
    mesh = delaunay_tetrahedralize(syn.points, syn.colors)
    return init_gaussians_on_faces(mesh, k, 1), syn.cameras, syn.images


def test_self_consistency():
    s = white_splat()
    cams = two_views()
    targets = [rasterize(s, c).color for c in cams]
    cfg = TrainConfig(total_iters=200, prune_iters=(), densify_iters=(), eval_every=0, sh_degree=0)
    _, rep = train(s, cams, targets, cfg)
    assert min(rep.losses) < 1e-6


def test_recovers_from_perturbation():
    s = white_splat()
    cams = two_views()
    targets = [rasterize(s, c).color for c in cams]
    start = s.copy()
    start.opacity_logits[:] = -0.5
    start.sh[0, 0] *= 0.7
    cfg = TrainConfig(total_iters=200, prune_iters=(), densify_iters=(), eval_every=0, sh_degree=0)
    _, rep = train(start, cams, targets, cfg)
    assert np.mean(rep.losses[-10:]) < 0.1 * np.mean(rep.losses[:10])


def test_psnr_trend_on_synthetic_cube():
    syn = make_synth(n_views=20, resolution=48, n_points=120, seed=3)
    mesh = delaunay_tetrahedralize(syn.points, syn.colors)
    s = init_gaussians_on_faces(mesh, 3, 3)
    cfg = TrainConfig(total_iters=500, prune_iters=(), densify_iters=(), eval_every=0)
    _, rep = train(s, syn.cameras, syn.images, cfg)
    windows = np.array(rep.train_psnr).reshape(50, 10).mean(1)
    slope = np.polyfit(np.arange(50), windows, 1)[0]
    assert slope > 0
    assert windows[-5:].mean() > windows[:5].mean() + 1.0


def test_determinism():
    s, cams, imgs = small_fixture()
    cfg = TrainConfig(total_iters=40, prune_iters=(20,), densify_iters=(20,), eval_every=0,
                      knn=8, seed=5)
    a, ra = train(s, cams, imgs, cfg)
    b, rb = train(s, cams, imgs, cfg)
    assert ra.counts == rb.counts
    assert ra.losses == rb.losses
    np.testing.assert_array_equal(a.positions, b.positions)


def test_prune_event_count_arithmetic():
    s, cams, _ = small_fixture(n_points=80)
    rep_scene = s.copy()
    from tetrasplat.train import TrainReport
    rep = TrainReport()
    cfg = TrainConfig(prune_ratio=0.2, knn=16, tau=0.02)
    out = _adaptive_event(rep_scene, Adam(), cfg, 12000, cams, True, False, rep, 0)
    scores = accumulate_importance(s, cams).scores
    rho, _ = brute_force_curvature(s.positions, 16)
    quota = int(np.floor(0.2 * len(s)))
    ranked = np.lexsort((np.arange(len(s)), scores))[:quota]
    exempt = (rho[ranked] < 0.02).sum()
    assert len(out) == len(s) - (quota - exempt)
    assert rep.events[0]["removed"] == quota - exempt


def test_anchoring_preserved_through_training():
    s, cams, imgs = small_fixture()
    cfg = TrainConfig(total_iters=30, prune_iters=(), densify_iters=(), eval_every=0)
    out, _ = train(s, cams, imgs, cfg)
    assert out.anchored.all()
    tri = out.mesh.vertices[out.mesh.faces[out.face_ids]]
    np.testing.assert_allclose(out.positions, np.einsum("ni,nij->nj", out.bary_weights, tri),
                               atol=1e-12)
    np.testing.assert_array_equal(out.mesh.vertices, s.mesh.vertices)


def test_checkpoint_resume_matches_uninterrupted(tmp_path):
    s, cams, imgs = small_fixture()
    cfg = TrainConfig(total_iters=30, prune_iters=(), densify_iters=(), eval_every=0, seed=2)
    full = run_training(s, cams, imgs, cfg)
    part = run_training(s, cams, imgs, cfg, stop_after=13)
    path = str(tmp_path / "c.ea3d")
    save_checkpoint(path, part)
    resumed = run_training(s, cams, imgs, cfg, resume=load_checkpoint(path))
    np.testing.assert_array_equal(resumed.scene.bary_logits, full.scene.bary_logits)
    np.testing.assert_array_equal(resumed.scene.sh, full.scene.sh)
    assert resumed.report.losses == full.report.losses


def test_non_finite_loss_aborts_with_last_good():
    s = white_splat()
    cams = two_views()
    targets = [rasterize(s, c).color for c in cams]
    targets[1] = targets[1].copy()
    targets[1][0, 0, 0] = np.nan
    cfg = TrainConfig(total_iters=50, prune_iters=(), densify_iters=(), eval_every=0,
                      keep_good_every=1)
    with pytest.raises(NonFiniteLossError) as e:
        train(s, cams, targets, cfg)
    assert isinstance(e.value.checkpoint, SceneModel)
    assert e.value.checkpoint.check_finite() is None


def test_config_validation():
    with pytest.raises(ConfigError):
        TrainConfig.from_dict({"bogus": 1})
    with pytest.raises(ConfigError):
        TrainConfig(total_iters=10, prune_iters=(10,)).validate()
    with pytest.raises(ConfigError):
        TrainConfig(prune_ratio=1.0).validate()
    with pytest.raises(ConfigError):
        train(white_splat(), [axis_camera(8)], [np.zeros((8, 8, 3))])


def test_split_views():
    train_idx, test_idx = split_views(20, 8)
    assert list(test_idx) == [0, 8, 16]
    assert sorted(list(train_idx) + list(test_idx)) == list(range(20))
