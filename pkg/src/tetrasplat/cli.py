"""Batch pipeline driver: ``tetrasplat <stage> [options]``.

Stages read and write fixed artifact names inside the output directory:

    synth    -> sparse/, images/, gt.ea3d, synth.json
    init     -> mesh.txt, init.ea3d
    train    -> trained.ea3d (+ .state.npz), train_log.jsonl, train_summary.json
    prune    -> pruned.ea3d, importance.npy, curvature.npy, prune.json
    compress -> compressed.ea3d, compression.json
    render   -> renders/<view>.png
    eval     -> metrics.json
"""

import argparse
import json
import logging
import os
import sys
from dataclasses import dataclass, field, fields

import numpy as np
import yaml

from . import __version__
from .control import accumulate_importance, densify_low_curvature, local_curvature, select_prune
from .errors import ConfigError, StageDependencyError, TetraSplatError
from .io.colmap import parse_colmap_text
from .io.compact import compression_report, dumps_quantized, dumps_raw, group_bytes, load_compact
from .io.images import read_png, write_png
from .mesh import delaunay_tetrahedralize, init_gaussians_on_faces, write_mesh_text
from .metrics import PSNR_CAP, psnr, ssim
from .raster import rasterize
from .synth import make_synth, write_synth
from .threads import map_views, thread_count
from .train import TrainConfig, run_training, save_checkpoint, split_views, write_report
from .vq import DEFAULT_CODEBOOK_SIZE, quantize_scene

log = logging.getLogger("tetrasplat")

METRICS_SCHEMA = "tetrasplat-metrics/1"


@dataclass
class PipelineConfig:
    sfm_dir: str = None          # default: <output>/sparse
    images_dir: str = None       # default: <output>/images
    output_dir: str = "."
    seed: int = 0
    codebook_size: int = DEFAULT_CODEBOOK_SIZE
    kmeans_iters: int = 25
    train: TrainConfig = field(default_factory=TrainConfig)

    @classmethod
    def from_dict(cls, d):
        d = dict(d or {})
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        train = TrainConfig.from_dict(d.pop("train", None) or {})
        cfg = cls(**d, train=train)
        if cfg.codebook_size < 1 or cfg.kmeans_iters < 1:
            raise ConfigError("codebook_size and kmeans_iters must be positive")
        return cfg

    @property
    def sfm(self):
        return self.sfm_dir or os.path.join(self.output_dir, "sparse")

    @property
    def images(self):
        return self.images_dir or os.path.join(self.output_dir, "images")

    def path(self, name):
        return os.path.join(self.output_dir, name)


def load_config(args):
    data = {}
    if getattr(args, "config", None):
        if not os.path.isfile(args.config):
            raise ConfigError(f"config file not found: {args.config}")
        with open(args.config) as f:
            try:
                data = yaml.safe_load(f) or {}
            except yaml.YAMLError as e:
                raise ConfigError(f"cannot parse {args.config}: {e}") from None
        if not isinstance(data, dict):
            raise ConfigError("config must be a key-value mapping")
    train = dict(data.get("train") or {})
    if args.output is not None:
        data["output_dir"] = args.output
    if args.seed is not None:
        data["seed"] = args.seed
    for flag, key in (("k", "k"), ("prune_ratio", "prune_ratio"), ("tau", "tau"),
                      ("iters", "total_iters")):
        val = getattr(args, flag, None)
        if val is not None:
            train[key] = val
    if getattr(args, "iters", None) is not None:
        # keep the default prune/densify schedule at the same fractions of the run
        for key, default in (("prune_iters", TrainConfig.prune_iters),
                             ("densify_iters", TrainConfig.densify_iters)):
            if key not in train:
                train[key] = [round(i * args.iters / TrainConfig.total_iters) for i in default]
    if getattr(args, "codebook_size", None) is not None:
        data["codebook_size"] = args.codebook_size
    data["train"] = train
    cfg = PipelineConfig.from_dict(data)
    cfg.train.seed = cfg.seed
    return cfg


def _require(cfg, *names):
    for name in names:
        p = name if os.path.isabs(name) else cfg.path(name)
        if not os.path.exists(p):
            raise StageDependencyError(f"missing prerequisite artifact: {p}", missing=p)


def _load_views(cfg):
    """Cameras and linear float images for every registered view."""
    if not os.path.isdir(cfg.sfm):
        raise StageDependencyError(f"missing prerequisite artifact: {cfg.sfm}", missing=cfg.sfm)
    bundle = parse_colmap_text(cfg.sfm)
    cams = bundle.to_cameras()
    imgs = []
    for c in cams:
        p = os.path.join(cfg.images, c.name)
        if not os.path.isfile(p):
            raise StageDependencyError(f"missing prerequisite artifact: {p}", missing=p)
        img = read_png(p, linear=True)
        if img.shape[:2] != (c.height, c.width):
            raise ConfigError(f"{p} is {img.shape[1]}x{img.shape[0]}, camera says "
                              f"{c.width}x{c.height}")
        imgs.append(img)
    return bundle, cams, imgs


def _model_arg(cfg, args, default_names):
    if getattr(args, "model", None):
        if not os.path.isfile(args.model):
            raise StageDependencyError(f"missing prerequisite artifact: {args.model}",
                                       missing=args.model)
        return args.model
    for name in default_names:
        if os.path.isfile(cfg.path(name)):
            return cfg.path(name)
    _require(cfg, default_names[-1])


def _write_json(path, obj):
    with open(path, "w") as f:
        json.dump(obj, f, indent=2, sort_keys=True)
        f.write("\n")


# -- stages ---------------------------------------------------------------


def cmd_synth(cfg, args):
    s = make_synth(args.views, args.resolution, args.points, cfg.seed)
    os.makedirs(cfg.output_dir, exist_ok=True)
    write_synth(s, cfg.output_dir)
    _write_json(cfg.path("synth.json"), {"views": args.views, "resolution": args.resolution,
                                         "points": args.points, "seed": cfg.seed,
                                         "gt_gaussians": len(s.gt)})
    log.info("synthetic fixture: %d views, %d SfM points -> %s", args.views, args.points,
             cfg.output_dir)


def cmd_init(cfg, args):
    if not os.path.isdir(cfg.sfm):
        raise StageDependencyError(f"missing prerequisite artifact: {cfg.sfm}", missing=cfg.sfm)
    bundle = parse_colmap_text(cfg.sfm)
    pts, cols = bundle.point_arrays()
    mesh = delaunay_tetrahedralize(pts, cols, seed=cfg.seed)
    scene = init_gaussians_on_faces(mesh, cfg.train.k, cfg.train.sh_degree)
    os.makedirs(cfg.output_dir, exist_ok=True)
    write_mesh_text(mesh, cfg.path("mesh.txt"))
    with open(cfg.path("init.ea3d"), "wb") as f:
        f.write(dumps_raw(scene))
    log.info("mesh: %d tetrahedra, %d faces -> %d Gaussians (k=%d)",
             len(mesh.tetrahedra), mesh.n_faces, len(scene), cfg.train.k)


def cmd_train(cfg, args):
    _require(cfg, "init.ea3d")
    _, cams, imgs = _load_views(cfg)
    scene, _ = load_compact(cfg.path("init.ea3d"))
    train_idx, test_idx = split_views(len(cams), cfg.train.holdout_every)
    state = run_training(
        scene, [cams[i] for i in train_idx], [imgs[i] for i in train_idx], cfg.train,
        test_cameras=[cams[i] for i in test_idx], test_images=[imgs[i] for i in test_idx],
        checkpoint_dir=cfg.output_dir,
    )
    save_checkpoint(cfg.path("trained.ea3d"), state)
    write_report(state.report, cfg.path("train_log.jsonl"), cfg.path("train_summary.json"))
    log.info("trained %d iterations, %d Gaussians", state.iteration, len(state.scene))


def cmd_prune(cfg, args):
    _require(cfg, "trained.ea3d")
    _, cams, _ = _load_views(cfg)
    train_idx, _ = split_views(len(cams), cfg.train.holdout_every)
    scene, _ = load_compact(cfg.path("trained.ea3d"))
    t = cfg.train
    scores = accumulate_importance(scene, [cams[i] for i in train_idx], t.background)
    curv = local_curvature(scene.positions, t.knn, t.tau)
    np.save(cfg.path("importance.npy"), scores.scores)
    np.save(cfg.path("curvature.npy"), curv.rho)
    keep, status = select_prune(scores.scores, t.prune_ratio, curv.protect_mask())
    pruned = scene.select(keep)
    dens = densify_low_curvature(pruned, local_curvature(pruned.positions, t.knn, t.tau),
                                 t.tau, seed=cfg.seed)
    with open(cfg.path("pruned.ea3d"), "wb") as f:
        f.write(dumps_raw(dens))
    _write_json(cfg.path("prune.json"), {"before": len(scene), "after_prune": len(pruned),
                                         "after_densify": len(dens), "status": status})
    log.info("prune: %d -> %d (%s), densify -> %d", len(scene), len(pruned), status, len(dens))


def cmd_compress(cfg, args):
    model = _model_arg(cfg, args, ["pruned.ea3d", "trained.ea3d"])
    scene, _ = load_compact(model)
    raw = dumps_raw(scene)
    books, block = quantize_scene(scene, cfg.codebook_size, cfg.kmeans_iters, cfg.seed)
    q = dumps_quantized(books, block, scene.mesh)
    with open(cfg.path("compressed.ea3d"), "wb") as f:
        f.write(q)
    report = compression_report(raw, q, group_bytes(books, len(scene)))
    report.update(source=os.path.basename(model), n_gaussians=len(scene),
                  codebook_size=cfg.codebook_size)
    _write_json(cfg.path("compression.json"), report)
    log.info("compressed %s: %d -> %d bytes", model, len(raw), len(q))


def _render_views(cfg, args):
    model = _model_arg(cfg, args, ["compressed.ea3d"])
    scene, _ = load_compact(model)
    bundle, cams, imgs = _load_views(cfg)
    return model, scene, cams, imgs


def cmd_render(cfg, args):
    _, scene, cams, _ = _render_views(cfg, args)
    out_dir = cfg.path("renders")
    os.makedirs(out_dir, exist_ok=True)
    bg = cfg.train.background
    outs = map_views(lambda c: rasterize(scene, c, bg).color, cams)
    for c, img in zip(cams, outs):
        write_png(os.path.join(out_dir, c.name), np.clip(img, 0, 1), linear=True)
    log.info("rendered %d views to %s", len(cams), out_dir)


def image_pair_metrics(pred, target):
    return {"psnr": psnr(pred, target), "ssim": ssim(pred, target)}


def metrics_document(model, n_gaussians, views):
    ps = [v["psnr"] for v in views]
    ss = [v["ssim"] for v in views]
    return {
        "schema": METRICS_SCHEMA,
        "model": model,
        "n_gaussians": n_gaussians,
        "psnr_cap": PSNR_CAP,
        "views": views,
        "mean": {"psnr": float(np.mean(ps)) if ps else None,
                 "ssim": float(np.mean(ss)) if ss else None},
    }


def cmd_eval(cfg, args):
    if args.pred_dir:
        # plain image-pair mode: every PNG in pred_dir against the same name in gt_dir
        gt_dir = args.gt_dir or cfg.images
        names = sorted(n for n in os.listdir(args.pred_dir) if n.lower().endswith(".png"))
        if not names:
            raise StageDependencyError(f"no PNG images in {args.pred_dir}", missing=args.pred_dir)
        views = []
        for n in names:
            g = os.path.join(gt_dir, n)
            if not os.path.isfile(g):
                raise StageDependencyError(f"missing prerequisite artifact: {g}", missing=g)
            m = image_pair_metrics(read_png(os.path.join(args.pred_dir, n)), read_png(g))
            views.append({"name": n, **m})
        doc = metrics_document(None, None, views)
    else:
        model, scene, cams, imgs = _render_views(cfg, args)
        _, test_idx = split_views(len(cams), cfg.train.holdout_every)
        idx = test_idx if test_idx and not args.all_views else list(range(len(cams)))
        bg = cfg.train.background
        outs = map_views(lambda i: np.clip(rasterize(scene, cams[i], bg).color, 0, 1), idx)
        views = [{"name": cams[i].name, **image_pair_metrics(o, imgs[i])} for i, o in zip(idx, outs)]
        doc = metrics_document(os.path.basename(model), len(scene), views)
    os.makedirs(cfg.output_dir, exist_ok=True)
    _write_json(cfg.path("metrics.json"), doc)
    log.info("PSNR %.3f dB, SSIM %.4f", doc["mean"]["psnr"], doc["mean"]["ssim"])
    return doc


STAGES = {
    "synth": cmd_synth, "init": cmd_init, "train": cmd_train, "prune": cmd_prune,
    "compress": cmd_compress, "render": cmd_render, "eval": cmd_eval,
}


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML pipeline config")
    common.add_argument("--seed", type=int, help="random seed (u64)")
    common.add_argument("--output", help="output directory")
    common.add_argument("--k", type=int, help="Gaussians per mesh face")
    common.add_argument("--prune-ratio", type=float, dest="prune_ratio")
    common.add_argument("--tau", type=float, help="curvature threshold")
    common.add_argument("--codebook-size", type=int, dest="codebook_size")
    common.add_argument("--iters", type=int, help="total training iterations")
    common.add_argument("--model", help="model file to read instead of the stage default")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="tetrasplat", description=__doc__.split("\n")[0])
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="stage", required=True)
    s = sub.add_parser("synth", parents=[common], help="generate a synthetic fixture")
    s.add_argument("--views", type=int, default=20)
    s.add_argument("--resolution", type=int, default=128)
    s.add_argument("--points", type=int, default=250)
    for name in ("init", "train", "prune", "compress", "render"):
        sub.add_parser(name, parents=[common], help=f"run the {name} stage")
    e = sub.add_parser("eval", parents=[common], help="PSNR/SSIM metrics document")
    e.add_argument("--pred-dir", help="compare PNGs here against --gt-dir instead of rendering")
    e.add_argument("--gt-dir")
    e.add_argument("--all-views", action="store_true", help="evaluate every view, not the held-out split")
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        thread_count()
        cfg = load_config(args)
        STAGES[args.stage](cfg, args)
    except (TetraSplatError, OSError) as e:
        print(f"tetrasplat {args.stage}: error: {e}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
