"""Photometric optimization loop with scheduled prune/densify events."""

import json
import logging
import os
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import sh as shmod
from .control import accumulate_importance, densify_low_curvature, local_curvature, select_prune
from .errors import ConfigError, NonFiniteLossError, TetraSplatError
from .metrics import photometric_loss, psnr, ssim
from .raster import rasterize, rasterize_backward
from .scene import SceneModel

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    total_iters: int = 30000
    prune_iters: tuple = (12000, 20000)
    densify_iters: tuple = (12000, 20000)
    prune_ratio: float = 0.2
    k: int = 3
    tau: float = 0.02
    knn: int = 16
    dssim_weight: float = 0.2
    lr_position: float = 1.6e-4          # times scene extent
    lr_position_final: float = 1.6e-6
    lr_bary: float = 1.6e-4
    lr_bary_final: float = 1.6e-6
    lr_opacity: float = 0.05
    lr_scale: float = 5e-3
    lr_rotation: float = 1e-3
    lr_sh: float = 2.5e-3
    sh_rest_lr_divisor: float = 20.0
    sh_degree: int = 3
    sh_degree_interval: int = 1000       # raise the active SH degree every N iterations
    eval_every: int = 1000
    holdout_every: int = 8
    background: tuple = (0.0, 0.0, 0.0)
    seed: int = 0
    checkpoint_every: int = 0
    keep_good_every: int = 100

    def validate(self):
        if self.total_iters < 1:
            raise ConfigError("total_iters must be positive")
        for name in ("prune_iters", "densify_iters"):
            its = tuple(getattr(self, name))
            if any(not 0 < i < self.total_iters for i in its):
                raise ConfigError(f"{name} must lie strictly inside (0, total_iters)")
        if not 0.0 < self.prune_ratio < 1.0:
            raise ConfigError("prune_ratio must be in (0, 1)")
        if not 0.0 <= self.dssim_weight <= 1.0:
            raise ConfigError("dssim_weight must be in [0, 1]")
        if self.k < 1 or self.knn < 3:
            raise ConfigError("k must be >= 1 and knn >= 3")
        if not 0 <= self.sh_degree <= shmod.MAX_DEGREE:
            raise ConfigError("sh_degree out of range")
        if self.holdout_every < 0 or self.eval_every < 0:
            raise ConfigError("holdout_every and eval_every must be non-negative")
        return self

    @classmethod
    def from_dict(cls, d):
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown training keys: {sorted(unknown)}")
        cfg = cls(**d)
        cfg.prune_iters = tuple(cfg.prune_iters)
        cfg.densify_iters = tuple(cfg.densify_iters)
        cfg.background = tuple(cfg.background)
        return cfg.validate()


@dataclass
class TrainReport:
    evals: list = field(default_factory=list)     # {"iter", "psnr", "ssim", "count"}
    counts: list = field(default_factory=list)    # (iter, count, event)
    events: list = field(default_factory=list)    # prune / densify details
    losses: list = field(default_factory=list)    # per-iteration training loss
    train_psnr: list = field(default_factory=list)
    timings: dict = field(default_factory=dict)

    def summary(self):
        return {
            "final_count": self.counts[-1][1] if self.counts else None,
            "counts": [list(c) for c in self.counts],
            "evals": self.evals,
            "events": self.events,
            "timings": self.timings,
        }


# -- optimizer ------------------------------------------------------------


class Adam:
    """Per-array Adam with its own learning rate per parameter group."""

    def __init__(self, beta1=0.9, beta2=0.999, eps=1e-15):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m, self.v = {}, {}
        self.t = 0

    def step(self, params, grads, lrs):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for name, p in params.items():
            g = grads[name]
            if name not in self.m:
                self.m[name] = np.zeros_like(p)
                self.v[name] = np.zeros_like(p)
            m, v = self.m[name], self.v[name]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            p -= lrs[name] * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def select(self, index):
        for d in (self.m, self.v):
            for k in d:
                d[k] = d[k][index]

    def extend(self, extra):
        """Zero state for ``extra`` appended rows."""
        for d in (self.m, self.v):
            for k in d:
                pad = np.zeros((extra,) + d[k].shape[1:])
                d[k] = np.concatenate([d[k], pad])

    def state(self):
        out = {"t": np.array(self.t)}
        for k in self.m:
            out[f"m/{k}"] = self.m[k]
            out[f"v/{k}"] = self.v[k]
        return out

    @classmethod
    def from_state(cls, st):
        opt = cls()
        opt.t = int(st["t"])
        for key, val in st.items():
            if key.startswith("m/"):
                opt.m[key[2:]] = np.array(val)
            elif key.startswith("v/"):
                opt.v[key[2:]] = np.array(val)
        return opt


def _views(scene):
    """Trainable arrays, with the SH block split into DC and rest."""
    return {
        "positions": scene.free_positions,
        "bary_logits": scene.bary_logits,
        "rotations": scene.rotations,
        "log_scales": scene.log_scales,
        "opacity_logits": scene.opacity_logits,
        "sh_dc": scene.sh[:, :1, :],
        "sh_rest": scene.sh[:, 1:, :],
    }


def _exp_decay(start, end, frac):
    return float(np.exp(np.log(start) * (1 - frac) + np.log(end) * frac))


def split_views(n, holdout_every):
    """(train, test) index lists; every ``holdout_every``-th view is held out."""
    if holdout_every and n > 2:
        test = [i for i in range(n) if i % holdout_every == 0]
    else:
        test = []
    train = [i for i in range(n) if i not in test]
    return train, test


def scene_extent(cameras):
    centers = np.array([c.center for c in cameras])
    return float(max(np.linalg.norm(centers - centers.mean(0), axis=1).max(), 1e-6) * 1.1)


def evaluate(scene, cameras, images, background=(0.0, 0.0, 0.0)):
    """Mean PSNR/SSIM over views (images as float arrays in the render space)."""
    if not cameras:
        return {"psnr": None, "ssim": None}
    ps, ss = [], []
    for cam, img in zip(cameras, images):
        out = rasterize(scene, cam, background)
        ps.append(psnr(np.clip(out.color, 0, 1), img))
        ss.append(ssim(np.clip(out.color, 0, 1), img))
    return {"psnr": float(np.mean(ps)), "ssim": float(np.mean(ss))}


# -- checkpoints ----------------------------------------------------------


@dataclass
class TrainState:
    scene: SceneModel
    optimizer: Adam
    iteration: int
    rng_state: dict
    report: TrainReport
    view_order: list = field(default_factory=list)   # views left in the current epoch


def save_checkpoint(path, state):
    """Compact model file at ``path`` plus a ``.state.npz`` sidecar holding the
    full-precision parameters, optimizer moments, RNG and report."""
    from .io.compact import save_compact

    save_compact(path, state.scene)
    sc = state.scene
    arrays = {f"param/{k}": v for k, v in sc.param_arrays().items()}
    arrays["param/face_ids"] = sc.face_ids
    arrays.update({f"opt/{k}": v for k, v in state.optimizer.state().items()})
    meta = {"iteration": state.iteration, "rng": state.rng_state,
            "report": asdict(state.report), "sh_degree": sc.sh_degree,
            "view_order": [int(v) for v in state.view_order]}
    arrays["meta"] = np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8)
    with open(path + ".state.npz", "wb") as f:
        np.savez(f, **arrays)


def load_checkpoint(path):
    """Inverse of ``save_checkpoint``; the mesh comes from the compact file."""
    from .io.compact import load_compact

    scene, _ = load_compact(path)
    with np.load(path + ".state.npz") as z:
        data = {k: z[k] for k in z.files}
    meta = json.loads(bytes(data.pop("meta")).decode())
    p = {k[6:]: v for k, v in data.items() if k.startswith("param/")}
    full = SceneModel(p["positions"], p["rotations"], p["log_scales"], p["opacity_logits"],
                      p["sh"], p["face_ids"], p["bary_logits"], scene.mesh, meta["sh_degree"])
    opt = Adam.from_state({k[4:]: v for k, v in data.items() if k.startswith("opt/")})
    rep = meta["report"]
    report = TrainReport(**{k: rep[k] for k in TrainReport.__dataclass_fields__})
    report.counts = [tuple(c) for c in report.counts]
    return TrainState(full, opt, meta["iteration"], meta["rng"], report, meta.get("view_order", []))


# -- training -------------------------------------------------------------


def _adaptive_event(scene, opt, cfg, it, cameras, do_prune, do_densify, report, seed):
    if do_prune:
        scores = accumulate_importance(scene, cameras, cfg.background)
        protect = local_curvature(scene.positions, cfg.knn, cfg.tau).protect_mask()
        keep, status = select_prune(scores.scores, cfg.prune_ratio, protect)
        before = len(scene)
        scene = scene.select(keep)
        opt.select(np.flatnonzero(keep))
        report.events.append({"iter": it, "event": "prune", "before": before,
                              "removed": before - len(scene), "protected": int(protect.sum()),
                              "status": status})
        report.counts.append((it, len(scene), "prune"))
    if do_densify:
        curv = local_curvature(scene.positions, cfg.knn, cfg.tau)
        before = len(scene)
        scene = densify_low_curvature(scene, curv, cfg.tau, seed=seed)
        opt.extend(len(scene) - before)
        report.events.append({"iter": it, "event": "densify", "before": before,
                              "added": len(scene) - before})
        report.counts.append((it, len(scene), "densify"))
    return scene


def train(scene, cameras, images, cfg=None, **kwargs):
    """Optimize ``scene`` against posed images (float arrays, render space).

    Returns (scene, report); keyword arguments go to ``run_training``.
    """
    state = run_training(scene, cameras, images, cfg, **kwargs)
    return state.scene, state.report


def run_training(scene, cameras, images, cfg=None, test_cameras=(), test_images=(),
                 checkpoint_dir=None, resume=None, stop_after=None):
    """Training loop returning the full ``TrainState``. ``resume`` is a ``TrainState`` from
    ``load_checkpoint``; ``stop_after`` ends the run early at that iteration
    (for checkpoint/resume workflows) without changing the schedule.
    """
    cfg = (cfg or TrainConfig()).validate()
    cameras, images = list(cameras), [np.asarray(im, dtype=np.float64) for im in images]
    if len(cameras) < 2 or len(cameras) != len(images):
        raise ConfigError("training needs at least two posed views with matching images")
    if len(scene) == 0:
        raise ConfigError("cannot train an empty scene")
    t0 = time.perf_counter()
    extent = scene_extent(cameras)
    if resume is not None:
        scene, opt, start = resume.scene, resume.optimizer, resume.iteration
        rng = np.random.default_rng()
        rng.bit_generator.state = resume.rng_state
        report = resume.report
        order = list(resume.view_order)
    else:
        scene = scene.copy()
        opt = Adam()
        start = 0
        rng = np.random.default_rng(cfg.seed)
        report = TrainReport()
        report.counts.append((0, len(scene), "start"))
        order = []
    last_good = (start, scene.copy())
    n_coef_max = scene.sh.shape[1]
    t_events = 0.0
    end = cfg.total_iters if stop_after is None else min(stop_after, cfg.total_iters)
    for it in range(start + 1, end + 1):
        frac = (it - 1) / max(cfg.total_iters - 1, 1)
        if not order:
            order = list(rng.permutation(len(cameras)))
        view = int(order.pop())
        cam, target = cameras[view], images[view]

        out = rasterize(scene, cam, cfg.background)
        loss, g_img = photometric_loss(out.color, target, cfg.dssim_weight)
        if not np.isfinite(loss):
            path = None
            if checkpoint_dir is not None:
                path = os.path.join(checkpoint_dir, "last_good.ea3d")
                save_checkpoint(path, TrainState(last_good[1], Adam(), last_good[0],
                                                 rng.bit_generator.state, report))
            raise NonFiniteLossError(f"non-finite loss at iteration {it}", path or last_good[1],
                                     last_good[0])
        report.losses.append(float(loss))
        report.train_psnr.append(psnr(np.clip(out.color, 0, 1), target))

        grads = rasterize_backward(scene, cam, out, g_img).as_dict()
        active = min(cfg.sh_degree, scene.sh_degree,
                     (it - 1) // cfg.sh_degree_interval if cfg.sh_degree_interval else scene.sh_degree)
        g_sh = grads["sh"]
        g_sh[:, shmod.num_coeffs(active):, :] = 0.0
        grads = {
            "positions": grads["positions"], "bary_logits": grads["bary_logits"],
            "rotations": grads["rotations"], "log_scales": grads["log_scales"],
            "opacity_logits": grads["opacity_logits"],
            "sh_dc": g_sh[:, :1, :], "sh_rest": g_sh[:, 1:n_coef_max, :],
        }
        lrs = {
            "positions": extent * _exp_decay(cfg.lr_position, cfg.lr_position_final, frac),
            "bary_logits": _exp_decay(cfg.lr_bary, cfg.lr_bary_final, frac),
            "rotations": cfg.lr_rotation, "log_scales": cfg.lr_scale,
            "opacity_logits": cfg.lr_opacity, "sh_dc": cfg.lr_sh,
            "sh_rest": cfg.lr_sh / cfg.sh_rest_lr_divisor,
        }
        opt.step(_views(scene), grads, lrs)
        scene.touch()
        bad = scene.check_finite()
        if bad is not None:
            raise NonFiniteLossError(f"parameters of Gaussian {bad} became non-finite at "
                                     f"iteration {it}", last_good[1], last_good[0])

        do_prune = it in cfg.prune_iters
        do_densify = it in cfg.densify_iters
        if do_prune or do_densify:
            te = time.perf_counter()
            try:
                scene = _adaptive_event(scene, opt, cfg, it, cameras, do_prune, do_densify, report, cfg.seed + it)
            except TetraSplatError as e:
                raise type(e)(f"adaptive control at iteration {it}: {e}") from e
            t_events += time.perf_counter() - te

        if cfg.keep_good_every and it % cfg.keep_good_every == 0:
            last_good = (it, scene.copy())
        if cfg.eval_every and (it % cfg.eval_every == 0 or it == cfg.total_iters):
            ev = evaluate(scene, test_cameras, test_images, cfg.background)
            ev.update(iter=it, count=len(scene))
            report.evals.append(ev)
            log.info("iter %d: loss %.5f, test PSNR %s, %d Gaussians", it, loss, ev["psnr"], len(scene))
        if checkpoint_dir is not None and cfg.checkpoint_every and it % cfg.checkpoint_every == 0:
            save_checkpoint(os.path.join(checkpoint_dir, f"ckpt_{it:06d}.ea3d"),
                            TrainState(scene, opt, it, rng.bit_generator.state, report, order))
    if end == cfg.total_iters:
        report.counts.append((end, len(scene), "end"))
    report.timings["total_s"] = report.timings.get("total_s", 0.0) + time.perf_counter() - t0
    report.timings["adaptive_s"] = report.timings.get("adaptive_s", 0.0) + t_events
    return TrainState(scene, opt, end, rng.bit_generator.state, report, order)


def write_report(report, log_path, summary_path):
    """Line-delimited per-iteration log plus a JSON summary document."""
    with open(log_path, "w") as f:
        for i, (l, p) in enumerate(zip(report.losses, report.train_psnr), start=1):
            f.write(json.dumps({"iter": i, "loss": l, "train_psnr": p}) + "\n")
        for ev in report.evals:
            f.write(json.dumps({"eval": ev}) + "\n")
        for ev in report.events:
            f.write(json.dumps({"event": ev}) + "\n")
    with open(summary_path, "w") as f:
        json.dump(report.summary(), f, indent=2)
