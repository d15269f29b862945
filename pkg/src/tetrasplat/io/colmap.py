"""COLMAP text export (cameras.txt, images.txt, points3D.txt).

Only the pinhole models are accepted. Poses in images.txt are already
world-to-camera (quaternion w x y z, translation), which is what ``Camera``
stores. Every file must end with a newline so that a cut-off final line is
detected instead of silently parsed.
"""

import math
import os
from dataclasses import dataclass, field

import numpy as np

from ..errors import ParseError, UnsupportedCameraModelError
from ..scene import Camera, quat_to_rotmat, rotmat_to_quat

SUPPORTED_MODELS = {"PINHOLE": 4, "SIMPLE_PINHOLE": 3}
FILES = ("cameras.txt", "images.txt", "points3D.txt")


@dataclass
class CameraIntrinsics:
    camera_id: int
    model: str
    width: int
    height: int
    params: tuple

    @property
    def fx(self):
        return self.params[0]

    @property
    def fy(self):
        return self.params[0] if self.model == "SIMPLE_PINHOLE" else self.params[1]

    @property
    def cx(self):
        return self.params[-2]

    @property
    def cy(self):
        return self.params[-1]


@dataclass
class ImagePose:
    image_id: int
    qvec: np.ndarray         # (w, x, y, z), normalized on load
    tvec: np.ndarray
    camera_id: int
    name: str
    xys: np.ndarray = field(default_factory=lambda: np.zeros((0, 2)))
    point3d_ids: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    @property
    def rotation(self):
        return quat_to_rotmat(self.qvec)


@dataclass
class Point3D:
    point_id: int
    xyz: np.ndarray
    rgb: np.ndarray          # uint8
    error: float
    track: np.ndarray        # (L, 2) image id, point2d index

    @property
    def track_length(self):
        return len(self.track)


@dataclass
class SfmBundle:
    cameras: dict            # camera_id -> CameraIntrinsics
    images: dict             # image_id -> ImagePose
    points: dict             # point_id -> Point3D

    @property
    def counts(self):
        return len(self.cameras), len(self.images), len(self.points)

    def point_arrays(self):
        """(xyz float64 (P,3), rgb float64 in [0,1] (P,3)) in id order."""
        ids = sorted(self.points)
        if not ids:
            return np.zeros((0, 3)), np.zeros((0, 3))
        xyz = np.array([self.points[i].xyz for i in ids], dtype=np.float64)
        rgb = np.array([self.points[i].rgb for i in ids], dtype=np.float64) / 255.0
        return xyz, rgb

    def to_cameras(self):
        """Camera objects in image-id order."""
        out = []
        for iid in sorted(self.images):
            im = self.images[iid]
            c = self.cameras[im.camera_id]
            out.append(Camera(c.fx, c.fy, c.cx, c.cy, c.width, c.height,
                              im.rotation, im.tvec, name=im.name))
        return out


# -- parsing --------------------------------------------------------------


class _Lines:
    """Numbered, comment-stripped lines of one file."""

    def __init__(self, text, path):
        self.path = path
        if text and not text.endswith("\n"):
            n = text.count("\n") + 1
            raise ParseError("file does not end with a newline (truncated?)", path, n)
        self.declared = None
        self.items = []
        for no, line in enumerate(text.split("\n")[:-1] if text else [], start=1):
            s = line.strip()
            if s.startswith("#"):
                self._maybe_count(s, no)
                continue
            self.items.append((no, line))

    def _maybe_count(self, s, no):
        # "# Number of cameras: 3" / "# Number of images: 2, mean ..." / "# Number of points: 5, ..."
        low = s.lower()
        if "number of" not in low or ":" not in s:
            return
        tail = s.split(":", 1)[1].split(",")[0].strip()
        try:
            self.declared = (int(tail), no)
        except ValueError:
            raise ParseError(f"bad count in header comment: {s!r}", self.path, no) from None

    def error(self, msg, no):
        return ParseError(msg, self.path, no)


def _num(tok, kind, lines, no, what):
    try:
        v = kind(tok)
    except ValueError:
        raise lines.error(f"{what}: cannot parse {tok!r} as {kind.__name__}", no) from None
    if kind is float and not math.isfinite(v):
        raise lines.error(f"{what}: non-finite value {tok!r}", no)
    return v


def _read(path):
    try:
        with open(path, "r", encoding="utf-8") as f:
            return f.read()
    except UnicodeDecodeError as e:
        raise ParseError(f"not valid UTF-8 text: {e}", path) from None


def parse_cameras(text, path="cameras.txt"):
    lines = _Lines(text, path)
    cams = {}
    for no, line in lines.items:
        tok = line.split()
        if not tok:
            raise lines.error("blank line", no)
        if len(tok) < 4:
            raise lines.error(f"expected at least 4 fields, got {len(tok)}", no)
        cid = _num(tok[0], int, lines, no, "camera id")
        model = tok[1]
        if model not in SUPPORTED_MODELS:
            raise UnsupportedCameraModelError(model, path, no)
        w = _num(tok[2], int, lines, no, "width")
        h = _num(tok[3], int, lines, no, "height")
        need = SUPPORTED_MODELS[model]
        if len(tok) != 4 + need:
            raise lines.error(f"{model} needs {need} parameters, got {len(tok) - 4}", no)
        params = tuple(_num(t, float, lines, no, "camera parameter") for t in tok[4:])
        if w < 1 or h < 1:
            raise lines.error("image size must be positive", no)
        if params[0] <= 0 or (model == "PINHOLE" and params[1] <= 0):
            raise lines.error("focal length must be positive", no)
        if cid in cams:
            raise lines.error(f"duplicate camera id {cid}", no)
        cams[cid] = CameraIntrinsics(cid, model, w, h, params)
    _check_count(lines, len(cams), "cameras")
    return cams


def parse_images(text, path="images.txt"):
    lines = _Lines(text, path)
    images = {}
    items = lines.items
    # images come in pairs: pose line, then a (possibly empty) keypoint line
    i = 0
    while i < len(items):
        no, line = items[i]
        tok = line.split()
        if len(tok) < 10:
            raise lines.error(f"image line needs 10 fields, got {len(tok)}", no)
        iid = _num(tok[0], int, lines, no, "image id")
        q = np.array([_num(t, float, lines, no, "quaternion") for t in tok[1:5]])
        t = np.array([_num(x, float, lines, no, "translation") for x in tok[5:8]])
        cid = _num(tok[8], int, lines, no, "camera id")
        name = " ".join(tok[9:])
        nq = np.linalg.norm(q)
        if nq < 1e-12:
            raise lines.error("zero quaternion", no)
        if i + 1 >= len(items):
            raise lines.error("missing keypoint line after image line", no)
        kno, kline = items[i + 1]
        ktok = kline.split()
        if len(ktok) % 3:
            raise lines.error("keypoint line must hold X Y POINT3D_ID triples", kno)
        xys = np.array([[_num(ktok[j], float, lines, kno, "keypoint"),
                         _num(ktok[j + 1], float, lines, kno, "keypoint")]
                        for j in range(0, len(ktok), 3)]).reshape(-1, 2)
        pids = np.array([_num(ktok[j + 2], int, lines, kno, "point id")
                         for j in range(0, len(ktok), 3)], dtype=np.int64)
        if iid in images:
            raise lines.error(f"duplicate image id {iid}", no)
        # already-unit quaternions are kept as written so write/parse is a fixed point
        q = q if abs(nq - 1.0) <= 1e-15 else q / nq
        images[iid] = ImagePose(iid, q, t, cid, name, xys, pids)
        i += 2
    _check_count(lines, len(images), "images")
    return images


def parse_points(text, path="points3D.txt"):
    lines = _Lines(text, path)
    points = {}
    for no, line in lines.items:
        tok = line.split()
        if len(tok) < 8 or (len(tok) - 8) % 2:
            raise lines.error("point line needs 8 fields plus (IMAGE_ID, POINT2D_IDX) pairs", no)
        pid = _num(tok[0], int, lines, no, "point id")
        xyz = np.array([_num(t, float, lines, no, "coordinate") for t in tok[1:4]])
        rgb = np.array([_num(t, int, lines, no, "color") for t in tok[4:7]])
        if (rgb < 0).any() or (rgb > 255).any():
            raise lines.error("color out of 0..255", no)
        err = _num(tok[7], float, lines, no, "error")
        track = np.array([_num(t, int, lines, no, "track") for t in tok[8:]],
                         dtype=np.int64).reshape(-1, 2)
        if pid in points:
            raise lines.error(f"duplicate point id {pid}", no)
        points[pid] = Point3D(pid, xyz, rgb.astype(np.uint8), err, track)
    _check_count(lines, len(points), "points")
    return points


def _check_count(lines, n, what):
    if lines.declared is not None and lines.declared[0] != n:
        raise lines.error(f"header declares {lines.declared[0]} {what}, found {n}",
                          lines.declared[1])


def parse_colmap_text_strings(cameras_txt, images_txt, points_txt, root=""):
    """Parse from in-memory text; ``root`` only labels error messages."""
    join = (lambda f: os.path.join(root, f)) if root else (lambda f: f)
    cams = parse_cameras(cameras_txt, join("cameras.txt"))
    images = parse_images(images_txt, join("images.txt"))
    points = parse_points(points_txt, join("points3D.txt"))
    for what, d, f in (("cameras", cams, "cameras.txt"), ("images", images, "images.txt"),
                       ("points", points, "points3D.txt")):
        if not d:
            raise ParseError(f"reconstruction has no {what}", join(f))
    for im in images.values():
        if im.camera_id not in cams:
            raise ParseError(f"image {im.image_id} references missing camera {im.camera_id}",
                             join("images.txt"))
    for p in points.values():
        for iid, _ in p.track:
            if iid not in images:
                raise ParseError(f"point {p.point_id} track references missing image {iid}",
                                 join("points3D.txt"))
    return SfmBundle(cams, images, points)


def parse_colmap_text(directory):
    """Read a COLMAP text model directory into an ``SfmBundle``."""
    texts = []
    for f in FILES:
        p = os.path.join(directory, f)
        if not os.path.isfile(p):
            raise FileNotFoundError(f"COLMAP file not found: {p}")
        texts.append(_read(p))
    return parse_colmap_text_strings(*texts, root=str(directory))


# -- writing --------------------------------------------------------------


def _f(x):
    return repr(float(x))


def format_colmap_text(bundle):
    """(cameras.txt, images.txt, points3D.txt) contents for a bundle."""
    cam = ["# Camera list with one line of data per camera:",
           "#   CAMERA_ID, MODEL, WIDTH, HEIGHT, PARAMS[]",
           f"# Number of cameras: {len(bundle.cameras)}"]
    for cid in sorted(bundle.cameras):
        c = bundle.cameras[cid]
        cam.append(" ".join([str(cid), c.model, str(c.width), str(c.height)] + [_f(p) for p in c.params]))
    img = ["# Image list with two lines of data per image:",
           "#   IMAGE_ID, QW, QX, QY, QZ, TX, TY, TZ, CAMERA_ID, NAME",
           "#   POINTS2D[] as (X, Y, POINT3D_ID)",
           f"# Number of images: {len(bundle.images)}"]
    for iid in sorted(bundle.images):
        im = bundle.images[iid]
        img.append(" ".join([str(iid)] + [_f(v) for v in im.qvec] + [_f(v) for v in im.tvec]
                            + [str(im.camera_id), im.name]))
        img.append(" ".join(f"{_f(x)} {_f(y)} {int(p)}" for (x, y), p in zip(im.xys, im.point3d_ids)))
    pts = ["# 3D point list with one line of data per point:",
           "#   POINT3D_ID, X, Y, Z, R, G, B, ERROR, TRACK[] as (IMAGE_ID, POINT2D_IDX)",
           f"# Number of points: {len(bundle.points)}"]
    for pid in sorted(bundle.points):
        p = bundle.points[pid]
        fields = [str(pid)] + [_f(v) for v in p.xyz] + [str(int(v)) for v in p.rgb] + [_f(p.error)]
        fields += [str(int(v)) for v in np.asarray(p.track).ravel()]
        pts.append(" ".join(fields))
    return tuple("\n".join(x) + "\n" for x in (cam, img, pts))


def write_colmap_text(bundle, directory):
    os.makedirs(directory, exist_ok=True)
    for name, text in zip(FILES, format_colmap_text(bundle)):
        with open(os.path.join(directory, name), "w", encoding="utf-8") as f:
            f.write(text)


def bundle_from_cameras(cameras, points=None, colors=None, names=None):
    """Build a bundle (one PINHOLE intrinsics entry per camera) from ``Camera``
    objects and an optional colored point cloud."""
    cams, images, pts = {}, {}, {}
    for i, c in enumerate(cameras, start=1):
        cams[i] = CameraIntrinsics(i, "PINHOLE", c.width, c.height, (c.fx, c.fy, c.cx, c.cy))
        name = names[i - 1] if names is not None else (c.name or f"view_{i:03d}.png")
        images[i] = ImagePose(i, rotmat_to_quat(c.R), np.array(c.t, dtype=np.float64), i, name)
    if points is not None:
        cols = np.zeros((len(points), 3)) if colors is None else np.asarray(colors)
        rgb = np.clip(np.round(cols * 255.0), 0, 255).astype(np.uint8)
        for j, (x, c) in enumerate(zip(np.asarray(points, dtype=np.float64), rgb), start=1):
            pts[j] = Point3D(j, x, c, 0.0, np.zeros((0, 2), dtype=np.int64))
    return SfmBundle(cams, images, pts)
