"""Delaunay tetrahedral mesh and face-anchored Gaussian initialization."""

import logging
from dataclasses import dataclass

import numpy as np
from scipy.spatial import Delaunay, QhullError, cKDTree

from . import sh as shmod
from .errors import (DegenerateInputError, EmptyMeshError, InsufficientPointsError,
                     InvalidWeightsError, ParseError, ShapeError)
from .predicates import circumspheres, orient3d_batch
from .scene import SceneModel, logit, rotmat_to_quat

log = logging.getLogger(__name__)

MERGE_TOL = 1e-9
JITTER_SCALE = 1e-7
THICKNESS_RATIO = 0.05
INIT_OPACITY = 0.1


@dataclass
class TetraMesh:
    vertices: np.ndarray        # (V, 3)
    tetrahedra: np.ndarray      # (T, 4), positively oriented
    faces: np.ndarray           # (F, 3), sorted vertex ids, unique
    face_of_tet: np.ndarray     # (T, 4), face opposite each tet vertex
    vertex_colors: np.ndarray = None  # (V, 3) in [0, 1], optional
    source_index: np.ndarray = None   # input row of each vertex

    @property
    def n_faces(self):
        return len(self.faces)

    def tet_coords(self):
        return self.vertices[self.tetrahedra]

    def circumspheres(self):
        return circumspheres(self.tet_coords())

    def face_tet_counts(self):
        """How many tetrahedra share each face (1 on the hull, 2 inside)."""
        return np.bincount(self.face_of_tet.ravel(), minlength=len(self.faces))


@dataclass
class FaceFrame:
    face_id: int
    centroid: np.ndarray
    normal: np.ndarray
    axes: np.ndarray          # (2, 3) in-plane unit axes
    edge_scales: np.ndarray   # 2 in-plane extents + thickness


# -- triangulation --------------------------------------------------------


def _merge_duplicates(points):
    tree = cKDTree(points)
    pairs = tree.query_pairs(MERGE_TOL, output_type="ndarray")
    keep = np.ones(len(points), dtype=bool)
    if len(pairs):
        # keep the lowest index of every cluster
        parent = np.arange(len(points))

        def find(i):
            while parent[i] != i:
                parent[i] = parent[parent[i]]
                i = parent[i]
            return i

        for i, j in pairs:
            ri, rj = find(i), find(j)
            if ri != rj:
                parent[max(ri, rj)] = min(ri, rj)
        keep = np.array([find(i) == i for i in range(len(points))])
    return np.flatnonzero(keep)


def _faces_from_tets(tets):
    # face opposite vertex i of each tet
    opp = np.array([[1, 2, 3], [0, 2, 3], [0, 1, 3], [0, 1, 2]])
    all_faces = np.sort(tets[:, opp].reshape(-1, 3), axis=1)
    faces, inverse = np.unique(all_faces, axis=0, return_inverse=True)
    return faces, inverse.reshape(-1, 4)


def delaunay_tetrahedralize(points, colors=None, seed=0):
    """Delaunay tetrahedralization of a 3D point cloud.

    Points closer than 1e-9 are merged. Point sets whose affine hull is not
    three-dimensional are rejected. If qhull reports a precision failure the
    triangulation is retried on a copy with seeded 1e-7-scale jitter; the mesh
    keeps the original coordinates either way.
    """
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2 or points.shape[1] != 3:
        raise ShapeError(f"points must be (N, 3), got {points.shape}")
    if not np.isfinite(points).all():
        raise DegenerateInputError("points contain non-finite coordinates")
    keep = _merge_duplicates(points) if len(points) else np.zeros(0, dtype=int)
    verts = points[keep]
    if len(verts) < 4:
        raise InsufficientPointsError(f"need at least 4 distinct points, got {len(verts)}")
    centered = verts - verts.mean(0)
    sv = np.linalg.svd(centered, compute_uv=False)
    if sv[2] <= 1e-12 * sv[0]:
        raise DegenerateInputError("points are coplanar or collinear; no tetrahedra exist")

    try:
        tri = Delaunay(verts)
        used = np.unique(tri.simplices)
        if len(used) != len(verts):
            raise QhullError("qhull left %d points out" % (len(verts) - len(used)))
        simplices = tri.simplices
    except QhullError as exc:
        log.warning("retrying triangulation with jitter: %s", exc)
        rng = np.random.default_rng(seed)
        extent = np.ptp(verts, axis=0).max()
        jittered = verts + rng.uniform(-1, 1, verts.shape) * JITTER_SCALE * extent
        try:
            simplices = Delaunay(jittered).simplices
        except QhullError as exc2:
            raise DegenerateInputError(f"triangulation failed after jitter: {exc2}") from exc2

    tets = np.array(simplices, dtype=np.int64)
    # drop slivers the jittered retry may leave and orient the rest positively
    orient = orient3d_batch(verts[tets])
    tets = tets[orient != 0]
    flip = orient[orient != 0] < 0
    tets[flip] = tets[flip][:, [1, 0, 2, 3]]
    faces, face_of_tet = _faces_from_tets(tets)
    vc = None if colors is None else np.asarray(colors, dtype=np.float64)[keep]
    return TetraMesh(verts, tets, faces, face_of_tet, vc, keep)


# -- barycentric anchoring ------------------------------------------------


def barycentric_position(v1, v2, v3, weights, tol=1e-9):
    w = np.asarray(weights, dtype=np.float64)
    if w.shape != (3,) or (w < -tol).any() or abs(w.sum() - 1.0) > tol:
        raise InvalidWeightsError(f"weights {w} are not on the probability simplex")
    return w[0] * np.asarray(v1, float) + w[1] * np.asarray(v2, float) + w[2] * np.asarray(v3, float)


def lattice_weights(k):
    """``k`` spread barycentric points strictly inside a triangle.

    Uses the interior nodes of the smallest triangular lattice with at least
    ``k`` of them, picked greedily by farthest-point order from the node
    nearest the centroid.
    """
    if k < 1:
        raise ShapeError("k must be at least 1")
    m = 3
    while (m - 1) * (m - 2) // 2 < k:
        m += 1
    nodes = np.array([(i, j, m - i - j) for i in range(1, m) for j in range(1, m - i)
                      if m - i - j >= 1], dtype=np.float64) / m
    centroid = np.full(3, 1 / 3)
    chosen = [int(np.argmin(np.linalg.norm(nodes - centroid, axis=1)))]
    while len(chosen) < k:
        d = np.min(np.linalg.norm(nodes[:, None] - nodes[chosen][None], axis=2), axis=1)
        d[chosen] = -1
        chosen.append(int(np.argmax(d)))
    return nodes[chosen]


def face_frames(mesh):
    """Local frames for every face: longest-edge axis, its in-plane
    perpendicular and the unit normal, plus RMS vertex spread along each."""
    tri = mesh.vertices[mesh.faces]
    centroid = tri.mean(1)
    e = np.stack([tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 1], tri[:, 0] - tri[:, 2]], axis=1)
    longest = e[np.arange(len(e)), np.argmax(np.linalg.norm(e, axis=2), axis=1)]
    u = longest / np.linalg.norm(longest, axis=1, keepdims=True)
    n = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
    n /= np.linalg.norm(n, axis=1, keepdims=True)
    w = np.cross(n, u)
    rel = tri - centroid[:, None]
    ext_u = np.sqrt(((rel * u[:, None]).sum(-1) ** 2).mean(1))
    ext_w = np.sqrt(((rel * w[:, None]).sum(-1) ** 2).mean(1))
    thick = THICKNESS_RATIO * np.minimum(ext_u, ext_w)
    return [FaceFrame(i, centroid[i], n[i], np.stack([u[i], w[i]]),
                      np.array([ext_u[i], ext_w[i], thick[i]]))
            for i in range(len(tri))]


def init_gaussians_on_faces(mesh, k=3, sh_degree=3):
    """Place ``k`` anchored Gaussians on every unique mesh face (k·n total).

    Each splat is flattened into its face plane: in-plane standard deviations
    are the face extents divided by sqrt(k), the normal axis is 5% of the
    smaller in-plane value. DC color is the mean vertex color when the mesh
    carries colors, mid-gray otherwise.
    """
    if k < 1:
        raise ShapeError("k must be at least 1")
    n = mesh.n_faces
    if n == 0:
        raise EmptyMeshError("mesh has no faces")
    frames = face_frames(mesh)
    rot = np.stack([np.stack([f.axes[0], f.axes[1], f.normal], axis=1) for f in frames])
    # frame matrices may be reflections for some faces; flip the normal column
    neg = np.linalg.det(rot) < 0
    rot[neg, :, 2] *= -1
    quats = rotmat_to_quat(rot)
    ext = np.stack([f.edge_scales for f in frames])
    scales = np.empty_like(ext)
    scales[:, :2] = ext[:, :2] / np.sqrt(k)
    scales[:, 2] = THICKNESS_RATIO * scales[:, :2].min(1)
    scales = np.maximum(scales, 1e-6)

    weights = lattice_weights(k)                       # (k, 3)
    face_ids = np.repeat(np.arange(n), k)
    bary = np.tile(np.log(weights), (n, 1))
    ncoef = shmod.num_coeffs(sh_degree)
    sh = np.zeros((n * k, ncoef, 3))
    if mesh.vertex_colors is not None:
        rgb = mesh.vertex_colors[mesh.faces].mean(1)
        sh[:, 0, :] = np.repeat(shmod.rgb_to_dc(rgb), k, axis=0)
    scene = SceneModel(
        np.zeros((n * k, 3)),
        np.repeat(quats, k, axis=0),
        np.repeat(np.log(scales), k, axis=0),
        np.full(n * k, float(logit(INIT_OPACITY))),
        sh, face_ids, bary, mesh, sh_degree,
    )
    scene.free_positions = scene.positions
    return scene


# -- interchange text format ----------------------------------------------


def write_mesh_text(mesh, path):
    with open(path, "w") as f:
        f.write("# tetrasplat mesh 1\n")
        f.write(f"vertices {len(mesh.vertices)}\n")
        for v in mesh.vertices:
            f.write(" ".join(repr(float(x)) for x in v) + "\n")
        f.write(f"tetrahedra {len(mesh.tetrahedra)}\n")
        for t in mesh.tetrahedra:
            f.write(" ".join(str(int(x)) for x in t) + "\n")
        if mesh.vertex_colors is not None:
            f.write(f"colors {len(mesh.vertex_colors)}\n")
            for c in mesh.vertex_colors:
                f.write(" ".join(repr(float(x)) for x in c) + "\n")


def read_mesh_text(path):
    with open(path) as f:
        lines = [(i + 1, ln.split()) for i, ln in enumerate(f)
                 if ln.strip() and not ln.lstrip().startswith("#")]
    blocks = {}
    pos = 0
    while pos < len(lines):
        lineno, head = lines[pos]
        if len(head) != 2 or head[0] not in ("vertices", "tetrahedra", "colors"):
            raise ParseError(f"expected a section header, got {' '.join(head)!r}", path, lineno)
        try:
            count = int(head[1])
        except ValueError:
            raise ParseError(f"bad count {head[1]!r}", path, lineno) from None
        width = 4 if head[0] == "tetrahedra" else 3
        rows = lines[pos + 1:pos + 1 + count]
        if len(rows) != count:
            raise ParseError(f"section {head[0]} truncated", path, lineno)
        cast = int if head[0] == "tetrahedra" else float
        data = []
        for ln, toks in rows:
            if len(toks) != width:
                raise ParseError(f"expected {width} values", path, ln)
            try:
                data.append([cast(t) for t in toks])
            except ValueError:
                raise ParseError("malformed number", path, ln) from None
        blocks[head[0]] = np.array(data, dtype=np.int64 if cast is int else np.float64).reshape(-1, width)
        pos += 1 + count
    if "vertices" not in blocks or "tetrahedra" not in blocks:
        raise ParseError("mesh file needs vertices and tetrahedra sections", path)
    verts, tets = blocks["vertices"], blocks["tetrahedra"]
    if len(tets) and (tets.min() < 0 or tets.max() >= len(verts)):
        raise ParseError("tetrahedron references a missing vertex", path)
    faces, face_of_tet = _faces_from_tets(tets) if len(tets) else (np.zeros((0, 3), np.int64), np.zeros((0, 4), np.int64))
    return TetraMesh(verts, tets, faces, face_of_tet, blocks.get("colors"), np.arange(len(verts)))
