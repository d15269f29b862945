"""Compact binary model format (``.ea3d``).

Layout (little-endian, every section padded with zeros to a multiple of 8
bytes; the normative description lives in docs/FORMATS.md):

    header   24 B   magic "EA3D" | version u32 | count u64 | sh_degree u8 |
                    flags u8 | reserved u16 (0) | reserved u32 (0)
    positions       f32 N×3
    opacity         f32 N            (logits)
    raw mode:       dc f32 N×3 | rest f32 N×(C-1)×3 | log-scale f32 N×3 |
                    rotation f32 N×4
    quantized mode: per group (dc, rest, scale, rotation):
                    K u32 | d u32 | centroids f32 K×d | indices u16/u32 N
                    (no index section when d == 0)
    mesh (ANCHORED flag): V u32 | T u32 | vertices f64 V×3 | tets u32 T×4 |
                    face ids u32 N (0xFFFFFFFF = free) | bary logits f32 N×3
    trailer  8 B    crc32 u32 of everything before it | reserved u32 (0)
"""

import struct
import zlib

import numpy as np

from .. import sh as shmod
from ..errors import (BadMagicError, ChecksumError, CountMismatchError, FormatError, IndexRangeError,
                      TruncatedError, UnknownFlagsError, VersionMismatchError)
from ..scene import SceneModel
from ..vq import GROUPS, Codebook, CodebookSet, RawBlock, reconstruct

MAGIC = b"EA3D"
VERSION = 1
HEADER = struct.Struct("<4sIQBBHI")
TRAILER = struct.Struct("<II")
FLAG_QUANTIZED = 1
FLAG_ANCHORED = 2
FLAG_WIDE_INDICES = 4
KNOWN_FLAGS = FLAG_QUANTIZED | FLAG_ANCHORED | FLAG_WIDE_INDICES
MAX_COUNT = 1 << 40
FREE_FACE = 0xFFFFFFFF


def _pad(n):
    return (n + 7) & ~7


# -- writing --------------------------------------------------------------


class _Writer:
    def __init__(self):
        self.parts = []

    def add(self, data):
        b = bytes(data)
        self.parts.append(b)
        rem = _pad(len(b)) - len(b)
        if rem:
            self.parts.append(b"\0" * rem)

    def array(self, arr, dtype):
        self.add(np.ascontiguousarray(arr, dtype=np.dtype(dtype).newbyteorder("<")).tobytes())

    def finish(self):
        body = b"".join(self.parts)
        return body + TRAILER.pack(zlib.crc32(body) & 0xFFFFFFFF, 0)


def _write_mesh(w, scene):
    mesh = scene.mesh
    w.add(struct.pack("<II", len(mesh.vertices), len(mesh.tetrahedra)))
    w.array(mesh.vertices, "f8")
    w.array(mesh.tetrahedra, "u4")
    fid = np.where(scene.face_ids >= 0, scene.face_ids, FREE_FACE)
    w.array(fid, "u4")
    w.array(scene.bary_logits, "f4")


def dumps_raw(scene):
    n = len(scene)
    anchored = scene.mesh is not None and bool(scene.anchored.any())
    flags = FLAG_ANCHORED if anchored else 0
    w = _Writer()
    w.add(HEADER.pack(MAGIC, VERSION, n, scene.sh_degree, flags, 0, 0))
    w.array(scene.positions, "f4")
    w.array(scene.opacity_logits, "f4")
    w.array(scene.sh[:, 0, :], "f4")
    w.array(scene.sh[:, 1:, :], "f4")
    w.array(scene.log_scales, "f4")
    w.array(scene.rotations, "f4")
    if anchored:
        _write_mesh(w, scene)
    return w.finish()


def dumps_quantized(codebooks, raw, mesh=None):
    n = len(raw.positions)
    wide = any(len(codebooks[g].centroids) > 65536 for g in GROUPS)
    anchored = mesh is not None and raw.face_ids is not None and bool((raw.face_ids >= 0).any())
    flags = FLAG_QUANTIZED | (FLAG_WIDE_INDICES if wide else 0) | (FLAG_ANCHORED if anchored else 0)
    w = _Writer()
    w.add(HEADER.pack(MAGIC, VERSION, n, codebooks.sh_degree, flags, 0, 0))
    w.array(raw.positions, "f4")
    w.array(raw.opacity_logits, "f4")
    for g in GROUPS:
        cb = codebooks[g]
        k, d = cb.centroids.shape
        w.add(struct.pack("<II", k, d))
        w.array(cb.centroids, "f4")
        if d:
            w.array(cb.indices, "u4" if wide else "u2")
    if anchored:
        holder = SceneModel(raw.positions, np.tile([1.0, 0, 0, 0], (n, 1)), np.zeros((n, 3)),
                            raw.opacity_logits, np.zeros((n, 1, 3)), raw.face_ids,
                            raw.bary_logits, mesh)
        _write_mesh(w, holder)
    return w.finish()


def save_compact(path, scene=None, codebooks=None, raw=None):
    """Write a raw scene, or a quantized (codebooks, raw) pair."""
    if codebooks is not None:
        data = dumps_quantized(codebooks, raw, scene.mesh if scene is not None else None)
    else:
        data = dumps_raw(scene)
    with open(path, "wb") as f:
        f.write(data)
    return len(data)


# -- sizes ----------------------------------------------------------------


def raw_size(n, sh_degree=3, mesh_vertices=None, mesh_tets=None):
    """Exact byte size of a raw-mode file."""
    c = shmod.num_coeffs(sh_degree)
    size = _pad(HEADER.size)
    for floats in (3, 1, 3, 3 * (c - 1), 3, 4):
        size += _pad(4 * floats * n)
    if mesh_vertices is not None:
        size += _mesh_size(n, mesh_vertices, mesh_tets)
    return size + TRAILER.size


def quantized_size(n, sh_degree=3, codebook_sizes=None, mesh_vertices=None, mesh_tets=None):
    """Exact byte size of a quantized-mode file with the given codebook sizes."""
    c = shmod.num_coeffs(sh_degree)
    dims = {"dc": 3, "rest": 3 * (c - 1), "scale": 3, "rotation": 4}
    sizes = codebook_sizes or {}
    wide = any(sizes.get(g, 0) > 65536 for g in GROUPS)
    size = _pad(HEADER.size) + _pad(12 * n) + _pad(4 * n)
    for g in GROUPS:
        k = sizes.get(g, 0) if dims[g] else 0
        size += 8 + _pad(4 * k * dims[g])
        if dims[g]:
            size += _pad((4 if wide else 2) * n)
    if mesh_vertices is not None:
        size += _mesh_size(n, mesh_vertices, mesh_tets)
    return size + TRAILER.size


def _mesh_size(n, v, t):
    return 8 + _pad(24 * v) + _pad(16 * t) + _pad(4 * n) + _pad(12 * n)


def compression_report(raw_bytes, quantized_bytes, group_bytes=None):
    """Byte counts and ratio quantized/raw. Accepts byte strings or sizes."""
    rb = raw_bytes if isinstance(raw_bytes, int) else len(raw_bytes)
    qb = quantized_bytes if isinstance(quantized_bytes, int) else len(quantized_bytes)
    if rb <= HEADER.size + TRAILER.size:
        return {"status": "no-data", "raw_bytes": rb, "quantized_bytes": qb, "ratio": None}
    report = {"status": "ok", "raw_bytes": rb, "quantized_bytes": qb, "ratio": qb / rb}
    if group_bytes is not None:
        report["groups"] = group_bytes
    return report


def group_bytes(codebooks, n):
    """Bytes each quantized group occupies in the file (centroids + indices)."""
    wide = any(len(codebooks[g].centroids) > 65536 for g in GROUPS)
    out = {}
    for g in GROUPS:
        k, d = codebooks[g].centroids.shape
        out[g] = 8 + _pad(4 * k * d) + (_pad((4 if wide else 2) * n) if d else 0)
    return out


# -- reading --------------------------------------------------------------


class _Reader:
    def __init__(self, buf):
        self.buf = buf
        self.pos = 0

    def take(self, nbytes, what):
        if nbytes < 0 or self.pos + nbytes > len(self.buf):
            raise TruncatedError(f"{what}: need {nbytes} bytes at offset {self.pos}, "
                                 f"file body has {len(self.buf)}")
        out = self.buf[self.pos:self.pos + nbytes]
        self.pos += _pad(nbytes)
        if self.pos > len(self.buf):
            raise TruncatedError(f"{what}: padding runs past end of body")
        return out

    def array(self, dtype, count, what, shape=None):
        dt = np.dtype(dtype).newbyteorder("<")
        raw = self.take(dt.itemsize * count, what)
        arr = np.frombuffer(raw, dtype=dt).astype(dt.newbyteorder("="))
        return arr.reshape(shape) if shape is not None else arr

    def u32pair(self, what):
        return struct.unpack("<II", self.take(8, what))


def _parse_header(buf):
    if len(buf) < HEADER.size:
        raise TruncatedError(f"file is {len(buf)} bytes, shorter than the header")
    magic, version, count, deg, flags, r0, r1 = HEADER.unpack_from(buf, 0)
    if magic != MAGIC:
        raise BadMagicError(f"bad magic {magic!r}")
    if version != VERSION:
        raise VersionMismatchError(f"format version {version}, expected {VERSION}")
    if flags & ~KNOWN_FLAGS:
        raise UnknownFlagsError(f"unknown flag bits 0x{flags & ~KNOWN_FLAGS:02x}")
    if flags & FLAG_WIDE_INDICES and not flags & FLAG_QUANTIZED:
        raise FormatError("wide-index flag set on an unquantized file")
    if r0 or r1:
        raise FormatError("reserved header fields must be zero")
    if deg > shmod.MAX_DEGREE:
        raise FormatError(f"SH degree {deg} out of range")
    if count > MAX_COUNT:
        raise CountMismatchError(f"declared count {count} exceeds sanity cap")
    return count, deg, flags


def _check_size_and_crc(buf, count, deg, flags):
    # cheap lower bound before touching any declared size
    per = 16 if flags & FLAG_QUANTIZED else 4 * (7 + 3 * shmod.num_coeffs(deg))
    if HEADER.size + per * count + TRAILER.size > len(buf):
        raise TruncatedError(f"declared {count} Gaussians cannot fit in {len(buf)} bytes")
    if len(buf) % 8:
        raise TruncatedError("file length is not a multiple of 8")
    body, trailer = buf[:-TRAILER.size], buf[-TRAILER.size:]
    crc, reserved = TRAILER.unpack(trailer)
    if reserved != 0 or crc != (zlib.crc32(body) & 0xFFFFFFFF):
        raise ChecksumError("checksum mismatch: file is corrupt")
    return body


def _read_mesh(r, n):
    from ..mesh import TetraMesh, _faces_from_tets

    v, t = r.u32pair("mesh sizes")
    if 24 * v + 16 * t > len(r.buf) - r.pos:
        raise CountMismatchError(f"mesh declares {v} vertices and {t} tetrahedra, too large for file")
    verts = r.array("f8", 3 * v, "mesh vertices", (v, 3))
    tets = r.array("u4", 4 * t, "mesh tetrahedra", (t, 4)).astype(np.int64)
    if t and tets.max() >= v:
        raise IndexRangeError("tetrahedron references a missing vertex")
    faces, face_of_tet = _faces_from_tets(tets) if t else (np.zeros((0, 3), np.int64), np.zeros((0, 4), np.int64))
    fid = r.array("u4", n, "face ids").astype(np.int64)
    fid[fid == FREE_FACE] = -1
    if (fid >= len(faces)).any():
        raise IndexRangeError("anchor face id out of range")
    bary = r.array("f4", 3 * n, "barycentric logits", (n, 3)).astype(np.float64)
    return TetraMesh(verts, tets, faces, face_of_tet, None, np.arange(v)), fid, bary


def loads(buf):
    """Parse a compact model. Returns (scene, codebooks or None).

    For quantized files the scene holds centroid-reconstructed attributes.
    """
    buf = bytes(buf)
    count, deg, flags = _parse_header(buf)
    body = _check_size_and_crc(buf, count, deg, flags)
    n = int(count)
    c = shmod.num_coeffs(deg)
    r = _Reader(body)
    r.pos = _pad(HEADER.size)
    pos = r.array("f4", 3 * n, "positions", (n, 3)).astype(np.float64)
    op = r.array("f4", n, "opacity").astype(np.float64)
    codebooks = None
    if flags & FLAG_QUANTIZED:
        dims = {"dc": 3, "rest": 3 * (c - 1), "scale": 3, "rotation": 4}
        idx_dtype = "u4" if flags & FLAG_WIDE_INDICES else "u2"
        books = {}
        for g in GROUPS:
            k, d = r.u32pair(f"{g} codebook header")
            if d != dims[g]:
                raise CountMismatchError(f"{g} codebook has dimension {d}, expected {dims[g]}")
            if d == 0:
                if k != 0:
                    raise CountMismatchError(f"{g} codebook is empty-dimensional but declares {k} entries")
                books[g] = Codebook(np.zeros((0, 0)), np.zeros(n, dtype=np.int64))
                continue
            if 4 * k * d > len(body) - r.pos:
                raise CountMismatchError(f"{g} codebook declares {k} centroids, too large for file")
            if n and k == 0:
                raise IndexRangeError(f"{g} codebook is empty but {n} Gaussians index it")
            cent = r.array("f4", k * d, f"{g} centroids", (k, d)).astype(np.float64)
            idx = r.array(idx_dtype, n, f"{g} indices").astype(np.int64)
            if n and idx.max() >= k:
                raise IndexRangeError(f"{g} index {idx.max()} out of range for {k} centroids")
            books[g] = Codebook(cent, idx)
        wide = any(len(b.centroids) > 65536 for b in books.values())
        if wide != bool(flags & FLAG_WIDE_INDICES):
            raise FormatError("wide-index flag disagrees with the codebook sizes")
        codebooks = CodebookSet(deg, books)
    else:
        dc = r.array("f4", 3 * n, "dc color", (n, 1, 3))
        rest = r.array("f4", 3 * (c - 1) * n, "sh rest", (n, c - 1, 3))
        ls = r.array("f4", 3 * n, "log scales", (n, 3)).astype(np.float64)
        rot = r.array("f4", 4 * n, "rotations", (n, 4)).astype(np.float64)
        sh = np.concatenate([dc, rest], axis=1).astype(np.float64)
    mesh = fid = bary = None
    if flags & FLAG_ANCHORED:
        mesh, fid, bary = _read_mesh(r, n)
    if r.pos != len(body):
        raise CountMismatchError(f"{len(body) - r.pos} unexpected bytes after the last section")
    if codebooks is not None:
        raw = RawBlock(pos, op, fid, bary)
        scene = reconstruct(codebooks, raw, mesh)
        if mesh is None:
            scene.free_positions = pos
        return scene, codebooks
    scene = SceneModel(pos, rot, ls, op, sh, fid, bary, mesh, deg)
    return scene, None


def load_compact(path):
    with open(path, "rb") as f:
        return loads(f.read())
