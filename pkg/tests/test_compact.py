import struct
import zlib

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from helpers import axis_camera, f32_scene, random_anchored_scene
from tetrasplat.errors import (BadMagicError, ChecksumError, CountMismatchError, FormatError,
                               IndexRangeError, TruncatedError, UnknownFlagsError,
                               VersionMismatchError)
from tetrasplat.io.compact import (HEADER, TRAILER, compression_report, dumps_quantized,
                                   dumps_raw, group_bytes, load_compact, loads, quantized_size,
                                   raw_size, save_compact)
from tetrasplat.raster import rasterize
from tetrasplat.scene import SceneModel
from tetrasplat.vq import quantize_scene, reconstruct


def recrc(body):
    """Re-seal a modified body so only the targeted check can fire."""
    body = bytes(body)
    return body + TRAILER.pack(zlib.crc32(body) & 0xFFFFFFFF, 0)


def assert_same(a, b):
    free = ~a.anchored
    np.testing.assert_array_equal(a.free_positions[free], b.free_positions[free])
    np.testing.assert_array_equal(a.positions, b.positions)
    for k in ("rotations", "log_scales", "opacity_logits", "sh", "face_ids",
              "bary_logits"):
        np.testing.assert_array_equal(getattr(a, k), getattr(b, k), err_msg=k)


# -- round trips ----------------------------------------------------------


@pytest.mark.parametrize("deg", [0, 1, 3])
def test_raw_round_trip(deg):
    s = f32_scene(np.random.default_rng(deg), 50, deg)
    back, books = loads(dumps_raw(s))
    assert books is None and back.sh_degree == deg
    assert_same(back, s)


def test_empty_scene_round_trip(tmp_path):
    p = tmp_path / "e.ea3d"
    n = save_compact(p, SceneModel.empty(3))
    assert n == HEADER.size + TRAILER.size == raw_size(0, 3)
    back, _ = load_compact(p)
    assert len(back) == 0 and back.sh_degree == 3


def test_raw_size_is_exact():
    s = f32_scene(np.random.default_rng(1), 1000, 3)
    data = dumps_raw(s)
    assert len(data) == raw_size(1000, 3) == HEADER.size + 1000 * 59 * 4 + TRAILER.size


def test_anchored_round_trip():
    s = random_anchored_scene(np.random.default_rng(2), n_points=10, k=2)
    s.bary_logits[:] = s.bary_logits.astype(np.float32)
    for a in (s.rotations, s.log_scales, s.opacity_logits, s.sh):
        a[:] = a.astype(np.float32)
    data = dumps_raw(s)
    assert len(data) == raw_size(len(s), s.sh_degree, len(s.mesh.vertices), len(s.mesh.tetrahedra))
    back, _ = loads(data)
    assert_same(back, s)
    np.testing.assert_array_equal(back.mesh.vertices, s.mesh.vertices)
    np.testing.assert_array_equal(back.positions, s.positions)


def test_quantized_round_trip_renders_identically(tmp_path):
    rng = np.random.default_rng(3)
    s = f32_scene(rng, 300, 2)
    s.free_positions[:, 2] += 5.0
    books, raw = quantize_scene(s, 32)
    q = reconstruct(books, raw)
    p = tmp_path / "q.ea3d"
    n = save_compact(p, codebooks=books, raw=raw)
    sizes = {g: len(books[g].centroids) for g in books.books}
    assert n == quantized_size(300, 2, sizes)
    back, books2 = load_compact(p)
    assert books2 is not None
    cam = axis_camera(32)
    np.testing.assert_array_equal(rasterize(back, cam).color, rasterize(q, cam).color)


def test_quantized_anchored_round_trip():
    s = random_anchored_scene(np.random.default_rng(4), n_points=10, k=2)
    books, raw = quantize_scene(s, 8)
    back, _ = loads(dumps_quantized(books, raw, s.mesh))
    np.testing.assert_array_equal(back.face_ids, s.face_ids)
    np.testing.assert_array_equal(back.positions, reconstruct(books, raw, s.mesh).positions)


def test_wide_indices_when_codebook_is_large():
    s = f32_scene(np.random.default_rng(5), 10, 0)
    books, raw = quantize_scene(s, 4)
    books["dc"].centroids = np.vstack([books["dc"].centroids, np.zeros((70000, 3))])
    data = dumps_quantized(books, raw)
    assert data[17] & 4      # flags byte
    back, _ = loads(data)
    np.testing.assert_array_equal(back.sh[:, 0], books["dc"].decode())


# -- size arithmetic ------------------------------------------------------


def test_compression_ratio_arithmetic():
    n = 100_000
    raw = raw_size(n, 3)
    q16 = quantized_size(n, 3, {g: 1 << 16 for g in ("dc", "rest", "scale", "rotation")})
    q12 = quantized_size(n, 3, {g: 4096 for g in ("dc", "rest", "scale", "rotation")})
    # per Gaussian: 59 floats raw against 4 floats + 4 two-byte indices quantized
    payload_only = (4 * 4 + 4 * 2) / (59 * 4)
    assert q16 / raw > payload_only
    assert q12 / raw < 0.25 < q16 / raw
    assert compression_report(0, 0)["status"] == "no-data"
    assert compression_report(raw, q12)["ratio"] == pytest.approx(q12 / raw)


def test_group_bytes_sum():
    s = f32_scene(np.random.default_rng(6), 200, 3)
    books, raw = quantize_scene(s, 16)
    data = dumps_quantized(books, raw)
    gb = group_bytes(books, 200)
    assert HEADER.size + 200 * 16 + sum(gb.values()) + TRAILER.size == len(data)


# -- errors ---------------------------------------------------------------


def _base():
    return dumps_raw(f32_scene(np.random.default_rng(7), 5, 1))


def _header_edit(**fields):
    data = bytearray(_base())
    magic, version, count, deg, flags, r0, r1 = HEADER.unpack_from(data, 0)
    vals = dict(magic=magic, version=version, count=count, deg=deg, flags=flags, r0=r0, r1=r1)
    vals.update(fields)
    HEADER.pack_into(data, 0, *vals.values())
    return recrc(data[:-TRAILER.size])


@pytest.mark.parametrize("fields,err", [
    (dict(magic=b"NOPE"), BadMagicError),
    (dict(version=2), VersionMismatchError),
    (dict(flags=0x80), UnknownFlagsError),
    (dict(r0=1), FormatError),
    (dict(count=6), TruncatedError),
    (dict(count=1 << 50), CountMismatchError),
    (dict(count=4), CountMismatchError),
    (dict(flags=1), FormatError),
])
def test_header_errors(fields, err):
    with pytest.raises(err):
        loads(_header_edit(**fields))


def test_checksum_and_truncation():
    data = bytearray(_base())
    data[40] ^= 1
    with pytest.raises(ChecksumError):
        loads(bytes(data))
    with pytest.raises(TruncatedError):
        loads(_base()[:10])
    with pytest.raises(TruncatedError):
        loads(_base()[:-3])


def test_index_out_of_range():
    s = f32_scene(np.random.default_rng(8), 6, 0)
    books, raw = quantize_scene(s, 3)
    books["scale"].indices = books["scale"].indices.copy()
    books["scale"].indices[2] = 3
    with pytest.raises(IndexRangeError):
        loads(dumps_quantized(books, raw))


@given(st.integers(0, 10_000), st.integers(0, 255))
def test_corruption_only_raises_format_errors(pos, value):
    data = bytearray(_base())
    pos %= len(data)
    data[pos] = value
    for candidate in (bytes(data), recrc(data[:-TRAILER.size]), bytes(data[:pos])):
        try:
            loads(candidate)
        except FormatError:
            pass
