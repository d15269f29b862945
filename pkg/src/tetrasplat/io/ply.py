"""PLY point clouds and Gaussian checkpoints in the common 3DGS property layout.

Reads ascii and binary_little_endian files (list properties are skipped);
writes binary_little_endian. Gaussian files carry
x y z nx ny nz f_dc_0..2 f_rest_* opacity scale_0..2 rot_0..3 with the
f_rest block stored channel-major, all float32.
"""

from dataclasses import dataclass

import numpy as np

from ..errors import ParseError, SchemaError, TruncatedError
from ..scene import SceneModel
from .. import sh as shmod

_TYPES = {
    "char": "i1", "int8": "i1", "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2", "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4", "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4", "double": "f8", "float64": "f8",
}


@dataclass
class PlyElement:
    name: str
    count: int
    properties: list          # (name, dtype) or (name, (count_dtype, item_dtype)) for lists


@dataclass
class PointCloud:
    positions: np.ndarray
    normals: np.ndarray = None
    colors: np.ndarray = None     # float in [0, 1]
    properties: dict = None       # every vertex property by name


def _parse_header(buf, path):
    end = buf.find(b"end_header")
    if not buf.startswith(b"ply") or end < 0:
        raise ParseError("not a PLY file (missing 'ply' magic or end_header)", path)
    nl = buf.find(b"\n", end)
    if nl < 0:
        raise TruncatedError("header not terminated")
    try:
        header = buf[:end].decode("ascii")
    except UnicodeDecodeError:
        raise ParseError("PLY header is not ASCII", path) from None
    fmt = None
    elements = []
    for no, line in enumerate(header.splitlines(), start=1):
        tok = line.split()
        if not tok or tok[0] in ("ply", "comment", "obj_info"):
            continue
        if tok[0] == "format":
            if len(tok) != 3:
                raise ParseError("bad format line", path, no)
            fmt = tok[1]
        elif tok[0] == "element":
            if len(tok) != 3 or not tok[2].isdigit():
                raise ParseError("bad element line", path, no)
            elements.append(PlyElement(tok[1], int(tok[2]), []))
        elif tok[0] == "property":
            if not elements:
                raise ParseError("property before any element", path, no)
            if len(tok) == 5 and tok[1] == "list":
                if tok[2] not in _TYPES or tok[3] not in _TYPES:
                    raise ParseError(f"unknown list type in {line!r}", path, no)
                elements[-1].properties.append((tok[4], (_TYPES[tok[2]], _TYPES[tok[3]])))
            elif len(tok) == 3 and tok[1] in _TYPES:
                elements[-1].properties.append((tok[2], _TYPES[tok[1]]))
            else:
                raise ParseError(f"bad property line {line!r}", path, no)
        else:
            raise ParseError(f"unexpected header keyword {tok[0]!r}", path, no)
    if fmt not in ("ascii", "binary_little_endian"):
        raise ParseError(f"unsupported PLY format {fmt!r}", path)
    return fmt, elements, nl + 1


def _read_binary(buf, pos, el):
    if all(isinstance(t, str) for _, t in el.properties):
        dt = np.dtype([(n, "<" + t) for n, t in el.properties])
        nbytes = dt.itemsize * el.count
        if pos + nbytes > len(buf):
            raise TruncatedError(f"element {el.name!r}: need {nbytes} bytes, {len(buf) - pos} left")
        arr = np.frombuffer(buf, dtype=dt, count=el.count, offset=pos)
        return {n: arr[n].astype(arr[n].dtype.newbyteorder("=")) for n, _ in el.properties}, pos + nbytes
    # rows with list properties have variable size; walk them
    cols = {n: [] for n, _ in el.properties}
    for _ in range(el.count):
        for n, t in el.properties:
            if isinstance(t, str):
                size = np.dtype(t).itemsize
                if pos + size > len(buf):
                    raise TruncatedError(f"element {el.name!r} ends early")
                cols[n].append(np.frombuffer(buf, "<" + t, 1, pos)[0])
                pos += size
            else:
                ct, it = t
                cs = np.dtype(ct).itemsize
                if pos + cs > len(buf):
                    raise TruncatedError(f"element {el.name!r} ends early")
                k = int(np.frombuffer(buf, "<" + ct, 1, pos)[0])
                pos += cs
                size = np.dtype(it).itemsize * k
                if k < 0 or pos + size > len(buf):
                    raise TruncatedError(f"element {el.name!r} ends early")
                cols[n].append(np.frombuffer(buf, "<" + it, k, pos).copy())
                pos += size
    out = {}
    for n, t in el.properties:
        out[n] = np.array(cols[n], dtype=t) if isinstance(t, str) else cols[n]
    return out, pos


def _read_ascii(lines, start, el, path):
    cols = {n: [] for n, _ in el.properties}
    for r in range(el.count):
        if start + r >= len(lines):
            raise TruncatedError(f"element {el.name!r}: expected {el.count} rows, got {r}")
        tok = lines[start + r].split()
        j = 0
        try:
            for n, t in el.properties:
                if isinstance(t, str):
                    cols[n].append(float(tok[j]) if t[0] == "f" else int(tok[j]))
                    j += 1
                else:
                    k = int(tok[j])
                    cols[n].append(np.array(tok[j + 1:j + 1 + k], dtype=t[1]))
                    if len(cols[n][-1]) != k:
                        raise IndexError
                    j += 1 + k
        except (IndexError, ValueError):
            raise ParseError(f"malformed row in element {el.name!r}", path) from None
    out = {}
    for n, t in el.properties:
        out[n] = np.array(cols[n], dtype=t) if isinstance(t, str) else cols[n]
    return out, start + el.count


def read_ply_elements(path):
    """Every element of a PLY file as name -> {property: array}."""
    with open(path, "rb") as f:
        buf = f.read()
    fmt, elements, pos = _parse_header(buf, path)
    data = {}
    if fmt == "ascii":
        lines = [ln for ln in buf[pos:].decode("ascii", errors="replace").splitlines() if ln.strip()]
        row = 0
        for el in elements:
            data[el.name], row = _read_ascii(lines, row, el, path)
    else:
        for el in elements:
            data[el.name], pos = _read_binary(buf, pos, el)
    return data


def read_ply(path):
    """Vertex positions plus optional normals and colors."""
    data = read_ply_elements(path)
    v = data.get("vertex")
    if v is None or not all(k in v for k in ("x", "y", "z")):
        raise SchemaError(f"{path}: vertex element lacks x/y/z properties")
    pos = np.stack([v["x"], v["y"], v["z"]], axis=1).astype(np.float64)
    normals = colors = None
    if all(k in v for k in ("nx", "ny", "nz")):
        normals = np.stack([v["nx"], v["ny"], v["nz"]], axis=1).astype(np.float64)
    if all(k in v for k in ("red", "green", "blue")):
        c = np.stack([v["red"], v["green"], v["blue"]], axis=1)
        colors = c.astype(np.float64) / (255.0 if c.dtype.kind in "ui" else 1.0)
    return PointCloud(pos, normals, colors, v)


def _write(path, names, columns):
    n = len(columns[0]) if columns else 0
    header = ["ply", "format binary_little_endian 1.0", f"element vertex {n}"]
    header += [f"property {t} {name}" for name, t in names]
    header.append("end_header")
    ptype = {"float": "<f4", "uchar": "u1"}
    dt = np.dtype([(name, ptype[t]) for name, t in names])
    rows = np.empty(n, dtype=dt)
    for (name, _), col in zip(names, columns):
        rows[name] = col
    with open(path, "wb") as f:
        f.write(("\n".join(header) + "\n").encode("ascii"))
        f.write(rows.tobytes())


def write_points_ply(path, positions, colors=None):
    pos = np.asarray(positions, dtype=np.float64)
    names = [("x", "float"), ("y", "float"), ("z", "float")]
    cols = [pos[:, 0], pos[:, 1], pos[:, 2]]
    if colors is not None:
        c = np.clip(np.round(np.asarray(colors) * 255.0), 0, 255).astype(np.uint8)
        names += [("red", "uchar"), ("green", "uchar"), ("blue", "uchar")]
        cols += [c[:, 0], c[:, 1], c[:, 2]]
    _write(path, names, cols)


def gaussian_property_names(sh_degree):
    n_rest = 3 * (shmod.num_coeffs(sh_degree) - 1)
    return (["x", "y", "z", "nx", "ny", "nz", "f_dc_0", "f_dc_1", "f_dc_2"]
            + [f"f_rest_{i}" for i in range(n_rest)]
            + ["opacity", "scale_0", "scale_1", "scale_2", "rot_0", "rot_1", "rot_2", "rot_3"])


def write_gaussians_ply(path, scene):
    """Write a scene in the 3DGS checkpoint layout (anchoring is flattened)."""
    n = len(scene)
    pos = scene.positions
    rest = scene.sh[:, 1:, :].transpose(0, 2, 1).reshape(n, -1)  # channel-major
    cols = [pos[:, 0], pos[:, 1], pos[:, 2], np.zeros(n), np.zeros(n), np.zeros(n)]
    cols += [scene.sh[:, 0, c] for c in range(3)]
    cols += [rest[:, i] for i in range(rest.shape[1])]
    cols += [scene.opacity_logits] + [scene.log_scales[:, i] for i in range(3)]
    cols += [scene.rotations[:, i] for i in range(4)]
    _write(path, [(nm, "float") for nm in gaussian_property_names(scene.sh_degree)], cols)


def read_gaussians_ply(path):
    """Scene from a 3DGS-layout PLY; the SH degree follows from the f_rest count."""
    data = read_ply_elements(path)
    v = data.get("vertex")
    base = ["x", "y", "z", "f_dc_0", "f_dc_1", "f_dc_2", "opacity",
            "scale_0", "scale_1", "scale_2", "rot_0", "rot_1", "rot_2", "rot_3"]
    if v is None or any(k not in v for k in base):
        missing = [k for k in base if v is None or k not in v]
        raise SchemaError(f"{path}: missing Gaussian properties {missing}")
    n_rest = sum(1 for k in v if k.startswith("f_rest_"))
    if n_rest % 3 or any(f"f_rest_{i}" not in v for i in range(n_rest)):
        raise SchemaError(f"{path}: f_rest properties are not a full per-channel block")
    deg = shmod.degree_from_coeffs(1 + n_rest // 3)
    n = len(v["x"])
    f = lambda k: np.asarray(v[k], dtype=np.float64)
    sh = np.zeros((n, 1 + n_rest // 3, 3))
    sh[:, 0, :] = np.stack([f(f"f_dc_{c}") for c in range(3)], axis=1)
    if n_rest:
        rest = np.stack([f(f"f_rest_{i}") for i in range(n_rest)], axis=1)
        sh[:, 1:, :] = rest.reshape(n, 3, -1).transpose(0, 2, 1)
    return SceneModel(
        np.stack([f("x"), f("y"), f("z")], axis=1),
        np.stack([f(f"rot_{i}") for i in range(4)], axis=1),
        np.stack([f(f"scale_{i}") for i in range(3)], axis=1),
        f("opacity"), sh, sh_degree=deg,
    )
