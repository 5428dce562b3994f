"""OFF / PLY readers and a PLY writer."""

from __future__ import annotations

import os
from pathlib import Path

import numpy as np

from .mesh import Mesh, check_nondegenerate


class MeshFormatError(ValueError):
    """The file could not be parsed; the message carries a line or byte offset."""


def read_arrays(path):
    """Raw ``(vertices, triangles)`` of an OFF or PLY file, without validation."""
    path = Path(path)
    suffix = path.suffix.lower()
    with open(path, "rb") as f:
        data = f.read()
    if suffix == ".off":
        return _parse_off(data, path)
    if suffix == ".ply":
        return _parse_ply(data, path)
    raise MeshFormatError(f"{path}: unsupported mesh format {suffix!r} (expected .off or .ply)")


def load_mesh(path) -> Mesh:
    """Read an OFF or PLY file into a validated :class:`Mesh`.

    The mesh id is the file stem. Vertex and face order are preserved.
    """
    path = Path(path)
    v, t = read_arrays(path)
    mesh = Mesh(v, t, id=path.stem)
    check_nondegenerate(mesh)
    return mesh


def _tokens(data: bytes, path):
    """Yield (line_number, token) pairs, skipping comments."""
    try:
        text = data.decode("ascii")
    except UnicodeDecodeError as e:
        raise MeshFormatError(f"{path}: non-ASCII byte at offset {e.start}") from None
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0]
        for tok in line.split():
            yield lineno, tok


def _parse_off(data: bytes, path):
    toks = _tokens(data, path)

    def take(kind, what):
        try:
            lineno, tok = next(toks)
        except StopIteration:
            raise MeshFormatError(f"{path}: unexpected end of file while reading {what}") from None
        try:
            return kind(tok)
        except ValueError:
            raise MeshFormatError(f"{path}:{lineno}: cannot parse {tok!r} as {what}") from None

    try:
        lineno, head = next(toks)
    except StopIteration:
        raise MeshFormatError(f"{path}: empty file") from None
    if head != "OFF":
        raise MeshFormatError(f"{path}:{lineno}: expected 'OFF' header, got {head!r}")
    nv = take(int, "vertex count")
    nf = take(int, "face count")
    take(int, "edge count")
    verts = np.empty((nv, 3))
    for i in range(nv):
        for c in range(3):
            verts[i, c] = take(float, f"coordinate of vertex {i}")
    faces = np.empty((nf, 3), dtype=np.int64)
    for i in range(nf):
        k = take(int, f"corner count of face {i}")
        if k != 3:
            raise MeshFormatError(f"{path}: face {i} has {k} corners; only triangles are supported")
        for c in range(3):
            faces[i, c] = take(int, f"index of face {i}")
    return verts, faces


_PLY_TYPES = {
    "char": "i1", "int8": "i1", "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2", "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4", "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4", "double": "f8", "float64": "f8",
}


def _parse_ply_header(data: bytes, path):
    end = data.find(b"end_header")
    if not data.startswith(b"ply") or end < 0:
        raise MeshFormatError(f"{path}: missing 'ply' magic or 'end_header'")
    nl = data.find(b"\n", end)
    body_start = len(data) if nl < 0 else nl + 1
    lines = data[:end].decode("ascii", errors="replace").splitlines()
    fmt = None
    elements = []  # (name, count, [(prop_name, dtype or ('list', count_t, item_t))])
    for lineno, line in enumerate(lines, start=1):
        parts = line.split()
        if not parts or parts[0] in ("ply", "comment", "obj_info"):
            continue
        if parts[0] == "format":
            fmt = parts[1]
        elif parts[0] == "element":
            elements.append((parts[1], int(parts[2]), []))
        elif parts[0] == "property":
            if not elements:
                raise MeshFormatError(f"{path}:{lineno}: property before any element")
            try:
                if parts[1] == "list":
                    prop = (parts[4], ("list", _PLY_TYPES[parts[2]], _PLY_TYPES[parts[3]]))
                else:
                    prop = (parts[2], _PLY_TYPES[parts[1]])
            except (KeyError, IndexError):
                raise MeshFormatError(f"{path}:{lineno}: bad property line {line!r}") from None
            elements[-1][2].append(prop)
        else:
            raise MeshFormatError(f"{path}:{lineno}: unexpected header line {line!r}")
    if fmt not in ("ascii", "binary_little_endian"):
        raise MeshFormatError(f"{path}: unsupported PLY format {fmt!r}")
    names = [e[0] for e in elements]
    if "vertex" not in names or "face" not in names:
        raise MeshFormatError(f"{path}: PLY needs 'vertex' and 'face' elements")
    return fmt, elements, body_start, len(lines) + 1


def _parse_ply(data: bytes, path):
    fmt, elements, offset, header_lines = _parse_ply_header(data, path)
    if fmt == "ascii":
        return _parse_ply_ascii(data[offset:], elements, path, header_lines)
    return _parse_ply_binary(data, offset, elements, path)


def _xyz(vprops, path):
    names = [p[0] for p in vprops]
    try:
        return [names.index(c) for c in "xyz"]
    except ValueError:
        raise MeshFormatError(f"{path}: vertex element lacks x/y/z") from None


def _parse_ply_ascii(body: bytes, elements, path, first_line):
    lines = body.decode("ascii", errors="replace").splitlines()
    pos = 0
    verts = faces = None
    for name, count, props in elements:
        rows = []
        for r in range(count):
            if pos >= len(lines):
                raise MeshFormatError(f"{path}: unexpected end of file in element {name!r}")
            lineno = first_line + pos + 1
            parts = lines[pos].split()
            pos += 1
            rows.append((lineno, parts))
        if name == "vertex":
            idx = _xyz(props, path)
            verts = np.empty((count, 3))
            for r, (lineno, parts) in enumerate(rows):
                try:
                    verts[r] = [float(parts[i]) for i in idx]
                except (ValueError, IndexError):
                    raise MeshFormatError(f"{path}:{lineno}: malformed vertex line") from None
        elif name == "face":
            faces = np.empty((count, 3), dtype=np.int64)
            for r, (lineno, parts) in enumerate(rows):
                try:
                    k = int(parts[0])
                    if k != 3:
                        raise MeshFormatError(f"{path}:{lineno}: face with {k} corners; only triangles supported")
                    faces[r] = [int(x) for x in parts[1:4]]
                except (ValueError, IndexError):
                    raise MeshFormatError(f"{path}:{lineno}: malformed face line") from None
    return verts, faces


def _parse_ply_binary(data: bytes, offset, elements, path):
    verts = faces = None
    for name, count, props in elements:
        if name == "face":
            lists = [p for p in props if isinstance(p[1], tuple)]
            if len(props) != 1 or len(lists) != 1:
                raise MeshFormatError(f"{path}: binary face element must hold a single index list")
            _, (_, count_t, item_t) = props[0]
            dt = np.dtype([("n", "<" + count_t), ("idx", "<" + item_t, (3,))])
        else:
            if any(isinstance(p[1], tuple) for p in props):
                raise MeshFormatError(f"{path}: list properties only supported on faces")
            dt = np.dtype([(p[0], "<" + p[1]) for p in props])
        nbytes = dt.itemsize * count
        if offset + nbytes > len(data):
            raise MeshFormatError(f"{path}: truncated element {name!r} at byte {offset}")
        arr = np.frombuffer(data, dtype=dt, count=count, offset=offset)
        if name == "face":
            bad = np.flatnonzero(arr["n"] != 3)
            if bad.size:
                raise MeshFormatError(
                    f"{path}: face {bad[0]} at byte {offset + bad[0] * dt.itemsize} is not a triangle"
                )
            faces = arr["idx"].astype(np.int64)
        elif name == "vertex":
            _xyz(props, path)
            verts = np.stack([arr[c].astype(np.float64) for c in "xyz"], axis=1)
        offset += nbytes
    return verts, faces


def _atomic_write(path, payload: bytes):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(f".{path.name}.{os.getpid()}.tmp")
    with open(tmp, "wb") as f:
        f.write(payload)
    os.replace(tmp, path)


def write_ply(path, vertices, triangles, colors=None, binary=True):
    """Write a triangle mesh as PLY, optionally with 8-bit RGB per vertex."""
    v = np.asarray(vertices, dtype=np.float64)
    t = np.asarray(triangles, dtype=np.int64)
    header = ["ply", f"format {'binary_little_endian' if binary else 'ascii'} 1.0",
              f"element vertex {len(v)}", "property double x", "property double y", "property double z"]
    if colors is not None:
        colors = np.asarray(colors)
        if colors.shape != (len(v), 3):
            raise ValueError(f"colors must have shape ({len(v)}, 3)")
        colors = np.clip(np.round(colors), 0, 255).astype(np.uint8)
        header += ["property uchar red", "property uchar green", "property uchar blue"]
    header += [f"element face {len(t)}", "property list uchar int vertex_indices", "end_header"]
    head = ("\n".join(header) + "\n").encode("ascii")
    if binary:
        fields = [("x", "<f8"), ("y", "<f8"), ("z", "<f8")]
        if colors is not None:
            fields += [("red", "u1"), ("green", "u1"), ("blue", "u1")]
        va = np.empty(len(v), dtype=fields)
        va["x"], va["y"], va["z"] = v.T
        if colors is not None:
            va["red"], va["green"], va["blue"] = colors.T
        fa = np.empty(len(t), dtype=[("n", "u1"), ("idx", "<i4", (3,))])
        fa["n"] = 3
        fa["idx"] = t
        payload = head + va.tobytes() + fa.tobytes()
    else:
        rows = []
        for i, p in enumerate(v):
            row = " ".join(repr(float(x)) for x in p)
            if colors is not None:
                row += " " + " ".join(str(int(c)) for c in colors[i])
            rows.append(row)
        rows += ["3 " + " ".join(str(int(i)) for i in f) for f in t]
        payload = head + ("\n".join(rows) + "\n").encode("ascii")
    _atomic_write(path, payload)


def write_off(path, vertices, triangles):
    v = np.asarray(vertices, dtype=np.float64)
    t = np.asarray(triangles, dtype=np.int64)
    lines = ["OFF", f"{len(v)} {len(t)} 0"]
    lines += [" ".join(repr(float(x)) for x in p) for p in v]
    lines += ["3 " + " ".join(str(int(i)) for i in f) for f in t]
    _atomic_write(path, ("\n".join(lines) + "\n").encode("ascii"))


def save_mesh(path, mesh: Mesh, colors=None):
    path = Path(path)
    if path.suffix.lower() == ".off":
        write_off(path, mesh.vertices, mesh.triangles)
    else:
        write_ply(path, mesh.vertices, mesh.triangles, colors=colors)
