"""Point cloud and mesh files: XYZ and OBJ as text, PLY as binary.

ASCII formats are written with 9 significant digits; binary PLY stores
float64 coordinates and round-trips bit for bit. All readers raise
FileFormatError carrying a line number (text) or byte offset (binary)
when given malformed input.
"""

import struct

import numpy as np


class FileFormatError(ValueError):
    def __init__(self, message, line=None, offset=None):
        where = ""
        if line is not None:
            where = f" (line {line})"
        elif offset is not None:
            where = f" (byte offset {offset})"
        super().__init__(message + where)
        self.line = line
        self.offset = offset


def _fmt(value) -> str:
    return f"{value:.9g}"


# ---------------------------------------------------------------------------
# XYZ: one "x y z" per line

def write_xyz(path, points):
    pts = np.asarray(points, dtype=np.float64)
    with open(path, "w") as fh:
        for p in pts:
            fh.write(f"{_fmt(p[0])} {_fmt(p[1])} {_fmt(p[2])}\n")


def read_xyz(path):
    rows = []
    with open(path) as fh:
        for lineno, raw in enumerate(fh, start=1):
            text = raw.strip()
            if not text or text.startswith("#"):
                continue
            parts = text.split()
            if len(parts) != 3:
                raise FileFormatError(
                    f"expected 3 coordinates, got {len(parts)}", line=lineno
                )
            try:
                rows.append([float(v) for v in parts])
            except ValueError:
                raise FileFormatError(f"bad number in {text!r}", line=lineno) from None
    return np.array(rows, dtype=np.float64).reshape(-1, 3)


# ---------------------------------------------------------------------------
# OBJ: "v x y z" vertices and "f i j k" triangles (1-based indices)

def write_obj(path, vertices, faces):
    verts = np.asarray(vertices, dtype=np.float64)
    tris = np.asarray(faces, dtype=np.int64).reshape(-1, 3)
    with open(path, "w") as fh:
        for v in verts:
            fh.write(f"v {_fmt(v[0])} {_fmt(v[1])} {_fmt(v[2])}\n")
        for f in tris:
            fh.write(f"f {f[0] + 1} {f[1] + 1} {f[2] + 1}\n")


def read_obj(path):
    verts, faces = [], []
    with open(path) as fh:
        for lineno, raw in enumerate(fh, start=1):
            text = raw.strip()
            if not text or text.startswith("#"):
                continue
            parts = text.split()
            tag = parts[0]
            if tag == "v":
                if len(parts) != 4:
                    raise FileFormatError("vertex line needs 3 coordinates", line=lineno)
                try:
                    verts.append([float(v) for v in parts[1:]])
                except ValueError:
                    raise FileFormatError(f"bad number in {text!r}", line=lineno) from None
            elif tag == "f":
                if len(parts) != 4:
                    raise FileFormatError("only triangle faces are supported", line=lineno)
                try:
                    idx = [int(p.split("/")[0]) - 1 for p in parts[1:]]
                except ValueError:
                    raise FileFormatError(f"bad face index in {text!r}", line=lineno) from None
                faces.append(idx)
            # other tags (vn, vt, o, g, s, usemtl, ...) are ignored
    verts = np.array(verts, dtype=np.float64).reshape(-1, 3)
    faces = np.array(faces, dtype=np.int64).reshape(-1, 3)
    if faces.size and (faces.min() < 0 or faces.max() >= len(verts)):
        raise FileFormatError("face index out of range")
    return verts, faces


# ---------------------------------------------------------------------------
# PLY: binary little-endian, float64 vertices, optional int32 triangles

def write_ply(path, vertices, faces=None):
    verts = np.ascontiguousarray(np.asarray(vertices, dtype="<f8"))
    tris = None if faces is None else np.asarray(faces, dtype="<i4").reshape(-1, 3)
    header = [
        "ply",
        "format binary_little_endian 1.0",
        f"element vertex {len(verts)}",
        "property double x",
        "property double y",
        "property double z",
    ]
    if tris is not None:
        header += [
            f"element face {len(tris)}",
            "property list uchar int32 vertex_indices",
        ]
    header.append("end_header")
    with open(path, "wb") as fh:
        fh.write(("\n".join(header) + "\n").encode("ascii"))
        fh.write(verts.tobytes())
        if tris is not None:
            for f in tris:
                fh.write(struct.pack("<B3i", 3, *f))


def read_ply(path):
    with open(path, "rb") as fh:
        blob = fh.read()
    end_tag = b"end_header\n"
    end = blob.find(end_tag)
    if end < 0:
        raise FileFormatError("header is missing 'end_header'", offset=len(blob))
    header_lines = blob[:end].decode("ascii", errors="replace").splitlines()
    if not header_lines or header_lines[0].strip() != "ply":
        raise FileFormatError("not a PLY file (missing 'ply' magic)", line=1)

    n_vertex = n_face = None
    fmt_ok = False
    for lineno, line in enumerate(header_lines[1:], start=2):
        parts = line.split()
        if not parts or parts[0] == "comment":
            continue
        if parts[0] == "format":
            if parts[1:2] != ["binary_little_endian"]:
                raise FileFormatError(
                    f"unsupported format {' '.join(parts[1:])!r}", line=lineno
                )
            fmt_ok = True
        elif parts[0] == "element":
            if len(parts) != 3:
                raise FileFormatError("malformed element line", line=lineno)
            if parts[1] == "vertex":
                n_vertex = int(parts[2])
            elif parts[1] == "face":
                n_face = int(parts[2])
            else:
                raise FileFormatError(f"unsupported element {parts[1]!r}", line=lineno)
    if not fmt_ok:
        raise FileFormatError("header is missing 'format' line", line=len(header_lines))
    if n_vertex is None:
        raise FileFormatError("header is missing 'element vertex'", line=len(header_lines))

    pos = end + len(end_tag)
    need = n_vertex * 24
    if len(blob) - pos < need:
        raise FileFormatError(
            f"vertex payload truncated: need {need} bytes, have {len(blob) - pos}",
            offset=pos,
        )
    verts = np.frombuffer(blob, dtype="<f8", count=n_vertex * 3, offset=pos)
    verts = verts.reshape(n_vertex, 3).copy()
    pos += need

    if n_face is None:
        return verts, None
    faces = np.empty((n_face, 3), dtype=np.int64)
    for i in range(n_face):
        if len(blob) - pos < 13:
            raise FileFormatError(f"face record {i} truncated", offset=pos)
        count = blob[pos]
        if count != 3:
            raise FileFormatError(f"face record {i} has {count} vertices, want 3", offset=pos)
        faces[i] = struct.unpack_from("<3i", blob, pos + 1)
        pos += 13
    if n_face and (faces.min() < 0 or faces.max() >= n_vertex):
        raise FileFormatError("face index out of range", offset=pos)
    return verts, faces
