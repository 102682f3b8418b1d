"""Minimal PLY reader/writer for vertex point clouds (ASCII and binary little-endian)."""

from __future__ import annotations

import numpy as np

from .occupancy import PointCloud

PLY_TYPES = {
    "char": "i1", "int8": "i1", "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2", "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4", "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4", "double": "f8", "float64": "f8",
}


class PlyError(ValueError):
    pass


def _parse_header(blob: bytes):
    end = blob.find(b"end_header")
    if not blob.startswith(b"ply") or end < 0:
        raise PlyError("not a PLY file (missing 'ply' magic or end_header)")
    nl = blob.find(b"\n", end)
    if nl < 0:
        raise PlyError(f"header not terminated at byte {end}")
    lines = blob[:nl].decode("ascii", errors="replace").splitlines()
    fmt = None
    elements = []  # (name, count, [(prop, dtype) | (prop, ('list', count_t, item_t))])
    for line in lines[1:]:
        parts = line.split()
        if not parts or parts[0] in ("comment", "obj_info", "end_header"):
            continue
        if parts[0] == "format":
            fmt = parts[1]
        elif parts[0] == "element":
            elements.append((parts[1], int(parts[2]), []))
        elif parts[0] == "property":
            if not elements:
                raise PlyError("property before any element")
            if parts[1] == "list":
                elements[-1][2].append((parts[4], ("list", PLY_TYPES[parts[2]],
                                                   PLY_TYPES[parts[3]])))
            else:
                if parts[1] not in PLY_TYPES:
                    raise PlyError(f"unknown property type {parts[1]!r}")
                elements[-1][2].append((parts[2], PLY_TYPES[parts[1]]))
    if fmt not in ("ascii", "binary_little_endian"):
        raise PlyError(f"unsupported PLY encoding {fmt!r}")
    return fmt, elements, nl + 1


def _cloud_from(columns: dict) -> PointCloud:
    for axis in "xyz":
        if axis not in columns:
            raise PlyError(f"vertex element lacks property {axis!r}")
    pts = np.stack([columns[a].astype(np.float64) for a in "xyz"], axis=1)
    colors = None
    if all(c in columns for c in ("red", "green", "blue")):
        colors = np.stack([columns[c].astype(np.float64) for c in ("red", "green", "blue")],
                          axis=1) / 255.0
    return PointCloud(pts, colors, source="ply-file")


def load_ply(path) -> PointCloud:
    with open(path, "rb") as fh:
        blob = fh.read()
    fmt, elements, offset = _parse_header(blob)
    if fmt == "ascii":
        return _read_ascii(blob[offset:], elements, offset)
    return _read_binary(blob, offset, elements)


def _read_ascii(body: bytes, elements, offset: int = 0) -> PointCloud:
    tokens = body.split()
    pos = 0
    columns = None
    for name, count, props in elements:
        cols = {p: [] for p, _ in props}
        for row in range(count):
            for p, t in props:
                if pos >= len(tokens):
                    raise PlyError(f"truncated ASCII payload in element {name!r} row {row} "
                                   f"(data ends at byte offset {offset + len(body)})")
                if isinstance(t, tuple):
                    k = int(tokens[pos])
                    pos += 1 + k
                else:
                    cols[p].append(tokens[pos])
                    pos += 1
        if name == "vertex":
            columns = {}
            for p, t in props:
                if isinstance(t, tuple):
                    continue
                kind = np.float64 if t[0] == "f" else np.int64
                columns[p] = np.array([kind(v) for v in cols[p]], dtype=kind)
            break
    if columns is None:
        raise PlyError("no vertex element")
    return _cloud_from(columns)


def _read_binary(blob: bytes, offset: int, elements) -> PointCloud:
    for name, count, props in elements:
        if any(isinstance(t, tuple) for _, t in props):
            if name == "vertex":
                raise PlyError("list properties on vertices are not supported")
            raise PlyError(f"cannot skip list element {name!r} before vertices")
        dtype = np.dtype([(p, "<" + t) for p, t in props])
        need = dtype.itemsize * count
        if offset + need > len(blob):
            raise PlyError(f"truncated binary payload: element {name!r} needs {need} bytes "
                           f"at byte offset {offset}, file has {len(blob)}")
        if name == "vertex":
            data = np.frombuffer(blob, dtype=dtype, count=count, offset=offset)
            return _cloud_from({p: data[p] for p, _ in props})
        offset += need
    raise PlyError("no vertex element")


def write_ply(path, cloud: PointCloud, binary: bool = True, double: bool = False):
    """Write vertices (and u8 colors when present)."""
    ft = "double" if double else "float"
    n = len(cloud)
    header = ["ply", f"format {'binary_little_endian' if binary else 'ascii'} 1.0",
              f"element vertex {n}", f"property {ft} x", f"property {ft} y", f"property {ft} z"]
    rgb = None
    if cloud.colors is not None:
        header += ["property uchar red", "property uchar green", "property uchar blue"]
        rgb = np.clip(np.round(cloud.colors * 255), 0, 255).astype(np.uint8)
    header.append("end_header")
    head = ("\n".join(header) + "\n").encode("ascii")
    with open(path, "wb") as fh:
        fh.write(head)
        if binary:
            fields = [("x", "<f8" if double else "<f4"), ("y", "<f8" if double else "<f4"),
                      ("z", "<f8" if double else "<f4")]
            if rgb is not None:
                fields += [("red", "u1"), ("green", "u1"), ("blue", "u1")]
            rec = np.empty(n, dtype=np.dtype(fields))
            for k, a in enumerate("xyz"):
                rec[a] = cloud.points[:, k]
            if rgb is not None:
                rec["red"], rec["green"], rec["blue"] = rgb.T
            fh.write(rec.tobytes())
        else:
            for i in range(n):
                vals = [repr(float(np.float64(v) if double else np.float32(v)))
                        for v in cloud.points[i]]
                if rgb is not None:
                    vals += [str(int(c)) for c in rgb[i]]
                fh.write((" ".join(vals) + "\n").encode("ascii"))
