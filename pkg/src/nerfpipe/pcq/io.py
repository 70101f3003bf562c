"""Point-cloud file readers and writers: PLY (ascii, binary little-endian) and XYZ text."""

from __future__ import annotations

from pathlib import Path
from typing import Union

import numpy as np

from ..errors import ParseError

PathLike = Union[str, Path]

# PLY scalar type names, both the classic and the sized spellings
_PLY_TYPES = {
    "char": "i1", "int8": "i1",
    "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2",
    "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4",
    "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4",
    "double": "f8", "float64": "f8",
}


def as_points(points) -> np.ndarray:
    """Coerce to a float64 array of shape (N, 3) with finite entries."""
    arr = np.asarray(points, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[1] != 3:
        raise ParseError(f"expected an (N, 3) array of points, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ParseError("point coordinates must be finite")
    return arr


def read_xyz(path: PathLike) -> np.ndarray:
    """Whitespace-delimited ``x y z [extra...]`` rows; ``#`` starts a comment."""
    rows = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            text = line.split("#", 1)[0].strip()
            if not text:
                continue
            fields = text.replace(",", " ").split()
            if len(fields) < 3:
                raise ParseError(f"expected at least 3 coordinates, got {len(fields)}", line=lineno)
            try:
                xyz = [float(v) for v in fields[:3]]
            except ValueError:
                raise ParseError(f"non-numeric coordinate in {text!r}", line=lineno) from None
            if not all(np.isfinite(xyz)):
                raise ParseError("non-finite coordinate", line=lineno)
            rows.append(xyz)
    return np.array(rows, dtype=np.float64).reshape(-1, 3)


def _parse_ply_header(fh) -> tuple[str, int, list, int, int]:
    """Return (format, vertex_count, vertex_properties, bytes_before_vertices, header_lines)."""
    first = fh.readline()
    if first.strip() != b"ply":
        raise ParseError("missing 'ply' magic", line=1)
    fmt = None
    elements: list[list] = []  # [name, count, [(prop, dtype)]]
    lineno = 1
    while True:
        raw = fh.readline()
        lineno += 1
        if not raw:
            raise ParseError("header ended without 'end_header'", line=lineno)
        try:
            line = raw.decode("ascii").strip()
        except UnicodeDecodeError:
            raise ParseError("header is not ASCII", line=lineno) from None
        if not line or line.startswith(("comment", "obj_info")):
            continue
        parts = line.split()
        key = parts[0]
        if key == "end_header":
            break
        if key == "format":
            if len(parts) != 3 or parts[1] not in ("ascii", "binary_little_endian", "binary_big_endian"):
                raise ParseError(f"bad format line {line!r}", line=lineno)
            if parts[1] == "binary_big_endian":
                raise ParseError("binary_big_endian PLY is not supported", line=lineno)
            fmt = parts[1]
        elif key == "element":
            if len(parts) != 3:
                raise ParseError(f"bad element line {line!r}", line=lineno)
            try:
                count = int(parts[2])
            except ValueError:
                raise ParseError(f"bad element count {parts[2]!r}", line=lineno) from None
            if count < 0:
                raise ParseError("negative element count", line=lineno)
            elements.append([parts[1], count, []])
        elif key == "property":
            if not elements:
                raise ParseError("property before any element", line=lineno)
            if parts[1] == "list":
                if len(parts) != 5:
                    raise ParseError(f"bad list property {line!r}", line=lineno)
                elements[-1][2].append((parts[4], "list"))
                continue
            if len(parts) != 3 or parts[1] not in _PLY_TYPES:
                raise ParseError(f"bad property line {line!r}", line=lineno)
            elements[-1][2].append((parts[2], _PLY_TYPES[parts[1]]))
        else:
            raise ParseError(f"unknown header keyword {key!r}", line=lineno)
    if fmt is None:
        raise ParseError("header has no format line", line=lineno)
    if not elements or elements[0][0] != "vertex":
        raise ParseError("the first element must be 'vertex'", line=lineno)
    props = elements[0][2]
    names = [p for p, _ in props]
    for axis in ("x", "y", "z"):
        if axis not in names:
            raise ParseError(f"vertex element has no {axis!r} property", line=lineno)
    if any(t == "list" for _, t in props):
        raise ParseError("list properties on vertices are not supported", line=lineno)
    return fmt, elements[0][1], props, fh.tell(), lineno


def read_ply(path: PathLike) -> np.ndarray:
    """Read the x/y/z vertex properties of a PLY file."""
    with open(path, "rb") as fh:
        fmt, count, props, _, header_lines = _parse_ply_header(fh)
        names = [p for p, _ in props]
        idx = [names.index(a) for a in ("x", "y", "z")]
        if fmt == "ascii":
            points = np.empty((count, 3), dtype=np.float64)
            lineno = header_lines
            filled = 0
            for raw in fh:
                lineno += 1
                text = raw.decode("ascii", errors="replace").strip()
                if not text:
                    continue
                if filled == count:
                    # trailing elements (faces etc.) are not needed
                    break
                fields = text.split()
                if len(fields) != len(props):
                    raise ParseError(f"expected {len(props)} values, got {len(fields)}", line=lineno)
                try:
                    points[filled] = [float(fields[i]) for i in idx]
                except ValueError:
                    raise ParseError(f"non-numeric vertex value in {text!r}", line=lineno) from None
                filled += 1
            if filled != count:
                raise ParseError(f"header declares {count} vertices, file has {filled}", line=lineno)
        else:
            dtype = np.dtype([(n, "<" + t) for n, t in props])
            blob = fh.read(count * dtype.itemsize)
            if len(blob) < count * dtype.itemsize:
                got = len(blob) // dtype.itemsize
                raise ParseError(f"header declares {count} vertices, file has {got}", line=header_lines)
            rec = np.frombuffer(blob, dtype=dtype, count=count)
            points = np.column_stack([rec["x"], rec["y"], rec["z"]]).astype(np.float64)
    if not np.all(np.isfinite(points)):
        raise ParseError("non-finite vertex coordinate")
    return points


def read_point_cloud(path: PathLike) -> np.ndarray:
    """Load a cloud as an (N, 3) float64 array; the format is sniffed from the magic."""
    path = Path(path)
    with open(path, "rb") as fh:
        magic = fh.read(4)
    if magic.rstrip(b"\r\n") == b"ply" or magic == b"ply\n":
        return read_ply(path)
    return read_xyz(path)


def write_xyz(path: PathLike, points) -> None:
    pts = as_points(points)
    np.savetxt(path, pts, fmt="%.17g")


def write_ply(path: PathLike, points, binary: bool = False) -> None:
    """Write an xyz-only PLY; coordinates are stored as doubles."""
    pts = as_points(points)
    fmt = "binary_little_endian" if binary else "ascii"
    header = (
        "ply\n"
        f"format {fmt} 1.0\n"
        f"element vertex {len(pts)}\n"
        "property double x\nproperty double y\nproperty double z\n"
        "end_header\n"
    )
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        if binary:
            fh.write(pts.astype("<f8").tobytes())
        else:
            for x, y, z in pts.tolist():
                fh.write(f"{x!r} {y!r} {z!r}\n".encode("ascii"))
