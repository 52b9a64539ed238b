"""Triangle mesh file I/O: ASCII OBJ and PLY (ASCII / binary little-endian).

OBJ handling is limited to ``v`` and ``f`` records; anything else is skipped
with a warning.  Polygonal ``f`` records are fan-triangulated preserving the
file's winding.  PLY vertices must carry float or double x/y/z properties
(extra properties are skipped); faces come from a ``vertex_indices`` or
``vertex_index`` list property.

Writers emit full double precision (``%.17g`` in text, float64 in binary) so
a save/load round trip reproduces coordinates exactly.
"""

from __future__ import annotations

import struct
import warnings
from pathlib import Path

import numpy as np

from .geometry import TriMesh


class MeshFormatError(Exception):
    """Unparseable or out-of-contract mesh file; carries line/offset info."""


_PLY_SCALARS = {
    "char": ("b", 1), "int8": ("b", 1),
    "uchar": ("B", 1), "uint8": ("B", 1),
    "short": ("h", 2), "int16": ("h", 2),
    "ushort": ("H", 2), "uint16": ("H", 2),
    "int": ("i", 4), "int32": ("i", 4),
    "uint": ("I", 4), "uint32": ("I", 4),
    "float": ("f", 4), "float32": ("f", 4),
    "double": ("d", 8), "float64": ("d", 8),
}


def load_mesh(path: str | Path) -> TriMesh:
    """Load a TriMesh from an OBJ or PLY file (sniffed by content)."""
    path = Path(path)
    head = path.open("rb").read(4)
    if head[:3] == b"ply":
        return _load_ply(path)
    return _load_obj(path)


def save_mesh(mesh: TriMesh, path: str | Path, format: str | None = None) -> None:
    """Write a TriMesh as ``obj``, ``ply`` (ASCII) or ``ply-binary``.

    When ``format`` is omitted it is inferred from the file suffix.
    """
    path = Path(path)
    if format is None:
        format = "obj" if path.suffix.lower() == ".obj" else "ply"
    if format == "obj":
        _save_obj(mesh, path)
    elif format == "ply":
        _save_ply_ascii(mesh, path)
    elif format == "ply-binary":
        _save_ply_binary(mesh, path)
    else:
        raise MeshFormatError(f"unknown mesh format {format!r}")


def _load_obj(path: Path) -> TriMesh:
    vertices: list[tuple[float, float, float]] = []
    faces: list[tuple[int, int, int]] = []
    skipped: set[str] = set()
    with path.open("r") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            tag, *rest = line.split()
            if tag == "v":
                if len(rest) < 3:
                    raise MeshFormatError(f"{path}:{lineno}: vertex needs 3 coordinates")
                try:
                    vertices.append((float(rest[0]), float(rest[1]), float(rest[2])))
                except ValueError as exc:
                    raise MeshFormatError(f"{path}:{lineno}: bad vertex: {exc}") from exc
            elif tag == "f":
                if len(rest) < 3:
                    raise MeshFormatError(f"{path}:{lineno}: face needs >= 3 indices")
                try:
                    # take the vertex index before any '/'; OBJ is 1-based
                    idx = [int(tok.split("/")[0]) for tok in rest]
                except ValueError as exc:
                    raise MeshFormatError(f"{path}:{lineno}: bad face: {exc}") from exc
                resolved = []
                for i in idx:
                    j = i - 1 if i > 0 else len(vertices) + i  # negatives count from the end
                    if not 0 <= j < len(vertices):
                        raise MeshFormatError(
                            f"{path}:{lineno}: face index {i} out of range "
                            f"(have {len(vertices)} vertices)"
                        )
                    resolved.append(j)
                for k in range(1, len(resolved) - 1):
                    faces.append((resolved[0], resolved[k], resolved[k + 1]))
            else:
                skipped.add(tag)
    if skipped:
        warnings.warn(f"{path}: ignored OBJ records: {sorted(skipped)}", stacklevel=2)
    return TriMesh(
        np.asarray(vertices, dtype=float).reshape(-1, 3),
        np.asarray(faces, dtype=np.int64).reshape(-1, 3),
    )


def _save_obj(mesh: TriMesh, path: Path) -> None:
    with path.open("w") as fh:
        for v in mesh.vertices:
            fh.write(f"v {v[0]:.17g} {v[1]:.17g} {v[2]:.17g}\n")
        for f in mesh.faces:
            fh.write(f"f {f[0] + 1} {f[1] + 1} {f[2] + 1}\n")


class _PlyProperty:
    def __init__(self, name: str, dtype: str, is_list: bool, count_type: str | None = None):
        self.name = name
        self.dtype = dtype
        self.is_list = is_list
        self.count_type = count_type


def _parse_ply_header(fh) -> tuple[str, list[tuple[str, int, list[_PlyProperty]]]]:
    magic = fh.readline().strip()
    if magic != b"ply":
        raise MeshFormatError("missing 'ply' magic")
    fmt = None
    elements: list[tuple[str, int, list[_PlyProperty]]] = []
    lineno = 1
    while True:
        raw = fh.readline()
        lineno += 1
        if not raw:
            raise MeshFormatError(f"line {lineno}: header ended before end_header")
        tokens = raw.decode("ascii", errors="replace").split()
        if not tokens or tokens[0] == "comment":
            continue
        if tokens[0] == "format":
            if tokens[1] == "ascii":
                fmt = "ascii"
            elif tokens[1] == "binary_little_endian":
                fmt = "binary"
            else:
                raise MeshFormatError(f"line {lineno}: unsupported PLY format {tokens[1]}")
        elif tokens[0] == "element":
            elements.append((tokens[1], int(tokens[2]), []))
        elif tokens[0] == "property":
            if not elements:
                raise MeshFormatError(f"line {lineno}: property before element")
            if tokens[1] == "list":
                elements[-1][2].append(
                    _PlyProperty(tokens[4], tokens[3], True, count_type=tokens[2])
                )
            else:
                elements[-1][2].append(_PlyProperty(tokens[2], tokens[1], False))
        elif tokens[0] == "end_header":
            break
        else:
            raise MeshFormatError(f"line {lineno}: unknown header record {tokens[0]!r}")
    if fmt is None:
        raise MeshFormatError("PLY header missing format record")
    return fmt, elements


def _load_ply(path: Path) -> TriMesh:
    with path.open("rb") as fh:
        fmt, elements = _parse_ply_header(fh)
        vertices = np.zeros((0, 3))
        faces: list[tuple[int, int, int]] = []
        for name, count, props in elements:
            if fmt == "ascii":
                rows = _read_ascii_element(fh, count, props, path)
            else:
                rows = _read_binary_element(fh, count, props, path)
            if name == "vertex":
                try:
                    cols = {p.name: i for i, p in enumerate(props)}
                    vertices = np.asarray(
                        [[r[cols["x"]], r[cols["y"]], r[cols["z"]]] for r in rows], dtype=float
                    ).reshape(-1, 3)
                except KeyError as exc:
                    raise MeshFormatError(f"{path}: vertex element missing {exc}") from exc
            elif name == "face":
                list_col = next((i for i, p in enumerate(props) if p.is_list), None)
                if list_col is None:
                    raise MeshFormatError(f"{path}: face element has no index list property")
                for r in rows:
                    idx = r[list_col]
                    for k in range(1, len(idx) - 1):
                        faces.append((int(idx[0]), int(idx[k]), int(idx[k + 1])))
        f = np.asarray(faces, dtype=np.int64).reshape(-1, 3)
        if f.size and (f.min() < 0 or f.max() >= len(vertices)):
            raise MeshFormatError(
                f"{path}: face index out of range (max {f.max()}, {len(vertices)} vertices)"
            )
        return TriMesh(vertices, f)


def _read_ascii_element(fh, count: int, props: list[_PlyProperty], path: Path) -> list[list]:
    rows = []
    for _ in range(count):
        raw = fh.readline()
        if not raw:
            raise MeshFormatError(f"{path}: unexpected EOF in ASCII body")
        tokens = raw.split()
        row: list = []
        pos = 0
        for p in props:
            try:
                if p.is_list:
                    n = int(tokens[pos]); pos += 1
                    row.append([float(t) for t in tokens[pos : pos + n]])
                    pos += n
                else:
                    row.append(float(tokens[pos])); pos += 1
            except (IndexError, ValueError) as exc:
                raise MeshFormatError(f"{path}: bad ASCII element row: {exc}") from exc
        rows.append(row)
    return rows


def _read_binary_element(fh, count: int, props: list[_PlyProperty], path: Path) -> list[list]:
    rows = []
    for _ in range(count):
        row: list = []
        for p in props:
            if p.is_list:
                cfmt, csize = _PLY_SCALARS[p.count_type]
                buf = fh.read(csize)
                if len(buf) != csize:
                    raise MeshFormatError(f"{path}: unexpected EOF at offset {fh.tell()}")
                n = struct.unpack("<" + cfmt, buf)[0]
                ifmt, isize = _PLY_SCALARS[p.dtype]
                buf = fh.read(isize * n)
                if len(buf) != isize * n:
                    raise MeshFormatError(f"{path}: unexpected EOF at offset {fh.tell()}")
                row.append(list(struct.unpack("<" + ifmt * n, buf)))
            else:
                ifmt, isize = _PLY_SCALARS[p.dtype]
                buf = fh.read(isize)
                if len(buf) != isize:
                    raise MeshFormatError(f"{path}: unexpected EOF at offset {fh.tell()}")
                row.append(struct.unpack("<" + ifmt, buf)[0])
        rows.append(row)
    return rows


def _save_ply_ascii(mesh: TriMesh, path: Path) -> None:
    with path.open("w") as fh:
        fh.write("ply\nformat ascii 1.0\n")
        fh.write(f"element vertex {mesh.n_vertices}\n")
        fh.write("property double x\nproperty double y\nproperty double z\n")
        fh.write(f"element face {mesh.n_faces}\n")
        fh.write("property list uchar int vertex_indices\n")
        fh.write("end_header\n")
        for v in mesh.vertices:
            fh.write(f"{v[0]:.17g} {v[1]:.17g} {v[2]:.17g}\n")
        for f in mesh.faces:
            fh.write(f"3 {f[0]} {f[1]} {f[2]}\n")


def _save_ply_binary(mesh: TriMesh, path: Path) -> None:
    with path.open("wb") as fh:
        header = (
            "ply\nformat binary_little_endian 1.0\n"
            f"element vertex {mesh.n_vertices}\n"
            "property double x\nproperty double y\nproperty double z\n"
            f"element face {mesh.n_faces}\n"
            "property list uchar int vertex_indices\n"
            "end_header\n"
        )
        fh.write(header.encode("ascii"))
        fh.write(mesh.vertices.astype("<f8").tobytes())
        for f in mesh.faces:
            fh.write(struct.pack("<Biii", 3, int(f[0]), int(f[1]), int(f[2])))
