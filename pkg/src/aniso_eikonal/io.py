"""Readers and writers for the text formats used by the toolkit.

Surfaces come in as ASCII OFF or legacy VTK polydata; results go out as
legacy VTK polydata with point/cell data, plus plain CSV tables.
"""
from __future__ import annotations

import csv
import os
from typing import Dict, Iterator, List, Mapping, Optional, Tuple

import numpy as np


class MeshFormatError(ValueError):
    """Raised when a mesh file cannot be parsed under its declared format."""


def _tokens(path: str) -> Iterator[str]:
    with open(path, "r") as fh:
        for line in fh:
            line = line.split("#", 1)[0]
            for tok in line.split():
                yield tok


def read_off(path: str) -> Tuple[np.ndarray, np.ndarray]:
    """Read an ASCII OFF file, returning ``(vertices, triangles)``."""
    toks = _tokens(path)
    try:
        head = next(toks)
        if head == "OFF":
            nv, nf = int(next(toks)), int(next(toks))
            next(toks)  # edge count, unused
        elif head.startswith("OFF"):
            raise MeshFormatError(f"{path}: unsupported OFF variant {head!r}")
        else:
            # header and counts on one line without separator is not OFF
            raise MeshFormatError(f"{path}: missing OFF header")
        verts = np.array([float(next(toks)) for _ in range(3 * nv)]).reshape(nv, 3)
        faces = []
        for f in range(nf):
            k = int(next(toks))
            idx = [int(next(toks)) for _ in range(k)]
            if k != 3:
                raise MeshFormatError(
                    f"{path}: face {f} has {k} vertices; only triangles are supported"
                )
            faces.append(idx)
    except StopIteration:
        raise MeshFormatError(f"{path}: unexpected end of file") from None
    except ValueError as exc:
        if isinstance(exc, MeshFormatError):
            raise
        raise MeshFormatError(f"{path}: {exc}") from None
    return verts, np.array(faces, dtype=np.int64).reshape(-1, 3)


def write_off(path: str, vertices: np.ndarray, triangles: np.ndarray) -> None:
    with open(path, "w") as fh:
        fh.write("OFF\n")
        fh.write(f"{len(vertices)} {len(triangles)} 0\n")
        for v in vertices:
            fh.write(f"{float(v[0])!r} {float(v[1])!r} {float(v[2])!r}\n")
        for t in triangles:
            fh.write(f"3 {t[0]} {t[1]} {t[2]}\n")


class VTKData:
    """In-memory view of a legacy VTK polydata file.

    ``point_data`` and ``cell_data`` map array names to arrays shaped
    ``(n,)``, ``(n, 3)`` or ``(n, 3, 3)`` for scalars, vectors and tensors.
    """

    def __init__(self, points, triangles, point_data=None, cell_data=None):
        self.points = np.asarray(points, dtype=float)
        self.triangles = np.asarray(triangles, dtype=np.int64)
        self.point_data: Dict[str, np.ndarray] = dict(point_data or {})
        self.cell_data: Dict[str, np.ndarray] = dict(cell_data or {})


def _read_attributes(toks: List[str], pos: int, n: int, store: Dict[str, np.ndarray]) -> int:
    """Parse attribute blocks until the next section keyword; return new position."""
    while pos < len(toks):
        kw = toks[pos].upper()
        if kw in ("POINT_DATA", "CELL_DATA"):
            return pos
        if kw == "SCALARS":
            name = toks[pos + 1]
            pos += 3
            ncomp = 1
            if toks[pos].upper() != "LOOKUP_TABLE" and toks[pos].lstrip("-").isdigit():
                ncomp = int(toks[pos])
                pos += 1
            if toks[pos].upper() == "LOOKUP_TABLE":
                pos += 2
            vals = np.array(toks[pos:pos + n * ncomp], dtype=float)
            pos += n * ncomp
            store[name] = vals if ncomp == 1 else vals.reshape(n, ncomp)
        elif kw in ("VECTORS", "NORMALS"):
            name = toks[pos + 1]
            pos += 3
            store[name] = np.array(toks[pos:pos + 3 * n], dtype=float).reshape(n, 3)
            pos += 3 * n
        elif kw == "TENSORS":
            name = toks[pos + 1]
            pos += 3
            store[name] = np.array(toks[pos:pos + 9 * n], dtype=float).reshape(n, 3, 3)
            pos += 9 * n
        elif kw == "FIELD":
            narr = int(toks[pos + 2])
            pos += 3
            for _ in range(narr):
                name, ncomp, ntup = toks[pos], int(toks[pos + 1]), int(toks[pos + 2])
                pos += 4
                vals = np.array(toks[pos:pos + ncomp * ntup], dtype=float)
                pos += ncomp * ntup
                store[name] = vals if ncomp == 1 else vals.reshape(ntup, ncomp)
        else:
            raise MeshFormatError(f"unsupported VTK attribute keyword {toks[pos]!r}")
    return pos


def read_vtk(path: str) -> VTKData:
    """Read an ASCII legacy VTK POLYDATA file made of triangles."""
    with open(path, "r") as fh:
        lines = fh.read().splitlines()
    if len(lines) < 4 or not lines[0].startswith("# vtk DataFile"):
        raise MeshFormatError(f"{path}: missing legacy VTK header")
    if lines[2].strip().upper() != "ASCII":
        raise MeshFormatError(f"{path}: only ASCII VTK is supported")
    toks = " ".join(lines[3:]).split()
    if len(toks) < 2 or toks[0].upper() != "DATASET" or toks[1].upper() != "POLYDATA":
        raise MeshFormatError(f"{path}: expected DATASET POLYDATA")
    pos = 2
    points = None
    tris: List[List[int]] = []
    point_data: Dict[str, np.ndarray] = {}
    cell_data: Dict[str, np.ndarray] = {}
    try:
        while pos < len(toks):
            kw = toks[pos].upper()
            if kw == "POINTS":
                n = int(toks[pos + 1])
                pos += 3
                points = np.array(toks[pos:pos + 3 * n], dtype=float).reshape(n, 3)
                pos += 3 * n
            elif kw == "POLYGONS":
                ncell = int(toks[pos + 1])
                pos += 3
                for c in range(ncell):
                    k = int(toks[pos])
                    if k != 3:
                        raise MeshFormatError(
                            f"{path}: unsupported cell type (polygon {c} has {k} vertices)"
                        )
                    tris.append([int(t) for t in toks[pos + 1:pos + 4]])
                    pos += 4
            elif kw in ("VERTICES", "LINES", "TRIANGLE_STRIPS"):
                raise MeshFormatError(f"{path}: unsupported cell type {kw}")
            elif kw == "POINT_DATA":
                pos = _read_attributes(toks, pos + 2, int(toks[pos + 1]), point_data)
            elif kw == "CELL_DATA":
                pos = _read_attributes(toks, pos + 2, int(toks[pos + 1]), cell_data)
            else:
                raise MeshFormatError(f"{path}: unexpected token {toks[pos]!r}")
    except (IndexError, ValueError) as exc:
        if isinstance(exc, MeshFormatError):
            raise
        raise MeshFormatError(f"{path}: malformed VTK file ({exc})") from None
    if points is None:
        raise MeshFormatError(f"{path}: no POINTS section")
    return VTKData(points, np.array(tris, dtype=np.int64).reshape(-1, 3), point_data, cell_data)


def _write_attributes(fh, arrays: Mapping[str, np.ndarray]) -> None:
    for name, arr in arrays.items():
        arr = np.asarray(arr, dtype=float)
        if arr.ndim == 1:
            fh.write(f"SCALARS {name} double 1\nLOOKUP_TABLE default\n")
            fh.write("\n".join(repr(float(x)) for x in arr) + "\n")
        elif arr.ndim == 2 and arr.shape[1] == 3:
            fh.write(f"VECTORS {name} double\n")
            for row in arr:
                fh.write(" ".join(repr(float(x)) for x in row) + "\n")
        elif arr.ndim == 3 and arr.shape[1:] == (3, 3):
            fh.write(f"TENSORS {name} double\n")
            for mat in arr:
                for row in mat:
                    fh.write(" ".join(repr(float(x)) for x in row) + "\n")
        else:
            raise ValueError(f"array {name!r} has unsupported shape {arr.shape}")


def write_vtk(
    path: str,
    points: np.ndarray,
    triangles: np.ndarray,
    point_data: Optional[Mapping[str, np.ndarray]] = None,
    cell_data: Optional[Mapping[str, np.ndarray]] = None,
    title: str = "aniso_eikonal output",
) -> None:
    """Write ASCII legacy VTK polydata with optional point and cell arrays."""
    points = np.asarray(points, dtype=float)
    triangles = np.asarray(triangles, dtype=np.int64)
    with open(path, "w") as fh:
        fh.write("# vtk DataFile Version 3.0\n")
        fh.write(title.replace("\n", " ")[:255] + "\n")
        fh.write("ASCII\nDATASET POLYDATA\n")
        fh.write(f"POINTS {len(points)} double\n")
        for p in points:
            fh.write(f"{float(p[0])!r} {float(p[1])!r} {float(p[2])!r}\n")
        fh.write(f"POLYGONS {len(triangles)} {4 * len(triangles)}\n")
        for t in triangles:
            fh.write(f"3 {t[0]} {t[1]} {t[2]}\n")
        if point_data:
            fh.write(f"POINT_DATA {len(points)}\n")
            _write_attributes(fh, point_data)
        if cell_data:
            fh.write(f"CELL_DATA {len(triangles)}\n")
            _write_attributes(fh, cell_data)


MEASUREMENT_HEADER = ["x_mm", "y_mm", "z_mm", "lat_ms"]


def read_measurements(path: str) -> Tuple[np.ndarray, np.ndarray]:
    """Read a measurement CSV ``x_mm,y_mm,z_mm,lat_ms`` into points and times."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            return np.zeros((0, 3)), np.zeros(0)
        if header != MEASUREMENT_HEADER:
            raise ValueError(f"{path}: expected header {','.join(MEASUREMENT_HEADER)}, got {header}")
        rows = [r for r in reader if r and any(c.strip() for c in r)]
    data = np.array(rows, dtype=float).reshape(-1, 4)
    return data[:, :3], data[:, 3]


def write_measurements(path: str, points: np.ndarray, times: np.ndarray) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(MEASUREMENT_HEADER)
        for p, t in zip(np.asarray(points), np.asarray(times)):
            w.writerow([repr(float(p[0])), repr(float(p[1])), repr(float(p[2])), repr(float(t))])


def write_activation_csv(path: str, u: np.ndarray) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["vertex_id", "u_ms"])
        for i, val in enumerate(np.asarray(u)):
            w.writerow([i, repr(float(val))])


def read_tensor_csv(path: str) -> np.ndarray:
    """Read per-triangle log-Euclidean parameters from ``tri_id,d1,d2,d3``."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = [h.strip() for h in next(reader)]
        if header != ["tri_id", "d1", "d2", "d3"]:
            raise ValueError(f"{path}: expected header tri_id,d1,d2,d3, got {header}")
        rows = [r for r in reader if r]
    data = np.array(rows, dtype=float).reshape(-1, 4)
    order = np.argsort(data[:, 0], kind="stable")
    ids = data[order, 0].astype(np.int64)
    if not np.array_equal(ids, np.arange(len(ids))):
        raise ValueError(f"{path}: tri_id must enumerate 0..n-1 exactly once")
    return data[order, 1:]


def write_tensor_csv(path: str, params: np.ndarray) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["tri_id", "d1", "d2", "d3"])
        for j, d in enumerate(np.asarray(params)):
            w.writerow([j] + [repr(float(x)) for x in d])


def write_trace_csv(path: str, trace: List[Mapping[str, float]]) -> None:
    cols = ["iter", "data_term", "tv_term", "L", "step_norm"]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(cols)
        for row in trace:
            w.writerow([row[c] if c == "iter" else repr(float(row[c])) for c in cols])


def ensure_dir(path: str) -> str:
    os.makedirs(path, exist_ok=True)
    return path
