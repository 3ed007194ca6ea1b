"""Triangulated surfaces: loading, validation, cached geometry and point projection."""
from __future__ import annotations

import logging
import os
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.spatial import cKDTree

from . import io as _io

logger = logging.getLogger(__name__)


class MeshError(ValueError):
    """Raised for topologically or geometrically invalid meshes."""


def _sorted_edges(triangles: np.ndarray) -> np.ndarray:
    e = np.concatenate([triangles[:, [1, 2]], triangles[:, [2, 0]], triangles[:, [0, 1]]])
    return np.sort(e, axis=1)


@dataclass(frozen=True)
class TriangleMesh:
    """Vertices (mm) and vertex-index triangles of a 2-D surface in R^3.

    Construction checks index ranges, distinct corners and edge-manifoldness
    (no edge shared by more than two triangles).
    """

    vertices: np.ndarray
    triangles: np.ndarray
    source: str = ""
    fmt: str = "array"

    def __post_init__(self):
        verts = np.ascontiguousarray(self.vertices, dtype=float)
        tris = np.ascontiguousarray(self.triangles, dtype=np.int64)
        if verts.ndim != 2 or verts.shape[1] != 3:
            raise MeshError(f"vertices must have shape (n, 3), got {verts.shape}")
        if tris.ndim != 2 or tris.shape[1] != 3:
            raise MeshError(f"triangles must have shape (m, 3), got {tris.shape}")
        if len(tris) == 0:
            raise MeshError("mesh has no triangles")
        if tris.min() < 0 or tris.max() >= len(verts):
            bad = int(np.flatnonzero((tris < 0).any(1) | (tris >= len(verts)).any(1))[0])
            raise MeshError(f"triangle {bad} references an out-of-range vertex index")
        same = (tris[:, 0] == tris[:, 1]) | (tris[:, 1] == tris[:, 2]) | (tris[:, 0] == tris[:, 2])
        if same.any():
            raise MeshError(f"triangle {int(np.flatnonzero(same)[0])} repeats a vertex index")
        if not np.isfinite(verts).all():
            raise MeshError("vertex coordinates must be finite")
        edges, counts = np.unique(_sorted_edges(tris), axis=0, return_counts=True)
        if (counts > 2).any():
            k = int(np.flatnonzero(counts > 2)[0])
            raise MeshError(
                f"non-manifold edge ({edges[k, 0]}, {edges[k, 1]}) shared by {counts[k]} triangles"
            )
        verts.setflags(write=False)
        tris.setflags(write=False)
        object.__setattr__(self, "vertices", verts)
        object.__setattr__(self, "triangles", tris)

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_triangles(self) -> int:
        return len(self.triangles)

    def scaled(self, factor: float) -> "TriangleMesh":
        return TriangleMesh(self.vertices * factor, self.triangles, self.source, self.fmt)


def load_mesh(path: str, fmt: Optional[str] = None) -> TriangleMesh:
    """Load an OFF or legacy-ASCII VTK surface; ``fmt`` defaults to the extension."""
    if not os.path.exists(path):
        raise FileNotFoundError(f"mesh file not found: {path}")
    if fmt is None:
        ext = os.path.splitext(path)[1].lower()
        fmt = {".off": "OFF", ".vtk": "VTK"}.get(ext)
        if fmt is None:
            raise MeshError(f"cannot infer mesh format from extension of {path}")
    fmt = fmt.upper()
    if fmt == "OFF":
        verts, tris = _io.read_off(path)
    elif fmt in ("VTK", "VTK-LEGACY-ASCII"):
        data = _io.read_vtk(path)
        verts, tris = data.points, data.triangles
        fmt = "VTK"
    else:
        raise MeshError(f"unsupported mesh format {fmt!r}")
    return TriangleMesh(verts, tris, source=os.path.abspath(path), fmt=fmt)


def triangle_areas(vertices: np.ndarray, triangles: np.ndarray) -> np.ndarray:
    a, b, c = (vertices[triangles[:, k]] for k in range(3))
    return 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1)


def triangle_angles(vertices: np.ndarray, triangles: np.ndarray) -> np.ndarray:
    """Interior angles in degrees, shape ``(m, 3)``, angle k at corner k."""
    out = np.empty(triangles.shape, dtype=float)
    for k in range(3):
        p = vertices[triangles[:, k]]
        q = vertices[triangles[:, (k + 1) % 3]] - p
        r = vertices[triangles[:, (k + 2) % 3]] - p
        cross = np.linalg.norm(np.cross(q, r), axis=1)
        out[:, k] = np.degrees(np.arctan2(cross, np.einsum("ij,ij->i", q, r)))
    return out


@dataclass
class ValidationReport:
    small_area: np.ndarray
    small_angle: np.ndarray
    min_area: float
    min_angle: float

    @property
    def flagged(self) -> np.ndarray:
        return np.union1d(self.small_area, self.small_angle)

    @property
    def ok(self) -> bool:
        return len(self.flagged) == 0


def validate_mesh(mesh: TriangleMesh, min_area: float = 1e-6, min_angle: float = 1.0) -> ValidationReport:
    """Flag triangles with area below ``min_area`` (mm^2) or an angle below ``min_angle`` (deg)."""
    areas = triangle_areas(mesh.vertices, mesh.triangles)
    angles = triangle_angles(mesh.vertices, mesh.triangles)
    return ValidationReport(
        small_area=np.flatnonzero(areas < min_area),
        small_angle=np.flatnonzero(angles.min(axis=1) < min_angle),
        min_area=min_area,
        min_angle=min_angle,
    )


def drop_triangles(mesh: TriangleMesh, drop) -> TriangleMesh:
    """Remove the given triangles and any vertex left unreferenced.

    Surviving vertices keep their relative order. The result is re-checked
    for manifoldness by the ``TriangleMesh`` constructor.
    """
    keep = np.ones(mesh.n_triangles, dtype=bool)
    keep[np.asarray(drop, dtype=np.int64)] = False
    tris = mesh.triangles[keep]
    used = np.unique(tris)
    remap = -np.ones(mesh.n_vertices, dtype=np.int64)
    remap[used] = np.arange(len(used))
    return TriangleMesh(mesh.vertices[used], remap[tris], mesh.source, mesh.fmt)


@dataclass(frozen=True, eq=False)
class MeshGeometry:
    """Cached per-triangle and per-edge quantities of a validated mesh.

    Attributes
    ----------
    areas, normals, centroids : per-triangle arrays
    edges : (m, 3, 3) array, ``edges[j, k]`` is the edge vector opposite corner k
    pair_vertex, pair_tri, pair_a, pair_b : (3m,) arrays
        One entry per (vertex i, triangle T_j in the patch of i); ``(pair_a, pair_b)``
        is the edge of T_j opposite i. Sorted by ``pair_vertex``.
    pair_ptr : (n+1,) CSR offsets of each vertex's pairs.
    edge_tris, edge_verts : (e, 2) arrays for interior edges
    edge_length, centroid_distance : (e,) arrays for interior edges
    boundary_edges : (b, 2) vertex pairs of boundary edges
    """

    mesh: TriangleMesh
    areas: np.ndarray
    normals: np.ndarray
    centroids: np.ndarray
    edges: np.ndarray
    pair_vertex: np.ndarray
    pair_tri: np.ndarray
    pair_a: np.ndarray
    pair_b: np.ndarray
    pair_ptr: np.ndarray
    edge_tris: np.ndarray
    edge_verts: np.ndarray
    edge_length: np.ndarray
    centroid_distance: np.ndarray
    boundary_edges: np.ndarray
    _tree: cKDTree = field(repr=False)
    _radius: float = field(repr=False)

    @property
    def vertices(self) -> np.ndarray:
        return self.mesh.vertices

    @property
    def triangles(self) -> np.ndarray:
        return self.mesh.triangles

    @property
    def n_vertices(self) -> int:
        return self.mesh.n_vertices

    @property
    def n_triangles(self) -> int:
        return self.mesh.n_triangles

    def patch(self, i: int) -> np.ndarray:
        """Triangles incident to vertex ``i``."""
        return self.pair_tri[self.pair_ptr[i]:self.pair_ptr[i + 1]]

    def opposite_edges(self, i: int) -> np.ndarray:
        s = slice(self.pair_ptr[i], self.pair_ptr[i + 1])
        return np.stack([self.pair_a[s], self.pair_b[s]], axis=1)

    @property
    def diameter(self) -> float:
        v = self.vertices
        return float(np.linalg.norm(v.max(axis=0) - v.min(axis=0)))

    @property
    def mean_edge_length(self) -> float:
        e = np.unique(_sorted_edges(self.triangles), axis=0)
        return float(np.linalg.norm(self.vertices[e[:, 0]] - self.vertices[e[:, 1]], axis=1).mean())

    def surface_gradient(self, u: np.ndarray) -> np.ndarray:
        """Gradient of the piecewise-linear interpolant of vertex values ``u`` per triangle."""
        u = np.asarray(u, dtype=float)
        n = self.normals
        g = np.zeros((self.n_triangles, 3))
        for k in range(3):
            # grad of hat function k is n x e_k / (2A)
            g += u[self.triangles[:, k]][:, None] * np.cross(n, self.edges[:, k])
        return g / (2.0 * self.areas[:, None])


def build_geometry(mesh: TriangleMesh, min_area: float = 1e-12) -> MeshGeometry:
    """Precompute areas, normals, patches, opposite edges and adjacency tables."""
    v, t = mesh.vertices, mesh.triangles
    a, b, c = v[t[:, 0]], v[t[:, 1]], v[t[:, 2]]
    cr = np.cross(b - a, c - a)
    dbl = np.linalg.norm(cr, axis=1)
    if (0.5 * dbl <= min_area).any():
        bad = int(np.flatnonzero(0.5 * dbl <= min_area)[0])
        raise MeshError(f"degenerate triangle {bad}; run validate_mesh and drop flagged triangles first")
    areas = 0.5 * dbl
    normals = cr / dbl[:, None]
    centroids = (a + b + c) / 3.0
    edges = np.stack([c - b, a - c, b - a], axis=1)

    m = len(t)
    pv = t.T.reshape(-1)
    pt = np.tile(np.arange(m), 3)
    pa = np.concatenate([t[:, 1], t[:, 2], t[:, 0]])
    pb = np.concatenate([t[:, 2], t[:, 0], t[:, 1]])
    order = np.argsort(pv, kind="stable")
    pv, pt, pa, pb = pv[order], pt[order], pa[order], pb[order]
    ptr = np.zeros(mesh.n_vertices + 1, dtype=np.int64)
    np.add.at(ptr, pv + 1, 1)
    ptr = np.cumsum(ptr)

    se = _sorted_edges(t)
    owner = np.tile(np.arange(m), 3)
    key = se[:, 0] * mesh.n_vertices + se[:, 1]
    order = np.argsort(key, kind="stable")
    key_s, owner_s, se_s = key[order], owner[order], se[order]
    dup = np.flatnonzero(key_s[1:] == key_s[:-1])
    edge_tris = np.stack([owner_s[dup], owner_s[dup + 1]], axis=1)
    edge_verts = se_s[dup]
    single = np.ones(len(key_s), dtype=bool)
    single[dup] = False
    single[dup + 1] = False
    boundary = se_s[single]
    edge_length = np.linalg.norm(v[edge_verts[:, 0]] - v[edge_verts[:, 1]], axis=1)
    cdist = np.linalg.norm(centroids[edge_tris[:, 0]] - centroids[edge_tris[:, 1]], axis=1)

    radius = float(np.max(np.linalg.norm(np.stack([a, b, c], 1) - centroids[:, None], axis=2)))
    for arr in (areas, normals, centroids, edges, pv, pt, pa, pb, ptr,
                edge_tris, edge_verts, edge_length, cdist, boundary):
        arr.setflags(write=False)
    return MeshGeometry(
        mesh=mesh, areas=areas, normals=normals, centroids=centroids, edges=edges,
        pair_vertex=pv, pair_tri=pt, pair_a=pa, pair_b=pb, pair_ptr=ptr,
        edge_tris=edge_tris, edge_verts=edge_verts, edge_length=edge_length,
        centroid_distance=cdist, boundary_edges=boundary,
        _tree=cKDTree(centroids), _radius=radius,
    )


def closest_point_on_triangles(p, a, b, c):
    """Closest points on triangles ``abc`` to points ``p`` (all shaped ``(k, 3)``).

    Returns barycentric coordinates ``(k, 3)`` w.r.t. ``(a, b, c)``, using the
    Voronoi-region classification of Ericson, *Real-Time Collision Detection*.
    """
    p, a, b, c = (np.asarray(x, dtype=float) for x in (p, a, b, c))
    ab, ac, ap = b - a, c - a, p - a
    dot = lambda x, y: np.einsum("ij,ij->i", x, y)  # noqa: E731
    d1, d2 = dot(ab, ap), dot(ac, ap)
    bp = p - b
    d3, d4 = dot(ab, bp), dot(ac, bp)
    cp = p - c
    d5, d6 = dot(ab, cp), dot(ac, cp)
    va = d3 * d6 - d5 * d4
    vb = d5 * d2 - d1 * d6
    vc = d1 * d4 - d3 * d2

    bary = np.zeros((len(p), 3))
    todo = np.ones(len(p), dtype=bool)

    def assign(mask, vals):
        nonlocal todo
        mask = mask & todo
        bary[mask] = vals(mask)
        todo = todo & ~mask

    with np.errstate(divide="ignore", invalid="ignore"):
        assign((d1 <= 0) & (d2 <= 0), lambda m: [1.0, 0.0, 0.0])
        assign((d3 >= 0) & (d4 <= d3), lambda m: [0.0, 1.0, 0.0])
        assign((d6 >= 0) & (d5 <= d6), lambda m: [0.0, 0.0, 1.0])

        def on_ab(m):
            s = d1[m] / (d1[m] - d3[m])
            return np.stack([1 - s, s, 0 * s], 1)

        def on_ac(m):
            s = d2[m] / (d2[m] - d6[m])
            return np.stack([1 - s, 0 * s, s], 1)

        def on_bc(m):
            s = (d4[m] - d3[m]) / ((d4[m] - d3[m]) + (d5[m] - d6[m]))
            return np.stack([0 * s, 1 - s, s], 1)

        def inside(m):
            den = va[m] + vb[m] + vc[m]
            s, r = vb[m] / den, vc[m] / den
            return np.stack([1 - s - r, s, r], 1)

        assign((vc <= 0) & (d1 >= 0) & (d3 <= 0), on_ab)
        assign((vb <= 0) & (d2 >= 0) & (d6 <= 0), on_ac)
        assign((va <= 0) & (d4 - d3 >= 0) & (d5 - d6 >= 0), on_bc)
        assign(todo, inside)
    return np.clip(bary, 0.0, 1.0) / np.clip(bary, 0.0, 1.0).sum(axis=1, keepdims=True)


@dataclass
class SurfaceSamples:
    """Measurements attached to the surface.

    ``tri`` and ``bary`` locate each sample, ``distance`` is the projection
    distance (mm) and ``times`` the recorded activation (ms). ``index`` maps
    back to the rows of the original point list.
    """

    tri: np.ndarray
    bary: np.ndarray
    distance: np.ndarray
    times: np.ndarray
    index: np.ndarray
    dropped: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    def __len__(self) -> int:
        return len(self.tri)

    def subset(self, idx) -> "SurfaceSamples":
        idx = np.asarray(idx, dtype=np.int64)
        return SurfaceSamples(self.tri[idx], self.bary[idx], self.distance[idx],
                              self.times[idx], self.index[idx])

    def with_times(self, times) -> "SurfaceSamples":
        return SurfaceSamples(self.tri, self.bary, self.distance,
                              np.asarray(times, dtype=float), self.index, self.dropped)

    def interpolate(self, geom: MeshGeometry, u: np.ndarray) -> np.ndarray:
        return np.einsum("ij,ij->i", self.bary, np.asarray(u)[geom.triangles[self.tri]])

    def positions(self, geom: MeshGeometry) -> np.ndarray:
        return np.einsum("ij,ijk->ik", self.bary, geom.vertices[geom.triangles[self.tri]])


def _point_triangle_distances(geom: MeshGeometry, pts: np.ndarray, tris: np.ndarray):
    t = geom.triangles[tris]
    v = geom.vertices
    bary = closest_point_on_triangles(pts, v[t[:, 0]], v[t[:, 1]], v[t[:, 2]])
    q = np.einsum("ij,ijk->ik", bary, v[t])
    return np.linalg.norm(pts - q, axis=1), bary


def project_points(geom: MeshGeometry, points, times, max_dist: float = np.inf,
                   k_initial: int = 8) -> SurfaceSamples:
    """Attach points to their closest surface location.

    A centroid k-d tree gives an upper bound from ``k_initial`` candidates;
    every triangle whose centroid lies within that bound plus the largest
    centroid-to-corner radius is then checked exactly, so the result equals
    a brute-force scan. Points farther than ``max_dist`` are dropped.
    """
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    times = np.asarray(times, dtype=float).reshape(-1)
    if len(pts) != len(times):
        raise ValueError("points and times must have the same length")
    n = len(pts)
    tri = np.zeros(n, dtype=np.int64)
    bary = np.zeros((n, 3))
    dist = np.full(n, np.inf)
    if n:
        k = min(k_initial, geom.n_triangles)
        _, cand = geom._tree.query(pts, k=k)
        cand = np.asarray(cand).reshape(n, k)
        d, bc = _point_triangle_distances(geom, np.repeat(pts, k, axis=0), cand.reshape(-1))
        d = d.reshape(n, k)
        best = np.argmin(d, axis=1)
        dist = d[np.arange(n), best]
        tri = cand[np.arange(n), best]
        bary = bc.reshape(n, k, 3)[np.arange(n), best]
        balls = geom._tree.query_ball_point(pts, dist + geom._radius + 1e-12)
        for s, ball in enumerate(balls):
            ball = np.asarray(ball, dtype=np.int64)
            if len(ball) <= k:
                continue
            ds, bs = _point_triangle_distances(geom, np.repeat(pts[s:s + 1], len(ball), 0), ball)
            j = int(np.argmin(ds))
            if ds[j] < dist[s]:
                dist[s], tri[s], bary[s] = ds[j], ball[j], bs[j]
    keep = dist <= max_dist
    dropped = np.flatnonzero(~keep)
    if len(dropped):
        logger.warning("dropped %d of %d points farther than %g mm from the surface",
                       len(dropped), n, max_dist)
    if n and not keep.any():
        raise ValueError(f"no points within max_dist={max_dist} mm of the surface")
    return SurfaceSamples(tri[keep], bary[keep], dist[keep], times[keep],
                          np.flatnonzero(keep), dropped)
