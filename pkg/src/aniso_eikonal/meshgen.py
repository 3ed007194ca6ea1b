"""Small procedural surfaces used for demos, synthetic studies and tests."""
from __future__ import annotations

import numpy as np

from .mesh import TriangleMesh, drop_triangles


def planar_sheet(nx: int, ny: int, width: float = 1.0, height: float = 1.0,
                 pattern: str = "alternate") -> TriangleMesh:
    """Rectangle ``[0, width] x [0, height]`` in the z=0 plane, ``2 nx ny`` triangles.

    ``pattern="alternate"`` flips the diagonal on every other cell so the
    mesh has no preferred diagonal direction; ``"regular"`` keeps one.
    """
    xs = np.linspace(0.0, width, nx + 1)
    ys = np.linspace(0.0, height, ny + 1)
    X, Y = np.meshgrid(xs, ys, indexing="xy")
    verts = np.stack([X.ravel(), Y.ravel(), np.zeros(X.size)], axis=1)
    tris = []
    for j in range(ny):
        for i in range(nx):
            v00 = j * (nx + 1) + i
            v10, v01, v11 = v00 + 1, v00 + nx + 1, v00 + nx + 2
            if pattern == "alternate" and (i + j) % 2:
                tris += [(v00, v10, v01), (v10, v11, v01)]
            else:
                tris += [(v00, v10, v11), (v00, v11, v01)]
    return TriangleMesh(verts, np.array(tris), source="planar_sheet", fmt="generated")


def icosphere(subdivisions: int = 1, radius: float = 1.0) -> TriangleMesh:
    """Subdivided icosahedron; ``10 * 4**s + 2`` vertices and ``20 * 4**s`` faces."""
    phi = (1.0 + 5 ** 0.5) / 2.0
    verts = [(-1, phi, 0), (1, phi, 0), (-1, -phi, 0), (1, -phi, 0),
             (0, -1, phi), (0, 1, phi), (0, -1, -phi), (0, 1, -phi),
             (phi, 0, -1), (phi, 0, 1), (-phi, 0, -1), (-phi, 0, 1)]
    faces = [(0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11),
             (1, 5, 9), (5, 11, 4), (11, 10, 2), (10, 7, 6), (7, 1, 8),
             (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8), (3, 8, 9),
             (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1)]
    verts = [np.array(v, dtype=float) / np.linalg.norm(v) for v in verts]
    for _ in range(subdivisions):
        cache = {}

        def midpoint(i, j):
            key = (min(i, j), max(i, j))
            if key not in cache:
                m = verts[i] + verts[j]
                verts.append(m / np.linalg.norm(m))
                cache[key] = len(verts) - 1
            return cache[key]

        new = []
        for a, b, c in faces:
            ab, bc, ca = midpoint(a, b), midpoint(b, c), midpoint(c, a)
            new += [(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)]
        faces = new
    return TriangleMesh(radius * np.array(verts), np.array(faces), source="icosphere", fmt="generated")


def cylinder(n_around: int = 24, n_along: int = 8, radius: float = 1.0, length: float = 2.0) -> TriangleMesh:
    """Open cylinder segment around the z axis."""
    th = np.linspace(0.0, 2 * np.pi, n_around, endpoint=False)
    zs = np.linspace(0.0, length, n_along + 1)
    verts = np.array([(radius * np.cos(t), radius * np.sin(t), z) for z in zs for t in th])
    tris = []
    for k in range(n_along):
        for i in range(n_around):
            a = k * n_around + i
            b = k * n_around + (i + 1) % n_around
            c, d = a + n_around, b + n_around
            tris += [(a, b, d), (a, d, c)]
    return TriangleMesh(verts, np.array(tris), source="cylinder", fmt="generated")


def atrium_like(subdivisions: int = 3, radii=(25.0, 20.0, 18.0), cap_height: float = 0.75) -> TriangleMesh:
    """Ellipsoidal shell (mm) with an opening standing in for the mitral ring.

    Triangles whose centroid lies above ``cap_height`` (relative, on the unit
    sphere before scaling) in -z are removed.
    """
    sphere = icosphere(subdivisions)
    v = sphere.vertices
    cz = v[sphere.triangles].mean(axis=1)[:, 2]
    cut = drop_triangles(sphere, np.flatnonzero(cz < -cap_height))
    scaled = cut.vertices * np.asarray(radii, dtype=float)
    return TriangleMesh(scaled, cut.triangles, source="atrium_like", fmt="generated")
