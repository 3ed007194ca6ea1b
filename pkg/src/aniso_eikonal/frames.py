"""Smooth per-triangle tangent bases {v1, v2, n}.

The first tangent vector is relaxed towards a discrete harmonic field: on
each shared edge the neighbour's v1 is carried over by the rotation about
that edge which aligns the two normals, and every triangle takes the
normalised weighted average of its transported neighbours. Updates are done
colour class by colour class over the triangle adjacency graph, so each
update exactly minimises its local energy and the total energy
``sum_e w_e |R_e v1_j - v1_i|^2`` never increases.
"""
from __future__ import annotations

import logging
from collections import deque
from dataclasses import dataclass, field
from typing import List

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components

from .mesh import MeshGeometry

logger = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class FrameField:
    v1: np.ndarray
    v2: np.ndarray
    n: np.ndarray
    energy_history: List[float] = field(default_factory=list)
    iterations: int = 0
    high_variation: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    @property
    def P(self) -> np.ndarray:
        """Rotations with columns ``(v1, v2, n)``, shape ``(m, 3, 3)``."""
        return np.stack([self.v1, self.v2, self.n], axis=2)

    def __len__(self) -> int:
        return len(self.v1)

    def to_local(self, vectors: np.ndarray) -> np.ndarray:
        """In-plane coordinates ``(m, 2)`` of per-triangle world vectors."""
        return np.stack([np.einsum("ij,ij->i", vectors, self.v1),
                         np.einsum("ij,ij->i", vectors, self.v2)], axis=1)

    def to_world(self, local: np.ndarray) -> np.ndarray:
        return local[:, :1] * self.v1 + local[:, 1:2] * self.v2

    def rotated(self, phi) -> "FrameField":
        """Same normals with v1 turned by ``phi`` radians in each tangent plane."""
        c, s = np.cos(phi), np.sin(phi)
        c = np.broadcast_to(c, (len(self),))[:, None]
        s = np.broadcast_to(s, (len(self),))[:, None]
        v1 = c * self.v1 + s * self.v2
        return FrameField(v1, np.cross(self.n, v1), self.n)


def rotate_to_world(frames: FrameField, triangle: int, M2, normal_eig: float = 1.0) -> np.ndarray:
    """``P blockdiag(M2, normal_eig) P^T`` for one triangle."""
    P = np.stack([frames.v1[triangle], frames.v2[triangle], frames.n[triangle]], axis=1)
    B = np.zeros((3, 3))
    B[:2, :2] = M2
    B[2, 2] = normal_eig
    out = P @ B @ P.T
    return 0.5 * (out + out.T)


def world_tensors(frames: FrameField, M2: np.ndarray, normal_eig: float = 1.0) -> np.ndarray:
    """Vectorised :func:`rotate_to_world` for ``(m, 2, 2)`` tangent tensors."""
    T = np.stack([frames.v1, frames.v2], axis=2)  # (m, 3, 2)
    out = T @ M2 @ np.swapaxes(T, 1, 2)
    out += normal_eig * frames.n[:, :, None] * frames.n[:, None, :]
    return 0.5 * (out + np.swapaxes(out, 1, 2))


def _project_unit(v: np.ndarray, n: np.ndarray) -> np.ndarray:
    v = v - np.einsum("ij,ij->i", v, n)[:, None] * n
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def seed_vectors(geom: MeshGeometry) -> np.ndarray:
    """Per-triangle seeds: the canonical axis least aligned with n, projected."""
    n = geom.normals
    axis = np.argmin(np.abs(n), axis=1)
    e = np.zeros_like(n)
    e[np.arange(len(n)), axis] = 1.0
    return _project_unit(e, n)


class _Transport:
    """Directed edge transports ``j -> i`` between adjacent triangles."""

    def __init__(self, geom: MeshGeometry):
        et = geom.edge_tris
        v = geom.vertices
        e = v[geom.edge_verts[:, 1]] - v[geom.edge_verts[:, 0]]
        e /= np.linalg.norm(e, axis=1, keepdims=True)
        n0, n1 = geom.normals[et[:, 0]], geom.normals[et[:, 1]]
        b0, b1 = np.cross(n0, e), np.cross(n1, e)
        w = geom.edge_length / geom.centroid_distance
        self.src = np.concatenate([et[:, 0], et[:, 1]])
        self.dst = np.concatenate([et[:, 1], et[:, 0]])
        self.e = np.concatenate([e, e])
        self.bsrc = np.concatenate([b0, b1])
        self.bdst = np.concatenate([b1, b0])
        self.w = np.concatenate([w, w])
        self.n_tri = geom.n_triangles

    def apply(self, v1: np.ndarray, mask=None) -> np.ndarray:
        """Transported neighbour vectors, one row per directed edge (optionally masked)."""
        s = slice(None) if mask is None else mask
        vs = v1[self.src[s]]
        return (self.e[s] * np.einsum("ij,ij->i", self.e[s], vs)[:, None]
                + self.bdst[s] * np.einsum("ij,ij->i", self.bsrc[s], vs)[:, None])

    def energy(self, v1: np.ndarray) -> float:
        half = len(self.src) // 2
        diff = self.apply(v1)[:half] - v1[self.dst[:half]]
        return float(np.sum(self.w[:half] * np.einsum("ij,ij->i", diff, diff)))


def frame_energy(geom: MeshGeometry, v1: np.ndarray) -> float:
    """Discrete variation energy of a tangent field."""
    return _Transport(geom).energy(v1)


def _greedy_coloring(n: int, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    nbrs = [[] for _ in range(n)]
    for i, j in zip(a.tolist(), b.tolist()):
        nbrs[i].append(j)
        nbrs[j].append(i)
    color = -np.ones(n, dtype=np.int64)
    for i in range(n):
        used = {color[j] for j in nbrs[i]}
        c = 0
        while c in used:
            c += 1
        color[i] = c
    return color


def _bfs_seed(geom: MeshGeometry, tr: _Transport, labels: np.ndarray) -> np.ndarray:
    m = geom.n_triangles
    seeds = seed_vectors(geom)
    v1 = np.zeros((m, 3))
    done = np.zeros(m, dtype=bool)
    out_edges = [[] for _ in range(m)]
    for k, s in enumerate(tr.src.tolist()):
        out_edges[s].append(k)
    for comp in np.unique(labels):
        root = int(np.flatnonzero(labels == comp)[0])
        v1[root] = seeds[root]
        done[root] = True
        queue = deque([root])
        while queue:
            j = queue.popleft()
            for k in out_edges[j]:
                i = tr.dst[k]
                if done[i]:
                    continue
                vj = v1[j]
                t = tr.e[k] * (tr.e[k] @ vj) + tr.bdst[k] * (tr.bsrc[k] @ vj)
                v1[i] = _project_unit(t[None], geom.normals[i:i + 1])[0]
                done[i] = True
                queue.append(i)
    return v1


def compute_frames(geom: MeshGeometry, smoothing_iters: int = 200, tol: float = 1e-6,
                   high_variation_deg: float = 30.0) -> FrameField:
    """Smooth tangent frames on every connected component of the mesh.

    Parameters
    ----------
    geom : MeshGeometry
    smoothing_iters : int
        Maximum number of full relaxation sweeps.
    tol : float
        Stop once no triangle's v1 turns by more than ``tol`` radians in a sweep.
    high_variation_deg : float
        Triangles whose transported neighbours deviate by more than this
        angle after smoothing are reported in ``high_variation`` (these are
        the unavoidable singular spots on closed surfaces).
    """
    tr = _Transport(geom)
    m = geom.n_triangles
    et = geom.edge_tris
    graph = coo_matrix((np.ones(len(et)), (et[:, 0], et[:, 1])), shape=(m, m))
    n_comp, labels = connected_components(graph, directed=False)
    if n_comp > 1:
        logger.warning("mesh has %d connected components; frames seeded per component", n_comp)
    v1 = _bfs_seed(geom, tr, labels)
    n = geom.normals
    colors = _greedy_coloring(m, et[:, 0], et[:, 1])
    classes = [np.flatnonzero(colors == c) for c in range(colors.max() + 1)]
    edge_masks = [np.isin(tr.dst, cl) for cl in classes]

    history = [tr.energy(v1)]
    it = 0
    for it in range(1, smoothing_iters + 1):
        change = 0.0
        for cl, em in zip(classes, edge_masks):
            acc = np.zeros((m, 3))
            np.add.at(acc, tr.dst[em], tr.w[em, None] * tr.apply(v1, em))
            a = acc[cl]
            a -= np.einsum("ij,ij->i", a, n[cl])[:, None] * n[cl]
            norm = np.linalg.norm(a, axis=1)
            ok = norm > 1e-12
            new = v1[cl].copy()
            new[ok] = a[ok] / norm[ok, None]
            cosang = np.clip(np.einsum("ij,ij->i", new, v1[cl]), -1.0, 1.0)
            if len(cosang):
                change = max(change, float(np.arccos(cosang).max()))
            v1[cl] = new
        history.append(tr.energy(v1))
        if change < tol:
            break

    dev = np.zeros(m)
    half = len(tr.src)
    t = tr.apply(v1)
    cosang = np.clip(np.einsum("ij,ij->i", t, v1[tr.dst]), -1.0, 1.0)
    np.maximum.at(dev, tr.dst[:half], np.degrees(np.arccos(cosang)))
    high = np.flatnonzero(dev > high_variation_deg)
    v2 = np.cross(n, v1)
    return FrameField(v1, v2, n.copy(), history, it, high)
