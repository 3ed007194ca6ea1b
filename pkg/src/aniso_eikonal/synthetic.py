"""Synthetic ground truth: fiber rules, lesions, forward solve and sampled measurements."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .conductivity import params_from_velocities
from .eikonal import ActivationField, EikonalModel, SolverConfig
from .frames import FrameField
from .mesh import MeshGeometry, SurfaceSamples
from .pipeline import InsufficientDataError

FiberRule = Callable[[MeshGeometry, FrameField], np.ndarray]


def constant_angle(degrees: float) -> FiberRule:
    """Fibers at a fixed angle from each triangle's v1, towards v2."""
    def rule(geom, frames):
        a = np.radians(degrees)
        return np.cos(a) * frames.v1 + np.sin(a) * frames.v2
    return rule


def world_direction(direction) -> FiberRule:
    """Fibers along a fixed world vector projected into each tangent plane."""
    w = np.asarray(direction, dtype=float)

    def rule(geom, frames):
        n = geom.normals
        f = w[None, :] - np.einsum("ij,j->i", n, w)[:, None] * n
        norm = np.linalg.norm(f, axis=1, keepdims=True)
        if (norm < 1e-9).any():
            raise ValueError("direction is normal to the surface on some triangles")
        return f / norm
    return rule


def disk_lesion(geom: MeshGeometry, center, radius: float) -> np.ndarray:
    """Boolean mask of triangles whose centroid lies within ``radius`` of ``center``."""
    return np.linalg.norm(geom.centroids - np.asarray(center, float), axis=1) <= radius


@dataclass
class GroundTruth:
    params: np.ndarray
    activation: ActivationField
    fiber_dir: np.ndarray
    v_fiber: np.ndarray
    v_cross: np.ndarray
    lesion: np.ndarray
    source: int


@dataclass
class MeasurementSet:
    points: np.ndarray
    times: np.ndarray
    samples: SurfaceSamples
    sigma: float = 0.0
    psnr_db: float = np.inf


def sample_surface(geom: MeshGeometry, n: int, rng) -> SurfaceSamples:
    """Area-uniform random surface points (area-weighted triangle, uniform barycentric)."""
    tri = rng.choice(geom.n_triangles, size=n, p=geom.areas / geom.areas.sum())
    r1, r2 = rng.random(n), rng.random(n)
    s = np.sqrt(r1)
    bary = np.stack([1 - s, s * (1 - r2), s * r2], axis=1)
    return SurfaceSamples(tri, bary, np.zeros(n), np.zeros(n), np.arange(n))


def _vertex_corner(geom: MeshGeometry, vertex: int):
    rows, cols = np.nonzero(geom.triangles == vertex)
    if len(rows) == 0:
        raise ValueError(f"vertex {vertex} is not referenced by any triangle")
    return int(rows[0]), int(cols[0])


def make_synthetic(geom: MeshGeometry, frames: FrameField, fiber_rule: FiberRule,
                   v_fiber: float = 0.6, v_cross: float = 0.4,
                   lesion: Optional[np.ndarray] = None, lesion_velocity: float = 0.2,
                   source: int = 0, n_samples: int = 884, seed=0,
                   cfg: Optional[SolverConfig] = None, include_source: bool = False):
    """Ground-truth field plus exact activation-time samples.

    With ``include_source`` the first of the ``n_samples`` points is placed
    on the source vertex itself, so the earliest measurement marks the true
    initiation site. Returns ``(GroundTruth, MeasurementSet)``.
    """
    if n_samples < 1:
        raise InsufficientDataError("insufficient data: n_samples must be positive")
    m = geom.n_triangles
    f = fiber_rule(geom, frames)
    loc = frames.to_local(f)
    angle = np.arctan2(loc[:, 1], loc[:, 0])
    vf = np.full(m, float(v_fiber))
    vc = np.full(m, float(v_cross))
    mask = np.zeros(m, dtype=bool) if lesion is None else np.asarray(lesion, dtype=bool)
    vf[mask] = lesion_velocity
    vc[mask] = lesion_velocity
    params = params_from_velocities(vf, vc, angle)
    cfg = cfg or SolverConfig(tol=1e-8)
    field = EikonalModel(geom, frames, cfg).solve(params, source)
    if not field.converged:
        raise RuntimeError("ground-truth forward solve did not converge")
    rng = np.random.default_rng(seed)
    s = sample_surface(geom, n_samples, rng)
    if include_source:
        t, k = _vertex_corner(geom, source)
        s.tri[0] = t
        s.bary[0] = np.eye(3)[k]
    s = s.with_times(s.interpolate(geom, field.u))
    gt = GroundTruth(params, field, f, vf, vc, mask, int(source))
    return gt, MeasurementSet(s.positions(geom), s.times.copy(), s)


def psnr(clean, noisy) -> float:
    """Peak signal-to-noise ratio in dB with the peak taken as the clean signal range."""
    clean, noisy = np.asarray(clean, float), np.asarray(noisy, float)
    mse = float(np.mean((noisy - clean) ** 2))
    if mse == 0:
        return np.inf
    peak = float(np.ptp(clean))
    return 10.0 * np.log10(peak * peak / mse)


def add_noise(meas: MeasurementSet, sigma: float, seed=0) -> MeasurementSet:
    """i.i.d. Gaussian noise of standard deviation ``sigma`` (ms) on the times."""
    if sigma < 0:
        raise ValueError("sigma must be non-negative")
    if sigma == 0:
        return MeasurementSet(meas.points, meas.times.copy(), meas.samples, 0.0, np.inf)
    rng = np.random.default_rng(seed)
    noisy = meas.times + rng.normal(0.0, sigma, size=len(meas.times))
    return MeasurementSet(meas.points, noisy, meas.samples.with_times(noisy), float(sigma),
                          psnr(meas.times, noisy))
