"""Front/fiber error metrics and a local activation-gradient baseline."""
from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Dict, List, Sequence

import numpy as np
from scipy.spatial import cKDTree

from .mesh import MeshGeometry


def front_direction_and_speed(u, D, geom: MeshGeometry, min_grad: float = 1e-12):
    """Propagation direction ``e = D g / |D g|`` and speed ``sqrt(<D e, e>)`` per triangle.

    ``g`` is the surface gradient of the piecewise-linear ``u``. Triangles
    with ``|g| < min_grad`` (front extrema) get NaN and ``valid=False``.
    Returns ``(e, v, valid)``.
    """
    u = getattr(u, "u", u)
    g = geom.surface_gradient(u)
    D = np.asarray(D, dtype=float)
    Dg = np.einsum("mij,mj->mi", D, g)
    valid = np.linalg.norm(g, axis=1) >= min_grad
    norm = np.linalg.norm(Dg, axis=1)
    e = np.full_like(Dg, np.nan)
    e[valid] = Dg[valid] / norm[valid, None]
    v = np.full(len(g), np.nan)
    v[valid] = np.sqrt(np.einsum("mi,mij,mj->m", e[valid], D[valid], e[valid]))
    return e, v, valid


def _rmse(x, w=None) -> float:
    x = np.asarray(x, float)
    ok = np.isfinite(x)
    if not ok.any():
        return float("nan")
    if w is None:
        return float(np.sqrt(np.mean(x[ok] ** 2)))
    w = np.asarray(w, float)[ok]
    return float(np.sqrt(np.sum(w * x[ok] ** 2) / np.sum(w)))


@dataclass
class MetricsReport:
    front_velocity_rmse: float
    front_angle_rmse: float
    fiber_velocity_rmse: float
    fiber_angle_rmse: float
    front_velocity_rmse_area: float
    front_angle_rmse_area: float
    fiber_velocity_rmse_area: float
    fiber_angle_rmse_area: float
    fiber_angle_median: float
    front_angle: np.ndarray
    front_velocity_error: np.ndarray
    fiber_angle: np.ndarray
    fiber_velocity_error: np.ndarray

    def summary(self) -> Dict[str, float]:
        return {k: v for k, v in self.__dict__.items() if not isinstance(v, np.ndarray)}


def angle_errors(a, b, axial: bool = False):
    """Angles in degrees between row vectors; ``axial`` ignores sign.

    Uses ``atan2(|a x b|, a.b)``, which is exact for parallel vectors where
    ``arccos`` loses half the digits.
    """
    a, b = np.asarray(a, float), np.asarray(b, float)
    c = np.einsum("ij,ij->i", a, b)
    s = np.linalg.norm(np.cross(a, b), axis=1)
    if axial:
        c = np.abs(c)
    return np.degrees(np.arctan2(s, c))


def angle_and_velocity_errors(model: Dict[str, np.ndarray], gt: Dict[str, np.ndarray],
                              areas=None) -> MetricsReport:
    """Compare per-triangle fields.

    Both dicts hold ``e`` (front direction), ``v`` (front speed), ``f``
    (fiber direction), ``vf`` (fiber speed) and optionally ``isotropic``.
    Speed errors are ``v cos(angle) - v_gt``; fiber angles are sign-free and
    skipped where either side is isotropic (there the fiber speed error
    uses a zero angle).
    """
    a_e = angle_errors(model["e"], gt["e"])
    ev = model["v"] * np.cos(np.radians(a_e)) - gt["v"]
    iso = np.zeros(len(a_e), dtype=bool)
    for side in (model, gt):
        if "isotropic" in side:
            iso |= np.asarray(side["isotropic"], bool)
    a_f = angle_errors(model["f"], gt["f"], axial=True)
    fv = model["vf"] * np.where(iso, 1.0, np.cos(np.radians(a_f))) - gt["vf"]
    a_f = np.where(iso, np.nan, a_f)
    fin = a_f[np.isfinite(a_f)]
    return MetricsReport(
        front_velocity_rmse=_rmse(ev), front_angle_rmse=_rmse(a_e),
        fiber_velocity_rmse=_rmse(fv), fiber_angle_rmse=_rmse(a_f),
        front_velocity_rmse_area=_rmse(ev, areas), front_angle_rmse_area=_rmse(a_e, areas),
        fiber_velocity_rmse_area=_rmse(fv, areas), fiber_angle_rmse_area=_rmse(a_f, areas),
        fiber_angle_median=float(np.median(fin)) if len(fin) else float("nan"),
        front_angle=a_e, front_velocity_error=ev, fiber_angle=a_f, fiber_velocity_error=fv,
    )


def local_baseline(points, times, k_neighbors: int = 10, rank_tol: float = 1e-8):
    """Per-sample conduction velocity from an affine fit to the k nearest samples.

    The neighbourhood is expressed in its own principal plane (the local
    tangent plane of the sampled surface) and ``t = t0 + g . x`` is fitted
    by least squares; the direction is ``g/|g|`` and the speed ``1/|g|``.
    Collinear neighbourhoods are skipped. Returns ``(speed, direction, valid)``.
    """
    pts = np.asarray(points, dtype=float)
    t = np.asarray(times, dtype=float)
    n = len(pts)
    if k_neighbors > n:
        raise ValueError(f"k_neighbors={k_neighbors} exceeds the {n} available samples")
    if k_neighbors < 3:
        raise ValueError("k_neighbors must be at least 3")
    _, nbr = cKDTree(pts).query(pts, k=k_neighbors)
    speed = np.full(n, np.nan)
    direction = np.full((n, 3), np.nan)
    valid = np.zeros(n, dtype=bool)
    for s in range(n):
        X = pts[nbr[s]]
        c = X.mean(axis=0)
        _, sv, Vt = np.linalg.svd(X - c, full_matrices=False)
        if sv[0] == 0 or sv[1] < rank_tol * sv[0]:
            continue
        axes = Vt[:2]
        C = (X - c) @ axes.T
        A = np.column_stack([np.ones(len(C)), C])
        coef, *_ = np.linalg.lstsq(A, t[nbr[s]], rcond=None)
        g = coef[1:] @ axes
        gn = np.linalg.norm(g)
        if gn == 0:
            continue
        speed[s] = 1.0 / gn
        direction[s] = g / gn
        valid[s] = True
    return speed, direction, valid


def baseline_errors(speed, direction, valid, e_gt, v_gt):
    """Front angle and speed errors of the baseline against GT front fields at the samples."""
    a = angle_errors(direction[valid], e_gt[valid])
    ev = speed[valid] * np.cos(np.radians(a)) - v_gt[valid]
    return {"front_velocity_rmse": _rmse(ev), "front_angle_rmse": _rmse(a),
            "front_angle": a, "front_velocity_error": ev}


TABLE_COLUMNS = [
    "sigma_ms", "psnr_db",
    "inversion_front_velocity_err_mps", "inversion_front_angle_err_deg",
    "local_front_velocity_err_mps", "local_front_angle_err_deg",
    "inversion_fiber_velocity_err_mps", "inversion_fiber_angle_err_deg",
]


def write_table(path: str, rows: Sequence[Dict[str, float]], append: bool = False) -> None:
    """Metrics CSV laid out as noise levels x (method, velocity/angle error)."""
    import os

    new = not (append and os.path.exists(path))
    with open(path, "a" if append else "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=TABLE_COLUMNS, lineterminator="\n", extrasaction="ignore")
        if new:
            w.writeheader()
        for row in rows:
            w.writerow({k: row.get(k, float("nan")) for k in TABLE_COLUMNS})


def format_table(rows: List[Dict[str, float]]) -> str:
    head = f"{'sigma/PSNR':>14} | {'inversion':>19} | {'local':>19} | {'fiber':>19}"
    lines = [head, "-" * len(head)]
    for r in rows:
        lines.append(
            f"{r['sigma_ms']:>5.1f}ms/{r['psnr_db']:>5.1f}dB | "
            f"{r['inversion_front_velocity_err_mps']:.3e}/{r['inversion_front_angle_err_deg']:6.2f} | "
            f"{r['local_front_velocity_err_mps']:.3e}/{r['local_front_angle_err_deg']:6.2f} | "
            f"{r['inversion_fiber_velocity_err_mps']:.3e}/{r['inversion_fiber_angle_err_deg']:6.2f}")
    return "\n".join(lines)
