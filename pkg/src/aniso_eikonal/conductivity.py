"""Log-Euclidean parameterisation of tangent conductivity tensors.

Each triangle carries ``d = (d1, d2, d3)``; the tangent tensor is the
matrix exponential of ``[[d1, d2], [d2, d3]]``, expressed in the triangle's
frame ``(v1, v2)``. Entries are squared velocities in (mm/ms)^2 = (m/s)^2,
so velocities are square roots of eigenvalues with no further conversion.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .frames import FrameField, world_tensors

ISOTROPY_RTOL = 1e-6


def sym2(d) -> np.ndarray:
    d = np.asarray(d, dtype=float)
    out = np.empty(d.shape[:-1] + (2, 2))
    out[..., 0, 0] = d[..., 0]
    out[..., 0, 1] = out[..., 1, 0] = d[..., 1]
    out[..., 1, 1] = d[..., 2]
    return out


def unsym2(S) -> np.ndarray:
    S = np.asarray(S, dtype=float)
    return np.stack([S[..., 0, 0], 0.5 * (S[..., 0, 1] + S[..., 1, 0]), S[..., 1, 1]], axis=-1)


def _sinhc(x):
    x = np.asarray(x, dtype=float)
    small = np.abs(x) < 1e-6
    xs = np.where(small, 1.0, x)
    return np.where(small, 1.0 + x * x / 6.0, np.sinh(xs) / xs)


def exp2x2(d) -> np.ndarray:
    """Matrix exponential of ``[[d1, d2], [d2, d3]]`` from its spectrum.

    With eigenvalues ``m +- r`` the exponential is
    ``e^m (cosh(r) I + sinh(r)/r (S - m I))``, which is the eigendecomposition
    formula written without the (possibly ill-defined) eigenvectors.
    Works on ``(3,)`` or ``(..., 3)`` input.
    """
    d = np.asarray(d, dtype=float)
    m = 0.5 * (d[..., 0] + d[..., 2])
    h = 0.5 * (d[..., 0] - d[..., 2])
    r = np.hypot(h, d[..., 1])
    em = np.exp(m)
    sc = _sinhc(r)
    # cosh(r) +- sinhc(r) h = e^-r + sinhc(r) (r +- h); the smaller of r +- h
    # is rewritten as d2^2 / (r -+ h) so no digits cancel
    b2 = d[..., 1] ** 2
    rh = r + np.abs(h)
    small = np.divide(b2, rh, out=np.zeros_like(rh), where=rh > 0)
    plus = np.where(h >= 0, rh, small)
    minus = np.where(h >= 0, small, rh)
    out = np.empty(d.shape[:-1] + (2, 2))
    out[..., 0, 0] = em * (np.exp(-r) + sc * plus)
    out[..., 1, 1] = em * (np.exp(-r) + sc * minus)
    out[..., 0, 1] = out[..., 1, 0] = em * sc * d[..., 1]
    return out


def log2x2(M) -> np.ndarray:
    """Inverse of :func:`exp2x2`; raises ``ValueError`` on non-SPD input."""
    M = np.asarray(M, dtype=float)
    Ms = 0.5 * (M + np.swapaxes(M, -1, -2))
    lam, Q = np.linalg.eigh(Ms)
    if not np.all(lam > 0):
        raise ValueError("log2x2 requires a symmetric positive definite matrix")
    L = (Q * np.log(lam)[..., None, :]) @ np.swapaxes(Q, -1, -2)
    return unsym2(L)


def exp2x2_vjp(d, G) -> np.ndarray:
    """Pull back a gradient ``G = dF/d exp(S)`` to ``dF/dd``.

    Uses the Daleckii-Krein form of the Frechet derivative,
    ``Q (Phi o (Q^T G Q)) Q^T`` with the divided differences of ``exp``.
    """
    S = sym2(d)
    G = np.asarray(G, dtype=float)
    G = 0.5 * (G + np.swapaxes(G, -1, -2))
    lam, Q = np.linalg.eigh(S)
    li, lj = lam[..., :, None], lam[..., None, :]
    phi = np.exp(0.5 * (li + lj)) * _sinhc(0.5 * (li - lj))
    Qt = np.swapaxes(Q, -1, -2)
    GS = Q @ (phi * (Qt @ G @ Q)) @ Qt
    return np.stack([GS[..., 0, 0], GS[..., 0, 1] + GS[..., 1, 0], GS[..., 1, 1]], axis=-1)


def params_from_velocities(v_fiber, v_cross, angle) -> np.ndarray:
    """Parameters for velocities (m/s) and fiber angle (rad) measured from v1."""
    v_fiber, v_cross, angle = np.broadcast_arrays(
        np.asarray(v_fiber, float), np.asarray(v_cross, float), np.asarray(angle, float))
    c, s = np.cos(angle), np.sin(angle)
    lf, lc = 2 * np.log(v_fiber), 2 * np.log(v_cross)
    # log of R diag(vf^2, vc^2) R^T
    return np.stack([c * c * lf + s * s * lc, c * s * (lf - lc), s * s * lf + c * c * lc], axis=-1)


def isotropic_params(v0: float, n: int) -> np.ndarray:
    """``log2x2(v0^2 I)`` repeated for ``n`` triangles."""
    return np.tile([2.0 * np.log(v0), 0.0, 2.0 * np.log(v0)], (n, 1))


@dataclass(frozen=True, eq=False)
class ConductivityTensor:
    """A tangent tensor, its world embedding and its fiber decomposition.

    Array fields may be per triangle (leading axis) or single.
    """

    D_tilde: np.ndarray
    D: np.ndarray
    fiber_dir: np.ndarray
    v_fiber: np.ndarray
    v_cross: np.ndarray
    isotropic: np.ndarray


def _fiber_local(D_tilde):
    lam, Q = np.linalg.eigh(D_tilde)
    lam = lam[..., ::-1]
    f = Q[..., :, 1]  # eigh sorts ascending
    # deterministic sign: first local component non-negative
    sgn = np.where(f[..., :1] < 0, -1.0, 1.0)
    f = f * sgn
    iso = np.abs(lam[..., 0] - lam[..., 1]) < ISOTROPY_RTOL * lam[..., 0]
    f = np.where(iso[..., None], np.array([1.0, 0.0]), f)
    return lam, f, iso


def decompose(params, frames: FrameField, normal_eig: float = 1.0) -> ConductivityTensor:
    """Per-triangle tensors for a parameter field ``(m, 3)``."""
    Dt = exp2x2(params)
    D = world_tensors(frames, Dt, normal_eig)
    lam, f, iso = _fiber_local(Dt)
    return ConductivityTensor(
        D_tilde=Dt, D=D, fiber_dir=frames.to_world(f),
        v_fiber=np.sqrt(lam[..., 0]), v_cross=np.sqrt(lam[..., 1]), isotropic=iso,
    )


def assemble_world_tensor(d, frames: FrameField, triangle: int, normal_eig: float = 1.0) -> ConductivityTensor:
    """Tensor of one triangle from its parameter vector ``d``."""
    Dt = exp2x2(d)
    P = np.stack([frames.v1[triangle], frames.v2[triangle], frames.n[triangle]], axis=1)
    B = np.zeros((3, 3))
    B[:2, :2] = Dt
    B[2, 2] = normal_eig
    D = P @ B @ P.T
    lam, f, iso = _fiber_local(Dt)
    return ConductivityTensor(
        D_tilde=Dt, D=0.5 * (D + D.T), fiber_dir=f[0] * P[:, 0] + f[1] * P[:, 1],
        v_fiber=float(np.sqrt(lam[0])), v_cross=float(np.sqrt(lam[1])), isotropic=bool(iso),
    )
