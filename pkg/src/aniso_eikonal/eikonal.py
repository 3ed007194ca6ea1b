"""Anisotropic eikonal solver on triangulated surfaces.

All vertices are updated simultaneously (Jacobi sweeps). For vertex i the
update minimises ``u(y) + |y - x_i|_{D_j^{-1}}`` over the opposite edge of every
incident triangle T_j; within an edge the minimum is found in closed form,
and a soft minimum with sharpness ``kappa`` is taken over the resulting
candidate set (edge minimiser and both endpoints, for every incident
triangle). The soft minimum keeps the fixed point differentiable in the
tensor parameters; gradients are obtained by reverse accumulation of the
sweep map linearised at the fixed point.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np
import scipy.sparse as sp

from .conductivity import exp2x2, exp2x2_vjp
from .frames import FrameField
from .mesh import MeshGeometry, SurfaceSamples

logger = logging.getLogger(__name__)


class ConvergenceError(RuntimeError):
    """Raised when a result that needs a converged forward solve does not have one."""


@dataclass
class SolverConfig:
    """Forward/adjoint settings.

    ``kappa`` is the soft-min sharpness (1/ms); ``hard=True`` replaces the
    soft minimum by the exact one (reference runs only, not differentiable).
    ``u_init`` defaults to ten times the mesh diameter over the slowest
    velocity of the current tensor field.
    """

    kappa: float = 10.0
    max_iters: int = 5000
    tol: float = 1e-4
    u_init: Optional[float] = None
    hard: bool = False
    adjoint_tol: float = 1e-12
    adjoint_max_sweeps: Optional[int] = None

    def __post_init__(self):
        if not self.kappa > 0:
            raise ValueError("kappa must be positive")
        if not self.tol > 0:
            raise ValueError("tol must be positive")


@dataclass
class ActivationField:
    u: np.ndarray
    converged: bool
    iterations: int
    residual: float
    source: int
    first_below: Optional[int] = None  # first sweep with residual < 10 tol


def softmin(values, kappa: float, axis: int = -1):
    """``-log(sum(exp(-kappa * x))) / kappa``, shifted by the minimum for safety."""
    x = np.asarray(values, dtype=float)
    m = np.min(x, axis=axis, keepdims=True)
    s = np.sum(np.exp(-kappa * (x - m)), axis=axis, keepdims=True)
    return np.squeeze(m - np.log(s) / kappa, axis=axis)


def _edge_minimizer(alpha, beta, gamma, K, delta):
    """Minimiser ``t`` in [0, 1] of ``t delta + sqrt(alpha + 2 beta t + gamma t^2)``.

    ``K = alpha gamma - beta^2`` is passed separately so callers can supply
    it without cancellation.
    """
    disc = gamma - delta * delta
    pos = disc > 0
    ratio = np.where(pos, K / np.where(pos, disc, 1.0), 0.0)
    s = -delta * np.sqrt(np.maximum(ratio, 0.0))
    t = np.where(pos, (s - beta) / gamma, np.where(delta > 0, 0.0, 1.0))
    return np.clip(t, 0.0, 1.0)


def local_update(u_a: float, u_b: float, x_i, a, b, D, kappa: float = 10.0,
                 hard: bool = False) -> float:
    """Single-triangle update of vertex ``x_i`` from edge ``(a, b)`` with world tensor ``D``.

    Candidates are the exact minimiser over the edge and both endpoints;
    they are combined with a soft minimum (or the hard one).
    """
    D = np.asarray(D, dtype=float)
    w = np.linalg.eigvalsh(0.5 * (D + D.T))
    if not np.all(w > 0):
        raise ValueError("D must be symmetric positive definite")
    M = np.linalg.inv(D)
    A = np.asarray(a, float) - np.asarray(x_i, float)
    E = np.asarray(b, float) - np.asarray(a, float)
    if np.linalg.norm(E) == 0:
        raise ValueError("degenerate edge")
    alpha, beta, gamma = A @ M @ A, A @ M @ E, E @ M @ E
    delta = u_b - u_a
    t = float(_edge_minimizer(alpha, beta, gamma, max(alpha * gamma - beta * beta, 0.0), delta))
    fvals = [u_a + t * delta + np.sqrt(max(alpha + 2 * beta * t + gamma * t * t, 0.0)),
             u_a + np.sqrt(alpha), u_b + np.sqrt(alpha + 2 * beta + gamma)]
    return float(min(fvals) if hard else softmin(fvals, kappa))


@dataclass
class _Coefficients:
    alpha: np.ndarray
    beta: np.ndarray
    gamma: np.ndarray
    K: np.ndarray
    sqrt_a: np.ndarray
    sqrt_b: np.ndarray


class EikonalModel:
    """Forward solver and adjoint bound to one mesh, frame field and config.

    Parameters
    ----------
    geom : MeshGeometry
    frames : FrameField
    cfg : SolverConfig, optional
    """

    def __init__(self, geom: MeshGeometry, frames: FrameField, cfg: Optional[SolverConfig] = None):
        self.geom = geom
        self.frames = frames
        self.cfg = cfg or SolverConfig()
        v = geom.vertices
        pt = geom.pair_tri
        xi = v[geom.pair_vertex]
        ra = v[geom.pair_a] - xi
        rb = v[geom.pair_b] - xi
        v1, v2 = frames.v1[pt], frames.v2[pt]
        dot = lambda x, y: np.einsum("ij,ij->i", x, y)  # noqa: E731
        self.A = np.stack([dot(ra, v1), dot(ra, v2)], axis=1)
        B = np.stack([dot(rb, v1), dot(rb, v2)], axis=1)
        self.E = B - self.A
        self.cross = self.A[:, 0] * self.E[:, 1] - self.A[:, 1] * self.E[:, 0]
        counts = np.diff(geom.pair_ptr)
        self.active = np.flatnonzero(counts > 0)
        self.starts = geom.pair_ptr[self.active]
        self.counts = counts[self.active]
        self.n_cand = 3 * counts
        self.gradient_sample_ids: set = set()

    # -- coefficients -----------------------------------------------------
    def coefficients(self, params) -> _Coefficients:
        params = np.asarray(params, dtype=float)
        if params.shape != (self.geom.n_triangles, 3):
            raise ValueError(f"params must have shape ({self.geom.n_triangles}, 3)")
        if not np.isfinite(params).all():
            raise ValueError("params must be finite")
        M = exp2x2(-params)[self.geom.pair_tri]
        A, E = self.A, self.E
        MA = np.einsum("pij,pj->pi", M, A)
        ME = np.einsum("pij,pj->pi", M, E)
        alpha = np.einsum("pi,pi->p", A, MA)
        beta = np.einsum("pi,pi->p", E, MA)
        gamma = np.einsum("pi,pi->p", E, ME)
        det = M[:, 0, 0] * M[:, 1, 1] - M[:, 0, 1] ** 2
        K = det * self.cross ** 2
        return _Coefficients(alpha, beta, gamma, K, np.sqrt(alpha),
                             np.sqrt(np.maximum(alpha + 2 * beta + gamma, 0.0)))

    def default_u_init(self, params) -> float:
        if self.cfg.u_init is not None:
            return float(self.cfg.u_init)
        lam_min = np.exp(np.min(0.5 * (params[:, 0] + params[:, 2])
                                - np.hypot(0.5 * (params[:, 0] - params[:, 2]), params[:, 1])))
        return 10.0 * self.geom.diameter / np.sqrt(lam_min)

    # -- sweeps -----------------------------------------------------------
    def _candidates(self, u, co: _Coefficients):
        g = self.geom
        ua, ub = u[g.pair_a], u[g.pair_b]
        delta = ub - ua
        t = _edge_minimizer(co.alpha, co.beta, co.gamma, co.K, delta)
        q = np.maximum(co.alpha + t * (2 * co.beta + co.gamma * t), 0.0)
        cand = np.stack([ua + t * delta + np.sqrt(q), ua + co.sqrt_a, ub + co.sqrt_b], axis=1)
        return cand, t, q

    def _reduce(self, cand):
        flat = cand.reshape(-1)
        st = 3 * self.starts
        mn = np.minimum.reduceat(flat, st)
        if self.cfg.hard:
            return mn, None, None
        k = self.cfg.kappa
        e = np.exp(-k * (flat - np.repeat(mn, 3 * self.counts)))
        s = np.add.reduceat(e, st)
        return mn - np.log(s) / k, e, s

    def sweep(self, u, co: _Coefficients, source: int, u_init: float) -> np.ndarray:
        """One application of the update map to every vertex."""
        cand, _, _ = self._candidates(u, co)
        val, _, _ = self._reduce(cand)
        out = np.full_like(u, u_init)
        out[self.active] = val
        out[source] = 0.0
        return out

    def solve(self, params, source: int, u0=None, tol=None, max_iters=None,
              warn: bool = True) -> ActivationField:
        """Iterate the update map to its fixed point.

        Starts from ``u0`` when given (warm start), else from ``u_init``
        everywhere except the pinned source.
        """
        n = self.geom.n_vertices
        if not 0 <= int(source) < n:
            raise IndexError(f"source vertex {source} out of range")
        params = np.asarray(params, dtype=float)
        co = self.coefficients(params)
        u_init = self.default_u_init(params)
        tol = self.cfg.tol if tol is None else tol
        max_iters = self.cfg.max_iters if max_iters is None else max_iters
        if u0 is None:
            u = np.full(n, u_init)
        else:
            u = np.array(u0, dtype=float)
        u[source] = 0.0
        res = np.inf
        first_below = None
        it = 0
        for it in range(1, max_iters + 1):
            new = self.sweep(u, co, source, u_init)
            res = float(np.max(np.abs(new - u)))
            u = new
            if first_below is None and res < 10 * tol:
                first_below = it
            if res < tol:
                break
        converged = bool(res < tol)
        if not converged and warn:
            logger.warning("forward solve did not converge in %d sweeps (residual %.3g ms)", it, res)
        return ActivationField(u, converged, it, res, int(source), first_below)

    # -- adjoint ----------------------------------------------------------
    def linearize(self, u, co: _Coefficients, source: int):
        """Jacobian of the sweep map in ``u`` plus per-candidate data for the parameter pullback."""
        if self.cfg.hard:
            raise ValueError("the hard-min update is not differentiable; use kappa")
        g = self.geom
        cand, t, q = self._candidates(u, co)
        _, e, s = self._reduce(cand)
        pi = e.reshape(-1, 3) / np.repeat(s, self.counts)[:, None]
        pi[g.pair_vertex == source] = 0.0
        tk = np.stack([t, np.zeros_like(t), np.ones_like(t)], axis=1)
        wa = np.sum(pi * (1.0 - tk), axis=1)
        wb = np.sum(pi * tk, axis=1)
        n = g.n_vertices
        J = sp.coo_matrix((np.concatenate([wa, wb]),
                           (np.concatenate([g.pair_vertex, g.pair_vertex]),
                            np.concatenate([g.pair_a, g.pair_b]))), shape=(n, n)).tocsr()
        qk = np.stack([q, co.alpha, co.alpha + 2 * co.beta + co.gamma], axis=1)
        return J, pi, tk, qk

    def adjoint(self, J, g_u, source: int):
        """Accumulate ``sum_k (J^T)^k g`` sweep by sweep until the tail is negligible.

        Returns the adjoint field and the number of reverse sweeps used.
        """
        JT = J.T.tocsr()
        g_u = np.asarray(g_u, dtype=float)
        lam = g_u.copy()
        r = g_u.copy()
        scale = max(float(np.max(np.abs(g_u))), 1e-300)
        kmax = self.cfg.adjoint_max_sweeps or self.cfg.max_iters
        k = 0
        while k < kmax and float(np.max(np.abs(r))) > self.cfg.adjoint_tol * scale:
            r = JT @ r
            lam += r
            k += 1
        return lam, k

    def param_gradient(self, params, u, g_u, source: int):
        """Gradient w.r.t. ``params`` of a loss whose gradient w.r.t. the fixed point is ``g_u``."""
        params = np.asarray(params, dtype=float)
        co = self.coefficients(params)
        J, pi, tk, qk = self.linearize(u, co, source)
        lam, k = self.adjoint(J, g_u, source)
        gm = self.geom
        c = lam[gm.pair_vertex][:, None] * pi / (2.0 * np.sqrt(np.maximum(qk, 1e-300)))
        w = self.A[:, None, :] + tk[:, :, None] * self.E[:, None, :]  # (P, 3, 2)
        W = np.einsum("pk,pki,pkj->pij", c, w, w)
        GM = np.zeros((gm.n_triangles, 2, 2))
        np.add.at(GM, gm.pair_tri, W)
        # M = exp(-S)  =>  dF/dd = -vjp(-d)
        return -exp2x2_vjp(-params, GM), k

    # -- data term --------------------------------------------------------
    def data_residual(self, u, samples: SurfaceSamples, weights=None) -> float:
        r = samples.interpolate(self.geom, u) - samples.times
        w = 1.0 if weights is None else np.asarray(weights, float)
        return float(0.5 * np.sum(w * r * r))

    def data_term_and_grad(self, params, samples: SurfaceSamples, source: int,
                           weights=None, u0=None):
        """Data misfit, its parameter gradient and the forward field.

        Raises ``ConvergenceError`` if the forward solve does not converge.
        """
        field_ = self.solve(params, source, u0=u0)
        if not field_.converged:
            raise ConvergenceError("forward solve not converged; gradient refused")
        r = samples.interpolate(self.geom, field_.u) - samples.times
        w = np.ones(len(r)) if weights is None else np.asarray(weights, float)
        g_u = np.zeros(self.geom.n_vertices)
        np.add.at(g_u, self.geom.triangles[samples.tri].reshape(-1),
                  ((w * r)[:, None] * samples.bary).reshape(-1))
        self.gradient_sample_ids.update(np.asarray(samples.index).tolist())
        grad, _ = self.param_gradient(params, field_.u, g_u, source)
        return float(0.5 * np.sum(w * r * r)), grad, field_


def solve_forward(geom: MeshGeometry, frames: FrameField, params, source: int,
                  cfg: Optional[SolverConfig] = None, u0=None) -> ActivationField:
    return EikonalModel(geom, frames, cfg).solve(params, source, u0=u0)


def data_residual(u, samples: SurfaceSamples, geom: MeshGeometry, weights=None) -> float:
    """``0.5 * sum w_s (u_interp(s) - t_s)^2`` in ms^2."""
    if isinstance(u, ActivationField):
        u = u.u
    r = samples.interpolate(geom, u) - samples.times
    w = 1.0 if weights is None else np.asarray(weights, float)
    return float(0.5 * np.sum(w * r * r))


def grad_data_term(params, geom: MeshGeometry, frames: FrameField, samples: SurfaceSamples,
                   source: int, cfg: Optional[SolverConfig] = None, weights=None) -> np.ndarray:
    _, grad, _ = EikonalModel(geom, frames, cfg).data_term_and_grad(params, samples, source, weights)
    return grad


def solve_forward_reference(geom: MeshGeometry, D_world, source: int, kappa: float = 10.0,
                            hard: bool = False, tol: float = 1e-10, max_iters: int = 10000,
                            u_init: float = 1e6) -> np.ndarray:
    """Slow loop-based solver on world tensors, for cross-checking :class:`EikonalModel`."""
    v = geom.vertices
    n = geom.n_vertices
    u = np.full(n, u_init)
    u[source] = 0.0
    for _ in range(max_iters):
        new = u.copy()
        for i in range(n):
            if i == source:
                continue
            s = slice(geom.pair_ptr[i], geom.pair_ptr[i + 1])
            cands = []
            for j, a, b in zip(geom.pair_tri[s], geom.pair_a[s], geom.pair_b[s]):
                M = np.linalg.inv(D_world[j])
                A, E = v[a] - v[i], v[b] - v[a]
                al, be, ga = A @ M @ A, A @ M @ E, E @ M @ E
                delta = u[b] - u[a]
                t = float(_edge_minimizer(al, be, ga, max(al * ga - be * be, 0.0), delta))
                cands += [u[a] + t * delta + np.sqrt(max(al + 2 * be * t + ga * t * t, 0.0)),
                          u[a] + np.sqrt(al), u[b] + np.sqrt(al + 2 * be + ga)]
            if cands:
                new[i] = min(cands) if hard else softmin(cands, kappa)
        done = np.max(np.abs(new - u)) < tol
        u = new
        if done:
            break
    return u
