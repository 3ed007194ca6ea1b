"""Huber total variation on per-triangle fields and the solvers built on it.

The regulariser is a graph TV over interior edges: for the edge between
triangles j and k the difference is ``w_e (d_k - d_j)`` with
``w_e = shared edge length / centroid distance``, and each edge contributes
``lambda * a_e * H_eps(|w_e (d_k - d_j)|)`` with ``a_e`` the mean area of
the two triangles.

``solve_subproblem`` minimises ``L/2 |d - d_bar|^2 + TV(d)`` with the
first-order primal-dual method; ``fista_outer`` wraps it in an accelerated
majorise-minimise loop for a smooth nonconvex data term, with the curvature
``L`` found by backtracking.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, List, Optional

import numpy as np

from .mesh import MeshGeometry

logger = logging.getLogger(__name__)


class OperatorNormError(RuntimeError):
    pass


class BacktrackingError(RuntimeError):
    pass


def huber(x, eps: float, axis: int = -1):
    """Huber function of the Euclidean norm of ``x`` along ``axis``.

    Scalars and 1-D input are treated as a single vector.
    """
    x = np.asarray(x, dtype=float)
    if x.ndim <= 1:
        r = float(np.linalg.norm(x))
        return r * r / (2 * eps) if r <= eps else r - eps / 2
    r = np.linalg.norm(x, axis=axis)
    return np.where(r <= eps, r * r / (2 * eps), r - eps / 2)


class EdgeDifferenceOperator:
    """Weighted differences of a per-triangle ``(m, c)`` field across interior edges."""

    def __init__(self, geom: MeshGeometry):
        self.tris = np.asarray(geom.edge_tris)
        self.weights = geom.edge_length / geom.centroid_distance
        self.areas = 0.5 * (geom.areas[self.tris[:, 0]] + geom.areas[self.tris[:, 1]])
        self.n_tri = geom.n_triangles
        self._norm: Optional[float] = None

    @classmethod
    def from_arrays(cls, n_tri: int, tris, weights, areas) -> "EdgeDifferenceOperator":
        op = cls.__new__(cls)
        op.tris = np.asarray(tris, dtype=np.int64).reshape(-1, 2)
        op.weights = np.asarray(weights, dtype=float)
        op.areas = np.asarray(areas, dtype=float)
        op.n_tri = int(n_tri)
        op._norm = None
        return op

    @property
    def n_edges(self) -> int:
        return len(self.tris)

    def apply(self, d):
        d = np.asarray(d, dtype=float)
        return self.weights[:, None] * (d[self.tris[:, 1]] - d[self.tris[:, 0]])

    def adjoint(self, p):
        p = np.asarray(p, dtype=float)
        wp = self.weights[:, None] * p
        out = np.zeros((self.n_tri, p.shape[1]))
        np.add.at(out, self.tris[:, 1], wp)
        np.subtract.at(out, self.tris[:, 0], wp)
        return out

    def norm(self, tol: float = 1e-10, max_iter: int = 10000, seed: int = 0) -> float:
        """Operator norm by power iteration on ``K^T K`` (cached)."""
        if self._norm is not None:
            return self._norm
        if self.n_edges == 0:
            self._norm = 0.0
            return 0.0
        x = np.random.default_rng(seed).normal(size=(self.n_tri, 1))
        x /= np.linalg.norm(x)
        lam = 0.0
        for _ in range(max_iter):
            y = self.adjoint(self.apply(x))
            new = float(np.linalg.norm(y))
            if new == 0.0:
                raise OperatorNormError("power iteration collapsed to zero")
            x = y / new
            if abs(new - lam) <= tol * new:
                self._norm = float(np.sqrt(new))
                return self._norm
            lam = new
        raise OperatorNormError(f"power iteration did not converge in {max_iter} steps")


def tv_energy(d, op: EdgeDifferenceOperator, lam: float, eps: float) -> float:
    """``lam * sum_e a_e H_eps(|w_e (d_k - d_j)|)``."""
    if op.n_edges == 0:
        return 0.0
    return float(lam * np.sum(op.areas * huber(op.apply(d), eps, axis=1)))


def prox_primal(d_tilde, d_bar, tau: float, L: float):
    """Prox of ``tau * L/2 |. - d_bar|^2`` at ``d_tilde``."""
    return (np.asarray(d_tilde, float) + tau * L * np.asarray(d_bar, float)) / (tau * L + 1.0)


def prox_dual(p, sigma: float, eps: float, lam):
    """Prox of ``sigma (lam H_eps)^*`` applied row-wise: shrink, then project onto the lam-ball.

    ``lam`` may be an array of per-row ball radii.
    """
    p = np.asarray(p, dtype=float)
    lam = np.asarray(lam, dtype=float)
    lam_col = lam[..., None] if lam.ndim == 1 else lam
    pb = p / (sigma * eps / lam_col + 1.0)
    r = np.linalg.norm(pb, axis=-1, keepdims=True)
    scale = np.where(r > lam_col, lam_col / np.where(r > 0, r, 1.0), 1.0)
    return pb * scale


@dataclass
class PDState:
    d: np.ndarray
    p: np.ndarray
    d_ext: np.ndarray
    tau: float
    sigma: float
    theta: float = 1.0
    iterations: int = 0
    objective: List[float] = field(default_factory=list)


def subproblem_objective(d, d_bar, L, lam, eps, op) -> float:
    diff = np.asarray(d) - np.asarray(d_bar)
    return 0.5 * L * float(np.sum(diff * diff)) + tv_energy(d, op, lam, eps)


def solve_subproblem(d_bar, L: float, lam: float, eps: float, op: EdgeDifferenceOperator,
                     inner_iters: int = 200, tol: float = 1e-6, p0=None,
                     tau: Optional[float] = None, sigma: Optional[float] = None) -> PDState:
    """Minimise ``L/2 |d - d_bar|^2 + TV_{eps,lam}(d)`` by primal-dual iterations.

    Steps default to ``tau = sigma = 1/|K|``; iteration stops when the
    relative primal change drops below ``tol``. ``p0`` warm-starts the dual.
    The iterate with the lowest objective seen is returned.
    """
    d_bar = np.asarray(d_bar, dtype=float)
    if lam == 0 or op.n_edges == 0:
        zero = np.zeros((op.n_edges, d_bar.shape[1]))
        return PDState(d_bar.copy(), zero, d_bar.copy(), 0.0, 0.0, 1.0, 0,
                       [subproblem_objective(d_bar, d_bar, L, 0.0, eps, op)])
    K = op.norm()
    tau = 1.0 / K if tau is None else tau
    sigma = 1.0 / K if sigma is None else sigma
    if tau * sigma * K * K > 1.0 + 1e-12:
        raise ValueError("step sizes violate tau*sigma*|K|^2 <= 1")
    radius = lam * op.areas
    d = d_bar.copy()
    d_ext = d.copy()
    p = np.zeros((op.n_edges, d.shape[1])) if p0 is None else np.array(p0, dtype=float)
    best, best_obj = d.copy(), subproblem_objective(d, d_bar, L, lam, eps, op)
    history = [best_obj]
    it = 0
    for it in range(1, inner_iters + 1):
        p = prox_dual(p + sigma * op.apply(d_ext), sigma, eps, radius)
        d_new = prox_primal(d - tau * op.adjoint(p), d_bar, tau, L)
        d_ext = 2.0 * d_new - d
        change = np.linalg.norm(d_new - d) / max(np.linalg.norm(d_new), 1e-300)
        d = d_new
        obj = subproblem_objective(d, d_bar, L, lam, eps, op)
        if obj < best_obj:
            best, best_obj = d.copy(), obj
        history.append(best_obj)
        if change < tol:
            break
    return PDState(best, p, d_ext, tau, sigma, 1.0, it, history)


def backtrack_L(U: Callable, grad: Callable, d_k, L_prev: float, eta: float = 2.0,
                max_doublings: int = 60, U_k: Optional[float] = None, g_k=None,
                slack: float = 0.0):
    """Smallest ``L = L_prev * eta**m`` (``m >= -1``) certifying the quadratic upper bound.

    The bound ``U(d) <= U(d_k) + <g, d - d_k> + L/2 |d - d_k|^2`` is checked at
    the gradient step ``d = d_k - g/L``. Returns ``(L, d_bar, U(d_bar))``.
    ``U`` may raise or return ``inf`` for rejected candidates. ``slack`` is
    the absolute error of a ``U`` evaluation; without it an inexact ``U``
    can never certify a step once the predicted decrease drops below that
    error.
    """
    d_k = np.asarray(d_k, dtype=float)
    U_k = float(U(d_k)) if U_k is None else float(U_k)
    g = np.asarray(grad(d_k) if g_k is None else g_k, dtype=float)
    gg = float(np.sum(g * g))
    L = L_prev / eta
    excess = np.inf
    for _ in range(max_doublings + 2):
        step = -g / L
        cand = d_k + step
        try:
            Uc = float(U(cand))
        except (ArithmeticError, RuntimeError, ValueError) as exc:
            logger.debug("candidate rejected at L=%g: %s", L, exc)
            Uc = np.inf
        # <g, step> + L/2 |step|^2 = -|g|^2 / (2L)
        if np.isfinite(Uc) and Uc - U_k <= -0.5 * gg / L + slack:
            return L, cand, Uc
        excess = Uc - U_k + 0.5 * gg / L
        L *= eta
    raise BacktrackingError(
        f"descent bound not certified after {max_doublings} doublings (U={U_k:.6g}, |g|={np.sqrt(gg):.3g}, "
        f"excess {excess:.3g}); gradient likely inconsistent")


class SmoothTerm:
    """Interface expected by :func:`fista_outer` (duck-typed)."""

    def value(self, d) -> float:  # pragma: no cover - interface
        raise NotImplementedError

    def value_and_grad(self, d):  # pragma: no cover - interface
        raise NotImplementedError


@dataclass
class FistaResult:
    d: np.ndarray
    trace: List[dict]
    iterates: List[np.ndarray]
    L: float
    objective: List[float]
    last: Optional[np.ndarray] = None
    best_iter: int = 0


def fista_outer(smooth, d0, op: EdgeDifferenceOperator, lam: float, eps: float = 5e-2,
                iters: int = 2000, L0: float = 1.0, inner_iters: int = 200, inner_tol: float = 1e-6,
                momentum: bool = True, restart_after: int = 5, keep_iterates: bool = False,
                callback: Optional[Callable] = None, rtol: Optional[float] = None,
                prox_retries: int = 8) -> FistaResult:
    """Accelerated majorise-minimise loop for ``U(d) + TV_{eps,lam}(d)``.

    Each iteration: gradient of U at the extrapolated point, backtracking
    for L, primal-dual solve of the quadratic-plus-TV majoriser, FISTA
    momentum update. The bound found by backtracking is certified at the
    gradient step; if it fails at the regularised point, L is doubled and
    the subproblem re-solved. If ``smooth`` has ``value_tolerance(U)``, both
    checks allow that much evaluation error. Momentum is reset after ``restart_after``
    consecutive increases of the objective. With ``rtol`` set, iteration
    stops when the relative objective change falls below it.

    ``result.d`` is the iterate with the lowest objective, ``result.last``
    the final one.
    """
    d = np.array(d0, dtype=float)
    y = d.copy()
    t = 1.0
    L = float(L0)
    p = None
    U_d = smooth.value(d)
    tv_d = tv_energy(d, op, lam, eps)
    objective = [U_d + tv_d]
    trace: List[dict] = []
    iterates = [d.copy()] if keep_iterates else []
    rises = 0
    best_k, best = 0, d.copy()
    noise = getattr(smooth, "value_tolerance", None)
    for k in range(1, iters + 1):
        U_y, g_y = smooth.value_and_grad(y)
        slack = float(noise(U_y)) if noise is not None else 0.0
        L, d_bar, U_bar = backtrack_L(smooth.value, None, y, L, U_k=U_y, g_k=g_y, slack=slack)
        if lam == 0:
            d_new, U_new = d_bar, U_bar
        else:
            L_bt, first = L, None
            for _ in range(prox_retries + 1):
                state = solve_subproblem(d_bar, L, lam, eps, op, inner_iters, inner_tol, p0=p)
                d_new = state.d
                U_new = smooth.value(d_new)
                first = first or (state, U_new)
                diff = d_new - y
                bound = U_y + float(np.sum(g_y * diff)) + 0.5 * L * float(np.sum(diff * diff))
                if np.isfinite(U_new) and U_new <= bound + max(slack, 1e-12 * abs(U_y)):
                    break
                L *= 2.0
                d_bar = y - g_y / L
            else:
                # bound lost in forward-solve noise near convergence
                logger.debug("majoriser not certified at iter %d; keeping the first solution", k)
                L = L_bt
                state, U_new = first
                d_new = state.d
                if not np.isfinite(U_new):
                    raise BacktrackingError("regularised point is infeasible for every retried L")
            p = state.p
        tv_new = tv_energy(d_new, op, lam, eps)
        obj = U_new + tv_new
        step_norm = float(np.linalg.norm(d_new - d))
        rises = rises + 1 if obj > objective[-1] else 0
        if momentum:
            t_next = 0.5 * (1.0 + np.sqrt(1.0 + 4.0 * t * t))
            y = d_new + ((t - 1.0) / t_next) * (d_new - d)
            t = t_next
            if rises >= restart_after:
                logger.info("objective rose %d times in a row; momentum reset at iter %d", rises, k)
                t, y, rises = 1.0, d_new.copy(), 0
        else:
            y = d_new
        prev = objective[-1]
        d = d_new
        if obj < objective[best_k]:
            best_k, best = k, d.copy()
        objective.append(obj)
        trace.append({"iter": k, "data_term": U_new, "tv_term": tv_new, "L": L, "step_norm": step_norm})
        if keep_iterates:
            iterates.append(d.copy())
        if callback is not None:
            callback(k, d, trace[-1])
        if rtol is not None and abs(prev - obj) <= rtol * max(abs(prev), 1e-300):
            break
    return FistaResult(best, trace, iterates, L, objective, d, best_k)
