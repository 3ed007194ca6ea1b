"""End-to-end inversion of activation-time samples for the conductivity tensor field."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, asdict
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .conductivity import ConductivityTensor, decompose, isotropic_params
from .eikonal import ActivationField, ConvergenceError, EikonalModel, SolverConfig
from .frames import FrameField, compute_frames
from .mesh import MeshGeometry, SurfaceSamples, TriangleMesh, build_geometry, project_points
from .tv import EdgeDifferenceOperator, FistaResult, fista_outer, tv_energy

logger = logging.getLogger(__name__)

MIN_SAMPLES = 10


class InsufficientDataError(ValueError):
    pass


def select_source(samples: SurfaceSamples, geom: MeshGeometry, tie_tol: float = 1e-9):
    """Earliest sample's nearest host-triangle vertex, and the time-shifted samples.

    Returns ``(vertex, offset, shifted)`` where ``shifted.times = times - offset``
    and ``offset`` is the earliest recorded time.
    """
    if len(samples) == 0:
        raise InsufficientDataError("insufficient data: no samples")
    t = samples.times
    tmin = float(np.min(t))
    ties = np.flatnonzero(t - tmin <= tie_tol)
    if len(ties) > 1:
        logger.warning("%d samples tie for the earliest time; using the lowest index", len(ties))
    s = int(ties[0])
    corners = geom.triangles[samples.tri[s]]
    pos = samples.positions(geom)[s]
    vertex = int(corners[np.argmin(np.linalg.norm(geom.vertices[corners] - pos, axis=1))])
    return vertex, tmin, samples.with_times(t - tmin)


def split_samples(samples: SurfaceSamples, fraction: float = 0.8, seed=0):
    """Seeded uniform random partition into ``(train, validation)``."""
    if not 0.0 < fraction < 1.0:
        raise ValueError("split fraction must lie in (0, 1)")
    n = len(samples)
    n_train = int(round(fraction * n))
    if n < 2 or n_train < 1 or n_train >= n:
        raise ValueError(f"degenerate split: {n} samples at fraction {fraction}")
    perm = np.random.default_rng(seed).permutation(n)
    return samples.subset(np.sort(perm[:n_train])), samples.subset(np.sort(perm[n_train:]))


class EikonalDataTerm:
    """Least-squares misfit ``U(d)`` with warm-started forward solves.

    Non-finite parameters and non-converged solves evaluate to ``inf`` so
    that line searches reject them. Trial solves are capped at a few times
    the sweep count of the last accepted solve, so a wild trial point fails
    fast instead of running to ``max_iters``.
    """

    sweep_factor = 4
    min_sweeps = 200
    # interpolated times carry at most this many sweep tolerances of error
    time_error_factor = 10.0

    def __init__(self, model: EikonalModel, samples: SurfaceSamples, source: int, weights=None):
        self.model = model
        self.samples = samples
        self.source = int(source)
        self.weights = weights
        self.last: Optional[ActivationField] = None
        self.n_solves = 0

    def _warm(self):
        return None if self.last is None else self.last.u

    def value(self, d) -> float:
        d = np.asarray(d, dtype=float)
        if not np.isfinite(d).all() or np.abs(d).max() > 50:
            return np.inf
        cap = None
        if self.last is not None:
            cap = max(self.min_sweeps, self.sweep_factor * self.last.iterations)
            cap = min(cap, self.model.cfg.max_iters)
        f = self.model.solve(d, self.source, u0=self._warm(), max_iters=cap, warn=False)
        self.n_solves += 1
        if not f.converged:
            return np.inf
        self.last = f
        return self.model.data_residual(f.u, self.samples, self.weights)

    def value_tolerance(self, U: float) -> float:
        """Bound on ``|U_computed - U_exact|`` from the inexact forward solve.

        With per-sample time error ``e``, ``|dU| <= e sqrt(2 U W) + e^2 W / 2``
        where ``W`` is the total weight. Doubled since two evaluations are compared.
        """
        e = self.time_error_factor * self.model.cfg.tol
        W = float(len(self.samples.times) if self.weights is None else np.sum(self.weights))
        return 2.0 * (e * np.sqrt(2.0 * max(U, 0.0) * W) + 0.5 * e * e * W)

    def value_and_grad(self, d):
        U, g, f = self.model.data_term_and_grad(d, self.samples, self.source, self.weights,
                                                u0=self._warm())
        self.n_solves += 1
        self.last = f
        return U, g

    def field(self, d) -> ActivationField:
        f = self.model.solve(d, self.source, u0=self._warm())
        if not f.converged:
            raise ConvergenceError("forward solve did not converge")
        return f


def rmse(pred, obs) -> float:
    r = np.asarray(pred) - np.asarray(obs)
    return float(np.sqrt(np.mean(r * r)))


@dataclass
class InversionConfig:
    """Settings of a cross-validated inversion.

    The default grid has 7 log-spaced values over ``[1e-5, 1e-2]``.
    """

    lambdas: Sequence[float] = tuple(np.logspace(-5, -2, 7))
    eps: float = 5e-2
    split: float = 0.8
    seed: int = 0
    outer_iters: int = 2000
    inner_iters: int = 200
    inner_tol: float = 1e-6
    v0: float = 0.7
    kappa: float = 10.0
    solver_tol: float = 1e-4
    max_dist: float = np.inf
    warm_start: bool = True
    L0: float = 1.0
    rtol: Optional[float] = None

    def __post_init__(self):
        self.lambdas = tuple(float(x) for x in self.lambdas)
        if not self.lambdas or min(self.lambdas) < 0:
            raise ValueError("lambda grid must be non-empty and non-negative")
        if not 0.0 < self.split < 1.0:
            raise ValueError("split must lie in (0, 1)")

    def solver_config(self) -> SolverConfig:
        return SolverConfig(kappa=self.kappa, tol=self.solver_tol)

    def to_dict(self) -> dict:
        out = asdict(self)
        out["lambdas"] = list(self.lambdas)
        out["max_dist"] = None if not np.isfinite(self.max_dist) else self.max_dist
        return out


def fit_tensor_field(model: EikonalModel, samples: SurfaceSamples, source: int, lam: float,
                     eps: float = 5e-2, d0=None, v0: float = 0.7, outer_iters: int = 2000,
                     inner_iters: int = 200, inner_tol: float = 1e-6, L0: float = 1.0,
                     op: Optional[EdgeDifferenceOperator] = None, rtol=None,
                     callback=None) -> Tuple[FistaResult, ActivationField, EikonalDataTerm]:
    """Minimise misfit plus Huber TV for one regularisation weight."""
    geom = model.geom
    op = op or EdgeDifferenceOperator(geom)
    d0 = isotropic_params(v0, geom.n_triangles) if d0 is None else np.asarray(d0, float)
    term = EikonalDataTerm(model, samples, source)
    res = fista_outer(term, d0, op, lam, eps, iters=outer_iters, L0=L0, inner_iters=inner_iters,
                      inner_tol=inner_tol, rtol=rtol, callback=callback)
    return res, term.field(res.d), term


@dataclass
class InversionResult:
    lam_opt: float
    params: np.ndarray
    activation: ActivationField
    tensors: ConductivityTensor
    source: int
    time_offset: float
    per_lambda: List[dict]
    traces: dict
    params_by_lambda: dict
    warm_started: bool
    train_index: np.ndarray
    val_index: np.ndarray
    gradient_sample_ids: set = field(default_factory=set)


def run_inversion(geom: Union[TriangleMesh, MeshGeometry], samples: SurfaceSamples,
                  cfg: Optional[InversionConfig] = None, frames: Optional[FrameField] = None,
                  callback=None) -> InversionResult:
    """Cross-validated inversion over ``cfg.lambdas``.

    The earliest sample fixes the source and the time origin; the remaining
    samples are split into train/validation sets; each lambda (ascending,
    warm-started from the previous solution when ``cfg.warm_start``) is
    fitted on the training set and scored by validation RMSE.
    """
    cfg = cfg or InversionConfig()
    if isinstance(geom, TriangleMesh):
        geom = build_geometry(geom)
    if len(samples) < MIN_SAMPLES:
        raise InsufficientDataError(f"insufficient data: {len(samples)} samples, need {MIN_SAMPLES}")
    frames = frames or compute_frames(geom)
    source, offset, shifted = select_source(samples, geom)
    train, val = split_samples(shifted, cfg.split, cfg.seed)
    model = EikonalModel(geom, frames, cfg.solver_config())
    op = EdgeDifferenceOperator(geom)
    d_prev = None
    L_prev = cfg.L0
    rows, traces, params_by_lam, fields = [], {}, {}, {}
    for lam in sorted(cfg.lambdas):
        try:
            res, f, _ = fit_tensor_field(
                model, train, source, lam, cfg.eps,
                d0=d_prev if cfg.warm_start else None, v0=cfg.v0,
                outer_iters=cfg.outer_iters, inner_iters=cfg.inner_iters,
                inner_tol=cfg.inner_tol, L0=L_prev if cfg.warm_start else cfg.L0, op=op,
                rtol=cfg.rtol, callback=None if callback is None else (lambda k, d, row, lam=lam: callback(lam, k, d, row)))
        except (RuntimeError, ValueError, FloatingPointError) as exc:
            logger.error("lambda=%g failed: %s", lam, exc)
            rows.append({"lambda": lam, "status": f"failed: {exc}"})
            continue
        train_rmse = rmse(train.interpolate(geom, f.u), train.times)
        val_rmse = rmse(val.interpolate(geom, f.u), val.times)
        rows.append({
            "lambda": lam, "status": "ok", "train_rmse_ms": train_rmse, "val_rmse_ms": val_rmse,
            "tv_unscaled": tv_energy(res.d, op, 1.0, cfg.eps),
            "objective": res.objective[res.best_iter], "iterations": len(res.trace),
        })
        traces[lam] = res.trace
        params_by_lam[lam] = res.d
        fields[lam] = f
        if cfg.warm_start:
            d_prev, L_prev = res.d, res.L
    ok = [r for r in rows if r["status"] == "ok"]
    if not ok:
        raise RuntimeError("inversion failed for every lambda in the grid")
    best = min(ok, key=lambda r: (r["val_rmse_ms"], r["lambda"]))
    lam_opt = best["lambda"]
    d = params_by_lam[lam_opt]
    return InversionResult(
        lam_opt=lam_opt, params=d, activation=fields[lam_opt], tensors=decompose(d, frames),
        source=source, time_offset=offset, per_lambda=rows, traces=traces,
        params_by_lambda=params_by_lam, warm_started=cfg.warm_start,
        train_index=train.index, val_index=val.index,
        gradient_sample_ids=set(model.gradient_sample_ids),
    )


class ConductivityInversion(RegressorMixin, BaseEstimator):
    """Estimator wrapper: fit a tensor field to activation times, predict times.

    ``X`` holds 3-D measurement positions (mm), ``y`` activation times (ms).
    Points are projected onto ``mesh``; the earliest sample sets the source.

    Parameters
    ----------
    mesh : TriangleMesh or MeshGeometry
    lam : float
        TV weight.
    eps : float
        Huber threshold.
    kappa : float
        Soft-min sharpness (1/ms).
    v0 : float
        Isotropic initial velocity (m/s).
    max_iter, inner_iter : int
        Outer FISTA and inner primal-dual budgets.
    solver_tol : float
        Forward fixed-point tolerance (ms).
    max_dist : float
        Points farther from the surface are dropped (mm).
    warm_start : bool
        Reuse ``params_`` from a previous fit as the starting point.
    frames : FrameField, optional
        Precomputed tangent frames for ``mesh``.
    rtol : float, optional
        Early stop on relative objective change.
    """

    def __init__(self, mesh=None, lam=1e-3, eps=5e-2, kappa=10.0, v0=0.7, max_iter=2000,
                 inner_iter=200, solver_tol=1e-4, max_dist=np.inf, warm_start=False,
                 frames=None, rtol=None, L0=1.0):
        self.mesh = mesh
        self.lam = lam
        self.eps = eps
        self.kappa = kappa
        self.v0 = v0
        self.max_iter = max_iter
        self.inner_iter = inner_iter
        self.solver_tol = solver_tol
        self.max_dist = max_dist
        self.warm_start = warm_start
        self.frames = frames
        self.rtol = rtol
        self.L0 = L0

    def _geometry(self) -> MeshGeometry:
        if self.mesh is None:
            raise ValueError("mesh is required")
        if isinstance(self.mesh, MeshGeometry):
            return self.mesh
        cached = getattr(self, "_geom_cache", None)
        if cached is not None and cached.mesh is self.mesh:
            return cached
        self._geom_cache = build_geometry(self.mesh)
        return self._geom_cache

    def fit(self, X, y):
        X, y = check_X_y(X, y, y_numeric=True)
        if X.shape[1] != 3:
            raise ValueError("X must hold 3-D positions, shape (n, 3)")
        if len(y) < 1:
            raise InsufficientDataError("insufficient data")
        geom = self._geometry()
        samples = project_points(geom, X, y, self.max_dist)
        return self.fit_samples(samples, geom)

    def fit_samples(self, samples: SurfaceSamples, geom: Optional[MeshGeometry] = None):
        """Fit on samples that are already attached to the surface."""
        geom = geom or self._geometry()
        if len(samples) < 1:
            raise InsufficientDataError("insufficient data")
        frames = self.frames if self.frames is not None else compute_frames(geom)
        source, offset, shifted = select_source(samples, geom)
        model = EikonalModel(geom, frames, SolverConfig(kappa=self.kappa, tol=self.solver_tol))
        d0 = self.params_ if self.warm_start and hasattr(self, "params_") else None
        res, f, term = fit_tensor_field(model, shifted, source, self.lam, self.eps, d0=d0, v0=self.v0,
                                        outer_iters=self.max_iter, inner_iters=self.inner_iter,
                                        L0=self.L0, rtol=self.rtol)
        self.geometry_ = geom
        self.frames_ = frames
        self.params_ = res.d
        self.source_ = source
        self.time_offset_ = offset
        self.activation_ = f
        self.tensors_ = decompose(res.d, frames)
        self.trace_ = res.trace
        self.objective_ = res.objective
        self.n_iter_ = len(res.trace)
        self.gradient_sample_ids_ = set(model.gradient_sample_ids)
        return self

    def predict(self, X):
        check_is_fitted(self, "params_")
        X = check_array(X)
        s = project_points(self.geometry_, X, np.zeros(len(X)))
        if len(s.dropped):
            raise ValueError("predict points must all project onto the surface")
        return s.interpolate(self.geometry_, self.activation_.u) + self.time_offset_

    def predict_samples(self, samples: SurfaceSamples):
        check_is_fitted(self, "params_")
        return samples.interpolate(self.geometry_, self.activation_.u) + self.time_offset_
