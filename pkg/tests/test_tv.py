import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy.optimize import minimize_scalar

from aniso_eikonal.mesh import TriangleMesh, build_geometry
from aniso_eikonal.tv import (
    BacktrackingError, EdgeDifferenceOperator, backtrack_L, fista_outer, huber, prox_dual,
    prox_primal, solve_subproblem, subproblem_objective, tv_energy,
)

from conftest import prox_conjugate_oracle


@pytest.fixture(scope="module")
def sheet_op(sheet_geom):
    return EdgeDifferenceOperator(sheet_geom)


def two_triangle_op(weight=1.0, area=1.0):
    return EdgeDifferenceOperator.from_arrays(2, [[0, 1]], [weight], [area])


# -- Huber -----------------------------------------------------------------

def test_huber_values():
    eps = 0.05
    assert huber(np.zeros(3), eps) == 0.0
    assert huber(np.array([1.0, 0, 0]), eps) == pytest.approx(0.975, abs=1e-15)
    # both branches agree at the kink
    x = np.array([eps, 0.0])
    quad = eps * eps / (2 * eps)
    lin = eps - eps / 2
    assert abs(quad - lin) <= 1e-15
    assert abs(huber(x, eps) - eps / 2) <= 1e-15
    above = np.array([np.nextafter(eps, 1.0), 0.0])
    assert abs(huber(above, eps) - huber(x, eps)) <= 1e-15


def test_huber_rowwise_matches_scalar():
    rng = np.random.default_rng(0)
    X = rng.normal(scale=0.05, size=(50, 3))
    np.testing.assert_allclose(huber(X, 0.05, axis=1), [huber(x, 0.05) for x in X], rtol=1e-15, atol=0)


@given(st.floats(1e-4, 1.0), st.floats(0.0, 5.0))
def test_huber_c1_and_convex_in_radius(eps, r):
    h = 1e-7
    f = lambda s: huber(np.array([s]), eps)  # noqa: E731
    d = (f(r + h) - f(max(r - h, 0))) / (r + h - max(r - h, 0))
    assert d == pytest.approx(min(r, eps) / eps, abs=1e-5 / eps + 1e-5)
    assert f(r) >= 0


# -- operator --------------------------------------------------------------

def test_weights_positive(sheet_op):
    assert np.all(sheet_op.weights > 0) and np.all(sheet_op.areas > 0)


def test_adjoint_identity(sheet_op):
    rng = np.random.default_rng(1)
    for _ in range(100):
        d = rng.normal(size=(sheet_op.n_tri, 3))
        p = rng.normal(size=(sheet_op.n_edges, 3))
        lhs = np.sum(sheet_op.apply(d) * p)
        rhs = np.sum(d * sheet_op.adjoint(p))
        assert abs(lhs - rhs) <= 1e-10 * max(1.0, abs(lhs))


def test_operator_norm_matches_dense(sheet_op):
    K = np.zeros((sheet_op.n_edges, sheet_op.n_tri))
    for e, (j, k) in enumerate(sheet_op.tris):
        K[e, j], K[e, k] = -sheet_op.weights[e], sheet_op.weights[e]
    assert sheet_op.norm() == pytest.approx(np.linalg.norm(K, 2), rel=1e-6)


def test_tv_energy_examples(sheet_geom, sheet_op):
    m = sheet_geom.n_triangles
    assert tv_energy(np.tile([0.3, -1.0, 2.0], (m, 1)), sheet_op, 2.0, 0.05) == 0.0
    op = two_triangle_op(1.0, 0.7)
    d = np.array([[0.0, 0, 0], [1.0, 0, 0]])
    assert tv_energy(d, op, 3.0, 0.05) == pytest.approx(3.0 * 0.7 * 0.975, abs=1e-14)
    rng = np.random.default_rng(2)
    d = rng.normal(size=(m, 3))
    lam, eps = 0.4, 0.05
    brute = 0.0
    for e, (j, k) in enumerate(sheet_op.tris):
        r = np.linalg.norm(sheet_op.weights[e] * (d[k] - d[j]))
        brute += sheet_op.areas[e] * (r * r / (2 * eps) if r <= eps else r - eps / 2)
    assert tv_energy(d, sheet_op, lam, eps) == pytest.approx(lam * brute, rel=1e-13)


def test_tv_operator_built_from_mesh_geometry():
    v = np.array([[0, 0, 0], [1.0, 0, 0], [1, 1, 0], [0, 1, 0]])
    g = build_geometry(TriangleMesh(v, np.array([[0, 1, 2], [0, 2, 3]])))
    op = EdgeDifferenceOperator(g)
    assert op.n_edges == 1
    # shared diagonal sqrt(2), centroids (2/3,1/3) and (1/3,2/3)
    assert op.weights[0] == pytest.approx(np.sqrt(2) / (np.sqrt(2) / 3))
    assert op.areas[0] == pytest.approx(0.5)


# -- proxes ----------------------------------------------------------------

def test_prox_primal_examples():
    assert prox_primal(2.0, 0.0, 1.0, 1.0) == pytest.approx(1.0)
    assert prox_primal(np.array([3.0]), np.array([-5.0]), 1e-14, 1.0)[0] == pytest.approx(3.0, abs=1e-12)
    rng = np.random.default_rng(3)
    dt, db = rng.normal(size=20), rng.normal(size=20)
    tau, L = 0.3, 2.5
    z = prox_primal(dt, db, tau, L)
    # stationarity of (z - dt)/tau + L (z - db)
    np.testing.assert_allclose((z - dt) / tau + L * (z - db), 0.0, atol=1e-13)


def test_prox_dual_examples():
    assert np.all(prox_dual(np.zeros((1, 3)), 0.5, 0.05, 1.0) == 0)
    lam, sigma, eps = 0.8, 0.5, 0.05
    pbar = np.array([[2 * lam, 0, 0]])
    p = pbar * (sigma * eps / lam + 1)
    out = prox_dual(p, sigma, eps, lam)
    assert np.linalg.norm(out) == pytest.approx(lam, abs=1e-15)


def test_prox_dual_matches_moreau_oracle():
    rng = np.random.default_rng(4)
    for _ in range(200):
        p = rng.normal(scale=rng.choice([0.01, 0.1, 1, 10]), size=3)
        sigma, eps, lam = rng.uniform(0.1, 3), rng.uniform(0.01, 0.5), rng.uniform(0.05, 3)
        got = prox_dual(p[None], sigma, eps, lam)[0]
        np.testing.assert_allclose(got, prox_conjugate_oracle(p, sigma, eps, lam), atol=1e-8)


@given(st.lists(st.floats(-100, 100), min_size=3, max_size=3), st.floats(0.01, 10),
       st.floats(0.001, 1), st.floats(0.001, 10))
def test_prox_dual_inside_ball(p, sigma, eps, lam):
    out = prox_dual(np.array([p]), sigma, eps, lam)
    assert np.linalg.norm(out) <= lam * (1 + 1e-12)


def test_prox_dual_per_edge_radii():
    p = np.array([[10.0, 0, 0], [0, 10.0, 0]])
    out = prox_dual(p, 1.0, 0.05, np.array([1.0, 2.0]))
    np.testing.assert_allclose(np.linalg.norm(out, axis=1), [1.0, 2.0])


# -- subproblem ------------------------------------------------------------

def test_subproblem_lambda_zero_is_identity(sheet_op):
    d_bar = np.random.default_rng(5).normal(size=(sheet_op.n_tri, 3))
    out = solve_subproblem(d_bar, 2.0, 0.0, 0.05, sheet_op)
    assert np.array_equal(out.d, d_bar)


@pytest.mark.parametrize("delta,lam", [(1.0, 0.3), (0.02, 0.3), (2.0, 5.0), (0.4, 0.05)])
def test_subproblem_two_triangles_golden_section(delta, lam):
    w, a, L, eps = 1.3, 0.8, 2.0, 0.05
    op = two_triangle_op(w, a)
    d_bar = np.array([[0.2, 0, 0], [0.2 + delta, 0, 0]])
    s = solve_subproblem(d_bar, L, lam, eps, op, inner_iters=20000, tol=1e-14)
    # the mean is preserved; only the jump s = d2 - d1 is free
    fun = lambda x: L / 4 * (x - delta) ** 2 + lam * a * huber(np.array([w * x]), eps)  # noqa: E731
    jump = minimize_scalar(fun, bracket=(-1.0, delta + 1.0), method="golden", tol=1e-12).x
    assert s.d[1, 0] - s.d[0, 0] == pytest.approx(jump, abs=1e-6)
    assert s.d[:, 0].mean() == pytest.approx(d_bar[:, 0].mean(), abs=1e-9)
    np.testing.assert_allclose(s.d[:, 1:], 0.0, atol=1e-12)


def test_subproblem_large_lambda_gives_constant_mean(sheet_op):
    d_bar = np.random.default_rng(6).normal(size=(sheet_op.n_tri, 3))
    s = solve_subproblem(d_bar, 1.0, 1e4, 0.05, sheet_op, inner_iters=5000, tol=1e-12)
    np.testing.assert_allclose(s.d, np.broadcast_to(d_bar.mean(axis=0), d_bar.shape), atol=1e-3)


def test_subproblem_objective_non_increasing(sheet_op):
    rng = np.random.default_rng(7)
    d_bar = rng.normal(size=(sheet_op.n_tri, 3))
    s = solve_subproblem(d_bar, 1.5, 0.5, 0.05, sheet_op)
    h = np.array(s.objective)
    assert np.all(np.diff(h) <= 1e-12)
    assert subproblem_objective(s.d, d_bar, 1.5, 0.5, 0.05, sheet_op) == pytest.approx(h[-1])
    assert h[-1] < h[0]


def test_subproblem_rejects_oversized_steps(sheet_op):
    d_bar = np.zeros((sheet_op.n_tri, 3))
    K = sheet_op.norm()
    with pytest.raises(ValueError):
        solve_subproblem(d_bar, 1.0, 1.0, 0.05, sheet_op, tau=2 / K, sigma=1 / K)


# -- backtracking ----------------------------------------------------------

def quad(nu):
    return (lambda d: 0.5 * nu * float(np.sum(d * d))), (lambda d: nu * d)


@pytest.mark.parametrize("nu", [0.3, 1.0, 17.0])
def test_backtracking_quadratic_window(nu):
    U, g = quad(nu)
    d = np.random.default_rng(8).normal(size=(5, 3))
    L, d_bar, U_bar = backtrack_L(U, g, d, 1e-3)
    assert nu <= L <= 2 * nu
    np.testing.assert_allclose(d_bar, d - g(d) / L)
    assert U_bar == pytest.approx(U(d_bar))


def test_backtracking_allows_one_decrease_only():
    U, g = quad(1.0)
    d = np.ones((4, 3))
    L, _, _ = backtrack_L(U, g, d, 64.0)
    assert L == 32.0


def test_backtracking_aborts_on_wrong_gradient():
    U, g = quad(1.0)
    with pytest.raises(BacktrackingError):
        backtrack_L(U, lambda d: -g(d), np.ones((4, 3)), 1.0)


def test_backtracking_skips_failing_candidates():
    U0, g = quad(2.0)

    def U(d):
        if np.max(np.abs(d)) > 0.6:
            raise ValueError("outside the domain")
        return U0(d)
    L, d_bar, _ = backtrack_L(U, g, np.full((2, 3), 0.5), 0.5)
    assert L >= 2.0 and np.max(np.abs(d_bar)) <= 0.6


def test_backtracking_slack_absorbs_evaluation_noise():
    U0, g = quad(1.0)
    d = np.full((3, 3), 1e-6)
    # evaluations wobble by up to 1e-9, far above the predicted decrease
    U = lambda x: U0(x) + (1e-9 if x is not d else 0.0)
    with pytest.raises(BacktrackingError):
        backtrack_L(U, g, d, 1.0, U_k=U0(d))
    L, _, Uc = backtrack_L(U, g, d, 1.0, U_k=U0(d), slack=2e-9)
    assert 0.5 <= L <= 2.0 and Uc <= U0(d) + 2e-9


# -- FISTA -----------------------------------------------------------------

class Smooth:
    """Nonconvex smooth test term: quadratic plus a cosine ripple."""

    def __init__(self, target, ripple=0.2):
        self.target = target
        self.ripple = ripple

    def value(self, d):
        r = d - self.target
        return float(0.5 * np.sum(r * r) + self.ripple * np.sum(1 - np.cos(r)))

    def value_and_grad(self, d):
        r = d - self.target
        return self.value(d), r + self.ripple * np.sin(r)


def test_fista_zero_iterations_returns_init(sheet_op):
    d0 = np.random.default_rng(9).normal(size=(sheet_op.n_tri, 3))
    res = fista_outer(Smooth(np.zeros_like(d0)), d0, sheet_op, 0.1, iters=0)
    assert np.array_equal(res.d, d0) and res.trace == []


def test_fista_stationary_at_truth(sheet_op):
    target = np.tile([0.1, 0.0, -0.3], (sheet_op.n_tri, 1))
    res = fista_outer(Smooth(target), target.copy(), sheet_op, 0.0, iters=20)
    assert max(res.objective) <= res.objective[0] + 1e-12


def test_fista_lambda_zero_is_gradient_descent_with_backtracking(sheet_op):
    rng = np.random.default_rng(10)
    sm = Smooth(rng.normal(size=(sheet_op.n_tri, 3)), ripple=0.4)
    d0 = np.zeros_like(sm.target)
    res = fista_outer(sm, d0, sheet_op, 0.0, iters=25, L0=0.1, momentum=False, keep_iterates=True)
    # independent reference loop
    d, L = d0.copy(), 0.1
    for k in range(25):
        Ud, g = sm.value_and_grad(d)
        L /= 2
        while True:
            cand = d - g / L
            if sm.value(cand) - Ud <= -0.5 * np.sum(g * g) / L:
                break
            L *= 2
        d = cand
        assert np.max(np.abs(res.iterates[k + 1] - d)) <= 1e-10


def test_fista_decreases_objective_with_tv(sheet_op):
    rng = np.random.default_rng(11)
    sm = Smooth(np.tile([0.5, 0.1, -0.2], (sheet_op.n_tri, 1)) + 0.2 * rng.normal(size=(sheet_op.n_tri, 3)))
    d0 = np.zeros_like(sm.target)
    res = fista_outer(sm, d0, sheet_op, 0.05, iters=60)
    ref = min(fista_outer(sm, d0, sheet_op, 0.05, iters=400).objective)
    # the optimality gap shrinks by at least 10x
    assert res.objective[res.best_iter] - ref <= (res.objective[0] - ref) / 10
    assert res.objective[res.best_iter] == min(res.objective)
    assert set(res.trace[0]) == {"iter", "data_term", "tv_term", "L", "step_norm"}
