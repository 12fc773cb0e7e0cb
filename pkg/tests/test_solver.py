import csv

import numpy as np
import pytest
from conftest import A_STAR2, A_STAR4, make_problem
from hypothesis import given, settings
from hypothesis import strategies as st

from deformctl.geometry import RigidTransform
from deformctl.objective import ObjectiveValue
from deformctl.registration import IcpResult
from deformctl.solver import (
    BROYDEN_STEP,
    FD_PROBE,
    GDS_STEP,
    I_MAX,
    LS_PROBE,
    REL_TOL,
    ROLLBACK,
    BroydenBreakdown,
    Evaluation,
    LineSearchConfig,
    ProbeError,
    SingularJacobian,
    SolverConfig,
    SolverTrace,
    broyden_inverse_update,
    broyden_step,
    clamp_step,
    fd_probes,
    fixed_step_solve,
    gradient_descent_solve,
    hybrid_solve,
    jacobian_fd,
    line_search,
    numerical_gradient,
    probe_steps,
    project_gradient,
    secant_residual,
    svd_inverse,
)


class RegionQuadratic:
    """Cheap stand-in for the plant pipeline: d_l(a) = (M a - b)_l ** 2."""

    def __init__(self, M, b, lower=0.0, upper=30.0):
        self.M = np.asarray(M, dtype=float)
        self.b = np.asarray(b, dtype=float)
        self.k = self.M.shape[1]
        self.lower = np.full(self.k, lower)
        self.upper = np.full(self.k, upper)
        self.pose = RigidTransform.identity()
        self.evals = 0

    def evaluate(self, a):
        a = np.array(a, dtype=float)
        self.evals += 1
        d = (self.M @ a - self.b) ** 2
        value = ObjectiveValue(float(d.sum()), d, np.sqrt(d), np.zeros(len(d)), np.zeros(len(d)))
        return Evaluation(a, value, None)

    def rescore(self, ev, pose=None):
        return ev

    def register(self, ev):
        return IcpResult(RigidTransform.identity(), 1, 0.0, True, [0.0])


def coupled(k=4, seed=0):
    rng = np.random.default_rng(seed)
    M = np.eye(k) + 0.2 * rng.uniform(size=(k, k))
    a_star = rng.uniform(5, 20, size=k)
    return RegionQuadratic(M, M @ a_star), a_star


# ---------------------------------------------------------------- probes

def test_probe_steps_near_bounds():
    lo, hi = np.zeros(3), np.full(3, 30.0)
    np.testing.assert_array_equal(probe_steps([1.0, 29.9, 30.0], 0.25, lo, hi), [0.25, 30.0 - 29.9, -0.25])
    with pytest.raises(ProbeError, match="cannot probe channel 1"):
        probe_steps([0.0], 0.25, np.zeros(1), np.zeros(1) + 1e-9)


def test_forward_difference_gradient_is_exact_for_quadratics():
    prob, _ = coupled()
    a = np.array([3.0, 4.0, 5.0, 6.0])
    h = 0.25
    g = numerical_gradient(prob, a, h)
    r = prob.M @ a - prob.b
    H = 2 * prob.M.T @ prob.M
    np.testing.assert_allclose(g, 2 * prob.M.T @ r + 0.5 * h * np.diag(H), rtol=1e-10)


def test_jacobian_rows_sum_to_gradient_and_share_probes():
    prob, _ = coupled()
    a = np.array([3.0, 4.0, 5.0, 6.0])
    fd = fd_probes(prob, prob.evaluate(a), 0.25)
    assert prob.evals == 1 + 4
    J = jacobian_fd(prob, a, 0.25, fd)
    g = numerical_gradient(prob, a, 0.25, fd)
    assert prob.evals == 5
    np.testing.assert_allclose(J.sum(axis=0), g, rtol=1e-12)


def test_fd_probes_trace_every_evaluation():
    prob, _ = coupled()
    trace = SolverTrace(prob.k)
    fd_probes(prob, np.ones(4), 0.25, trace)
    assert [r.kind for r in trace.rows] == [FD_PROBE] * 5
    assert [r.evals for r in trace.rows] == [1, 2, 3, 4, 5]


# ---------------------------------------------------------------- box handling

def test_project_gradient_and_clamp():
    lo, hi = np.zeros(3), np.full(3, 10.0)
    a = np.array([0.0, 5.0, 10.0])
    g = project_gradient(a, [1.0, 2.0, -1.0], lo, hi)
    np.testing.assert_array_equal(g, [0.0, 2.0, 0.0])
    assert clamp_step(a, g, (lo, hi)) == pytest.approx(2.5)
    assert clamp_step(a, np.zeros(3), (lo, hi)) == np.inf


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(0, 30), min_size=3, max_size=3), st.lists(st.floats(-5, 5), min_size=3, max_size=3))
def test_clamped_step_stays_in_box(a, g):
    a, g = np.array(a), np.array(g)
    lo, hi = np.zeros(3), np.full(3, 30.0)
    g = project_gradient(a, g, lo, hi)
    tau = clamp_step(a, g, (lo, hi))
    if np.isfinite(tau):
        x = a - tau * g
        assert np.all(x >= -1e-9) and np.all(x <= 30 + 1e-9)


# ---------------------------------------------------------------- line search

def test_line_search_brackets_and_refines_the_minimum():
    prob = RegionQuadratic([[1.0]], [7.0])
    base = prob.evaluate([0.0])
    g = numerical_gradient(prob, base.a, 0.25, fd_probes(prob, base, 0.25))
    res = line_search(prob, base, g, clamp_step(base.a, g, (prob.lower, prob.upper)))
    assert not res.stalled
    assert res.evaluation.a[0] == pytest.approx(7.0, abs=1e-9)  # parabola is exact on a quadratic
    assert res.probes <= LineSearchConfig().max_probes


def test_line_search_shrinks_after_overshoot():
    prob = RegionQuadratic([[1.0]], [0.3])
    base = prob.evaluate([2.0])
    res = line_search(prob, base, np.array([1.0]), 2.0, LineSearchConfig(refine=False))
    assert res.evaluation.D < base.D
    assert 0 < res.tau <= 2.0


def test_line_search_never_returns_worse_than_base():
    prob = RegionQuadratic([[1.0]], [5.0])
    base = prob.evaluate([5.0])
    trace = SolverTrace(1)
    res = line_search(prob, base, np.array([1.0]), 5.0, trace=trace)
    assert res.stalled and res.evaluation is base
    assert len(trace.rows) == LineSearchConfig().max_probes
    assert all(r.kind == LS_PROBE for r in trace.rows)


def test_line_search_respects_tau_max():
    prob = RegionQuadratic([[1.0]], [100.0], upper=30.0)
    base = prob.evaluate([0.0])
    res = line_search(prob, base, np.array([-1.0]), 30.0)
    assert res.evaluation.a[0] == 30.0


# ---------------------------------------------------------------- Broyden

def test_svd_inverse():
    J = np.array([[2.0, 1.0], [0.5, 3.0]])
    np.testing.assert_allclose(svd_inverse(J) @ J, np.eye(2), atol=1e-14)
    with pytest.raises(SingularJacobian, match="singular Jacobian"):
        svd_inverse(np.array([[1.0, 2.0], [2.0, 4.0]]))


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 100_000), st.integers(2, 4))
def test_secant_property_after_update(seed, k):
    rng = np.random.default_rng(seed)
    J_inv = rng.normal(size=(k, k)) + 3 * np.eye(k)
    da, dd = rng.normal(size=k), rng.normal(size=k)
    if abs(da @ J_inv @ dd) < 1e-3 * np.linalg.norm(da) * np.linalg.norm(dd):
        return
    updated = broyden_inverse_update(J_inv, da, dd)
    assert secant_residual(updated, da, dd) <= 1e-8
    # directions orthogonal to J_inv^T da are left alone
    w = np.linalg.svd((da @ J_inv)[None])[2][-1]
    np.testing.assert_allclose(updated @ w, J_inv @ w, atol=1e-9 * np.abs(J_inv).max())


def test_exact_inverse_survives_consistent_updates():
    rng = np.random.default_rng(4)
    A = rng.normal(size=(4, 4)) + 4 * np.eye(4)
    true_inv = np.linalg.inv(A)
    J_inv = true_inv.copy()
    for _ in range(20):
        da = rng.normal(size=4)
        J_inv = broyden_inverse_update(J_inv, da, A @ da)
        assert np.max(np.abs(J_inv - true_inv)) <= 1e-9


def test_update_breakdown():
    with pytest.raises(BroydenBreakdown, match="update breakdown"):
        broyden_inverse_update(np.eye(2), np.array([1.0, 0.0]), np.array([0.0, 1.0]))


def test_broyden_step_is_damped_and_clamped():
    J_inv = np.eye(2)
    a = np.array([1.0, 29.0])
    step = broyden_step(J_inv, a, np.array([5.0, -50.0]), 0.1, (np.zeros(2), np.full(2, 30.0)))
    np.testing.assert_allclose(step, [0.5, 30.0])


# ---------------------------------------------------------------- controller

def _check_trace(trace, prob):
    acc = trace.accepted_D()
    assert np.all(np.diff(acc) <= 0)
    # GDS_STEP rows re-list the line-search winner; every other evaluation is logged once
    evaluated = [r for r in trace.rows if r.kind in (FD_PROBE, LS_PROBE, BROYDEN_STEP)]
    assert len(evaluated) == prob.evals
    assert [r.evals for r in evaluated] == list(range(1, prob.evals + 1))


def test_hybrid_solve_converges_on_coupled_quadratic():
    prob, a_star = coupled()
    res = hybrid_solve(prob, np.zeros(4), SolverConfig(rel_tol=1e-3, i_max=200))
    assert res.terminated_by == REL_TOL
    assert res.final_D < 1e-2
    np.testing.assert_allclose(res.a_opt, a_star, atol=0.2)
    _check_trace(res.trace, prob)
    assert res.trace.count(GDS_STEP) >= 1


def test_every_broyden_update_satisfies_the_secant_condition():
    prob, _ = coupled(seed=3)
    res = hybrid_solve(prob, np.zeros(4), SolverConfig(rel_tol=1e-4, i_max=60))
    assert res.trace.secant_residuals
    assert max(res.trace.secant_residuals) <= 1e-8


def test_rejected_broyden_step_is_rolled_back():
    prob, _ = coupled(seed=1)
    res = hybrid_solve(prob, np.zeros(4), SolverConfig(rel_tol=1e-6, i_max=60))
    kinds = [r.kind for r in res.trace.rows]
    assert ROLLBACK in kinds
    for i, kind in enumerate(kinds):
        if kind == ROLLBACK:
            rejected = res.trace.rows[i - 1]
            assert rejected.kind == BROYDEN_STEP and not rejected.accepted
            assert res.trace.rows[i].D <= rejected.D
    _check_trace(res.trace, prob)


def test_iteration_cap():
    prob, _ = coupled()
    res = hybrid_solve(prob, np.zeros(4), SolverConfig(rel_tol=1e-9, i_max=3))
    assert res.terminated_by == I_MAX
    assert len(res.trace.accepted()) == 1 + 3


def test_gradient_descent_solve_never_uses_broyden():
    prob, _ = coupled()
    res = gradient_descent_solve(prob, np.zeros(4))
    assert res.trace.count(BROYDEN_STEP) == 0 and res.trace.count(ROLLBACK) == 0


def test_relative_change_when_d_reaches_zero():
    prob = RegionQuadratic(np.eye(2), [0.0, 0.0])
    res = hybrid_solve(prob, np.zeros(2))
    assert res.terminated_by == REL_TOL and res.final_D == 0.0


def test_solver_config_validation():
    with pytest.raises(ValueError):
        SolverConfig(fd_delta=0.0)
    with pytest.raises(ValueError):
        SolverConfig(rel_tol=0.0)
    with pytest.raises(ValueError):
        SolverConfig(i_max=0)


# ---------------------------------------------------------------- real pipeline

def test_hybrid_on_reduced_plant(model2, reachable2, tmp_path):
    prob = make_problem(model2, reachable2)
    res = hybrid_solve(prob, np.zeros(2))
    assert res.final_D < 1.0
    np.testing.assert_allclose(res.a_opt, A_STAR2, atol=0.5)
    _check_trace(res.trace, prob)
    for row in res.trace.rows:
        assert abs(row.D - row.d.sum()) <= 1e-9 * row.D
    res.trace.write_csv(tmp_path / "trace.csv")
    rows = list(csv.reader(open(tmp_path / "trace.csv")))
    assert rows[0] == ["step", "kind", "P1", "P2", "D", "d1", "d2", "rms_mm", "evals", "ms"]
    assert float(rows[-1][4]) == res.trace.rows[-1].D
    assert float(rows[-1][-1]) == res.trace.rows[-1].evals * 12500.0


def test_fixed_step_baseline_makes_no_move_from_the_optimum(model4, reachable4):
    prob = make_problem(model4, reachable4, normal_weight=0.0)
    res = fixed_step_solve(prob, A_STAR4, 0.25)
    np.testing.assert_array_equal(res.a_opt, A_STAR4)
    assert len(res.trace.accepted()) == 1
    assert res.terminated_by == REL_TOL


def test_fixed_step_baseline_budget(model2, reachable2):
    prob = make_problem(model2, reachable2)
    res = fixed_step_solve(prob, np.zeros(2), 0.25, max_evals=10)
    assert res.evals == 10 and res.terminated_by == I_MAX
    _check_trace(res.trace, prob)
    assert np.all(np.diff(res.trace.accepted_D()) < 0)
    moves = np.abs(np.diff([r.a for r in res.trace.accepted()], axis=0))
    assert set(np.unique(moves)) <= {0.0, 0.25}
