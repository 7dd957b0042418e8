import numpy as np
import pytest
import scipy.sparse as sp

from robust_sls.dynamics import linear_model
from robust_sls.ocp import NlpProblem, OcpSpec, initial_guess
from robust_sls.solver import QPError, SolverConfig, _merit, qp_subproblem, solve

from test_ocp import toy_spec


def test_qp_unconstrained_identity():
    g = np.array([1.0, -2.0, 0.5])
    res = qp_subproblem(np.eye(3), g)
    assert np.allclose(res.x, -g, atol=1e-8)


def test_qp_single_equality_matches_kkt():
    rng = np.random.default_rng(0)
    M = rng.standard_normal((3, 3))
    H = M @ M.T + np.eye(3)
    g = rng.standard_normal(3)
    a = rng.standard_normal((1, 3))
    c = np.array([0.7])
    K = np.block([[H, a.T], [a, np.zeros((1, 1))]])
    want = np.linalg.solve(K, np.concatenate([-g, c]))
    res = qp_subproblem(H, g, A_eq=a, b_eq=c)
    assert np.allclose(res.x, want[:3], atol=1e-8)
    assert np.allclose(np.abs(res.y_eq), np.abs(want[3:]), atol=1e-7)


def test_qp_bound_clamps():
    res = qp_subproblem(np.eye(1), np.array([-3.0]), ub=np.array([1.0]))
    assert np.isclose(res.x[0], 1.0, atol=1e-8)
    assert res.z_ub[0] > 0
    res = qp_subproblem(np.eye(1), np.array([-3.0]), lb=np.array([-np.inf]), ub=np.array([np.inf]))
    assert np.isclose(res.x[0], 3.0, atol=1e-8)


def test_qp_infeasible_is_reported():
    with pytest.raises(QPError) as err:
        qp_subproblem(np.eye(1), np.zeros(1), A_in=np.array([[1.0]]), b_in=np.array([-1.0]), lb=np.zeros(1))
    assert err.value.status == "infeasible"


def test_solver_config_validation():
    with pytest.raises(ValueError):
        SolverConfig(tol_kkt=0.0)
    with pytest.raises(ValueError):
        SolverConfig(penalty_growth=1.0)
    with pytest.raises(ValueError):
        SolverConfig(max_iter=-1)


def _linear_nominal_spec(box=50.0):
    model = linear_model(np.array([[1.0, 0.2], [-0.1, 0.9]]), np.array([[0.0], [0.3]]))
    C = np.vstack([np.eye(3), -np.eye(3)])
    return OcpSpec(model, 5, np.array([1.0, -1.0]), C, -box * np.ones(6), np.zeros((0, 2)), np.zeros(0),
                   np.zeros(2), np.diag([1.0, 2.0]), 0.5 * np.eye(1), 3 * np.eye(2), lam=1e-6, mode="nominal")


def test_convex_instance_matches_kkt_solve():
    spec = _linear_nominal_spec()
    p = NlpProblem(spec)
    beta, rep = solve(p, SolverConfig(), np.zeros(p.n))
    assert rep.status == "optimal"
    # inequalities are slack, so the optimum solves the equality-constrained KKT system
    P = p.objective_hessian().toarray()
    ge, _, Je, _ = p.jacobians(np.zeros(p.n))
    A = Je.toarray()
    K = np.block([[P, A.T], [A, np.zeros((A.shape[0], A.shape[0]))]])
    x = np.linalg.solve(K, np.concatenate([np.zeros(p.n), -ge]))[:p.n]
    assert abs(rep.objective - p.objective(x)) <= 1e-6
    assert np.abs(beta - x).max() <= 1e-5


def test_infeasible_toy():
    """State bound x <= -1 with x0 = 0 fixed."""
    model = linear_model(np.eye(1), np.eye(1))
    spec = OcpSpec(model, 2, np.zeros(1), np.array([[1.0, 0.0]]), np.array([1.0]), np.zeros((0, 1)), np.zeros(0),
                   np.zeros(1), np.eye(1), np.eye(1), np.eye(1), mode="nominal")
    p = NlpProblem(spec)
    _, rep = solve(p, SolverConfig(), np.zeros(p.n))
    assert rep.status == "infeasible"


def test_robust_toy_optimal_verified_and_deterministic():
    spec = toy_spec(seed=1, general=False)
    p = NlpProblem(spec)
    beta0 = initial_guess(spec)
    trace = []

    def cb(it, beta, viol, kkt, alpha, nu):
        trace.append((beta.copy(), nu))

    beta, rep = solve(p, SolverConfig(), beta0, callback=cb)
    assert rep.status == "optimal", rep.message
    assert rep.violation <= SolverConfig().tol_feas
    assert rep.verification["ok"]
    assert trace
    # merit at the step's penalty never increases over accepted steps
    prev = np.clip(beta0, p.lb, p.ub)
    for b, nu in trace:
        assert _merit(p, b, nu)[0] <= _merit(p, prev, nu)[0] + 1e-12
        prev = b
    trace2 = []
    beta2, rep2 = solve(p, SolverConfig(), beta0, callback=lambda it, b, *a: trace2.append(b.copy()))
    assert np.array_equal(beta, beta2) and rep2.iterations == rep.iterations
    assert all(np.array_equal(a[0], b) for a, b in zip(trace, trace2))


def test_solve_max_iter_and_report_dict():
    spec = toy_spec(seed=1, general=False)
    p = NlpProblem(spec)
    _, rep = solve(p, SolverConfig(max_iter=1), initial_guess(spec))
    assert rep.status in ("max_iter", "optimal")
    d = rep.to_dict()
    assert set(d) >= {"status", "objective", "kkt", "violation", "iterations", "wall_time"}


def test_active_linear_constraints_are_respected():
    free = solve(NlpProblem(_linear_nominal_spec()), SolverConfig(), None)[1]
    spec = _linear_nominal_spec(box=1.05)
    p = NlpProblem(spec)
    beta, rep = solve(p, SolverConfig(), np.zeros(p.n))
    assert rep.status == "optimal"
    zv = np.hstack([beta[p.iz][:-1], beta[p.iv]])
    vals = zv @ spec.C.T + spec.b
    assert -1e-7 <= vals.max() <= 1e-7  # the input bound is active
    assert rep.objective > free.objective
    assert sp.issparse(p.objective_hessian())
