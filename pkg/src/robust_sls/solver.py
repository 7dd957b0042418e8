"""Bundled NLP backend: an elastic SQP method with an l-infinity exact penalty.

Each iteration linearizes the constraints at the current point and solves a
convex QP with the exact objective Hessian plus a Levenberg term. Rows that are
nonlinear in the decision vector share one elastic variable penalized by ``nu``,
so the subproblem stays feasible far from the solution; rows that are linear are
imposed exactly. Steps are accepted by backtracking on the merit function
``f + nu * max_violation``, with a second-order correction tried before the
first backtrack.

The QP subproblems are solved with Clarabel (interior point).
"""
from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, field

import clarabel
import numpy as np
import scipy.sparse as sp

log = logging.getLogger(__name__)

STATUSES = ("optimal", "infeasible", "max_iter", "numerical")


@dataclass
class SolverConfig:
    max_iter: int = 200
    tol_kkt: float = 1e-6
    tol_feas: float = 1e-7
    penalty_init: float = 10.0
    penalty_growth: float = 10.0
    penalty_max: float = 1e8
    reg: float = 1e-6
    reg_max: float = 1e4
    armijo: float = 1e-4
    min_step: float = 1e-10
    stall_limit: int = 20
    seed: int = 0
    verify_tol: float = 1e-6

    def __post_init__(self):
        for name in ("tol_kkt", "tol_feas", "penalty_init", "reg", "verify_tol"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.penalty_growth <= 1:
            raise ValueError("penalty_growth must exceed 1")
        if self.max_iter < 0:
            raise ValueError("max_iter must be nonnegative")


@dataclass
class SolveReport:
    status: str
    objective: float
    kkt: float
    violation: float
    iterations: int
    wall_time: float
    message: str = ""
    verification: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)


class QPError(RuntimeError):
    def __init__(self, status: str):
        super().__init__(f"QP subproblem failed: {status}")
        self.status = status


@dataclass
class QPResult:
    x: np.ndarray
    y_eq: np.ndarray
    z_in: np.ndarray
    z_lb: np.ndarray
    z_ub: np.ndarray
    status: str


def _csc(M, shape) -> sp.csc_matrix:
    if M is None:
        return sp.csc_matrix(shape)
    return sp.csc_matrix(M)


def qp_subproblem(H, g, A_eq=None, b_eq=None, A_in=None, b_in=None, lb=None, ub=None) -> QPResult:
    """``min 1/2 x^T H x + g^T x`` s.t. ``A_eq x = b_eq``, ``A_in x <= b_in``, ``lb <= x <= ub``.

    Infinite bounds are dropped. Raises :class:`QPError` with the solver status
    when no solution is found; ``status`` is ``"infeasible"`` for a certified
    infeasible problem.
    """
    g = np.asarray(g, dtype=float)
    n = g.size
    H = sp.csc_matrix(H) if H is not None else sp.csc_matrix((n, n))
    A_eq = _csc(A_eq, (0, n))
    A_in = _csc(A_in, (0, n))
    b_eq = np.zeros(0) if b_eq is None else np.asarray(b_eq, dtype=float)
    b_in = np.zeros(0) if b_in is None else np.asarray(b_in, dtype=float)
    lb = np.full(n, -np.inf) if lb is None else np.broadcast_to(np.asarray(lb, dtype=float), (n,))
    ub = np.full(n, np.inf) if ub is None else np.broadcast_to(np.asarray(ub, dtype=float), (n,))
    il = np.flatnonzero(np.isfinite(lb))
    iu = np.flatnonzero(np.isfinite(ub))
    I = sp.identity(n, format="csc")
    A = sp.vstack([A_eq, A_in, -I[il], I[iu]], format="csc")
    b = np.concatenate([b_eq, b_in, -lb[il], ub[iu]])
    cones = []
    if A_eq.shape[0]:
        cones.append(clarabel.ZeroConeT(A_eq.shape[0]))
    n_nn = A_in.shape[0] + il.size + iu.size
    if n_nn:
        cones.append(clarabel.NonnegativeConeT(n_nn))
    P = sp.triu(H, format="csc")
    settings = clarabel.DefaultSettings()
    settings.verbose = False
    settings.tol_gap_abs = 1e-10
    settings.tol_gap_rel = 1e-10
    settings.tol_feas = 1e-10
    settings.max_iter = 200
    solver = clarabel.DefaultSolver(P, g, A, b, cones, settings)
    sol = solver.solve()
    status = str(sol.status)
    if status == "PrimalInfeasible":
        raise QPError("infeasible")
    if "Infeasible" in status:
        raise QPError(status)
    # inexact terminations still return a usable iterate; the caller's line search guards it
    if "Solved" not in status and not np.all(np.isfinite(sol.x)):
        raise QPError(status)
    z = np.asarray(sol.z)
    m_e, m_i = A_eq.shape[0], A_in.shape[0]
    z_lb = np.zeros(n)
    z_ub = np.zeros(n)
    z_lb[il] = z[m_e + m_i:m_e + m_i + il.size]
    z_ub[iu] = z[m_e + m_i + il.size:]
    return QPResult(np.asarray(sol.x), z[:m_e], z[m_e:m_e + m_i], z_lb, z_ub, status)


def _violation(problem, beta, ge, gi) -> float:
    """Largest constraint violation, including simple bounds."""
    parts = [np.abs(ge), gi, problem.lb - beta, beta - problem.ub]
    return float(max(max((p.max() for p in parts if p.size), default=0.0), 0.0))


def _merit(problem, beta, nu):
    ge, gi = problem.constraints(beta)
    v = _violation(problem, beta, ge, gi)
    return problem.objective(beta) + nu * v, v


def _elastic_qp(problem, beta, ge, gi, Je, Ji, grad, rho, nu):
    """Linearized subproblem with one elastic scalar ``t`` shared by all nonlinear rows.

    ``|g_N + J d| <= t``, ``c_N + J d <= t``, linear rows exact, cost ``q(d) + nu t``.
    """
    n = problem.n
    eqN = np.flatnonzero(~problem.eq_linear)
    eqL = np.flatnonzero(problem.eq_linear)
    inN = np.flatnonzero(~problem.in_linear)
    inL = np.flatnonzero(problem.in_linear)
    H = sp.block_diag([problem.objective_hessian() + rho * sp.identity(n), sp.csc_matrix((1, 1))], format="csc")
    g = np.concatenate([grad, [nu]])
    col = lambda m: sp.csc_matrix(np.ones((m, 1)))  # noqa: E731
    zcol = lambda m: sp.csc_matrix((m, 1))  # noqa: E731
    A_eq = sp.hstack([Je[eqL], zcol(eqL.size)], format="csc")
    b_eq = -ge[eqL]
    A_in = sp.vstack([
        sp.hstack([Ji[inL], zcol(inL.size)]),
        sp.hstack([Je[eqN], -col(eqN.size)]),
        sp.hstack([-Je[eqN], -col(eqN.size)]),
        sp.hstack([Ji[inN], -col(inN.size)]),
    ], format="csc")
    b_in = -np.concatenate([gi[inL], ge[eqN], -ge[eqN], gi[inN]])
    lb = np.concatenate([problem.lb - beta, [0.0]])
    ub = np.concatenate([problem.ub - beta, [np.inf]])
    res = qp_subproblem(H, g, A_eq, b_eq, A_in, b_in, lb, ub)
    d = res.x[:n]
    t = float(res.x[n])
    y = np.zeros(problem.n_eq)
    z = np.zeros(problem.n_in)
    y[eqL] = res.y_eq
    o = inL.size
    z[inL] = res.z_in[:o]
    y[eqN] = res.z_in[o:o + eqN.size] - res.z_in[o + eqN.size:o + 2 * eqN.size]
    z[inN] = res.z_in[o + 2 * eqN.size:]
    return d, t, y, z, res.z_lb[:n], res.z_ub[:n]


def solve(problem, cfg: SolverConfig | None = None, beta0=None, callback=None):
    """Run the SQP method from ``beta0``; returns ``(beta, SolveReport)``.

    ``problem`` must expose ``n``, ``lb``, ``ub``, ``n_eq``, ``n_in``, ``eq_linear``,
    ``in_linear``, ``objective``, ``gradient``, ``objective_hessian``,
    ``constraints`` and ``jacobians``; an optional ``verify(beta, tol)`` is run
    before declaring a point optimal, and an optional ``tighten_slacks(beta)`` is
    tried after every accepted step.
    """
    cfg = cfg or SolverConfig()
    t0 = time.perf_counter()
    beta = np.zeros(problem.n) if beta0 is None else np.array(beta0, dtype=float)
    beta = np.clip(beta, problem.lb, problem.ub)
    nu = cfg.penalty_init
    rho = cfg.reg
    stall = 0
    best_v = np.inf
    kkt = np.inf
    vmax = np.inf
    it = 0
    Hobj = problem.objective_hessian()

    def report(status, msg=""):
        ver = {}
        if status == "optimal" and hasattr(problem, "verify"):
            ver = problem.verify(beta, tol=cfg.verify_tol)
            if not ver.get("ok", True):
                status, msg = "numerical", "post-solve verification failed: " + ver.get("message", "")
        return beta, SolveReport(status, problem.objective(beta), float(kkt), float(vmax), it,
                                 time.perf_counter() - t0, msg, ver)

    for it in range(cfg.max_iter + 1):
        try:
            ge, gi, Je, Ji = problem.jacobians(beta)
        except FloatingPointError as exc:
            return report("numerical", str(exc))
        grad = problem.gradient(beta)
        vmax = _violation(problem, beta, ge, gi)
        if it == cfg.max_iter:
            break
        # penalty steering: raise nu while the subproblem keeps violation that it could remove
        while True:
            try:
                d, t, y, z, zl, zu = _elastic_qp(problem, beta, ge, gi, Je, Ji, grad, rho, nu)
            except QPError as exc:
                if exc.status == "infeasible":
                    return report("infeasible", "linearized linear constraints are inconsistent")
                if rho < cfg.reg_max:
                    rho *= 100.0
                    continue
                return report("numerical", str(exc))
            if t > max(cfg.tol_feas, 0.1 * vmax) and nu < cfg.penalty_max:
                nu *= cfg.penalty_growth
                continue
            break
        stat = grad + Je.T @ y + Ji.T @ z - zl + zu
        comp = float(np.abs(z * np.minimum(gi, 0.0)).max(initial=0.0))
        scale = max(1.0, float(np.abs(grad).max(initial=0.0)))
        kkt = max(float(np.abs(stat).max(initial=0.0)) / scale, comp)
        if vmax <= cfg.tol_feas and kkt <= cfg.tol_kkt:
            return report("optimal")
        nu = min(max(nu, 1.1 * (np.abs(y).sum() + np.abs(z).sum())), cfg.penalty_max)
        phi0 = problem.objective(beta) + nu * vmax
        pred = -(grad @ d + 0.5 * d @ (Hobj @ d)) + nu * (vmax - t)
        alpha = 1.0
        accepted = False
        trial = np.clip(beta + d, problem.lb, problem.ub)
        try:
            phi_full, _ = _merit(problem, trial, nu)
        except FloatingPointError:
            phi_full = np.inf
        if phi_full <= phi0 - cfg.armijo * max(pred, 0.0):
            accepted = True
        elif np.isfinite(phi_full):
            # second-order correction: re-solve with the constraint values seen at the trial point
            try:
                ge2, gi2 = problem.constraints(trial)
                d2, *_ = _elastic_qp(problem, beta, ge2 - Je @ d, gi2 - Ji @ d, Je, Ji, grad, rho, nu)
                trial = np.clip(beta + d2, problem.lb, problem.ub)
                phi_soc, _ = _merit(problem, trial, nu)
                accepted = phi_soc <= phi0 - cfg.armijo * max(pred, 0.0)
            except (QPError, FloatingPointError):
                accepted = False
        alpha = 0.5 if not accepted else 1.0
        while not accepted and alpha >= cfg.min_step:
            trial = np.clip(beta + alpha * d, problem.lb, problem.ub)
            try:
                phi, _ = _merit(problem, trial, nu)
            except FloatingPointError:
                phi = np.inf
            if phi <= phi0 - cfg.armijo * alpha * max(pred, 0.0):
                accepted = True
                break
            alpha *= 0.5
        if not accepted:
            rho = min(rho * 10.0, cfg.reg_max)
            stall += 1
            if stall >= cfg.stall_limit:
                if vmax > cfg.tol_feas:
                    return report("infeasible", "no progress on constraint violation")
                return report("numerical", "line search failed repeatedly")
            continue
        beta = trial
        if hasattr(problem, "tighten_slacks"):
            cand = problem.tighten_slacks(beta)
            if _merit(problem, cand, nu)[0] <= _merit(problem, beta, nu)[0]:
                beta = cand
        # short steps signal missing constraint curvature: damp the next step
        rho = max(cfg.reg, rho * 0.3) if alpha == 1.0 else min(rho * 10.0, cfg.reg_max)
        new_v = _merit(problem, beta, nu)[1]
        if callback is not None:
            callback(it, beta, new_v, kkt, alpha, nu)
        log.debug("it %d viol %.2e kkt %.2e alpha %.3g nu %.1e rho %.1e", it, new_v, kkt, alpha, nu, rho)
        if new_v > cfg.tol_feas and new_v > 0.999 * best_v:
            stall += 1
            if stall >= cfg.stall_limit:
                return report("infeasible", "feasibility restoration stalled")
        else:
            stall = 0
        best_v = min(best_v, new_v)
    return report("max_iter", f"reached {cfg.max_iter} iterations")
