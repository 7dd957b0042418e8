"""Assembly of the robust trajectory-optimization NLP.

Every 1-norm and inf-norm of the synthesis problem is rewritten with
nonnegative slack variables (``-s <= r <= s``), so all constraint functions are
smooth. The decision vector ``beta`` stacks, in order: nominal states ``z``,
nominal inputs ``v``, the lower-triangular entries of ``Phi_x`` and ``Phi_u``, the
filter diagonals ``sigma``, the error bounds ``tau`` and the slack groups.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
import scipy.sparse as sp

from .blockops import CausalOperator
from .dynamics import UncertainModel, rollout_nominal
from .remainder import MuBound
from .sets import BoxImageSet, support_rowwise, vertices
from .sls_core import (SIGMA_MIN, PerformanceSpec, SlsResponse, closed_loop_response, filter_lhs, perf_lhs, recover_gains,
                       slp_residual, tau_lhs, tighten_lhs, tighten_terminal_lhs)

MODES = ("robust", "nominal", "offline")


class NonFiniteError(FloatingPointError):
    def __init__(self, kind: str, group: str, index: int):
        super().__init__(f"non-finite {kind} value in group '{group}' (row {index})")
        self.kind, self.group, self.index = kind, group, index


@dataclass
class OcpSpec:
    """Robust finite-horizon problem data.

    ``C x_u + b <= 0`` are stage constraints on ``(x, u)``; ``C_f x + b_f <= 0``
    are terminal constraints. ``mode`` is ``"robust"``, ``"nominal"`` (no error
    feedback, no disturbance handling) or ``"offline"`` (parameter set collapsed
    to zero and the disturbance image augmented by ``offline_alpha * I``).
    """

    model: UncertainModel
    T: int
    x0: np.ndarray
    C: np.ndarray
    b: np.ndarray
    C_f: np.ndarray
    b_f: np.ndarray
    mu: np.ndarray
    Q: np.ndarray
    R: np.ndarray
    Q_f: np.ndarray
    lam: float = 1e-6
    performance: PerformanceSpec | None = None
    mode: str = "robust"
    offline_alpha: float = 0.0
    sigma_min: float = SIGMA_MIN

    def __post_init__(self):
        n_x, n_u = self.model.n_x, self.model.n_u
        if isinstance(self.mu, MuBound):
            self.mu = self.mu.mu
        self.x0 = np.asarray(self.x0, dtype=float)
        self.C = np.atleast_2d(np.asarray(self.C, dtype=float)).reshape(-1, n_x + n_u)
        self.b = np.atleast_1d(np.asarray(self.b, dtype=float))
        self.C_f = np.atleast_2d(np.asarray(self.C_f, dtype=float)).reshape(-1, n_x)
        self.b_f = np.atleast_1d(np.asarray(self.b_f, dtype=float))
        self.mu = np.asarray(self.mu, dtype=float).reshape(-1)
        self.Q, self.R, self.Q_f = (np.atleast_2d(np.asarray(a, dtype=float)) for a in (self.Q, self.R, self.Q_f))
        if self.T < 1:
            raise ValueError("horizon must be >= 1")
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.lam < 0:
            raise ValueError("regularization weight must be nonnegative")
        checks = [(self.x0.shape, (n_x,), "x0"), (self.C.shape[0], self.b.shape[0], "b"),
                  (self.C_f.shape[0], self.b_f.shape[0], "b_f"), (self.mu.shape, (n_x,), "mu"),
                  (self.Q.shape, (n_x, n_x), "Q"), (self.R.shape, (n_u, n_u), "R"), (self.Q_f.shape, (n_x, n_x), "Q_f")]
        for got, want, name in checks:
            if got != want:
                raise ValueError(f"{name}: dimension {got} does not match {want}")
        if np.any(self.mu < 0):
            raise ValueError("mu must be nonnegative")
        if self.performance is not None:
            P = self.performance
            if P.C.T != self.T or P.C.q != n_x or P.D.q != n_u:
                raise ValueError("performance operators do not match horizon/dimensions")

    @property
    def robust(self) -> bool:
        return self.mode != "nominal"

    def disturbance_set(self) -> BoxImageSet:
        if self.mode == "offline":
            return self.model.E.augmented(self.offline_alpha * np.eye(self.model.n_x))
        return self.model.E

    def theta_vertices(self) -> list[np.ndarray]:
        if self.mode == "offline":
            return [np.zeros(self.model.n_theta)]
        return vertices(self.model.Theta)

    def with_mode(self, mode: str, offline_alpha: float = 0.0) -> "OcpSpec":
        return replace(self, mode=mode, offline_alpha=offline_alpha)

    def nominal_cost(self, z, v) -> float:
        z = np.asarray(z)
        v = np.asarray(v)
        J = sum(z[k] @ self.Q @ z[k] + v[k] @ self.R @ v[k] for k in range(self.T))
        return float(J + z[self.T] @ self.Q_f @ z[self.T])


@dataclass
class SlsSolution:
    """Nominal trajectory, system response and recovered gains, plus the constraints they were solved for."""

    z: np.ndarray
    v: np.ndarray
    resp: SlsResponse | None
    K: CausalOperator | None = None
    mu: np.ndarray | None = None
    nominal_cost: float = float("nan")
    C: np.ndarray | None = None
    b: np.ndarray | None = None
    C_f: np.ndarray | None = None
    b_f: np.ndarray | None = None
    extras: dict = field(default_factory=dict)

    @property
    def T(self) -> int:
        return self.v.shape[0]

    def gains(self, sigma_min: float = SIGMA_MIN) -> CausalOperator:
        """Error-feedback gains; zero for a solution without a system response."""
        if self.K is None:
            if self.resp is None:
                self.K = CausalOperator.zeros(self.T, self.v.shape[1], self.z.shape[1])
            else:
                self.K = recover_gains(self.resp, sigma_min)
        return self.K

    def to_dict(self) -> dict:
        out = {"z": self.z.tolist(), "v": self.v.tolist(), "nominal_cost": self.nominal_cost,
               "mu": None if self.mu is None else self.mu.tolist()}
        for name in ("C", "b", "C_f", "b_f"):
            val = getattr(self, name)
            out[name] = None if val is None else val.tolist()
        if self.resp is not None:
            out["Phi_x"] = self.resp.Phi_x.blocks.tolist()
            out["Phi_u"] = self.resp.Phi_u.blocks.tolist()
            out["sigma"] = self.resp.sigma.tolist()
            out["tau"] = self.resp.tau.tolist()
        if self.K is not None:
            out["K"] = self.K.blocks.tolist()
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "SlsSolution":
        arr = lambda key: None if d.get(key) is None else np.array(d[key], dtype=float)  # noqa: E731
        resp = None
        if d.get("Phi_x") is not None:
            resp = SlsResponse(CausalOperator(arr("Phi_x")), CausalOperator(arr("Phi_u")), arr("sigma"), arr("tau"))
        K = CausalOperator(arr("K")) if d.get("K") is not None else None
        return cls(arr("z"), arr("v"), resp, K, arr("mu"), float(d.get("nominal_cost", float("nan"))),
                   arr("C"), arr("b"), arr("C_f"), arr("b_f"))


def _axis_row(c: np.ndarray):
    """``(position, weight)`` if ``c`` has exactly one nonzero, else ``None``."""
    nz = np.flatnonzero(c)
    if nz.size == 1:
        return int(nz[0]), float(c[nz[0]])
    return None


class _Rows:
    """Accumulates constraint values and Jacobian triplets."""

    def __init__(self, jac: bool):
        self.jac = jac
        self.vals: list[np.ndarray] = []
        self.r: list[np.ndarray] = []
        self.c: list[np.ndarray] = []
        self.d: list[np.ndarray] = []
        self.m = 0
        self.groups: list[tuple[str, int, int, bool]] = []

    def add(self, name: str, values, linear: bool) -> int:
        values = np.ravel(np.asarray(values, dtype=float))
        start = self.m
        self.vals.append(values)
        self.m += values.size
        self.groups.append((name, start, values.size, linear))
        return start

    def trip(self, rows, cols, vals):
        if not self.jac:
            return
        rows, cols, vals = np.broadcast_arrays(np.asarray(rows), np.asarray(cols), np.asarray(vals, dtype=float))
        mask = (cols >= 0) & (vals != 0.0)
        self.r.append(rows[mask].ravel())
        self.c.append(cols[mask].ravel())
        self.d.append(vals[mask].ravel())

    def values(self) -> np.ndarray:
        return np.concatenate(self.vals) if self.vals else np.zeros(0)

    def matrix(self, n: int) -> sp.csr_matrix:
        if not self.r:
            return sp.csr_matrix((self.m, n))
        return sp.coo_matrix((np.concatenate(self.d), (np.concatenate(self.r), np.concatenate(self.c))),
                             shape=(self.m, n)).tocsr()

    def linear_mask(self) -> np.ndarray:
        mask = np.zeros(self.m, dtype=bool)
        for _, start, count, lin in self.groups:
            mask[start:start + count] = lin
        return mask


class NlpProblem:
    """Backend-neutral smooth NLP: ``min f(beta)`` s.t. ``g(beta) = 0``, ``c(beta) <= 0``, ``lb <= beta <= ub``.

    The objective is the quadratic ``1/2 beta^T P beta``; ``P`` is available via
    :meth:`objective_hessian`. Constraint Jacobians are returned as CSR matrices.
    """

    def __init__(self, spec: OcpSpec):
        self.spec = spec
        m = spec.model
        self.T, self.n_x, self.n_u, self.n_theta = spec.T, m.n_x, m.n_u, m.n_theta
        self.E = spec.disturbance_set()
        self.thetas = [np.atleast_1d(t) for t in spec.theta_vertices()] if spec.robust else []
        self.param = [t for t in self.thetas if np.any(t != 0.0)]
        self._build_layout()
        self._abs_registry: list[tuple[int, int, np.ndarray]] = []
        probe = self._evaluate(np.zeros(self.n), jac=False, record=True)
        self.n_eq = probe[0].m
        self.n_in = probe[1].m
        self.eq_linear = probe[0].linear_mask()
        self.in_linear = probe[1].linear_mask()
        self.eq_groups = probe[0].groups
        self.in_groups = probe[1].groups
        self._P = self._objective_matrix()

    # ------------------------------------------------------------------ layout
    def _build_layout(self):
        T, n_x, n_u = self.T, self.n_x, self.n_u
        self._next = 0
        self.blocks: dict[str, np.ndarray] = {}

        def take(name, shape):
            size = int(np.prod(shape))
            idx = np.arange(self._next, self._next + size).reshape(shape)
            self._next += size
            self.blocks[name] = idx
            return idx

        def take_causal(name, p):
            idx = -np.ones((T, T, p, n_x), dtype=int)
            for k in range(T):
                for c in range(k + 1):
                    idx[k, c] = np.arange(self._next, self._next + p * n_x).reshape(p, n_x)
                    self._next += p * n_x
            self.blocks[name] = idx
            return idx

        self.iz = take("z", (T + 1, n_x))
        self.iv = take("v", (T, n_u))
        if not self.spec.robust:
            self.n = self._next
            self.lb = np.full(self.n, -np.inf)
            self.ub = np.full(self.n, np.inf)
            return
        # Px[k, c] holds the block at block row k, block column c (= delay k - c)
        self.iPx = take_causal("Phi_x", n_x)
        self.iPu = take_causal("Phi_u", n_u)
        self.isig = take("sigma", (T, n_x))
        self.itau = take("tau", (T,))
        first_slack = self._next
        self.iSx = take_causal("S_x", n_x)
        self.iSu = take_causal("S_u", n_u)
        # filter slacks: per parametric vertex g and step k>=1, array (n_x rows, k, n_x)
        # filter slacks only in the state rows the parameter can reach
        self.trows = np.flatnonzero(self.spec.model.theta_rows)
        nr = self.trows.size
        self.iF = [[None] + [take(f"F_{g}_{k}", (nr, k, n_x)) for k in range(1, T)] for g in range(len(self.param))]
        self.iFt = [take(f"Ftheta_{g}", (T, nr)) for g in range(len(self.param))]
        spec = self.spec
        self.axis_rows = [_axis_row(c) for c in spec.C]
        self.axis_rows_f = [_axis_row(c) for c in spec.C_f]
        self.iG = {}
        for i, ax in enumerate(self.axis_rows):
            if ax is None:
                for k in range(1, T):
                    self.iG[(k, i)] = take(f"G_{k}_{i}", (k, n_x))
        self.iGf = {}
        for i, ax in enumerate(self.axis_rows_f):
            if ax is None:
                self.iGf[i] = take(f"Gf_{i}", (T, n_x))
        self.perf_axis = None
        self.iY = None
        if spec.performance is not None:
            self.perf_axis = self._perf_axis_rows(spec.performance)
            if self.perf_axis is None:
                n_y = spec.performance.C.p
                self.iY = take("Y", (T * n_y, T * n_x))
        self.n = self._next
        self.lb = np.full(self.n, -np.inf)
        self.ub = np.full(self.n, np.inf)
        self.lb[self.isig.ravel()] = spec.sigma_min
        self.lb[self.itau] = 0.0
        self.lb[first_slack:] = 0.0
        # stacked row-block index matrices for Phi^{k-1}, k = 1..T
        self.RB = [None]
        self.SB = [None]
        for k in range(1, T + 1):
            X = self.iPx[k - 1, :k].transpose(1, 0, 2).reshape(n_x, k * n_x)
            U = self.iPu[k - 1, :k].transpose(1, 0, 2).reshape(n_u, k * n_x)
            self.RB.append(np.vstack([X, U]))
            SX = self.iSx[k - 1, :k].transpose(1, 0, 2).reshape(n_x, k * n_x)
            SU = self.iSu[k - 1, :k].transpose(1, 0, 2).reshape(n_u, k * n_x)
            self.SB.append(np.vstack([SX, SU]))
        valid_x = self.iPx >= 0
        valid_u = self.iPu >= 0
        self.phi_flat = np.concatenate([self.iPx[valid_x], self.iPu[valid_u]])
        self.slack_flat = np.concatenate([self.iSx[valid_x], self.iSu[valid_u]])

    def _perf_axis_rows(self, P: PerformanceSpec):
        """For block-diagonal C, D with one nonzero per row: list of (k, position, weight) per output row."""
        if np.any(P.C.blocks[:, 1:]) or np.any(P.D.blocks[:, 1:]):
            return None
        out = []
        for k in range(self.T):
            CD = np.hstack([P.C.blocks[k, 0], P.D.blocks[k, 0]])
            for r in range(CD.shape[0]):
                ax = _axis_row(CD[r])
                if ax is None:
                    if np.any(CD[r]):
                        return None
                    continue
                out.append((k, ax[0], ax[1]))
        return out

    # --------------------------------------------------------------- objective
    def _objective_matrix(self) -> sp.csc_matrix:
        spec = self.spec
        rows, cols, vals = [], [], []

        def blk(idx, M):
            r, c = np.meshgrid(idx, idx, indexing="ij")
            rows.append(r.ravel())
            cols.append(c.ravel())
            vals.append(2.0 * M.ravel())

        for k in range(self.T):
            blk(self.iz[k], spec.Q)
            blk(self.iv[k], spec.R)
        blk(self.iz[self.T], spec.Q_f)
        rows.append(np.arange(self.n))
        cols.append(np.arange(self.n))
        vals.append(np.full(self.n, 2.0 * spec.lam))
        P = sp.coo_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(self.n, self.n))
        return P.tocsc()

    def objective(self, beta) -> float:
        return float(0.5 * beta @ (self._P @ beta))

    def gradient(self, beta) -> np.ndarray:
        return self._P @ beta

    def objective_hessian(self) -> sp.csc_matrix:
        return self._P

    def nominal_cost(self, beta) -> float:
        return self.spec.nominal_cost(beta[self.iz], beta[self.iv])

    # -------------------------------------------------------------- evaluation
    def _stage_data(self, Z, V, deriv: bool):
        spec, model = self.spec, self.spec.model
        d = self.n_x + self.n_u
        need_theta = bool(self.param)
        out = []
        for k in range(self.T):
            z, v = Z[k], V[k]
            st = {"fb": np.asarray(model.fbar(z, v), dtype=float)}
            Ab, Bb, At, Bt = model.jacobians(z, v)
            st.update(Ab=Ab, Bb=Bb, At=At, Bt=Bt)
            if need_theta:
                st["Ft"] = np.asarray(model.ftheta(z, v), dtype=float).reshape(self.n_x, self.n_theta)
            if deriv and spec.robust and k >= 1:
                H = model.hessians(z, v, np.zeros(self.n_theta))
                st["dAb"] = H[:, :self.n_x, :].transpose(2, 0, 1)
                st["dBb"] = H[:, self.n_x:, :].transpose(2, 0, 1)
            if deriv and need_theta:
                zeta = np.concatenate([z, v])
                hstep = 1e-5 * np.maximum(1.0, np.abs(zeta))
                dAt = np.zeros((d,) + At.shape)
                dBt = np.zeros((d,) + Bt.shape)
                for l in range(d):
                    e = np.zeros(d)
                    e[l] = hstep[l]
                    zp, zm = zeta + e, zeta - e
                    Ap, Bp = model.theta_jacobians(zp[:self.n_x], zp[self.n_x:])
                    Am, Bm = model.theta_jacobians(zm[:self.n_x], zm[self.n_x:])
                    dAt[l] = (Ap - Am) / (2 * hstep[l])
                    dBt[l] = (Bp - Bm) / (2 * hstep[l])
                st["dAt"], st["dBt"] = dAt, dBt
                # d ftheta[:, j] / d zeta_l = [A_theta_j, B_theta_j][:, l]
                st["dFt"] = np.concatenate([At, Bt], axis=2).transpose(2, 1, 0)
            out.append(st)
        return out

    def _evaluate(self, beta, jac: bool, record: bool = False):
        spec = self.spec
        T, n_x, n_u = self.T, self.n_x, self.n_u
        d = n_x + n_u
        beta = np.asarray(beta, dtype=float)
        self._beta_cache = beta
        Z = beta[self.iz]
        V = beta[self.iv]
        stages = self._stage_data(Z, V, deriv=jac)
        eq = _Rows(jac)
        ineq = _Rows(jac)

        # initial state and nominal dynamics
        s = eq.add("initial_state", Z[0] - spec.x0, linear=True)
        eq.trip(s + np.arange(n_x), self.iz[0], 1.0)
        dyn = np.array([Z[k + 1] - stages[k]["fb"] for k in range(T)])
        s = eq.add("dynamics", dyn, linear=False)
        if jac:
            for k in range(T):
                r0 = s + k * n_x + np.arange(n_x)
                eq.trip(r0, self.iz[k + 1], 1.0)
                eq.trip(r0[:, None], self.iz[k][None, :], -stages[k]["Ab"])
                eq.trip(r0[:, None], self.iv[k][None, :], -stages[k]["Bb"])

        if not spec.robust:
            self._nominal_constraints(ineq, beta, Z, V)
            return eq, ineq

        Px = np.where(self.iPx >= 0, beta[np.maximum(self.iPx, 0)], 0.0)
        Pu = np.where(self.iPu >= 0, beta[np.maximum(self.iPu, 0)], 0.0)
        sig = beta[self.isig]
        tau = beta[self.itau]

        # affine subspace: Phi_x[k,c] - A_k Phi_x[k-1,c] - B_k Phi_u[k-1,c] - [c==k] diag(sigma_k)
        for k in range(T):
            R = Px[k, :k + 1].copy()
            if k >= 1:
                A, B = stages[k]["Ab"], stages[k]["Bb"]
                R[:k] -= np.einsum("ad,cdb->cab", A, Px[k - 1, :k]) + np.einsum("ae,ceb->cab", B, Pu[k - 1, :k])
            R[k] -= np.diag(sig[k])
            s = eq.add(f"slp_{k}", R, linear=False)
            if not jac:
                continue
            rid = s + np.arange((k + 1) * n_x * n_x).reshape(k + 1, n_x, n_x)  # [c, a, b]
            eq.trip(rid, self.iPx[k, :k + 1], 1.0)
            eq.trip(rid[k, np.arange(n_x), np.arange(n_x)], self.isig[k], -1.0)
            if k >= 1:
                # d/dPx[k-1,c,dd,b] of row (c,a,b) = -A[a,dd]
                eq.trip(rid[:k, :, :, None], self.iPx[k - 1, :k].transpose(0, 2, 1)[:, None, :, :],
                        -A[None, :, None, :])
                eq.trip(rid[:k, :, :, None], self.iPu[k - 1, :k].transpose(0, 2, 1)[:, None, :, :],
                        -B[None, :, None, :])
                dA, dB = stages[k]["dAb"], stages[k]["dBb"]
                dval = -(np.einsum("lad,cdb->cabl", dA, Px[k - 1, :k]) + np.einsum("lae,ceb->cabl", dB, Pu[k - 1, :k]))
                zeta_idx = np.concatenate([self.iz[k], self.iv[k]])
                eq.trip(rid[:k, :, :, None], zeta_idx[None, None, None, :], dval)

        # entry slacks: -S <= Phi <= S
        phi = beta[self.phi_flat]
        S = beta[self.slack_flat]
        nphi = phi.size
        s = ineq.add("phi_abs", np.concatenate([phi - S, -phi - S]), linear=True)
        if record:
            self._abs_registry.append((s, nphi, self.slack_flat))
        if jac:
            loc = np.arange(nphi)
            ineq.trip(s + loc, self.phi_flat, 1.0)
            ineq.trip(s + nphi + loc, self.phi_flat, -1.0)
            ineq.trip(s + loc, self.slack_flat, -1.0)
            ineq.trip(s + nphi + loc, self.slack_flat, -1.0)

        self._filter_constraints(ineq, beta, stages, Px, Pu, sig, tau, record)
        self._tightening_constraints(ineq, beta, Z, V, Px, Pu, record)

        # tau_k >= ||Phi^{k-1}||_inf
        for k in range(1, T):
            SBk = self.SB[k]
            s = ineq.add(f"tau_{k}", beta[SBk].sum(axis=1) - tau[k], linear=True)
            if jac:
                rows = s + np.arange(d)
                ineq.trip(rows[:, None], SBk, 1.0)
                ineq.trip(rows, self.itau[k], -1.0)

        if spec.performance is not None:
            self._performance_constraints(ineq, beta, Px, Pu, record)
        return eq, ineq

    def _nominal_constraints(self, ineq: _Rows, beta, Z, V):
        spec = self.spec
        T = self.T
        ZV = np.hstack([Z[:T], V])
        s = ineq.add("stage", ZV @ spec.C.T + spec.b, linear=True)
        n_c = spec.C.shape[0]
        for k in range(T):
            zeta_idx = np.concatenate([self.iz[k], self.iv[k]])
            ineq.trip((s + k * n_c + np.arange(n_c))[:, None], zeta_idx[None, :], spec.C)
        s = ineq.add("terminal", spec.C_f @ Z[T] + spec.b_f, linear=True)
        ineq.trip((s + np.arange(spec.C_f.shape[0]))[:, None], self.iz[T][None, :], spec.C_f)

    def _add_abs(self, ineq: _Rows, name, r, loc_rows, cols, vals, slack_idx, linear, record):
        """Rows ``r - s <= 0`` and ``-r - s <= 0``; ``(loc_rows, cols, vals)`` are triplets of ``dr``."""
        r = np.ravel(r)
        slack_idx = np.ravel(slack_idx)
        s_val = self._beta_cache[slack_idx]
        n = r.size
        start = ineq.add(name, np.concatenate([r - s_val, -r - s_val]), linear=linear)
        if record:
            self._abs_registry.append((start, n, slack_idx))
        if ineq.jac:
            for lr, c, v in zip(loc_rows, cols, vals):
                ineq.trip(start + lr, c, v)
                ineq.trip(start + n + lr, c, -np.asarray(v))
            loc = np.arange(n)
            ineq.trip(start + loc, slack_idx, -1.0)
            ineq.trip(start + n + loc, slack_idx, -1.0)
        return start

    def _filter_constraints(self, ineq: _Rows, beta, stages, Px, Pu, sig, tau, record):
        spec = self.spec
        T, n_x = self.T, self.n_x
        tr = self.trows
        nr = tr.size
        eE = support_rowwise(self.E, np.eye(n_x))
        for g, th in enumerate(self.param):
            for k in range(T):
                st = stages[k]
                zeta_idx = np.concatenate([self.iz[k], self.iv[k]])
                if k >= 1:
                    M = np.tensordot(th, st["At"], axes=1)[tr]  # (nr, n_x)
                    N = np.tensordot(th, st["Bt"], axes=1)[tr]  # (nr, n_u)
                    Xp, Up = Px[k - 1, :k], Pu[k - 1, :k]  # (k, n_x, n_x) [c, a, b]
                    r = np.einsum("ia,cab->icb", M, Xp) + np.einsum("ie,ceb->icb", N, Up)
                    loc = np.arange(nr * k * n_x).reshape(nr, k, n_x)  # [i, c, b]
                    trip_rows, trip_cols, trip_vals = [], [], []
                    if ineq.jac:
                        # dr[i,c,b]/dPx[k-1,c,a,b] = M[i,a]
                        trip_rows.append(loc[..., None])
                        trip_cols.append(self.iPx[k - 1, :k].transpose(0, 2, 1)[None])
                        trip_vals.append(M[:, None, None, :])
                        trip_rows.append(loc[..., None])
                        trip_cols.append(self.iPu[k - 1, :k].transpose(0, 2, 1)[None])
                        trip_vals.append(N[:, None, None, :])
                        dM = np.tensordot(th, st["dAt"], axes=([0], [1]))[:, tr]  # (d, nr, n_x)
                        dN = np.tensordot(th, st["dBt"], axes=([0], [1]))[:, tr]
                        dr = np.einsum("lia,cab->icbl", dM, Xp) + np.einsum("lie,ceb->icbl", dN, Up)
                        trip_rows.append(loc[..., None])
                        trip_cols.append(zeta_idx[None, None, None, :])
                        trip_vals.append(dr)
                    self._add_abs(ineq, f"filter_abs_{g}_{k}", r, trip_rows, trip_cols, trip_vals,
                                  self.iF[g][k], linear=False, record=record)
                rt = (st["Ft"] @ th)[tr]
                trip = ([], [], [])
                if ineq.jac:
                    dft = np.einsum("lij,j->il", st["dFt"], th)[tr]
                    trip = ([np.arange(nr)[:, None]], [zeta_idx[None, :]], [dft])
                self._add_abs(ineq, f"ftheta_abs_{g}_{k}", rt, *trip, self.iFt[g][k], linear=False, record=record)
        # filter sums: all rows for the first vertex; further vertices only differ in the parameter rows
        n_blocks = max(len(self.param), 1)
        for g in range(n_blocks):
            rows_g = np.arange(n_x) if g == 0 else tr
            pos = np.searchsorted(rows_g, tr)  # where the parameter rows sit inside rows_g
            for k in range(T):
                val = eE[rows_g] + spec.mu[rows_g] * tau[k] ** 2 - sig[k, rows_g]
                if self.param:
                    val[pos] += beta[self.iFt[g][k]]
                    if k >= 1:
                        val[pos] += beta[self.iF[g][k]].sum(axis=(1, 2))
                s = ineq.add(f"filter_{g}_{k}", val, linear=False)
                if ineq.jac:
                    rows = s + np.arange(rows_g.size)
                    ineq.trip(rows, self.isig[k, rows_g], -1.0)
                    ineq.trip(rows, self.itau[k], 2.0 * spec.mu[rows_g] * tau[k])
                    if self.param:
                        ineq.trip(rows[pos], self.iFt[g][k], 1.0)
                        if k >= 1:
                            ineq.trip(rows[pos][:, None], self.iF[g][k].reshape(nr, -1), 1.0)

    def _tightening_constraints(self, ineq: _Rows, beta, Z, V, Px, Pu, record):
        spec = self.spec
        T, n_x = self.T, self.n_x
        n_c = spec.C.shape[0]
        for k in range(T):
            zeta_idx = np.concatenate([self.iz[k], self.iv[k]])
            zv = np.concatenate([Z[k], V[k]])
            vals = spec.C @ zv + spec.b
            extra_rows = []
            if k >= 1:
                RB, SB = self.RB[k], self.SB[k]
                Phi = beta[RB]
                for i in range(n_c):
                    ax = self.axis_rows[i]
                    if ax is not None:
                        vals[i] += abs(ax[1]) * beta[SB[ax[0]]].sum()
                        extra_rows.append((i, SB[ax[0]], abs(ax[1])))
                    else:
                        G = self.iG[(k, i)].ravel()
                        r = spec.C[i] @ Phi
                        loc = np.arange(r.size)
                        self._add_abs(ineq, f"tighten_abs_{k}_{i}", r, [loc[:, None]], [RB.T],
                                      [spec.C[i][None, :]], G, linear=True, record=record)
                        vals[i] += beta[G].sum()
                        extra_rows.append((i, G, 1.0))
            s = ineq.add(f"stage_{k}", vals, linear=True)
            if ineq.jac:
                rows = s + np.arange(n_c)
                ineq.trip(rows[:, None], zeta_idx[None, :], spec.C)
                for i, idx, w in extra_rows:
                    ineq.trip(s + i, idx, w)
        # terminal
        RB = self.RB[T][:n_x]
        SB = self.SB[T][:n_x]
        Phi = beta[RB]
        vals = spec.C_f @ Z[T] + spec.b_f
        extra_rows = []
        for i in range(spec.C_f.shape[0]):
            ax = self.axis_rows_f[i]
            if ax is not None:
                vals[i] += abs(ax[1]) * beta[SB[ax[0]]].sum()
                extra_rows.append((i, SB[ax[0]], abs(ax[1])))
            else:
                G = self.iGf[i].ravel()
                r = spec.C_f[i] @ Phi
                loc = np.arange(r.size)
                self._add_abs(ineq, f"terminal_abs_{i}", r, [loc[:, None]], [RB.T],
                              [spec.C_f[i][None, :]], G, linear=True, record=record)
                vals[i] += beta[G].sum()
                extra_rows.append((i, G, 1.0))
        s = ineq.add("terminal", vals, linear=True)
        if ineq.jac:
            ineq.trip((s + np.arange(spec.C_f.shape[0]))[:, None], self.iz[T][None, :], spec.C_f)
            for i, idx, w in extra_rows:
                ineq.trip(s + i, idx, w)

    def _performance_constraints(self, ineq: _Rows, beta, Px, Pu, record):
        P = self.spec.performance
        T, n_x = self.T, self.n_x
        if self.perf_axis is not None:
            vals = []
            trips = []
            for r, (k, pos, w) in enumerate(self.perf_axis):
                idx = self.SB[k + 1][pos]
                vals.append(abs(w) * beta[idx].sum() - P.gamma)
                trips.append((r, idx, abs(w)))
            s = ineq.add("performance", vals, linear=True)
            if ineq.jac:
                for r, idx, w in trips:
                    ineq.trip(s + r, idx, w)
            return
        # general C, D: own slacks for every entry of the dense product
        Xi = self._dense_index(self.iPx, n_x)
        Ui = self._dense_index(self.iPu, self.n_u)
        Cd, Dd = P.C.dense(), P.D.dense()
        Xv = np.where(Xi >= 0, beta[np.maximum(Xi, 0)], 0.0)
        Uv = np.where(Ui >= 0, beta[np.maximum(Ui, 0)], 0.0)
        M = Cd @ Xv + Dd @ Uv
        ny = M.shape[0]
        loc = np.arange(M.size).reshape(M.shape)  # [r, col]
        # dM[r, col]/dX[q, col] = Cd[r, q]
        trip_rows = [loc[:, :, None], loc[:, :, None]]
        trip_cols = [Xi.T[None, :, :], Ui.T[None, :, :]]
        trip_vals = [Cd[:, None, :], Dd[:, None, :]]
        self._add_abs(ineq, "performance_abs", M, trip_rows, trip_cols, trip_vals, self.iY, linear=True, record=record)
        s = ineq.add("performance", beta[self.iY].sum(axis=1) - P.gamma, linear=True)
        if ineq.jac:
            ineq.trip((s + np.arange(ny))[:, None], self.iY, 1.0)

    def _dense_index(self, idx, p):
        T, n_x = self.T, self.n_x
        out = -np.ones((T * p, T * n_x), dtype=int)
        for k in range(T):
            for c in range(k + 1):
                out[k * p:(k + 1) * p, c * n_x:(c + 1) * n_x] = idx[k, c]
        return out

    # ------------------------------------------------------------- public API
    def constraints(self, beta):
        eq, ineq = self._evaluate(beta, jac=False)
        ge, gi = eq.values(), ineq.values()
        self._check_finite(ge, "equality", self.eq_groups)
        self._check_finite(gi, "inequality", self.in_groups)
        return ge, gi

    def jacobians(self, beta):
        eq, ineq = self._evaluate(beta, jac=True)
        ge, gi = eq.values(), ineq.values()
        self._check_finite(ge, "equality", self.eq_groups)
        self._check_finite(gi, "inequality", self.in_groups)
        return ge, gi, eq.matrix(self.n), ineq.matrix(self.n)

    def _check_finite(self, vals, kind, groups):
        bad = np.flatnonzero(~np.isfinite(vals))
        if bad.size:
            i = int(bad[0])
            for name, start, count, _ in groups:
                if start <= i < start + count:
                    raise NonFiniteError(kind, name, i - start)

    def row_identity(self, kind: str, index: int) -> tuple[str, int]:
        groups = self.eq_groups if kind == "eq" else self.in_groups
        for name, start, count, _ in groups:
            if start <= index < start + count:
                return name, index - start
        raise IndexError(index)

    def violation(self, beta) -> float:
        ge, gi = self.constraints(beta)
        v = 0.0
        if ge.size:
            v = max(v, np.abs(ge).max())
        if gi.size:
            v = max(v, gi.max())
        v = max(v, np.max(self.lb - beta, initial=0.0), np.max(beta - self.ub, initial=0.0))
        return float(max(v, 0.0))

    def tighten_slacks(self, beta) -> np.ndarray:
        """Copy of ``beta`` with every abs-slack set to ``|r|`` exactly."""
        beta = np.array(beta, dtype=float)
        if not self.spec.robust:
            return beta
        # entry slacks first: other groups do not read them when evaluating r
        slack_all = np.concatenate([reg[2] for reg in self._abs_registry])
        beta[slack_all] = 0.0
        _, gi = self.constraints(beta)
        for start, n, idx in self._abs_registry:
            beta[idx] = np.abs(gi[start:start + n])
        return beta

    def verify(self, beta, tol: float = 1e-6) -> dict:
        """Re-check the original norm constraints with the slack-free kernels."""
        spec, model = self.spec, self.spec.model
        sol = self.unpack(beta)
        z, v, resp = sol.z, sol.v, sol.resp
        T = self.T
        out = {"dynamics": float(max(np.abs(z[k + 1] - model.fbar(z[k], v[k])).max() for k in range(T))),
               "initial": float(np.abs(z[0] - spec.x0).max())}
        if resp is None:
            zv = np.hstack([z[:T], v])
            out["stage"] = float((zv @ spec.C.T + spec.b).max(initial=-np.inf))
            out["terminal"] = float((spec.C_f @ z[T] + spec.b_f).max(initial=-np.inf))
        else:
            jacs = [model.jacobians(z[k], v[k]) for k in range(T)]
            res = slp_residual(np.array([j[0] for j in jacs]), np.array([j[1] for j in jacs]), resp)
            out["slp"] = float(np.abs(res.blocks).max())
            worst = -np.inf
            for k in range(T):
                Ft = np.asarray(model.ftheta(z[k], v[k])).reshape(self.n_x, self.n_theta)
                for i in range(self.n_x):
                    for th in self.thetas:
                        lhs = filter_lhs(k, i, th, jacs[k][2], jacs[k][3], Ft, self.E.E, spec.mu, resp)
                        worst = max(worst, lhs - resp.sigma[k, i])
            out["filter"] = float(worst)
            out["stage"] = float(max((tighten_lhs(spec.C[i], spec.b[i], z[k], v[k], resp, k)
                                      for k in range(T) for i in range(spec.C.shape[0])), default=-np.inf))
            out["terminal"] = float(max((tighten_terminal_lhs(spec.C_f[i], spec.b_f[i], z[T], resp)
                                         for i in range(spec.C_f.shape[0])), default=-np.inf))
            out["tau"] = float(max(tau_lhs(resp, k) - resp.tau[k] for k in range(T)))
            out["sigma_min"] = float(spec.sigma_min - resp.sigma.min())
            if spec.performance is not None:
                out["performance"] = float(perf_lhs(spec.performance, resp) - spec.performance.gamma)
        eqs = ("dynamics", "initial", "slp")
        bad = [k for k, val in out.items() if (abs(val) if k in eqs else val) > tol]
        out["ok"] = not bad
        out["message"] = ", ".join(bad)
        return out

    def pack(self, z, v, resp: SlsResponse | None = None) -> np.ndarray:
        beta = np.zeros(self.n)
        beta[self.iz] = np.asarray(z, dtype=float)
        beta[self.iv] = np.asarray(v, dtype=float)
        if self.spec.robust and resp is not None:
            for k in range(self.T):
                for c in range(k + 1):
                    beta[self.iPx[k, c]] = resp.Phi_x.blocks[k, k - c]
                    beta[self.iPu[k, c]] = resp.Phi_u.blocks[k, k - c]
            beta[self.isig] = resp.sigma
            beta[self.itau] = resp.tau
        return self.tighten_slacks(beta)

    def unpack(self, beta) -> SlsSolution:
        beta = np.asarray(beta, dtype=float)
        z = beta[self.iz].copy()
        v = beta[self.iv].copy()
        resp = None
        if self.spec.robust:
            T = self.T
            bx = np.zeros((T, T, self.n_x, self.n_x))
            bu = np.zeros((T, T, self.n_u, self.n_x))
            for k in range(T):
                for c in range(k + 1):
                    bx[k, k - c] = beta[self.iPx[k, c]]
                    bu[k, k - c] = beta[self.iPu[k, c]]
            resp = SlsResponse(CausalOperator(bx), CausalOperator(bu), beta[self.isig].copy(), beta[self.itau].copy())
        spec = self.spec
        return SlsSolution(z, v, resp, mu=spec.mu.copy(), nominal_cost=spec.nominal_cost(z, v),
                           C=spec.C.copy(), b=spec.b.copy(), C_f=spec.C_f.copy(), b_f=spec.b_f.copy())


def assemble(spec: OcpSpec) -> NlpProblem:
    return NlpProblem(spec)


def eval_constraints(p: NlpProblem, beta):
    return p.constraints(beta)


def eval_jacobians(p: NlpProblem, beta):
    _, _, Je, Ji = p.jacobians(beta)
    Je, Ji = Je.tocoo(), Ji.tocoo()
    return (Je.row, Je.col, Je.data), (Ji.row, Ji.col, Ji.data)


def open_loop_response(spec: OcpSpec, z, v) -> SlsResponse:
    """``Phi_u = 0`` response whose filter covers the additive and parametric terms at ``tau = 0``."""
    model = spec.model
    T, n_x, n_u = spec.T, model.n_x, model.n_u
    E = spec.disturbance_set().E
    thetas = spec.theta_vertices()
    jacs = [model.jacobians(z[k], v[k]) for k in range(T)]
    A_seq = np.array([j[0] for j in jacs])
    B_seq = np.array([j[1] for j in jacs])
    K0 = CausalOperator.zeros(T, n_u, n_x)
    sigma = np.maximum(np.tile(support_rowwise(BoxImageSet(E), np.eye(n_x)), (T, 1)), spec.sigma_min)
    resp = closed_loop_response(A_seq, B_seq, K0, sigma)
    for _ in range(3):
        new = np.zeros_like(sigma)
        for k in range(T):
            Ft = np.asarray(model.ftheta(z[k], v[k]))
            for i in range(n_x):
                new[k, i] = max(filter_lhs(k, i, th, jacs[k][2], jacs[k][3], Ft, E, spec.mu, resp) for th in thetas)
        sigma = np.maximum(new, spec.sigma_min)
        resp = closed_loop_response(A_seq, B_seq, K0, sigma)
    resp.tau = np.array([tau_lhs(resp, k) for k in range(T)])
    return resp


class NominalInfeasible(RuntimeError):
    """Phase 1 of the initial guess could not find a feasible nominal trajectory."""


def initial_guess(spec: OcpSpec, cfg=None) -> np.ndarray:
    """Two-phase starting point for :class:`NlpProblem` built from ``spec``.

    Phase 1 solves the nominal problem from a zero-input rollout. Phase 2 adds the
    open-loop response (``Phi_u = 0``) with filter and error bounds evaluated
    along the nominal trajectory; slacks are set to the magnitudes they bound.
    """
    from .solver import SolverConfig, solve

    cfg = cfg or SolverConfig()
    model = spec.model
    v0 = np.zeros((spec.T, model.n_u))
    z0 = rollout_nominal(model, spec.x0, v0)
    nom = NlpProblem(spec.with_mode("nominal"))
    beta_nom, rep = solve(nom, cfg, nom.pack(z0, v0))
    if rep.status == "infeasible":
        raise NominalInfeasible(rep.message or "nominal problem infeasible")
    z, v = beta_nom[nom.iz], beta_nom[nom.iv]
    p = NlpProblem(spec)
    if not spec.robust:
        return beta_nom
    return p.pack(z, v, open_loop_response(spec, z, v))
