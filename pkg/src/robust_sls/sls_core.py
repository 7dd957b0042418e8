"""System-level constraint kernels for the filter-based error parameterization.

Conventions: ``Phi_x`` and ``Phi_u`` map the unit noise sequence ``w~_0..w~_{T-1}``
to the errors ``(dx_{k+1}, du_{k+1})`` in block row ``k``. Block row ``-1`` is zero
(``dx_0 = 0``), so quantities "at time ``k``" use block row ``k - 1``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .blockops import BlockDiagonal, CausalOperator, DimensionError, block_row, shift_apply, stack_rows

SIGMA_MIN = 1e-8


class ConditioningError(np.linalg.LinAlgError):
    def __init__(self, k: int, message: str = ""):
        super().__init__(message or f"diagonal block {k} of Phi_x is singular")
        self.k = k


@dataclass
class SlsResponse:
    Phi_x: CausalOperator
    Phi_u: CausalOperator
    sigma: np.ndarray  # (T, n_x)
    tau: np.ndarray  # (T,)

    def __post_init__(self):
        self.sigma = np.atleast_2d(np.asarray(self.sigma, dtype=float))
        self.tau = np.atleast_1d(np.asarray(self.tau, dtype=float))
        T = self.Phi_x.T
        if self.Phi_u.T != T or self.sigma.shape[0] != T or self.tau.shape[0] != T:
            raise DimensionError("horizon mismatch inside SlsResponse", axis="T")
        if self.Phi_u.q != self.Phi_x.p or self.Phi_x.p != self.Phi_x.q:
            raise DimensionError("Phi_x must be square-blocked and Phi_u must share its columns", axis="n_x")

    @property
    def T(self) -> int:
        return self.Phi_x.T

    @property
    def n_x(self) -> int:
        return self.Phi_x.p

    @property
    def n_u(self) -> int:
        return self.Phi_u.p

    def row(self, k: int) -> np.ndarray:
        """Stacked ``[Phi_x^k; Phi_u^k]`` (zero for ``k = -1``)."""
        return stack_rows(self.Phi_x, self.Phi_u, k)

    @classmethod
    def zeros(cls, T: int, n_x: int, n_u: int) -> "SlsResponse":
        return cls(CausalOperator.zeros(T, n_x, n_x), CausalOperator.zeros(T, n_u, n_x),
                   np.zeros((T, n_x)), np.zeros(T))


@dataclass
class Tube:
    z: np.ndarray  # (T+1, n_x)
    v: np.ndarray  # (T, n_u)
    x_half: np.ndarray  # (T+1, n_x)
    u_half: np.ndarray  # (T, n_u)

    def to_dict(self) -> dict:
        return {k: getattr(self, k).tolist() for k in ("z", "v", "x_half", "u_half")}


@dataclass
class PerformanceSpec:
    C: CausalOperator
    D: CausalOperator
    gamma: float

    def __post_init__(self):
        if not self.gamma > 0:
            raise ValueError("performance bound gamma must be positive")
        if self.C.p != self.D.p or self.C.T != self.D.T:
            raise DimensionError("C and D must share horizon and output dimension", axis="n_y")

    @classmethod
    def state_bound(cls, T: int, n_x: int, n_u: int, gamma: float) -> "PerformanceSpec":
        """``||dx||_inf <= gamma``, i.e. ``C = I``, ``D = 0``."""
        return cls(CausalOperator.identity(T, n_x), CausalOperator.zeros(T, n_x, n_u), gamma)


def _stacked_blocks(seq, T: int) -> BlockDiagonal:
    """``blkdiag(M_1, ..., M_{T-1}, 0)`` from a length-``T`` sequence ``M_0..M_{T-1}``."""
    seq = np.asarray(seq, dtype=float)
    out = np.zeros_like(seq)
    out[:T - 1] = seq[1:T]
    return BlockDiagonal(out)


def slp_residual(A_seq, B_seq, resp: SlsResponse) -> CausalOperator:
    """``Phi_x - Z A Phi_x - Z B Phi_u - Sigma``; zero iff the affine subspace constraint holds."""
    T = resp.T
    A_seq = np.asarray(A_seq, dtype=float)
    B_seq = np.asarray(B_seq, dtype=float)
    if A_seq.shape != (T, resp.n_x, resp.n_x):
        raise DimensionError(f"A_seq has shape {A_seq.shape}", axis="A")
    if B_seq.shape != (T, resp.n_x, resp.n_u):
        raise DimensionError(f"B_seq has shape {B_seq.shape}", axis="B")
    ZA = shift_apply(_stacked_blocks(A_seq, T), resp.Phi_x)
    ZB = shift_apply(_stacked_blocks(B_seq, T), resp.Phi_u)
    Sig = CausalOperator.block_diagonal(np.array([np.diag(s) for s in resp.sigma]))
    return resp.Phi_x - ZA - ZB - Sig


def closed_loop_response(A_seq, B_seq, K: CausalOperator, sigma) -> SlsResponse:
    """``Phi_x = (I - Z(A + B K))^{-1} Sigma``, ``Phi_u = K Phi_x`` (dense construction)."""
    A_seq = np.asarray(A_seq, dtype=float)
    B_seq = np.asarray(B_seq, dtype=float)
    sigma = np.atleast_2d(np.asarray(sigma, dtype=float))
    T, n_x = sigma.shape
    n_u = B_seq.shape[2]
    Z = np.kron(np.eye(T, k=-1), np.eye(n_x))
    Ad = _stacked_blocks(A_seq, T).dense()
    Bd = _stacked_blocks(B_seq, T).dense()
    Kd = K.dense()
    Sd = np.diag(sigma.reshape(-1))
    Px = np.linalg.solve(np.eye(T * n_x) - Z @ (Ad + Bd @ Kd), Sd)
    Pu = Kd @ Px
    return SlsResponse(CausalOperator.from_dense(Px, T, n_x, n_x, check=False),
                       CausalOperator.from_dense(Pu, T, n_u, n_x, check=False), sigma, np.zeros(T))


def _theta_mats(A_th, B_th, theta):
    theta = np.atleast_1d(np.asarray(theta, dtype=float))
    return np.tensordot(theta, np.asarray(A_th), axes=1), np.tensordot(theta, np.asarray(B_th), axes=1)


def filter_parts(k: int, i: int, theta, A_th, B_th, ftheta_zv, E, mu, resp: SlsResponse) -> tuple[float, float, float]:
    """(parametric, linearization, additive) column-group 1-norms of filter row ``(k, i)``."""
    Am, Bm = _theta_mats(A_th, B_th, theta)
    lin_map = np.hstack([Am, Bm])[i] @ resp.row(k - 1)
    par = np.abs(lin_map).sum() + abs(np.asarray(ftheta_zv)[i] @ np.atleast_1d(theta))
    add = np.abs(np.atleast_2d(E)[i]).sum()
    mu = np.atleast_1d(mu)
    lin = abs(resp.tau[k] ** 2 * mu[i])
    return float(par), float(lin), float(add)


def filter_lhs(k: int, i: int, theta, A_th, B_th, ftheta_zv, E, mu, resp: SlsResponse) -> float:
    """``||h_i^T [Delta_k theta Phi^{k-1}, ftheta theta, E, tau_k^2 mu]||_1``."""
    return float(sum(filter_parts(k, i, theta, A_th, B_th, ftheta_zv, E, mu, resp)))


def tighten_lhs(c, b: float, z_k, v_k, resp: SlsResponse, k: int) -> float:
    """``c^T (z_k, v_k) + b + ||c^T Phi^{k-1}||_1``."""
    c = np.asarray(c, dtype=float)
    zv = np.concatenate([np.atleast_1d(z_k), np.atleast_1d(v_k)])
    if c.shape != zv.shape:
        raise DimensionError(f"constraint row of length {c.size} against {zv.size} state-input entries", axis="c")
    return float(c @ zv + b + np.abs(c @ resp.row(k - 1)).sum())


def tighten_terminal_lhs(c_f, b_f: float, z_T, resp: SlsResponse) -> float:
    c_f = np.asarray(c_f, dtype=float)
    if c_f.shape != (resp.n_x,):
        raise DimensionError("terminal constraint row has wrong length", axis="c_f")
    return float(c_f @ z_T + b_f + np.abs(c_f @ block_row(resp.Phi_x, resp.T - 1)).sum())


def tau_lhs(resp: SlsResponse, k: int) -> float:
    """Induced inf-norm of ``Phi^{k-1}``."""
    return float(np.abs(resp.row(k - 1)).sum(axis=1).max())


def perf_lhs(spec: PerformanceSpec, resp: SlsResponse) -> float:
    M = spec.C.dense() @ resp.Phi_x.dense() + spec.D.dense() @ resp.Phi_u.dense()
    return float(np.abs(M).sum(axis=1).max())


def recover_gains(resp: SlsResponse, sigma_min: float = SIGMA_MIN) -> CausalOperator:
    """Causal ``K`` with ``K Phi_x = Phi_u`` by block forward substitution over delays."""
    T, n_x, n_u = resp.T, resp.n_x, resp.n_u
    Px, Pu = resp.Phi_x.blocks, resp.Phi_u.blocks
    inv_diag = []
    for k in range(T):
        D = Px[k, 0]
        if np.any(np.abs(np.diag(D)) < sigma_min) or np.linalg.cond(D) > 1e12:
            raise ConditioningError(k)
        inv_diag.append(np.linalg.inv(D))
    K = np.zeros((T, T, n_u, n_x))
    # (K Phi_x)^{k,j} = sum_{l<=j} K^{k,l} Phi_x^{k-l, j-l}
    for k in range(T):
        for j in range(k + 1):
            acc = Pu[k, j].copy()
            for l in range(j):
                acc -= K[k, l] @ Px[k - l, j - l]
            K[k, j] = acc @ inv_diag[k - j]
    return CausalOperator(K)


def tubes(z, v, resp: SlsResponse) -> Tube:
    """Box outer bounds of the reachable sets ``{z_k} + Phi_x^{k-1} B_inf``."""
    z = np.asarray(z, dtype=float)
    v = np.asarray(v, dtype=float)
    T = resp.T
    x_half = np.zeros((T + 1, resp.n_x))
    u_half = np.zeros((T, resp.n_u))
    for k in range(1, T + 1):
        x_half[k] = np.abs(block_row(resp.Phi_x, k - 1)).sum(axis=1)
    for k in range(1, T):
        u_half[k] = np.abs(block_row(resp.Phi_u, k - 1)).sum(axis=1)
    return Tube(z.copy(), v.copy(), x_half, u_half)


def decompose_filter(resp: SlsResponse, model, z, v, mu, theta_star=None, theta_vertices=None) -> np.ndarray:
    """Per ``(k, i)`` split of the filter row into (parametric, linearization, additive).

    ``theta_star=None`` picks, per row, the vertex with the largest filter value.
    Returns an array of shape ``(T, n_x, 3)``.
    """
    from .sets import vertices

    T, n_x = resp.T, resp.n_x
    if theta_star is not None:
        cands = [np.atleast_1d(theta_star)]
    else:
        cands = theta_vertices if theta_vertices is not None else vertices(model.Theta)
    out = np.zeros((T, n_x, 3))
    for k in range(T):
        _, _, At, Bt = model.jacobians(z[k], v[k])
        Ft = np.asarray(model.ftheta(z[k], v[k]))
        for i in range(n_x):
            best = None
            for th in cands:
                parts = filter_parts(k, i, th, At, Bt, Ft, model.E.E, mu, resp)
                if best is None or sum(parts) > sum(best):
                    best = parts
            out[k, i] = best
    return out
