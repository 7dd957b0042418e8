"""Uncertain nonlinear discrete-time models ``x+ = fbar(x,u) + ftheta(x,u) theta + w``."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .sets import BoxImageSet, ParamBox, Polytope


class DivergenceError(FloatingPointError):
    def __init__(self, step: int):
        super().__init__(f"non-finite state encountered at step {step}")
        self.step = step


@dataclass(frozen=True)
class Discretizer:
    """Forward Euler over an outer step ``h`` split into ``m`` inner steps (input held)."""

    h: float = 0.5
    m: int = 10

    def __post_init__(self):
        if self.m < 1:
            raise ValueError("inner step count must be >= 1")
        if self.h <= 0:
            raise ValueError("step size must be positive")

    @property
    def dt(self) -> float:
        return self.h / self.m

    def integrate(self, rhs: Callable, x: np.ndarray, u: np.ndarray) -> np.ndarray:
        x = np.array(x, dtype=float)
        for _ in range(self.m):
            x = x + self.dt * rhs(x, u)
        return x


def _fd_step(x: np.ndarray) -> np.ndarray:
    return 1e-6 * np.maximum(1.0, np.abs(x))


class UncertainModel:
    """Nominal map, parametric map, and derivative oracles.

    ``fbar(x, u)`` returns the nominal successor state and ``ftheta(x, u)`` an
    ``n_x x n_theta`` matrix, so the full map is ``fbar + ftheta @ theta``.
    Derivative oracles are optional; central differences are used otherwise.
    """

    def __init__(self, n_x: int, n_u: int, n_theta: int, fbar: Callable, ftheta: Callable,
                 E: np.ndarray | BoxImageSet, Theta: ParamBox | Polytope,
                 jac_bar: Optional[Callable] = None, jac_theta: Optional[Callable] = None,
                 hessian_batch: Optional[Callable] = None, name: str = "custom", theta_rows=None):
        self.n_x, self.n_u, self.n_theta = int(n_x), int(n_u), int(n_theta)
        self.fbar = fbar
        self.ftheta = ftheta
        self.E = E if isinstance(E, BoxImageSet) else BoxImageSet(E)
        self.Theta = Theta
        self._jac_bar = jac_bar
        self._jac_theta = jac_theta
        self._hessian_batch = hessian_batch
        self.name = name
        # state rows in which ftheta (and hence A_theta, B_theta) can be nonzero
        self.theta_rows = (np.ones(self.n_x, dtype=bool) if theta_rows is None
                           else np.asarray(theta_rows, dtype=bool).reshape(self.n_x))
        if self.E.dim != self.n_x:
            raise ValueError(f"E has {self.E.dim} rows, expected n_x = {self.n_x}")

    @property
    def n_w(self) -> int:
        return self.E.E.shape[1]

    def with_sets(self, E=None, Theta=None) -> "UncertainModel":
        """Copy of the model with a different disturbance image and/or parameter set."""
        out = UncertainModel(self.n_x, self.n_u, self.n_theta, self.fbar, self.ftheta,
                              self.E if E is None else E, self.Theta if Theta is None else Theta,
                              self._jac_bar, self._jac_theta, self._hessian_batch, self.name, self.theta_rows)
        if hasattr(self, "constants"):
            out.constants = dict(self.constants)
        return out

    def step(self, x, u, theta=None, w=None) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        u = np.asarray(u, dtype=float)
        out = np.asarray(self.fbar(x, u), dtype=float)
        if theta is not None:
            out = out + np.asarray(self.ftheta(x, u)) @ np.atleast_1d(theta)
        if w is not None:
            out = out + w
        return out

    def jacobians(self, z, v):
        """``(Abar, Bbar, A_theta, B_theta)``; ``A_theta`` has shape ``(n_theta, n_x, n_x)``."""
        z = np.asarray(z, dtype=float)
        v = np.asarray(v, dtype=float)
        if self._jac_bar is not None:
            Ab, Bb = self._jac_bar(z, v)
        else:
            Ab, Bb = _fd_jac(self.fbar, z, v, self.n_x)
        if self._jac_theta is not None:
            At, Bt = self._jac_theta(z, v)
        else:
            At, Bt = _fd_jac_theta(self.ftheta, z, v, self.n_x, self.n_theta)
        return np.asarray(Ab), np.asarray(Bb), np.asarray(At), np.asarray(Bt)

    def theta_jacobians(self, z, v):
        if self._jac_theta is not None:
            At, Bt = self._jac_theta(z, v)
            return np.asarray(At, dtype=float), np.asarray(Bt, dtype=float)
        return _fd_jac_theta(self.ftheta, np.asarray(z, dtype=float), np.asarray(v, dtype=float),
                             self.n_x, self.n_theta)

    def hessians(self, x, u, theta) -> np.ndarray:
        """Hessians of every component of the full map w.r.t. ``(x, u)``; shape ``(n_x, d, d)``."""
        return self.hessians_batch(np.atleast_2d(x), np.atleast_2d(u), theta)[0]

    def hessians_batch(self, X, U, theta) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        U = np.atleast_2d(np.asarray(U, dtype=float))
        theta = np.atleast_1d(np.asarray(theta, dtype=float))
        if self._hessian_batch is not None:
            return self._hessian_batch(X, U, theta)
        return np.stack([_fd_hessian(lambda x, u: self.step(x, u, theta), x, u) for x, u in zip(X, U)])


def _fd_jac(fun, z, v, n_x):
    hz, hv = _fd_step(z), _fd_step(v)
    A = np.zeros((n_x, z.size))
    B = np.zeros((n_x, v.size))
    for i in range(z.size):
        e = np.zeros_like(z)
        e[i] = hz[i]
        A[:, i] = (np.asarray(fun(z + e, v)) - np.asarray(fun(z - e, v))) / (2 * hz[i])
    for i in range(v.size):
        e = np.zeros_like(v)
        e[i] = hv[i]
        B[:, i] = (np.asarray(fun(z, v + e)) - np.asarray(fun(z, v - e))) / (2 * hv[i])
    return A, B


def _fd_jac_theta(ftheta, z, v, n_x, n_theta):
    At = np.zeros((n_theta, n_x, z.size))
    Bt = np.zeros((n_theta, n_x, v.size))
    for i in range(n_theta):
        col = lambda x, u, i=i: np.asarray(ftheta(x, u))[:, i]
        At[i], Bt[i] = _fd_jac(col, z, v, n_x)
    return At, Bt


def _fd_hessian(fun, x, u, rel: float = 1e-4) -> np.ndarray:
    y0 = np.concatenate([x, u])
    n_x = x.size
    d = y0.size
    step = rel * np.maximum(1.0, np.abs(y0))
    f = lambda y: np.asarray(fun(y[:n_x], y[n_x:]), dtype=float)
    H = np.zeros((np.size(f(y0)), d, d))
    for a in range(d):
        for b in range(a, d):
            ea = np.zeros(d)
            eb = np.zeros(d)
            ea[a] = step[a]
            eb[b] = step[b]
            val = (f(y0 + ea + eb) - f(y0 + ea - eb) - f(y0 - ea + eb) + f(y0 - ea - eb)) / (4 * step[a] * step[b])
            H[:, a, b] = val
            H[:, b, a] = val
    return H


def jacobians_fd(model: UncertainModel, z, v):
    """Central-difference Jacobians of the nominal and parametric maps, ignoring analytic oracles."""
    z = np.asarray(z, dtype=float)
    v = np.asarray(v, dtype=float)
    Ab, Bb = _fd_jac(model.fbar, z, v, model.n_x)
    At, Bt = _fd_jac_theta(model.ftheta, z, v, model.n_x, model.n_theta)
    return Ab, Bb, At, Bt


def rollout_nominal(model: UncertainModel, x0, v_seq) -> np.ndarray:
    """Nominal trajectory ``z_{k+1} = fbar(z_k, v_k)``, ``z_0 = x0``; shape ``(T+1, n_x)``."""
    v_seq = np.asarray(v_seq, dtype=float).reshape(-1, model.n_u)
    z = [np.asarray(x0, dtype=float)]
    for k, v in enumerate(v_seq):
        nxt = np.asarray(model.fbar(z[-1], v), dtype=float)
        if not np.all(np.isfinite(nxt)):
            raise DivergenceError(k + 1)
        z.append(nxt)
    return np.array(z)


def linear_model(A, B, E=None, A_theta=None, B_theta=None, Theta=None, name: str = "linear") -> UncertainModel:
    """``x+ = (A + sum_i theta_i A_theta[i]) x + (B + sum_i theta_i B_theta[i]) u + w``."""
    A = np.atleast_2d(np.asarray(A, dtype=float))
    B = np.atleast_2d(np.asarray(B, dtype=float))
    n_x, n_u = B.shape
    if A_theta is None:
        A_theta = np.zeros((1, n_x, n_x))
    if B_theta is None:
        B_theta = np.zeros((A_theta.shape[0], n_x, n_u))
    A_theta = np.asarray(A_theta, dtype=float)
    B_theta = np.asarray(B_theta, dtype=float)
    n_theta = A_theta.shape[0]
    if E is None:
        E = np.zeros((n_x, 1))
    if Theta is None:
        Theta = ParamBox(np.zeros(n_theta), np.zeros(n_theta))

    def fbar(x, u):
        return A @ x + B @ u

    def ftheta(x, u):
        return (np.einsum("iab,b->ai", A_theta, x) + np.einsum("iab,b->ai", B_theta, u)).reshape(n_x, n_theta)

    def hess(X, U, theta):
        d = n_x + n_u
        return np.zeros((X.shape[0], n_x, d, d))

    return UncertainModel(n_x, n_u, n_theta, fbar, ftheta, E, Theta,
                          jac_bar=lambda z, v: (A, B), jac_theta=lambda z, v: (A_theta, B_theta),
                          hessian_batch=hess, name=name)


# ---------------------------------------------------------------------------
# planar satellite with uncertain inertia

SATELLITE_STATE = ("p_x", "p_y", "psi", "dp_x", "dp_y", "dpsi")
SATELLITE_INPUT = ("v_x", "v_y")


def _satellite_propagate(X, U, mass, arm, disc: Discretizer, order: int):
    """Batched Euler propagation with forward-mode first/second derivatives w.r.t. (x, u)."""
    N = X.shape[0]
    s = X.copy()
    d = 8
    dt = disc.dt
    ux, uy = U[:, 0], U[:, 1]
    J = H = None
    if order >= 1:
        J = np.zeros((N, 6, d))
        J[:, :, :6] = np.eye(6)
    if order >= 2:
        H = np.zeros((N, 6, d, d))
    for _ in range(disc.m):
        psi = s[:, 2]
        c, sn = np.cos(psi), np.sin(psi)
        F = np.stack([s[:, 3], s[:, 4], s[:, 5],
                      (c * ux - sn * uy) / mass,
                      (sn * ux + c * uy) / mass,
                      arm * ux * np.ones(N)], axis=1)
        if order >= 1:
            Fy = np.zeros((N, 6, d))
            Fy[:, 0, 3] = Fy[:, 1, 4] = Fy[:, 2, 5] = 1.0
            Fy[:, 3, 2] = (-sn * ux - c * uy) / mass
            Fy[:, 3, 6] = c / mass
            Fy[:, 3, 7] = -sn / mass
            Fy[:, 4, 2] = (c * ux - sn * uy) / mass
            Fy[:, 4, 6] = sn / mass
            Fy[:, 4, 7] = c / mass
            Fy[:, 5, 6] = arm
            Y = np.zeros((N, d, d))
            Y[:, :6] = J
            Y[:, 6, 6] = Y[:, 7, 7] = 1.0
            if order >= 2:
                # F is nonlinear only in (psi, v_x, v_y) and only in rows 3, 4
                Fyy = np.zeros((N, 2, 3, 3))
                Fyy[:, 0, 0, 0] = (-c * ux + sn * uy) / mass
                Fyy[:, 0, 0, 1] = Fyy[:, 0, 1, 0] = -sn / mass
                Fyy[:, 0, 0, 2] = Fyy[:, 0, 2, 0] = -c / mass
                Fyy[:, 1, 0, 0] = (-sn * ux - c * uy) / mass
                Fyy[:, 1, 0, 1] = Fyy[:, 1, 1, 0] = c / mass
                Fyy[:, 1, 0, 2] = Fyy[:, 1, 2, 0] = -sn / mass
                Ysub = Y[:, [2, 6, 7], :]
                curv = np.matmul(np.swapaxes(Ysub, 1, 2)[:, None], np.matmul(Fyy, Ysub[:, None]))
                dH = np.matmul(Fy[:, :, :6], H.reshape(N, 6, d * d)).reshape(N, 6, d, d)
                dH[:, 3:5] += curv
                H = H + dt * dH
            J = J + dt * np.einsum("nca,nak->nck", Fy, Y)
        s = s + dt * F
    return s, J, H


def satellite_model(mass: float = 1.0, arm: float = 1.0, delta_bound: float = 0.01,
                    h: float = 0.5, inner_steps: int = 10, E: np.ndarray | None = None) -> UncertainModel:
    """Planar rigid body ``p'' = R(psi) v / m``, ``psi'' = l v_x / j`` with ``1/j = 1 + delta``.

    The nominal map integrates the nominal inertia (``1/j = 1``) with forward Euler.
    The inertia perturbation enters only the angular-rate update of the outer
    step, ``ftheta(x, u) = h * l * v_x * e_6``, which keeps the map affine in
    ``delta``.
    """
    if mass <= 0:
        raise ValueError("mass must be positive")
    disc = Discretizer(h, inner_steps)
    if E is None:
        E = 1e-3 * np.vstack([np.zeros((3, 3)), np.eye(3)])

    def fbar(x, u):
        s, _, _ = _satellite_propagate(np.atleast_2d(x).astype(float), np.atleast_2d(u).astype(float),
                                       mass, arm, disc, 0)
        return s[0]

    def ftheta(x, u):
        out = np.zeros((6, 1))
        out[5, 0] = h * arm * u[0]
        return out

    def jac_bar(z, v):
        _, J, _ = _satellite_propagate(np.atleast_2d(z).astype(float), np.atleast_2d(v).astype(float),
                                       mass, arm, disc, 1)
        return J[0, :, :6], J[0, :, 6:]

    def jac_theta(z, v):
        At = np.zeros((1, 6, 6))
        Bt = np.zeros((1, 6, 2))
        Bt[0, 5, 0] = h * arm
        return At, Bt

    def hess(X, U, theta):
        _, _, H = _satellite_propagate(X, U, mass, arm, disc, 2)
        return H

    model = UncertainModel(6, 2, 1, fbar, ftheta, E, ParamBox.symmetric(delta_bound),
                           jac_bar=jac_bar, jac_theta=jac_theta, hessian_batch=hess, name="satellite",
                           theta_rows=np.arange(6) == 5)
    model.constants = {"mass": mass, "arm": arm, "delta_bound": delta_bound, "h": h, "inner_steps": inner_steps}
    return model
