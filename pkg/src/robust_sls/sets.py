"""Uncertainty and constraint sets: box images, H-polytopes, parameter boxes.

Also hosts the set-membership refinement of a parameter polytope from measured
state/input data.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linprog

from .blockops import DimensionError


class UnsupportedRepresentation(ValueError):
    """Vertex enumeration requested for an H-polytope without a vertex list."""


class ModelFalsified(RuntimeError):
    """The data are inconsistent with every parameter in the prior set."""


@dataclass(frozen=True, eq=False)
class BoxImageSet:
    """The set ``{E d : ||d||_inf <= 1}``."""

    E: np.ndarray

    def __post_init__(self):
        E = np.atleast_2d(np.array(self.E, dtype=float))
        E.setflags(write=False)
        object.__setattr__(self, "E", E)

    @property
    def dim(self) -> int:
        return self.E.shape[0]

    def augmented(self, extra: np.ndarray) -> "BoxImageSet":
        """Minkowski sum with another box image, i.e. ``[E, extra] B_inf``."""
        return BoxImageSet(np.hstack([self.E, np.atleast_2d(extra)]))

    def sample(self, rng: np.random.Generator, n: int | None = None) -> np.ndarray:
        shape = (self.E.shape[1],) if n is None else (n, self.E.shape[1])
        d = rng.uniform(-1.0, 1.0, size=shape)
        return d @ self.E.T

    def preimage_norm(self, w: np.ndarray) -> float:
        """Smallest ``||d||_inf`` with ``E d = w`` (inf if ``w`` is outside the range of ``E``)."""
        w = np.asarray(w, dtype=float)
        if not np.any(self.E):
            return 0.0 if not np.any(w) else np.inf
        n_w = self.E.shape[1]
        # min t s.t. E d = w, -t <= d <= t
        c = np.zeros(n_w + 1)
        c[-1] = 1.0
        A_ub = np.block([[np.eye(n_w), -np.ones((n_w, 1))], [-np.eye(n_w), -np.ones((n_w, 1))]])
        res = linprog(c, A_ub=A_ub, b_ub=np.zeros(2 * n_w), A_eq=np.hstack([self.E, np.zeros((self.dim, 1))]),
                      b_eq=w, bounds=[(None, None)] * n_w + [(0, None)], method="highs")
        return float(res.x[-1]) if res.status == 0 else np.inf

    def to_hrep(self, tol: float = 1e-9) -> tuple[np.ndarray, np.ndarray]:
        """H-representation ``H w <= h`` for a full-column-rank ``E``.

        Directions outside the range of ``E`` become a pair of inequalities with
        slack ``tol`` so that round-off does not empty the set.
        """
        E = self.E
        n, m = E.shape
        if np.linalg.matrix_rank(E) < m:
            raise UnsupportedRepresentation("E must have full column rank for automatic H-representation")
        Ep = np.linalg.pinv(E)
        H = [Ep, -Ep]
        h = [np.ones(m), np.ones(m)]
        if m < n:
            U, _, _ = np.linalg.svd(E)
            N = U[:, m:].T  # orthonormal basis of range(E)^perp
            H += [N, -N]
            h += [np.full(n - m, tol), np.full(n - m, tol)]
        return np.vstack(H), np.concatenate(h)


@dataclass(frozen=True, eq=False)
class ParamBox:
    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        lo = np.atleast_1d(np.array(self.lower, dtype=float))
        hi = np.atleast_1d(np.array(self.upper, dtype=float))
        if lo.shape != hi.shape:
            raise DimensionError("lower/upper shapes differ", axis="theta")
        if np.any(lo > hi):
            raise ValueError("box lower bound exceeds upper bound")
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)

    @classmethod
    def symmetric(cls, bound, dim: int = 1) -> "ParamBox":
        b = np.broadcast_to(np.asarray(bound, dtype=float), (dim,))
        return cls(-b, b)

    @property
    def dim(self) -> int:
        return self.lower.size

    def to_polytope(self) -> "Polytope":
        n = self.dim
        H = np.vstack([np.eye(n), -np.eye(n)])
        h = np.concatenate([self.upper, -self.lower])
        return Polytope(H, h, vertex_list=np.array(vertices(self)))

    def sample(self, rng: np.random.Generator, n: int | None = None) -> np.ndarray:
        shape = (self.dim,) if n is None else (n, self.dim)
        return rng.uniform(self.lower, self.upper, size=shape)

    def contains(self, theta, tol: float = 1e-12) -> bool:
        theta = np.atleast_1d(theta)
        return bool(np.all(theta >= self.lower - tol) and np.all(theta <= self.upper + tol))


@dataclass(frozen=True, eq=False)
class Polytope:
    """``{x : H x <= h}``, optionally carrying an explicit vertex list."""

    H: np.ndarray
    h: np.ndarray
    vertex_list: np.ndarray | None = field(default=None)

    def __post_init__(self):
        H = np.atleast_2d(np.array(self.H, dtype=float))
        h = np.atleast_1d(np.array(self.h, dtype=float))
        if H.shape[0] != h.shape[0]:
            raise DimensionError(f"H has {H.shape[0]} rows but h has {h.shape[0]}", axis="rows")
        object.__setattr__(self, "H", H)
        object.__setattr__(self, "h", h)
        if self.vertex_list is not None:
            V = np.atleast_2d(np.array(self.vertex_list, dtype=float))
            if V.shape[1] != H.shape[1]:
                raise DimensionError("vertex dimension differs from H", axis="dim")
            if np.any(V @ H.T > h + 1e-9):
                raise ValueError("a listed vertex violates H x <= h")
            object.__setattr__(self, "vertex_list", V)

    @property
    def dim(self) -> int:
        return self.H.shape[1]

    def contains(self, x, tol: float = 1e-9) -> bool:
        return bool(np.all(self.H @ np.atleast_1d(x) <= self.h + tol))

    def support(self, direction) -> float:
        """``max_{x in P} direction^T x`` (LP); ``-inf`` if empty, ``inf`` if unbounded."""
        d = np.asarray(direction, dtype=float)
        res = linprog(-d, A_ub=self.H, b_ub=self.h, bounds=[(None, None)] * self.dim, method="highs")
        if res.status == 2:
            return -np.inf
        if res.status == 3:
            return np.inf
        return float(-res.fun)

    def is_empty(self) -> bool:
        res = linprog(np.zeros(self.dim), A_ub=self.H, b_ub=self.h,
                      bounds=[(None, None)] * self.dim, method="highs")
        return res.status == 2

    def interval_hull(self) -> tuple[np.ndarray, np.ndarray]:
        """Axis-aligned bounding box of the polytope."""
        n = self.dim
        lo = np.array([-self.support(-e) for e in np.eye(n)])
        hi = np.array([self.support(e) for e in np.eye(n)])
        return lo, hi

    def pruned(self) -> "Polytope":
        """Drop rows whose support value does not reach their right-hand side."""
        mask = np.ones(self.H.shape[0], dtype=bool)
        for i in range(self.H.shape[0]):
            mask[i] = False
            if not mask.any() or Polytope(self.H[mask], self.h[mask]).support(self.H[i]) > self.h[i] + 1e-12:
                mask[i] = True
        return Polytope(self.H[mask], self.h[mask], vertex_list=self.vertex_list)


def vertices(theta_set) -> list[np.ndarray]:
    """All vertices of a parameter box, or the stored vertex list of a polytope.

    One-dimensional polytopes are handled exactly (an interval has two ends).
    """
    if isinstance(theta_set, ParamBox):
        lo, hi = theta_set.lower, theta_set.upper
        out = []
        seen = set()
        for pick in itertools.product(*[(a, b) for a, b in zip(lo, hi)]):
            key = tuple(pick)
            if key not in seen:
                seen.add(key)
                out.append(np.array(pick))
        return out
    if isinstance(theta_set, Polytope):
        if theta_set.vertex_list is not None:
            uniq = np.unique(theta_set.vertex_list, axis=0)
            return [v for v in uniq]
        if theta_set.dim == 1:
            lo, hi = theta_set.interval_hull()
            if lo[0] > hi[0]:
                raise ModelFalsified("empty interval")
            return [lo] if lo[0] == hi[0] else [lo, hi]
        raise UnsupportedRepresentation("general H-polytope vertex enumeration is not supported; supply vertex_list")
    raise TypeError(f"cannot enumerate vertices of {type(theta_set).__name__}")


def support_rowwise(S: BoxImageSet, rows: np.ndarray) -> np.ndarray:
    """Support values ``max_{w in S} row_i^T w = ||row_i^T E||_1`` for each row."""
    rows = np.atleast_2d(np.asarray(rows, dtype=float))
    if rows.shape[1] != S.E.shape[0]:
        raise DimensionError(f"rows have {rows.shape[1]} columns, set lives in R^{S.E.shape[0]}", axis="dim")
    return np.abs(rows @ S.E).sum(axis=1)


def set_membership_update(theta_set, W_hrep, model, xs, us, prune: bool = False) -> Polytope:
    """Non-falsified parameter set given a measured trajectory.

    Parameters
    ----------
    theta_set : Polytope or ParamBox
        Prior parameter set.
    W_hrep : tuple (H_w, h_w)
        Additive disturbance set ``{w : H_w w <= h_w}``.
    model : UncertainModel
    xs : array (N+1, n_x)
    us : array (N, n_u)

    Returns
    -------
    Polytope
        Rows ``(H_theta, H_0, ..., H_{N-1})`` with ``H_k = -H_w f_theta(x_k, u_k)`` and
        ``h_k = -H_w x_{k+1} + h_w + H_w fbar(x_k, u_k)``.
    """
    if isinstance(theta_set, ParamBox):
        theta_set = theta_set.to_polytope()
    H_w, h_w = (np.atleast_2d(np.asarray(W_hrep[0], dtype=float)), np.asarray(W_hrep[1], dtype=float))
    xs = np.atleast_2d(np.asarray(xs, dtype=float))
    us = np.atleast_2d(np.asarray(us, dtype=float))
    if xs.shape[0] < 2:
        raise ValueError("need at least two states")
    if us.shape[0] != xs.shape[0] - 1:
        raise DimensionError(f"{xs.shape[0]} states need {xs.shape[0] - 1} inputs, got {us.shape[0]}", axis="time")
    if H_w.shape[1] != model.n_x:
        raise DimensionError("H_w column count differs from n_x", axis="n_x")
    Hs = [theta_set.H]
    hs = [theta_set.h]
    for k in range(us.shape[0]):
        Ft = model.ftheta(xs[k], us[k])
        Hs.append(-H_w @ Ft)
        hs.append(-H_w @ xs[k + 1] + h_w + H_w @ model.fbar(xs[k], us[k]))
    out = Polytope(np.vstack(Hs), np.concatenate(hs))
    if out.is_empty():
        raise ModelFalsified("no parameter in the prior set explains the data")
    if prune:
        out = out.pruned()
    return out
