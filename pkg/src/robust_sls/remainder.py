"""Curvature constants bounding the Lagrange remainder of the linearization."""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np

from .sets import vertices


@dataclass
class MuBound:
    mu: np.ndarray
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        self.mu = np.asarray(self.mu, dtype=float)
        if np.any(self.mu < 0):
            raise ValueError("curvature constants must be nonnegative")

    def to_dict(self) -> dict:
        return {"mu": self.mu.tolist(), "metadata": self.metadata}

    @classmethod
    def from_dict(cls, d: dict) -> "MuBound":
        return cls(np.asarray(d["mu"], dtype=float), dict(d.get("metadata", {})))


def _direction_set(d: int, rng: np.random.Generator, n_uniform: int, max_enum: int = 10,
                   n_random_vertices: int = 256) -> np.ndarray:
    if d <= max_enum:
        V = np.array(list(itertools.product([-1.0, 1.0], repeat=d)))
    else:
        V = rng.choice([-1.0, 1.0], size=(n_random_vertices, d))
    U = rng.uniform(-1.0, 1.0, size=(n_uniform, d))
    return np.vstack([V, U])


def estimate_mu(model, lower, upper, theta_set=None, n_samples: int = 100_000, safety: float = 1.0,
                seed: int = 0, n_uniform_eps: int = 64, chunk: int = 5000) -> MuBound:
    """Monte-Carlo estimate of ``mu_i = 1/2 max |eps^T H_i(xi, theta) eps|``.

    ``xi`` is drawn uniformly from the state-input box ``[lower, upper]``,
    ``theta`` ranges over the vertices of the parameter set, and ``eps`` over all
    sign patterns of the unit box (random patterns above 10 dimensions) plus
    ``n_uniform_eps`` interior points.
    """
    lower = np.asarray(lower, dtype=float)
    upper = np.asarray(upper, dtype=float)
    d = model.n_x + model.n_u
    if lower.shape != (d,) or upper.shape != (d,):
        raise ValueError(f"state-input box must have dimension {d}")
    if not (np.all(np.isfinite(lower)) and np.all(np.isfinite(upper))):
        raise ValueError("state-input box must be bounded")
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    if safety < 1.0:
        raise ValueError("safety factor must be >= 1")
    theta_set = model.Theta if theta_set is None else theta_set
    thetas = vertices(theta_set)
    rng = np.random.default_rng(seed)
    eps = _direction_set(d, rng, n_uniform_eps)
    # eps^T H eps = <H, eps eps^T>; flatten for one BLAS product per chunk
    outer = np.einsum("ek,el->ekl", eps, eps).reshape(len(eps), d * d)
    best = np.zeros(model.n_x)
    done = 0
    while done < n_samples:
        n = min(chunk, n_samples - done)
        xi = rng.uniform(lower, upper, size=(n, d))
        for th in thetas:
            H = model.hessians_batch(xi[:, :model.n_x], xi[:, model.n_x:], th)
            q = H.reshape(n * model.n_x, d * d) @ outer.T
            best = np.maximum(best, np.abs(q).reshape(n, model.n_x, -1).max(axis=(0, 2)))
        done += n
    mu = safety * 0.5 * best
    meta = {"n_samples": int(n_samples), "safety": float(safety), "seed": int(seed),
            "n_directions": int(len(eps)), "box_lower": lower.tolist(), "box_upper": upper.tolist(),
            "n_theta_vertices": len(thetas)}
    return MuBound(mu, meta)


def remainder_eval(model, x, u, z, v, theta) -> np.ndarray:
    """Exact residual of the first-order expansion of the full map around ``(z, v)``."""
    x, u, z, v = (np.asarray(a, dtype=float) for a in (x, u, z, v))
    theta = np.atleast_1d(np.asarray(theta, dtype=float))
    Ab, Bb, At, Bt = model.jacobians(z, v)
    A = Ab + np.tensordot(theta, At, axes=1)
    B = Bb + np.tensordot(theta, Bt, axes=1)
    lin = model.step(z, v, theta) + A @ (x - z) + B @ (u - v)
    return model.step(x, u, theta) - lin
