"""Closed-loop verification of synthesized controllers on the true uncertain system."""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass

import numpy as np

from .ocp import SlsSolution
from .sets import ParamBox, Polytope, vertices
from .sls_core import tubes

TUBE_TOL = 1e-9


class DisturbanceOutsideSet(ValueError):
    def __init__(self, k: int, norm: float):
        super().__init__(f"disturbance at step {k} has preimage norm {norm:.6g} > 1")
        self.k, self.norm = k, norm


@dataclass
class RolloutResult:
    x: np.ndarray  # (T+1, n_x)
    u: np.ndarray  # (T, n_u)
    stage_values: np.ndarray  # (T, n_c): c_i^T (x_k, u_k) + b_i
    terminal_values: np.ndarray  # (n_cf,)
    state_inside: np.ndarray  # (T+1, n_x) bool
    input_inside: np.ndarray  # (T, n_u) bool
    tube_excess: float  # largest |x - z| - x_half (and inputs), <= 0 when inside
    theta: np.ndarray
    w: np.ndarray

    @property
    def peak_constraint(self) -> float:
        vals = [self.stage_values.max(initial=-np.inf), self.terminal_values.max(initial=-np.inf)]
        return float(max(vals))

    @property
    def violated(self) -> bool:
        return self.peak_constraint > 1e-9

    @property
    def inside_tube(self) -> bool:
        return bool(self.state_inside.all() and self.input_inside.all())

    def rows(self):
        """One dict per time step for CSV export."""
        T = self.u.shape[0]
        for k in range(T + 1):
            row = {"k": k}
            row.update({f"x{i}": float(val) for i, val in enumerate(self.x[k])})
            if k < T:
                row.update({f"u{i}": float(val) for i, val in enumerate(self.u[k])})
                row.update({f"w{i}": float(val) for i, val in enumerate(self.w[k])})
                row["stage_max"] = float(self.stage_values[k].max(initial=-np.inf))
            else:
                row["stage_max"] = float(self.terminal_values.max(initial=-np.inf))
            row["inside_tube"] = bool(self.state_inside[k].all() and (k == T or self.input_inside[k].all()))
            yield row


def _check_theta(model, theta):
    S = model.Theta
    if isinstance(S, (ParamBox, Polytope)) and not S.contains(theta):
        raise ValueError(f"theta {theta} is outside the parameter set")


def closed_loop_rollout(model, sol: SlsSolution, theta, w_seq, force: bool = False) -> RolloutResult:
    """Apply ``u_k = v_k + sum_j K^{k-1,j} (x_{k-j} - z_{k-j})`` to the true system.

    ``w_seq`` has shape ``(T, n_x)``; each ``w_k`` must lie in the disturbance set
    of ``model`` unless ``force`` is set.
    """
    theta = np.atleast_1d(np.asarray(theta, dtype=float))
    w_seq = np.atleast_2d(np.asarray(w_seq, dtype=float))
    T = sol.T
    n_x, n_u = model.n_x, model.n_u
    if w_seq.shape != (T, n_x):
        raise ValueError(f"w_seq must have shape {(T, n_x)}, got {w_seq.shape}")
    if not force:
        _check_theta(model, theta)
        for k in range(T):
            nrm = model.E.preimage_norm(w_seq[k])
            if nrm > 1.0 + 1e-9:
                raise DisturbanceOutsideSet(k, nrm)
    K = sol.gains().blocks
    x = np.zeros((T + 1, n_x))
    u = np.zeros((T, n_u))
    x[0] = sol.z[0]
    dx = np.zeros((T + 1, n_x))
    for k in range(T):
        u[k] = sol.v[k]
        for j in range(k):
            u[k] += K[k - 1, j] @ dx[k - j]
        x[k + 1] = model.step(x[k], u[k], theta, w_seq[k])
        dx[k + 1] = x[k + 1] - sol.z[k + 1]
    C = sol.C if sol.C is not None else np.zeros((0, n_x + n_u))
    b = sol.b if sol.b is not None else np.zeros(0)
    C_f = sol.C_f if sol.C_f is not None else np.zeros((0, n_x))
    b_f = sol.b_f if sol.b_f is not None else np.zeros(0)
    stage = np.hstack([x[:T], u]) @ C.T + b
    term = C_f @ x[T] + b_f
    if sol.resp is not None:
        tb = tubes(sol.z, sol.v, sol.resp)
        x_half, u_half = tb.x_half, tb.u_half
    else:
        x_half, u_half = np.zeros((T + 1, n_x)), np.zeros((T, n_u))
    ex = np.abs(x - sol.z) - x_half
    eu = np.abs(u - sol.v) - u_half
    return RolloutResult(x, u, stage, term, ex <= TUBE_TOL, eu <= TUBE_TOL,
                         float(max(ex.max(), eu.max(initial=-np.inf))), theta, w_seq)


def _sample_theta(theta_set, verts, rng, vertex_prob: float):
    if rng.random() < vertex_prob:
        return verts[rng.integers(len(verts))]
    if isinstance(theta_set, ParamBox):
        return theta_set.sample(rng)
    lam = rng.dirichlet(np.ones(len(verts)))
    return lam @ np.array(verts)


def _sample_w(model, T, rng, vertex_prob: float):
    n_w = model.n_w
    d = rng.uniform(-1.0, 1.0, size=(T, n_w))
    corner = rng.random(T) < vertex_prob
    d[corner] = np.sign(d[corner])
    return d @ model.E.E.T


def monte_carlo_verify(model, sol: SlsSolution, n_runs: int, seed: int = 0, vertex_prob: float = 0.5,
                       keep: bool = False) -> dict:
    """Roll out ``n_runs`` random realizations and summarize violations and tube exits.

    ``theta`` is a vertex of the parameter set with probability ``vertex_prob``
    and uniform otherwise; each ``w_k`` is the image of a uniform point of the
    unit box, pushed to a box corner with probability ``vertex_prob``. Run ``r``
    uses its own child seed, so results do not depend on evaluation order.
    """
    T = sol.T
    n_c = 0 if sol.C is None else sol.C.shape[0]
    summary = {"n_runs": int(n_runs), "seed": int(seed), "violations": 0, "tube_exits": 0,
               "max_tube_excess": None, "max_error_inf": None, "peak_constraint": None,
               "stage_margin_per_step": [None] * T}
    if n_runs <= 0:
        return summary
    verts = vertices(model.Theta)
    children = np.random.SeedSequence(seed).spawn(n_runs)
    per_step = np.full(T, -np.inf)
    max_excess = -np.inf
    max_err = 0.0
    peak = -np.inf
    runs = []
    for child in children:
        rng = np.random.default_rng(child)
        theta = _sample_theta(model.Theta, verts, rng, vertex_prob)
        w = _sample_w(model, T, rng, vertex_prob)
        r = closed_loop_rollout(model, sol, theta, w)
        summary["violations"] += int(r.violated)
        summary["tube_exits"] += int(not r.inside_tube)
        max_excess = max(max_excess, r.tube_excess)
        max_err = max(max_err, float(np.abs(r.x - sol.z).max()))
        peak = max(peak, r.peak_constraint)
        if n_c:
            per_step = np.maximum(per_step, r.stage_values.max(axis=1))
        if keep:
            runs.append(r)
    summary.update(max_tube_excess=float(max_excess), max_error_inf=max_err, peak_constraint=float(peak),
                   stage_margin_per_step=[float(-m) if np.isfinite(m) else None for m in per_step])
    if keep:
        summary["runs"] = runs
    return summary


def _row_values(r: RolloutResult) -> np.ndarray:
    return np.concatenate([r.stage_values.ravel(), r.terminal_values])


def adversarial_disturbance(model, sol: SlsSolution, n_sweeps: int = 2, levels=(-1.0, 1.0)):
    """Worst-case search over box-vertex disturbances for the largest constraint value.

    Every constraint row is targeted separately: the disturbance starts at the
    box vertex given by the sign of the finite-difference gradient of that row,
    and the most promising row is refined by coordinate ascent. Every vertex of
    the parameter set is tried. Returns ``(theta, w_seq, RolloutResult)``.
    """
    T = sol.T
    n_w = model.n_w
    E = model.E.E
    best = None
    for theta in vertices(model.Theta):
        base = closed_loop_rollout(model, sol, theta, np.zeros((T, model.n_x)))
        f0 = _row_values(base)
        G = np.zeros((T, n_w, f0.size))
        for k in range(T):
            for j in range(n_w):
                d = np.zeros((T, n_w))
                d[k, j] = 1.0
                G[k, j] = _row_values(closed_loop_rollout(model, sol, theta, d @ E.T)) - f0
        # rows that no disturbance can move are skipped
        movable = np.flatnonzero(np.abs(G).reshape(T * n_w, -1).max(axis=0) > 1e-12)
        target, cur, d_best = None, None, None
        for row in movable:
            d = np.where(G[:, :, row] >= 0, 1.0, -1.0)
            r = closed_loop_rollout(model, sol, theta, d @ E.T)
            if cur is None or _row_values(r)[row] > _row_values(cur)[target]:
                target, cur, d_best = row, r, d
        if target is None:
            cur, d_best = base, np.zeros((T, n_w))
        else:
            d = d_best.copy()
            for _ in range(n_sweeps):
                improved = False
                for k in range(T):
                    for j in range(n_w):
                        keep_val = d[k, j]
                        for lev in levels:
                            if lev == keep_val:
                                continue
                            d[k, j] = lev
                            trial = closed_loop_rollout(model, sol, theta, d @ E.T)
                            if _row_values(trial)[target] > _row_values(cur)[target] + 1e-15:
                                cur, keep_val, improved = trial, lev, True
                        d[k, j] = keep_val
                if not improved:
                    break
            d_best = d
        if best is None or cur.peak_constraint > best[2].peak_constraint or (
                target is not None and best[2].peak_constraint == cur.peak_constraint):
            best = (np.atleast_1d(theta), d_best @ E.T, cur)
    return best


def write_rollouts_csv(path, results) -> None:
    rows = []
    for run, r in enumerate(results):
        for row in r.rows():
            rows.append({"run": run, **row})
    if not rows:
        open(path, "w").close()
        return
    fields = list(dict.fromkeys(k for row in rows for k in row))
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fields)
        w.writeheader()
        w.writerows(rows)


def write_summary_json(path, summary: dict) -> None:
    data = {k: v for k, v in summary.items() if k != "runs"}
    with open(path, "w") as fh:
        json.dump(data, fh, indent=2, sort_keys=True)
