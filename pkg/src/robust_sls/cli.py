"""Command-line front end.

Exit codes: 0 success, 1 solver-reported infeasibility, 2 usage or config error,
3 numerical failure (including an iteration limit).
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import jsonschema
import numpy as np

from .config import ConfigError, RunConfig, parse_mode
from .ocp import NlpProblem, NominalInfeasible, SlsSolution, initial_guess
from .sets import ModelFalsified, set_membership_update
from .simulate import adversarial_disturbance, monte_carlo_verify, write_rollouts_csv, write_summary_json
from .sls_core import ConditioningError, decompose_filter, tubes
from .solver import SolverConfig, solve

log = logging.getLogger("robust_sls")

EXIT_OK, EXIT_INFEASIBLE, EXIT_CONFIG, EXIT_NUMERICAL = 0, 1, 2, 3
SCHEMA_VERSION = 1
TABLE1_ROWS = [("robust", None), ("offline", 0.6), ("offline", 0.5), ("offline", 0.25), ("offline", 0.0)]

_versioned = {"schema_version": {"const": SCHEMA_VERSION}}
SOLUTION_SCHEMA = {
    "type": "object",
    "required": ["schema_version", "mode", "solution", "tube", "report"],
    "properties": {**_versioned, "mode": {"type": "string"},
                   "solution": {"type": "object", "required": ["z", "v"]},
                   "tube": {"type": "object", "required": ["z", "v", "x_half", "u_half"]},
                   "report": {"type": "object", "required": ["status", "objective", "violation", "iterations"],
                              "properties": {"status": {"enum": ["optimal", "infeasible", "max_iter", "numerical"]}}}},
}
MU_SCHEMA = {
    "type": "object",
    "required": ["schema_version", "mu", "metadata"],
    "properties": {**_versioned, "mu": {"type": "array", "items": {"type": "number", "minimum": 0}},
                   "metadata": {"type": "object"}},
}
SUMMARY_SCHEMA = {
    "type": "object",
    "required": ["schema_version", "n_runs", "violations", "tube_exits"],
    "properties": {**_versioned, "n_runs": {"type": "integer"}, "violations": {"type": "integer"},
                   "tube_exits": {"type": "integer"}},
}
THETA_SCHEMA = {
    "type": "object",
    "required": ["schema_version", "H", "h", "interval", "width", "prior_width"],
    "properties": {**_versioned, "H": {"type": "array"}, "h": {"type": "array"},
                   "interval": {"type": "array"}, "width": {"type": "array"}},
}


def _write_json(path: Path, data: dict, schema: dict) -> None:
    jsonschema.validate(data, schema)
    path.write_text(json.dumps(data, indent=2, sort_keys=True) + "\n")


def _load_config(args) -> RunConfig:
    return RunConfig.load(args.config) if args.config else RunConfig.bundled()


def _solver_config(cfg: RunConfig, seed: int | None) -> SolverConfig:
    opts = dict(cfg.raw.get("solver", {}))
    if "reg" in opts:
        opts["reg"] = float(opts["reg"])
    if seed is not None:
        opts["seed"] = seed
    return SolverConfig(**opts)


def _mode_text(args, cfg: RunConfig) -> str:
    return args.mode if getattr(args, "mode", None) else cfg.raw.get("mode", "robust")


def run_solve(cfg: RunConfig, mode: str, seed: int | None = None) -> tuple[dict, str]:
    """Solve one configuration; returns (solution document, status)."""
    spec = cfg.ocp_spec(mode)
    scfg = _solver_config(cfg, seed)
    try:
        beta0 = initial_guess(spec, scfg)
    except NominalInfeasible as exc:
        doc = {"schema_version": SCHEMA_VERSION, "mode": mode, "solution": {"z": [], "v": []},
               "tube": {"z": [], "v": [], "x_half": [], "u_half": []},
               "report": {"status": "infeasible", "objective": None, "violation": None, "iterations": 0,
                          "message": f"nominal phase: {exc}"}}
        return doc, "infeasible"
    problem = NlpProblem(spec)
    beta, report = solve(problem, scfg, beta0)
    sol = problem.unpack(beta)
    if report.status == "optimal" and sol.resp is not None:
        try:
            sol.gains(spec.sigma_min)
        except ConditioningError as exc:
            report.status, report.message = "numerical", str(exc)
    if sol.resp is not None:
        tube = tubes(sol.z, sol.v, sol.resp).to_dict()
    else:
        tube = {"z": sol.z.tolist(), "v": sol.v.tolist(), "x_half": np.zeros_like(sol.z).tolist(),
                "u_half": np.zeros_like(sol.v).tolist()}
    rep = report.to_dict()
    rep["nominal_cost"] = sol.nominal_cost
    doc = {"schema_version": SCHEMA_VERSION, "mode": mode, "solution": sol.to_dict(), "tube": tube, "report": rep}
    return doc, report.status


def _status_exit(status: str) -> int:
    return {"optimal": EXIT_OK, "infeasible": EXIT_INFEASIBLE}.get(status, EXIT_NUMERICAL)


def cmd_solve(args) -> int:
    cfg = _load_config(args)
    mode = _mode_text(args, cfg)
    parse_mode(mode)
    doc, status = run_solve(cfg, mode, args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "solution.json", doc, SOLUTION_SCHEMA)
    cost = doc["report"].get("nominal_cost")
    print(f"status={status} nominal_cost={cost if cost is None else f'{cost:.4f}'}")
    if status == "infeasible":
        print("solver reports the problem infeasible")
    return _status_exit(status)


def _load_solution(path, with_mode: bool = False):
    try:
        doc = json.loads(Path(path).read_text())
        jsonschema.validate(doc, SOLUTION_SCHEMA)
    except (OSError, json.JSONDecodeError, jsonschema.ValidationError) as exc:
        raise ConfigError(f"cannot read solution {path}: {exc}") from exc
    if not doc["solution"]["z"]:
        raise ConfigError(f"solution {path} holds no trajectory (status {doc['report']['status']})")
    sol = SlsSolution.from_dict(doc["solution"])
    return (sol, doc["mode"]) if with_mode else sol


def cmd_verify(args) -> int:
    cfg = _load_config(args)
    model = cfg.model()
    sol = _load_solution(args.solution)
    seed = cfg.seed if args.seed is None else args.seed
    summary = monte_carlo_verify(model, sol, args.n_runs, seed=seed, keep=True)
    runs = summary.pop("runs", [])
    if args.adversarial:
        theta, w, r = adversarial_disturbance(model, sol)
        summary["adversarial"] = {"theta": theta.tolist(), "peak_constraint": r.peak_constraint,
                                  "violated": r.violated, "inside_tube": r.inside_tube, "w": w.tolist()}
        runs.append(r)
    summary["schema_version"] = SCHEMA_VERSION
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    jsonschema.validate(summary, SUMMARY_SCHEMA)
    write_summary_json(out / "summary.json", summary)
    write_rollouts_csv(out / "rollouts.csv", runs)
    print(f"runs={summary['n_runs']} violations={summary['violations']} tube_exits={summary['tube_exits']}")
    return EXIT_OK


def _table_row(job):
    cfg_raw, base_dir, mode, frac, seed = job
    cfg = RunConfig.from_dict(cfg_raw, base_dir)
    mode_text = mode if frac is None else f"offline:{frac}"
    doc, status = run_solve(cfg, mode_text, seed)
    rep = doc["report"]
    return {"method": "ours" if frac is None else "offline-overbounded",
            "alpha_fraction": "" if frac is None else f"{frac:g}", "status": status,
            "nominal_cost": "" if status != "optimal" else f"{rep['nominal_cost']:.4f}",
            "iterations": rep["iterations"], "wall_time": f"{rep.get('wall_time', 0.0):.1f}"}


def cmd_table1(args) -> int:
    cfg = _load_config(args)
    jobs = [(cfg.raw, str(cfg.base_dir), mode, frac, args.seed) for mode, frac in TABLE1_ROWS]
    if args.workers > 1:
        with ProcessPoolExecutor(max_workers=args.workers) as pool:
            rows = list(pool.map(_table_row, jobs))
    else:
        rows = [_table_row(j) for j in jobs]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "table.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)
    for r in rows:
        print(f"{r['method']:20s} {r['alpha_fraction']:>5s} {r['status']:10s} {r['nominal_cost']}")
    return EXIT_OK


def cmd_estimate_mu(args) -> int:
    cfg = _load_config(args)
    model = cfg.model()
    lo, hi = cfg.state_input_box(model)
    opts = dict(cfg.raw.get("mu_estimate", {}))
    if args.n_samples is not None:
        opts["n_samples"] = args.n_samples
    if args.seed is not None:
        opts["seed"] = args.seed
    from .remainder import estimate_mu

    mu = estimate_mu(model, lo, hi, **opts)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "mu.json", {"schema_version": SCHEMA_VERSION, **mu.to_dict()}, MU_SCHEMA)
    print("mu = " + " ".join(f"{m:.4f}" for m in mu.mu))
    return EXIT_OK


def cmd_decompose(args) -> int:
    cfg = _load_config(args)
    sol, mode = _load_solution(args.solution, with_mode=True)
    if sol.resp is None:
        raise ConfigError("decompose needs a solution with a system response (robust or offline mode)")
    # the split must use the sets the solution was designed for
    spec = cfg.ocp_spec(mode)
    model = spec.model.with_sets(E=spec.disturbance_set())
    mu = sol.mu if sol.mu is not None else spec.mu
    parts = decompose_filter(sol.resp, model, sol.z, sol.v, mu, theta_vertices=spec.theta_vertices())
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "sigma_decomposition.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["k", "i", "parametric", "linearization", "additive", "sigma"])
        for k in range(parts.shape[0]):
            for i in range(parts.shape[1]):
                w.writerow([k, i, *(f"{p:.12g}" for p in parts[k, i]), f"{sol.resp.sigma[k, i]:.12g}"])
    print(f"wrote {parts.shape[0] * parts.shape[1]} rows")
    return EXIT_OK


def read_trajectory_csv(path, n_x: int, n_u: int) -> tuple[np.ndarray, np.ndarray]:
    """Rows ``k, x0..x{n_x-1}, u0..u{n_u-1}``; the last row's inputs may be empty."""
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if len(rows) < 2:
        raise ConfigError("trajectory needs at least two rows")
    try:
        xs = np.array([[float(r[f"x{i}"]) for i in range(n_x)] for r in rows])
        us = np.array([[float(r[f"u{i}"]) for i in range(n_u)] for r in rows[:-1]])
    except (KeyError, ValueError) as exc:
        raise ConfigError(f"bad trajectory file {path}: {exc}") from exc
    return xs, us


def cmd_learn(args) -> int:
    cfg = _load_config(args)
    model = cfg.model()
    xs, us = read_trajectory_csv(args.trajectory, model.n_x, model.n_u)
    try:
        post = set_membership_update(model.Theta, model.E.to_hrep(), model, xs, us, prune=True)
    except ModelFalsified as exc:
        print(f"model falsified: {exc}")
        return EXIT_INFEASIBLE
    lo, hi = post.interval_hull()
    prior = model.Theta.upper - model.Theta.lower if hasattr(model.Theta, "upper") else None
    doc = {"schema_version": SCHEMA_VERSION, "H": post.H.tolist(), "h": post.h.tolist(),
           "interval": [lo.tolist(), hi.tolist()], "width": (hi - lo).tolist(),
           "prior_width": None if prior is None else prior.tolist()}
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "theta_p.json", doc, THETA_SCHEMA)
    print("theta_p = " + ", ".join(f"[{a:.6g}, {b:.6g}]" for a, b in zip(lo, hi)))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="run configuration JSON (default: bundled satellite)")
    common.add_argument("--out", default=".", help="output directory")
    common.add_argument("--seed", type=int, default=None)
    common.add_argument("-v", "--verbose", action="store_true")
    p = argparse.ArgumentParser(prog="robust-sls", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    s = sub.add_parser("solve", parents=[common], help="solve the robust trajectory optimization problem")
    s.add_argument("--mode", help="robust | nominal | offline:FRACTION")
    s.set_defaults(func=cmd_solve)
    s = sub.add_parser("verify", parents=[common], help="Monte-Carlo closed-loop verification")
    s.add_argument("--solution", required=True)
    s.add_argument("--n-runs", type=int, default=1000)
    s.add_argument("--adversarial", action="store_true", help="also run the worst-case disturbance search")
    s.set_defaults(func=cmd_verify)
    s = sub.add_parser("table1", parents=[common], help="robust vs offline-overbounded comparison")
    s.add_argument("--workers", type=int, default=len(TABLE1_ROWS))
    s.set_defaults(func=cmd_table1)
    s = sub.add_parser("estimate-mu", parents=[common], help="estimate the curvature constants")
    s.add_argument("--n-samples", type=int, default=None)
    s.set_defaults(func=cmd_estimate_mu)
    s = sub.add_parser("decompose", parents=[common], help="split the filter into its components")
    s.add_argument("--solution", required=True)
    s.set_defaults(func=cmd_decompose)
    s = sub.add_parser("learn", parents=[common], help="set-membership update from a measured trajectory")
    s.add_argument("--trajectory", required=True)
    s.set_defaults(func=cmd_learn)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (FloatingPointError, np.linalg.LinAlgError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
