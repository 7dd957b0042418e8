"""Run configuration: JSON schema, loading, and conversion into an :class:`OcpSpec`."""
from __future__ import annotations

import json
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import jsonschema
import numpy as np

from .dynamics import satellite_model
from .remainder import MuBound, estimate_mu
from .ocp import OcpSpec
from .sls_core import PerformanceSpec

SCHEMA_VERSION = 1

_num = {"type": "number"}
_pos = {"type": "number", "exclusiveMinimum": 0}
_vec = {"type": "array", "items": _num}
_mat = {"type": "array", "items": _vec}
_weight = {"oneOf": [_num, _vec, _mat]}

RUN_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "type": "object",
    "additionalProperties": False,
    "required": ["schema_version", "model", "horizon", "x0", "constraints", "cost", "mu"],
    "properties": {
        "schema_version": {"const": SCHEMA_VERSION},
        "model": {
            "type": "object",
            "additionalProperties": False,
            "required": ["id"],
            "properties": {
                "id": {"enum": ["satellite"]},
                "mass": _pos, "arm": _pos, "delta_bound": {"type": "number", "minimum": 0},
                "h": _pos, "inner_steps": {"type": "integer", "minimum": 1},
                "e_scale": {"type": "number", "minimum": 0},
            },
        },
        "horizon": {"type": "integer", "minimum": 1},
        "x0": _vec,
        "constraints": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "state_box": _pos, "input_box": _pos, "terminal_box": _pos,
                "rows": {"type": "array", "items": {
                    "type": "object", "additionalProperties": False, "required": ["c", "b"],
                    "properties": {"c": _vec, "b": _num}}},
                "terminal_rows": {"type": "array", "items": {
                    "type": "object", "additionalProperties": False, "required": ["c", "b"],
                    "properties": {"c": _vec, "b": _num}}},
            },
        },
        "cost": {
            "type": "object",
            "additionalProperties": False,
            "required": ["Q", "R", "Qf"],
            "properties": {"Q": _weight, "R": _weight, "Qf": _weight, "lambda": {"type": "number", "minimum": 0}},
        },
        "mu": {
            "type": "object",
            "additionalProperties": False,
            "required": ["source"],
            "properties": {
                "source": {"enum": ["values", "file", "estimate"]},
                "values": _vec,
                "path": {"type": "string"},
            },
        },
        "mu_estimate": {
            "type": "object",
            "additionalProperties": False,
            "properties": {"n_samples": {"type": "integer", "minimum": 1},
                           "safety": {"type": "number", "minimum": 1}, "seed": {"type": "integer"}},
        },
        "mode": {"type": "string", "pattern": r"^(robust|nominal|offline:[0-9]*\.?[0-9]+)$"},
        "performance": {
            "type": ["object", "null"],
            "additionalProperties": False,
            "required": ["gamma"],
            "properties": {"gamma": _pos},
        },
        "solver": {
            "type": "object",
            "additionalProperties": False,
            "properties": {"max_iter": {"type": "integer", "minimum": 1}, "tol_kkt": _pos, "tol_feas": _pos,
                           "penalty_growth": {"type": "number", "exclusiveMinimum": 1}, "reg": _pos,
                           "seed": {"type": "integer"}},
        },
        "seed": {"type": "integer"},
        "output_dir": {"type": "string"},
    },
}


class ConfigError(ValueError):
    pass


def parse_mode(text: str) -> tuple[str, float]:
    """``"robust"``, ``"nominal"`` or ``"offline:F"``; returns (mode, fraction)."""
    if text in ("robust", "nominal"):
        return text, 0.0
    if text.startswith("offline:"):
        try:
            frac = float(text.split(":", 1)[1])
        except ValueError as exc:
            raise ConfigError(f"bad offline fraction in {text!r}") from exc
        if frac < 0:
            raise ConfigError("offline fraction must be nonnegative")
        return "offline", frac
    raise ConfigError(f"unknown mode {text!r}")


@dataclass
class RunConfig:
    raw: dict
    base_dir: Path

    @classmethod
    def from_dict(cls, data: dict, base_dir: Path | str = ".") -> "RunConfig":
        try:
            jsonschema.validate(data, RUN_SCHEMA)
        except jsonschema.ValidationError as exc:
            loc = "/".join(str(p) for p in exc.absolute_path) or "<root>"
            raise ConfigError(f"config invalid at {loc}: {exc.message}") from exc
        if len(data["x0"]) == 0:
            raise ConfigError("x0 must be non-empty")
        return cls(data, Path(base_dir))

    @classmethod
    def load(cls, path: Path | str) -> "RunConfig":
        path = Path(path)
        try:
            data = json.loads(path.read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        return cls.from_dict(data, path.parent)

    @classmethod
    def bundled(cls, name: str = "satellite") -> "RunConfig":
        text = resources.files("robust_sls").joinpath("data", f"{name}.json").read_text()
        return cls.from_dict(json.loads(text))

    @property
    def mode(self) -> tuple[str, float]:
        return parse_mode(self.raw.get("mode", "robust"))

    @property
    def seed(self) -> int:
        return int(self.raw.get("seed", 0))

    def model(self):
        m = dict(self.raw["model"])
        m.pop("id")
        e_scale = m.pop("e_scale", 1e-3)
        E = e_scale * np.vstack([np.zeros((3, 3)), np.eye(3)])
        return satellite_model(E=E, **m)

    def state_input_box(self, model) -> tuple[np.ndarray, np.ndarray]:
        """Box over (x, u) used for curvature estimation; from the box constraints."""
        c = self.raw["constraints"]
        if "state_box" not in c or "input_box" not in c:
            raise ConfigError("mu estimation needs state_box and input_box constraints")
        hi = np.concatenate([np.full(model.n_x, c["state_box"]), np.full(model.n_u, c["input_box"])])
        return -hi, hi

    def mu_bound(self, model) -> MuBound:
        src = self.raw["mu"]
        if src["source"] == "values":
            if "values" not in src:
                raise ConfigError("mu.source = values requires mu.values")
            return MuBound(np.array(src["values"], dtype=float), {"source": "config"})
        if src["source"] == "file":
            if "path" not in src:
                raise ConfigError("mu.source = file requires mu.path")
            p = self.base_dir / src["path"]
            try:
                return MuBound.from_dict(json.loads(p.read_text()))
            except (OSError, json.JSONDecodeError, KeyError) as exc:
                raise ConfigError(f"cannot read mu file {p}: {exc}") from exc
        lo, hi = self.state_input_box(model)
        return estimate_mu(model, lo, hi, **self.raw.get("mu_estimate", {}))

    def ocp_spec(self, mode: str | None = None) -> OcpSpec:
        model = self.model()
        n_x, n_u = model.n_x, model.n_u
        T = int(self.raw["horizon"])
        mode_name, frac = parse_mode(mode) if mode is not None else self.mode
        c = self.raw["constraints"]
        rows, bs = [], []
        if "state_box" in c:
            for i in range(n_x):
                for s in (1.0, -1.0):
                    row = np.zeros(n_x + n_u)
                    row[i] = s
                    rows.append(row)
                    bs.append(-c["state_box"])
        if "input_box" in c:
            for i in range(n_u):
                for s in (1.0, -1.0):
                    row = np.zeros(n_x + n_u)
                    row[n_x + i] = s
                    rows.append(row)
                    bs.append(-c["input_box"])
        for r in c.get("rows", []):
            rows.append(np.array(r["c"], dtype=float))
            bs.append(r["b"])
        frows, fbs = [], []
        if "terminal_box" in c:
            for i in range(n_x):
                for s in (1.0, -1.0):
                    row = np.zeros(n_x)
                    row[i] = s
                    frows.append(row)
                    fbs.append(-c["terminal_box"])
        for r in c.get("terminal_rows", []):
            frows.append(np.array(r["c"], dtype=float))
            fbs.append(r["b"])
        cost = self.raw["cost"]
        perf = None
        if self.raw.get("performance"):
            perf = PerformanceSpec.state_bound(T, n_x, n_u, self.raw["performance"]["gamma"])
        try:
            return OcpSpec(
                model=model, T=T, x0=np.array(self.raw["x0"], dtype=float),
                C=np.array(rows).reshape(-1, n_x + n_u), b=np.array(bs),
                C_f=np.array(frows).reshape(-1, n_x), b_f=np.array(fbs),
                mu=self.mu_bound(model) if mode_name != "nominal" else np.zeros(n_x),
                Q=_weight_matrix(cost["Q"], n_x), R=_weight_matrix(cost["R"], n_u),
                Q_f=_weight_matrix(cost["Qf"], n_x), lam=cost.get("lambda", 1e-6),
                performance=perf, mode=mode_name, offline_alpha=frac * model.constants["delta_bound"],
            )
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc


def _weight_matrix(w, n: int) -> np.ndarray:
    """Scalar -> ``w I``, vector -> ``diag(w)``, matrix as given."""
    a = np.asarray(w, dtype=float)
    if a.ndim == 0:
        return float(a) * np.eye(n)
    if a.ndim == 1:
        if a.size != n:
            raise ConfigError(f"weight vector has length {a.size}, expected {n}")
        return np.diag(a)
    if a.shape != (n, n):
        raise ConfigError(f"weight matrix has shape {a.shape}, expected {(n, n)}")
    return a

