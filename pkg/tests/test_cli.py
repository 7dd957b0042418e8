import copy
import csv
import json

import numpy as np
import pytest

from robust_sls.cli import main
from robust_sls.config import ConfigError, RunConfig, parse_mode

from test_sets import _satellite_data


@pytest.fixture
def short_cfg(tmp_path):
    """Bundled satellite with a 3-step horizon and a loose terminal box, written to disk."""
    raw = copy.deepcopy(RunConfig.bundled().raw)
    raw["horizon"] = 3
    raw["constraints"]["terminal_box"] = 5.0
    raw["performance"] = None
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(raw))
    return path


def _strip_time(doc):
    doc = copy.deepcopy(doc)
    doc["report"].pop("wall_time", None)
    return doc


def test_bad_invocations_exit_2(tmp_path, capsys):
    assert main(["solve", "--config", str(tmp_path / "missing.json")]) == 2
    assert main(["no-such-command"]) == 2
    bad = tmp_path / "bad.json"
    raw = copy.deepcopy(RunConfig.bundled().raw)
    raw["horizon"] = 0
    bad.write_text(json.dumps(raw))
    assert main(["solve", "--config", str(bad)]) == 2
    assert "horizon" in capsys.readouterr().err
    assert main(["verify", "--config", str(bad), "--solution", "x.json"]) == 2


def test_config_rejects_unknown_keys_and_parses_modes():
    raw = copy.deepcopy(RunConfig.bundled().raw)
    raw["cost"]["S"] = 1.0
    with pytest.raises(ConfigError, match="cost"):
        RunConfig.from_dict(raw)
    assert parse_mode("robust") == ("robust", 0.0)
    assert parse_mode("offline:0.25") == ("offline", 0.25)
    for text in ("offline:x", "offline:-1", "tube"):
        with pytest.raises(ConfigError):
            parse_mode(text)


def test_nominal_solve_and_verify(short_cfg, tmp_path, capsys):
    out = tmp_path / "nom"
    assert main(["solve", "--config", str(short_cfg), "--mode", "nominal", "--out", str(out)]) == 0
    assert "status=optimal" in capsys.readouterr().out
    doc = json.loads((out / "solution.json").read_text())
    assert doc["mode"] == "nominal" and doc["report"]["status"] == "optimal"
    assert np.array(doc["solution"]["z"]).shape == (4, 6)
    assert not np.any(doc["tube"]["x_half"])
    # a rerun differs only in the wall-clock time
    out2 = tmp_path / "nom2"
    assert main(["solve", "--config", str(short_cfg), "--mode", "nominal", "--out", str(out2)]) == 0
    doc2 = json.loads((out2 / "solution.json").read_text())
    assert _strip_time(doc) == _strip_time(doc2)

    vout = tmp_path / "ver"
    assert main(["verify", "--config", str(short_cfg), "--solution", str(out / "solution.json"), "--n-runs", "5",
                 "--out", str(vout)]) == 0
    summary = json.loads((vout / "summary.json").read_text())
    assert summary["n_runs"] == 5
    with open(vout / "rollouts.csv") as fh:
        assert len(list(csv.DictReader(fh))) == 5 * 4
    # a nominal solution has no response to decompose
    assert main(["decompose", "--config", str(short_cfg), "--solution", str(out / "solution.json"),
                 "--out", str(vout)]) == 2


def test_offline_decompose_has_no_parametric_part(short_cfg, tmp_path):
    out = tmp_path / "off"
    assert main(["solve", "--config", str(short_cfg), "--mode", "offline:0.5", "--out", str(out)]) == 0
    assert main(["decompose", "--config", str(short_cfg), "--solution", str(out / "solution.json"),
                 "--out", str(out)]) == 0
    with open(out / "sigma_decomposition.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 3 * 6
    for r in rows:
        parts = [float(r[c]) for c in ("parametric", "linearization", "additive")]
        assert parts[0] == 0.0
        # the stored sigma is a decision variable that over-bounds the filter
        assert sum(parts) <= float(r["sigma"]) + 1e-7


def test_estimate_mu_small(short_cfg, tmp_path):
    assert main(["estimate-mu", "--config", str(short_cfg), "--n-samples", "200", "--seed", "1",
                 "--out", str(tmp_path)]) == 0
    mu = json.loads((tmp_path / "mu.json").read_text())
    assert len(mu["mu"]) == 6 and all(m >= 0 for m in mu["mu"])


def _write_traj(path, xs, us):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["k", *(f"x{i}" for i in range(6)), "u0", "u1"])
        for k, x in enumerate(xs):
            u = us[k] if k < len(us) else ["", ""]
            w.writerow([k, *x, *u])


def test_learn_from_trajectory(short_cfg, tmp_path):
    rng = np.random.default_rng(5)
    _, xs, us = _satellite_data(np.array([0.005]), 10, rng)
    traj = tmp_path / "traj.csv"
    _write_traj(traj, xs, us)
    assert main(["learn", "--config", str(short_cfg), "--trajectory", str(traj), "--out", str(tmp_path)]) == 0
    doc = json.loads((tmp_path / "theta_p.json").read_text())
    lo, hi = doc["interval"]
    assert lo[0] <= 0.005 <= hi[0]
    assert doc["width"][0] < doc["prior_width"][0]

    # a jump no admissible parameter explains falsifies the model
    xs_bad = xs.copy()
    xs_bad[3, 0] += 1.0
    _write_traj(traj, xs_bad, us)
    assert main(["learn", "--config", str(short_cfg), "--trajectory", str(traj), "--out", str(tmp_path)]) == 1
