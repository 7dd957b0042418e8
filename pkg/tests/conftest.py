import numpy as np
import pytest

from robust_sls.blockops import CausalOperator
from robust_sls.config import RunConfig
from robust_sls.dynamics import UncertainModel
from robust_sls.ocp import NlpProblem, initial_guess
from robust_sls.sets import ParamBox
from robust_sls.solver import SolverConfig, solve


def quadratic_toy(n_x, n_u, rng, theta_bound=0.05, curvature=0.2, e_scale=0.02):
    """Random ``x+ = A x + B u + c * x_0^2 e_last + theta (A_t x + B_t u) + w``.

    The quadratic term has a constant Hessian, so its curvature constant is
    exactly ``|c|`` in the last component.
    """
    A = np.eye(n_x) + 0.3 * rng.standard_normal((n_x, n_x))
    B = rng.standard_normal((n_x, n_u))
    At = rng.standard_normal((1, n_x, n_x))
    Bt = rng.standard_normal((1, n_x, n_u))
    E = e_scale * rng.standard_normal((n_x, n_x))
    c = curvature

    def fbar(x, u):
        out = A @ x + B @ u
        out[-1] += c * x[0] ** 2
        return out

    def ftheta(x, u):
        return (At[0] @ x + Bt[0] @ u).reshape(n_x, 1)

    def jac_bar(z, v):
        Az = A.copy()
        Az[-1, 0] += 2 * c * z[0]
        return Az, B

    def hess(X, U, theta):
        d = n_x + n_u
        H = np.zeros((X.shape[0], n_x, d, d))
        H[:, -1, 0, 0] = 2 * c
        return H

    model = UncertainModel(n_x, n_u, 1, fbar, ftheta, E, ParamBox.symmetric(theta_bound),
                           jac_bar=jac_bar, jac_theta=lambda z, v: (At, Bt), hessian_batch=hess, name="toy")
    mu = np.zeros(n_x)
    mu[-1] = abs(c)
    return model, mu


def random_causal(rng, T, p, q, scale=1.0):
    return CausalOperator(scale * rng.standard_normal((T, T, p, q)))


@pytest.fixture(scope="session")
def satellite_cfg():
    return RunConfig.bundled()


def _solve(cfg, mode):
    spec = cfg.ocp_spec(mode)
    problem = NlpProblem(spec)
    beta, report = solve(problem, SolverConfig(), initial_guess(spec))
    sol = problem.unpack(beta)
    return {"spec": spec, "problem": problem, "beta": beta, "report": report, "sol": sol}


@pytest.fixture(scope="session")
def robust_run(satellite_cfg):
    """The bundled robust satellite solve, shared by every test that needs it."""
    return _solve(satellite_cfg, "robust")


@pytest.fixture(scope="session")
def nominal_run(satellite_cfg):
    return _solve(satellite_cfg, "nominal")


ACCEPTANCE = pytest.StashKey[list]()


@pytest.fixture
def criterion(request):
    """``report(number, ok, detail)`` prints one PASS/FAIL line and keeps it for the session summary."""
    lines = request.config.stash.setdefault(ACCEPTANCE, [])

    def report(number, ok, detail):
        line = f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}"
        lines.append(line)
        print(line)

    return report


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(ACCEPTANCE, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines):
            terminalreporter.write_line(line)
