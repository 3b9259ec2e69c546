import numpy as np
import pytest

from dcad.autodiff import NumericError
from dcad.optimize import KKTReport, NLPProblem, check_kkt, minimize


def quadratic_1d(P0=10.0):
    return NLPProblem(
        objective=lambda P: (float((P[0] - 2.0) ** 2), np.array([2.0 * (P[0] - 2.0)])),
        P0=np.array([P0]),
    )


def active_constraint_problem():
    return NLPProblem(
        objective=lambda P: (float((P[0] - 2.0) ** 2), np.array([2.0 * (P[0] - 2.0)])),
        constraints=[lambda P: (float(P[0] - 3.0), np.array([1.0]))],
        P0=np.array([10.0]),
    )


def halfspace_problem(P0=(3.0, -1.0)):
    return NLPProblem(
        objective=lambda P: (float(P @ P), 2.0 * P),
        constraints=[lambda P: (float(P[0] + P[1] - 1.0), np.array([1.0, 1.0]))],
        P0=np.array(P0),
    )


def test_active_constraint():
    result = minimize(active_constraint_problem())
    assert result.status == "converged"
    assert result.P[0] == pytest.approx(3.0, abs=1e-6)
    assert result.max_violation <= 1e-8


def test_unconstrained_quadratic():
    result = minimize(quadratic_1d())
    assert result.status == "converged"
    assert result.P[0] == pytest.approx(2.0, abs=1e-8)


def test_halfspace_projection():
    result = minimize(halfspace_problem())
    assert result.status == "converged"
    assert np.allclose(result.P, [0.5, 0.5], atol=1e-6)


def test_converged_implies_kkt():
    problem = halfspace_problem()
    result = minimize(problem)
    report = check_kkt(problem, result.P, result.multipliers)
    assert report.residual <= problem.tol
    assert report.feasibility <= problem.feas_tol


def test_check_kkt_hand_built_point():
    problem = halfspace_problem()
    report = check_kkt(problem, np.array([0.5, 0.5]), np.array([1.0]))
    assert report.residual <= 1e-10


def test_check_kkt_inactive_constraint():
    problem = NLPProblem(
        objective=lambda P: (float((P[0] - 2.0) ** 2), np.array([2.0 * (P[0] - 2.0)])),
        constraints=[lambda P: (float(P[0]), np.array([1.0]))],  # x >= 0, inactive at 2
        P0=np.array([5.0]),
    )
    report = check_kkt(problem, np.array([2.0]), np.array([0.0]))
    assert report.stationarity <= 1e-12
    assert report.complementarity == 0.0
    assert report.feasibility == 0.0


def test_infeasible_start_restoration():
    # start far outside the feasible halfspace x + y >= 1
    result = minimize(halfspace_problem(P0=(-5.0, -5.0)))
    assert result.status == "converged"
    assert np.allclose(result.P, [0.5, 0.5], atol=1e-6)


def test_two_constraints_vertex_solution():
    # min (x-3)^2 + (y-3)^2 s.t. x <= 1, y <= 1 (as -x+1 >= 0) -> (1,1)
    problem = NLPProblem(
        objective=lambda P: (float((P[0] - 3) ** 2 + (P[1] - 3) ** 2), 2 * (P - 3.0)),
        constraints=[
            lambda P: (float(1.0 - P[0]), np.array([-1.0, 0.0])),
            lambda P: (float(1.0 - P[1]), np.array([0.0, -1.0])),
        ],
        P0=np.array([0.0, 0.0]),
    )
    result = minimize(problem)
    assert result.status == "converged"
    assert np.allclose(result.P, [1.0, 1.0], atol=1e-6)
    assert np.all(result.multipliers >= 0)


def test_rosenbrock_curved_valley():
    def rosen(P):
        x, y = P
        f = (1 - x) ** 2 + 100 * (y - x * x) ** 2
        g = np.array([-2 * (1 - x) - 400 * x * (y - x * x), 200 * (y - x * x)])
        return float(f), g

    result = minimize(NLPProblem(objective=rosen, P0=np.array([-1.2, 1.0]), max_iter=500))
    assert result.status == "converged"
    assert np.allclose(result.P, [1.0, 1.0], atol=1e-5)


def test_determinism():
    runs = [minimize(halfspace_problem(), record_trace=True) for _ in range(2)]
    assert np.array_equal(runs[0].P, runs[1].P)
    assert runs[0].iterations == runs[1].iterations
    t0 = [(r["objective"], r["violation"], r["step_norm"]) for r in runs[0].trace]
    t1 = [(r["objective"], r["violation"], r["step_norm"]) for r in runs[1].trace]
    assert t0 == t1


def test_merit_monotone_under_feasibility():
    # on a problem that stays feasible, accepted objective values decrease
    result = minimize(quadratic_1d(), record_trace=True)
    values = [r["objective"] for r in result.trace]
    assert all(values[i + 1] <= values[i] + 1e-12 for i in range(len(values) - 1))


def test_numeric_failure_reported():
    def bad(P):
        raise NumericError("model blew up")

    result = minimize(NLPProblem(objective=bad, P0=np.array([10.0])))
    assert result.status == "numeric_failure"
    assert "blew up" in result.message
    assert "P=" in result.message  # offending point reported


def test_line_search_probe_failures_shrink_step():
    # failures inside the line search are treated as rejected steps, so the
    # iterates stay inside the evaluable region
    def guarded(P):
        if P[0] < 5.0:
            raise NumericError("left the safe region")
        return float((P[0] - 2.0) ** 2), np.array([2.0 * (P[0] - 2.0)])

    result = minimize(NLPProblem(objective=guarded, P0=np.array([10.0]), max_iter=60))
    assert result.status in ("max_iter", "converged")
    assert result.P[0] >= 5.0 - 1e-9


def test_infeasible_problem_detected():
    # g1: x >= 1, g2: -x >= 1 is empty
    problem = NLPProblem(
        objective=lambda P: (float(P[0] ** 2), np.array([2.0 * P[0]])),
        constraints=[
            lambda P: (float(P[0] - 1.0), np.array([1.0])),
            lambda P: (float(-P[0] - 1.0), np.array([-1.0])),
        ],
        P0=np.array([0.0]),
    )
    result = minimize(problem)
    assert result.status == "infeasible"


def test_empty_parameter_vector():
    result = minimize(NLPProblem(objective=lambda P: (1.0, np.zeros(0)), P0=np.zeros(0)))
    assert result.status == "converged"


def test_constraint_block_path():
    # same halfspace problem expressed through the vectorized interface
    problem = NLPProblem(
        objective=lambda P: (float(P @ P), 2.0 * P),
        constraint_block=lambda P: (
            np.array([P[0] + P[1] - 1.0]),
            np.array([[1.0, 1.0]]),
        ),
        constraint_values=lambda P: np.array([P[0] + P[1] - 1.0]),
        P0=np.array([3.0, -1.0]),
    )
    result = minimize(problem)
    assert np.allclose(result.P, [0.5, 0.5], atol=1e-6)
