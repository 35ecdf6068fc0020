import numpy as np
import pytest

from cdfnav.cbf import CbfConfig, circle_barrier, quadratic_lyapunov, step_cbf
from cdfnav.dynamics import ControlAffineModel, make_single_integrator
from cdfnav.errors import Infeasible, ParameterError

SI = make_single_integrator()
TARGET = np.array([5.0, 0.0])
P_OFF = [[1.0, 0.05], [0.05, 1.0]]


def cfg(e1=0.5, e2=0.5, relaxation=None, P=None):
    return CbfConfig(e1, e2, circle_barrier((0.0, 0.0), 1.0), quadratic_lyapunov(TARGET, P), relaxation)


def test_barrier_and_lyapunov():
    h, gh = circle_barrier((1.0, 0.0), 1.0)(np.array([3.0, 0.0]))
    assert h == 3.0 and np.array_equal(gh, [4.0, 0.0])
    V, gV = quadratic_lyapunov(TARGET, np.diag([1.0, 2.0]))(np.array([4.0, 1.0]))
    assert V == 3.0 and np.array_equal(gV, [-2.0, 4.0])


def test_validation():
    with pytest.raises(ParameterError):
        cfg(e1=0.0)
    with pytest.raises(ParameterError):
        cfg(relaxation=-1.0)


def test_far_field_is_clf_projection():
    # past the obstacle and moving away from it, so only the CLF row binds
    x = np.array([8.0, 3.0])
    u = step_cbf(SI, cfg(), x).u
    assert u == pytest.approx(0.25 * (TARGET - x), rel=1e-12)


def test_boundary_tangential():
    x = np.array([0.0, 1.0])
    res = step_cbf(SI, cfg(relaxation=1e3), x)
    # h = 0, so the barrier row reads grad h . u >= 0
    assert res.rhs[0] == pytest.approx(0.0, abs=1e-15)
    assert 2.0 * res.u[1] >= -1e-9


def test_slack_keeps_feasible_and_hard_can_fail():
    # behind the obstacle, heading straight at the target conflicts hard with a tight barrier
    x = np.array([-1.05, 0.0])
    soft = step_cbf(SI, cfg(e1=0.01, e2=5.0, relaxation=1e3), x)
    assert soft.constraint_values[0] >= soft.rhs[0] - 1e-9
    with pytest.raises(Infeasible):
        # actuated along x1 only, so there is no way around the disk
        line = ControlAffineModel("line", 2, 1, lambda x: np.zeros(2), lambda x: np.array([[1.0], [0.0]]),
                                  lambda x: 0.0, lambda x: np.zeros(1))
        step_cbf(line, cfg(e1=0.01, e2=5.0), x)


def run_cbf(e1, steps=20000, dt=0.01):
    # an exactly symmetric start deadlocks behind the disk; P breaks the tie
    c = cfg(e1=e1, relaxation=1e3, P=P_OFF)
    x = np.array([-5.0, 0.0])
    h0 = circle_barrier((0.0, 0.0), 1.0)(x)[0]
    min_h = h0
    for _ in range(steps):
        if np.linalg.norm(x - TARGET) <= 0.1:
            break
        x = x + dt * step_cbf(SI, c, x).u
        min_h = min(min_h, circle_barrier((0.0, 0.0), 1.0)(x)[0])
    return x, min_h


def test_trajectories_safe_and_ordered():
    clearances = []
    for e1 in (0.3, 0.5, 0.7):
        x, min_h = run_cbf(e1)
        assert np.linalg.norm(x - TARGET) <= 0.1
        assert min_h > 0
        clearances.append(min_h)
    assert clearances[0] > clearances[1] > clearances[2]
