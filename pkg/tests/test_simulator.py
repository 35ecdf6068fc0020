import math
from dataclasses import replace

import numpy as np
import pytest

from cdfnav.config import load_scenario
from cdfnav.controller import ControllerConfig, NominalSpec
from cdfnav.density import DensityConfig, ObstacleSpec
from cdfnav.dynamics import make_single_integrator
from cdfnav.errors import ParameterError
from cdfnav.simulator import (
    CONVERGED,
    ENTERED_OBSTACLE,
    INFEASIBLE,
    MAX_STEPS,
    DirectPlant,
    SimConfig,
    Trajectory,
    derived_seeds,
    run,
    run_batch,
    summarize,
    verify_trajectory,
    write_trajectory_csv,
)

SI = make_single_integrator()


def env():
    return DensityConfig((ObstacleSpec("circle", 1.0, 3.0, (0.0, 0.0)),), [5.0, 0.0], alpha=0.2,
                         P=[[1.0, 0.05], [0.05, 1.0]])


def ctrl(dcfg, **kw):
    u0 = NominalSpec("proportional", gain=1.0).build(SI, dcfg.target)
    return ControllerConfig(lam=1e-3, nominal_control=u0, initial_state=np.array([-5.0, 0.0]),
                            initial_radius=0.5, **kw)


@pytest.fixture(scope="module")
def si_run():
    dcfg = env()
    sim = SimConfig(dt=0.01, max_steps=5000, x0=(-5.0, 0.0), convergence_radius=0.09)
    return dcfg, run(SI, dcfg, ctrl(dcfg), sim)


def test_sim_config_validation():
    for kw in ({"dt": 0.0}, {"max_steps": 0}, {"integrator": "leapfrog"}, {"record_every": 0},
               {"convergence_radius": 0.0}):
        base = {"dt": 0.01, "max_steps": 10, "x0": (0.0, 0.0)}
        base.update(kw)
        with pytest.raises(ParameterError):
            SimConfig(**base)


def test_single_integrator_converges(si_run):
    dcfg, tr = si_run
    assert tr.outcome == CONVERGED
    assert tr.min_clearance > 0
    assert np.linalg.norm(tr.observed[-1] - dcfg.target) <= 0.1
    rep = verify_trajectory(tr, dcfg, SI, ctrl(dcfg), convergence_radius=0.09)
    assert rep.ok, rep.violations[:3]


def test_recorded_residuals(si_run):
    _, tr = si_run
    r = tr.diagnostics["qp_residual"]
    assert np.nanmax(r) <= 1e-8
    assert np.isnan(r[-1])


def test_converged_at_step_zero():
    dcfg = env()
    sim = SimConfig(dt=0.01, max_steps=1, x0=(5.0, 0.05), convergence_radius=0.1)
    tr = run(SI, dcfg, ctrl(dcfg), sim)
    assert tr.outcome == CONVERGED and tr.steps == 0 and len(tr.times) == 1


def test_max_steps():
    dcfg = env()
    tr = run(SI, dcfg, ctrl(dcfg), SimConfig(dt=0.01, max_steps=3, x0=(-5.0, 0.0)))
    assert tr.outcome == MAX_STEPS and tr.steps == 3 and len(tr.times) == 4


def test_start_inside_obstacle_rejected():
    dcfg = env()
    with pytest.raises(ParameterError):
        run(SI, dcfg, ctrl(dcfg), SimConfig(dt=0.01, max_steps=3, x0=(0.0, 0.5)))


def test_dimension_mismatch_rejected():
    dcfg = env()
    with pytest.raises(ParameterError):
        run(SI, dcfg, ctrl(dcfg), SimConfig(dt=0.01, max_steps=3, x0=(0.0, 0.5, 1.0)))


class Blind(DirectPlant):
    """Ignores the command and drives straight along +x1."""

    def actuate(self, x, command, t):
        return np.array([5.0, 0.0])


def test_failure_after_start_becomes_outcome():
    dcfg = env()
    # once the plant nears the disk, some scenario sample lands inside it
    c = ctrl(dcfg, mode="scenario", beta=1.5, n_samples=20)
    tr = run(SI, dcfg, c, SimConfig(dt=0.01, max_steps=2000, x0=(-5.0, 0.0)), Blind(SI))
    assert tr.outcome == INFEASIBLE and "SampleInObstacle" in tr.message
    assert tr.steps > 0 and tr.min_clearance > 0


def test_record_cadence():
    dcfg = env()
    tr = run(SI, dcfg, ctrl(dcfg), SimConfig(dt=0.01, max_steps=10, x0=(-5.0, 0.0), record_every=4))
    assert [k for k, _ in tr.extras["results"]] == [0, 4, 8, 10]


def test_determinism_bitwise():
    sc = load_scenario("bicycle_state_uncertainty", overrides=["sim.max_steps=150"])
    a = run(sc.model, sc.dcfg, sc.ctrl, sc.sim, sc.plant())
    b = run(sc.model, sc.dcfg, sc.ctrl, sc.sim, sc.plant())
    assert a.states.tobytes() == b.states.tobytes()
    assert a.controls.tobytes() == b.controls.tobytes()


def test_batch_of_one_matches_run():
    sc = load_scenario("bicycle_dyn_uncertainty", overrides=["sim.max_steps=80"])
    trajs, summ = run_batch(sc.model, sc.dcfg, sc.ctrl, sc.sim, 1, 5, sc.plant_factory)
    s = derived_seeds(5, 1)[0]
    single = run(sc.model, sc.dcfg, replace(sc.ctrl, seed=s), replace(sc.sim, seed=s), sc.plant())
    assert trajs[0].states.tobytes() == single.states.tobytes()
    assert summ[0]["seed"] == s


def test_batch_summaries_repeatable():
    sc = load_scenario("lane_keeping_disturbed", overrides=["sim.max_steps=100"])
    _, s1 = run_batch(sc.model, sc.dcfg, sc.ctrl, sc.sim, 3, 11, sc.plant_factory)
    _, s2 = run_batch(sc.model, sc.dcfg, sc.ctrl, sc.sim, 3, 11, sc.plant_factory)
    assert repr(s1) == repr(s2)
    assert len({s["seed"] for s in s1}) == 3
    assert all(s["max_lat_accel"] <= 0.3 * 9.8 + 1e-9 for s in s1)


def test_verify_flags_obstacle_crossing():
    dcfg = env()
    xs = np.array([[-3.0, 0.0], [-2.0, 0.0], [-0.5, 0.0], [0.5, 0.0], [2.0, 0.0]])
    tr = Trajectory(times=np.arange(5.0), states=xs, controls=np.zeros((5, 2)), commands=np.zeros((5, 2)),
                    diagnostics={"min_clearance": np.ones(5)}, outcome=MAX_STEPS, observed=xs)
    rep = verify_trajectory(tr, dcfg)
    assert not rep.ok and rep.violations[0][:2] == (2, "entered-obstacle")


def test_verify_flags_bad_constraint(si_run):
    dcfg, tr = si_run
    bad = replace(tr, commands=-tr.commands)
    rep = verify_trajectory(bad, dcfg, SI, ctrl(dcfg))
    assert any(kind == "constraint" for _, kind, _ in rep.violations)


def test_verify_empty_iff_good_outcome(si_run):
    dcfg, tr = si_run
    assert verify_trajectory(tr, dcfg).ok == (tr.outcome in (CONVERGED, MAX_STEPS))
    failed = replace(tr, outcome=INFEASIBLE, message="boom")
    assert not verify_trajectory(failed, dcfg).ok


def test_entered_obstacle_outcome():
    dcfg = env()
    straight = ControllerConfig(mode="basic", lam=1e-3)
    tr = run(SI, dcfg, straight, SimConfig(dt=0.05, max_steps=200, x0=(-3.0, 0.0)), Blind(SI))
    assert tr.outcome == ENTERED_OBSTACLE
    assert tr.diagnostics["min_clearance"][-1] <= 0


def test_csv(tmp_path, si_run):
    _, tr = si_run
    path = tmp_path / "t.csv"
    write_trajectory_csv(path, tr)
    lines = path.read_text().splitlines()
    assert lines[0] == "step,t,x1,x2,u1,u2,rho,min_clearance,zeta,qp_residual"
    assert len(lines) == len(tr.times) + 1
    first = lines[1].split(",")
    assert first[0] == "0" and float(first[2]) == -5.0
    assert float(lines[2].split(",")[1]) == pytest.approx(0.01)


def test_summarize(si_run):
    dcfg, tr = si_run
    s = summarize(tr, dcfg)
    assert s["outcome"] == CONVERGED and s["final_distance"] <= 0.09
    assert s["convergence_time"] == pytest.approx(tr.steps * 0.01)
    assert math.isnan(s["max_lat_accel"])
