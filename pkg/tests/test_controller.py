import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.optimize import minimize

from cdfnav.controller import (
    ControllerConfig,
    NominalSpec,
    ScenarioBoundQuery,
    compute_gamma,
    estimate_bound_constants,
    estimate_violation_probability,
    sample_ball,
    scenario_sample_count,
    step_alg1,
    step_basic,
    step_robust_gamma,
    step_scenario,
)
from cdfnav.density import INSIDE, DensityConfig, ObstacleSpec, eval_density
from cdfnav.dynamics import flux_terms, make_double_gyre, make_lane_keeping, make_single_integrator
from cdfnav.errors import (
    DomainError,
    EmptySample,
    ParameterError,
    SampleInObstacle,
    StuckInObstacle,
)

SI = make_single_integrator()
P_OFF = [[1.0, 0.05], [0.05, 1.0]]


def si_env(b=3.0, alpha=0.2):
    return DensityConfig((ObstacleSpec("circle", 1.0, b, (0.0, 0.0)),), [5.0, 0.0], alpha=alpha, P=P_OFF)


def gyre_env():
    return DensityConfig((ObstacleSpec("circle", 0.25, 0.6, (1.0, 0.0)),), [0.5, 0.5], alpha=0.2, eta=0.01, P=P_OFF)


def raw_ok(model, dcfg, x, u, rhs_raw, tol=1e-8):
    c0, a, _ = flux_terms(model, dcfg, x)
    return c0 + float(a @ u) - rhs_raw >= -tol * (1.0 + abs(rhs_raw))


def free_states(dcfg, rng, n, box=(-6.0, 6.0), margin=0.05):
    out = []
    while len(out) < n:
        x = rng.uniform(*box, size=2)
        ev = eval_density(dcfg, x)
        if ev.region == INSIDE or ev.dist < 0.1:
            continue
        if min(ob.level_sets(x)[0] for ob in dcfg.obstacles) < margin:
            continue
        out.append(x)
    return out


# configuration -------------------------------------------------------------------

@pytest.mark.parametrize("kw", [
    {"mode": "nope"}, {"lam": 0.0}, {"dt": 0.0}, {"zeta_floor": -1.0},
    {"mode": "robust-gamma", "gamma": -0.1}, {"mode": "scenario", "n_samples": 0},
    {"mode": "scenario", "beta": -1.0, "n_samples": 3}, {"initial_radius": -1.0},
])
def test_config_validation(kw):
    with pytest.raises(ParameterError):
        ControllerConfig(**kw)


# basic ----------------------------------------------------------------------------

def test_basic_far_point_projection():
    dcfg = si_env()
    x = np.array([-5.0, 0.0])
    cfg = ControllerConfig(mode="basic", lam=1e-3)
    g = eval_density(dcfg, x).grad_rho
    u = step_basic(SI, dcfg, cfg, x).u
    assert u == pytest.approx(1e-3 * g / (g @ g), rel=1e-9)


def test_basic_keeps_feasible_nominal():
    dcfg = si_env()
    x = np.array([-5.0, 0.0])
    cfg = ControllerConfig(lam=1e-3, nominal_control=lambda y: np.array([1.0, 0.0]))
    assert np.array_equal(step_basic(SI, dcfg, cfg, x).u, [1.0, 0.0])


def test_basic_gyre_grid_oracle():
    dcfg = gyre_env()
    gy = make_double_gyre()
    x = np.array([1.5, 0.5])
    cfg = ControllerConfig(mode="basic", lam=1e-3)
    u = step_basic(gy, dcfg, cfg, x).u
    c0, a, _ = flux_terms(gy, dcfg, x)
    s = np.linspace(-3, 3, 3001)
    U1, U2 = np.meshgrid(s, s)
    ok = c0 + a[0] * U1 + a[1] * U2 >= 1e-3
    cost = np.where(ok, U1**2 + U2**2, np.inf)
    i = np.unravel_index(np.argmin(cost), cost.shape)
    assert np.linalg.norm(u - [U1[i], U2[i]]) <= 2e-3


def test_stuck_in_obstacle():
    with pytest.raises(StuckInObstacle):
        step_basic(SI, si_env(), ControllerConfig(), np.array([0.2, 0.1]))


def test_initial_set_margin():
    dcfg = si_env()
    x = np.array([-5.0, 0.0])
    near = ControllerConfig(mode="basic", lam=1e-3, initial_state=x, initial_radius=0.5)
    far = ControllerConfig(mode="basic", lam=1e-3, initial_state=x + 3, initial_radius=0.5)
    assert np.linalg.norm(step_basic(SI, dcfg, near, x).u) > 0
    assert np.array_equal(step_basic(SI, dcfg, far, x).u, [0.0, 0.0])


def test_constraint_honoring_all_modes():
    dcfg = si_env()
    rng = np.random.default_rng(0)
    u0 = NominalSpec("proportional", gain=1.0).build(SI, dcfg.target)
    for x in free_states(dcfg, rng, 60):
        ev = eval_density(dcfg, x)
        for cfg, rhs in [
            (ControllerConfig(mode="basic", lam=1e-3), 1e-3),
            (ControllerConfig(mode="nominal-tracking", lam=1e-3, nominal_control=u0), 1e-3),
            (ControllerConfig(mode="robust-gamma", lam=1e-3, gamma=0.3, nominal_control=u0), 1e-3 + 0.3 * ev.rho),
        ]:
            res = (step_robust_gamma if cfg.mode == "robust-gamma" else step_basic)(SI, dcfg, cfg, x)
            assert res.residual <= 1e-8
            assert raw_ok(SI, dcfg, x, res.u, rhs)


def test_basic_deterministic():
    dcfg = si_env()
    cfg = ControllerConfig(mode="basic")
    x = np.array([-2.2, 1.7])
    a, b = step_basic(SI, dcfg, cfg, x).u, step_basic(SI, dcfg, cfg, x.copy()).u
    assert a.tobytes() == b.tobytes()


def test_minimality():
    dcfg = si_env()
    rng = np.random.default_rng(2)
    checked = 0
    for x in free_states(dcfg, rng, 200):
        cfg = ControllerConfig(mode="basic", lam=1e-3)
        res = step_basic(SI, dcfg, cfg, x)
        if not res.active_set or np.linalg.norm(res.u) == 0:
            continue
        for t in (0.5, 0.9, 0.999):
            assert not raw_ok(SI, dcfg, x, t * res.u, 1e-3, tol=0.0)
        checked += 1
    assert checked > 50


# robust gamma --------------------------------------------------------------------

def test_gamma_zero_is_basic():
    dcfg = si_env()
    rng = np.random.default_rng(3)
    u0 = NominalSpec("proportional", gain=1.0).build(SI, dcfg.target)
    for x in free_states(dcfg, rng, 100):
        b = step_basic(SI, dcfg, ControllerConfig(lam=1e-3, nominal_control=u0), x).u
        r = step_robust_gamma(SI, dcfg, ControllerConfig(mode="robust-gamma", lam=1e-3, nominal_control=u0), x).u
        assert np.max(np.abs(b - r)) <= 1e-6


def test_gamma_far_point_projection():
    dcfg = si_env()
    x = np.array([-5.0, 0.0])
    ev = eval_density(dcfg, x)
    cfg = ControllerConfig(mode="robust-gamma", lam=1e-3, gamma=0.5)
    g = ev.grad_rho
    assert step_robust_gamma(SI, dcfg, cfg, x).u == pytest.approx((1e-3 + 0.5 * ev.rho) * g / (g @ g), rel=1e-9)


def test_compute_gamma_examples():
    assert compute_gamma(0, 0, 0, 0, 0) == 0
    assert compute_gamma(0.1, 0.0, 2.0, 5.0, 1.0) == pytest.approx(0.7)
    assert compute_gamma(0.0, 0.3, 9.0, 9.0, 9.0) == 0.3
    with pytest.raises(ParameterError):
        compute_gamma(-1, 0, 0, 0, 0)


def test_bound_constants_box_corner():
    dcfg = DensityConfig((), [0.0, 0.0], alpha=1.0)
    c_dD, c_psi = estimate_bound_constants(dcfg, [[1, 2], [1, 2]], 20000, 0)
    assert c_dD == pytest.approx(1.25 * math.sqrt(2), rel=2e-2)
    assert c_dD <= 1.25 * math.sqrt(2) + 1e-12
    assert c_psi == 0.0


def test_bound_constants_monotone_in_samples():
    dcfg = si_env()
    box = [[-6, 6], [-6, 6]]
    a = estimate_bound_constants(dcfg, box, 500, 4, psi_floor=0.1, exclude_radius=0.5)
    b = estimate_bound_constants(dcfg, box, 1000, 4, psi_floor=0.1, exclude_radius=0.5)
    assert b[0] >= a[0] and b[1] >= a[1]


def test_bound_constants_hold_on_samples():
    dcfg = si_env()
    c_dD, c_psi = estimate_bound_constants(dcfg, [[-6, 6], [-6, 6]], 2000, 1, psi_floor=1e-9, exclude_radius=0.5)
    rng = np.random.default_rng(1)
    for p in rng.uniform(-6, 6, size=(2000, 2)):
        ev = eval_density(dcfg, p)
        if ev.region == INSIDE or math.sqrt(ev.dist) <= 0.5:
            continue
        assert np.linalg.norm(ev.grad_dist) / ev.dist <= c_dD
        if ev.psi > 1e-9:
            assert np.linalg.norm(ev.grad_psi) <= c_psi * ev.psi


def test_bound_constants_empty():
    dcfg = si_env()
    with pytest.raises(EmptySample):
        estimate_bound_constants(dcfg, [[-0.5, 0.5], [-0.5, 0.5]], 50, 0)


# scenario ----------------------------------------------------------------------------

def test_scenario_beta_zero_is_basic_without_margin():
    dcfg = si_env()
    rng = np.random.default_rng(5)
    u0 = NominalSpec("proportional", gain=1.0).build(SI, dcfg.target)
    for x in free_states(dcfg, rng, 100):
        far = np.array([100.0, 100.0])
        b = step_basic(SI, dcfg, ControllerConfig(nominal_control=u0, initial_state=far), x).u
        cfg = ControllerConfig(mode="scenario", beta=0.0, n_samples=5, nominal_control=u0)
        s = step_scenario(SI, dcfg, cfg, x).u
        assert np.max(np.abs(b - s)) <= 1e-6


def test_scenario_two_samples_grid_oracle():
    dcfg = si_env()
    x = np.array([-3.3, 0.4])
    samples = np.array([[-3.1, 0.2], [-3.2, 0.9]])
    cfg = ControllerConfig(mode="scenario", beta=0.5, n_samples=2)
    u = step_scenario(SI, dcfg, cfg, x, samples=samples).u
    rows = [flux_terms(SI, dcfg, p)[:2] for p in np.vstack([x, samples])]
    s = np.linspace(-1, 1, 2001)
    U1, U2 = np.meshgrid(s, s)
    ok = np.ones_like(U1, dtype=bool)
    for c0, a in rows:
        ok &= c0 + a[0] * U1 + a[1] * U2 >= 0
    cost = np.where(ok, U1**2 + U2**2, np.inf)
    i = np.unravel_index(np.argmin(cost), cost.shape)
    assert np.linalg.norm(u - [U1[i], U2[i]]) <= 2e-3
    for c0, a in rows:
        assert c0 + a @ u >= -1e-8 * (1 + abs(c0))


def test_scenario_sample_in_obstacle():
    cfg = ControllerConfig(mode="scenario", beta=0.5, n_samples=3)
    with pytest.raises(SampleInObstacle) as info:
        step_scenario(SI, si_env(), cfg, np.array([-1.5, 0.0]), samples=[[-0.5, 0.0], [-1.6, 0], [-1.7, 0]])
    assert np.array_equal(info.value.sample, [-0.5, 0.0])


def test_scenario_seeded_and_ball():
    dcfg = si_env()
    cfg = ControllerConfig(mode="scenario", beta=0.5, n_samples=20, seed=3)
    x = np.array([-4.0, 2.0])
    r1, r2 = step_scenario(SI, dcfg, cfg, x), step_scenario(SI, dcfg, cfg, x)
    assert r1.u.tobytes() == r2.u.tobytes()
    assert len(r1.samples) == 21 and np.array_equal(r1.samples[0], x)
    assert np.all(np.linalg.norm(r1.samples - x, axis=1) <= 0.5 + 1e-12)
    assert r1.residual <= 1e-8


def test_sample_ball_uniform_radius():
    pts = sample_ball(np.random.default_rng(0), [0.0, 0.0], 1.0, 20000)
    r = np.linalg.norm(pts, axis=1)
    # in 2-D, P(r <= 0.5) = 0.25
    assert abs(np.mean(r <= 0.5) - 0.25) < 0.015


def test_scenario_counts():
    assert scenario_sample_count(ScenarioBoundQuery(0.1, 0.01, 2)) == 216
    assert scenario_sample_count(ScenarioBoundQuery(0.5, 0.5, 1)) == 11
    assert scenario_sample_count(ScenarioBoundQuery(1 - 1e-12, 0.99, 1)) == 4


@pytest.mark.parametrize("q", [(0.0, 0.1, 1), (1.0, 0.1, 1), (0.1, 0.0, 1), (0.1, 1.0, 1), (0.1, 0.1, 0), (0.1, 0.1, 1.5)])
def test_scenario_count_domain(q):
    with pytest.raises(DomainError):
        ScenarioBoundQuery(*q)


@given(st.floats(0.01, 0.9), st.floats(0.001, 0.9), st.integers(1, 6))
def test_halving_epsilon_more_than_doubles(eps, sigma, m):
    n1 = scenario_sample_count(ScenarioBoundQuery(eps, sigma, m))
    n2 = scenario_sample_count(ScenarioBoundQuery(eps / 2, sigma, m))
    assert n2 > 2 * n1 - 2 * m - 2


def test_violation_probability_examples():
    dcfg = si_env()
    x = np.array([-3.0, 1.5])
    bad = -eval_density(dcfg, x).grad_rho
    assert estimate_violation_probability(SI, dcfg, bad, x, 0.2, 200, 0) > 0
    for u in (bad, -bad):
        assert estimate_violation_probability(SI, dcfg, u, x, 0.0, 20, 0) in (0.0, 1.0)
    with pytest.raises(ParameterError):
        estimate_violation_probability(SI, dcfg, bad, x, 0.2, 0, 0)


def test_scenario_solution_meets_level():
    dcfg = si_env()
    eps = 0.1
    n = scenario_sample_count(ScenarioBoundQuery(eps, 0.01, 2))
    x = np.array([-2.5, 1.8])
    cfg = ControllerConfig(mode="scenario", beta=0.5, n_samples=n, seed=1)
    u = step_scenario(SI, dcfg, cfg, x).u
    p = estimate_violation_probability(SI, dcfg, u, x, 0.5, 4000, 2)
    assert p <= eps + 3 * math.sqrt(eps * (1 - eps) / 4000)


# spatial-gradient variant ------------------------------------------------------------------------

def test_alg1_scalar_input_dimensions():
    lk = make_lane_keeping()
    obs = (ObstacleSpec("lk-band", 0.9, 0.7, a_max=2.94, side=1), ObstacleSpec("lk-band", 0.9, 0.7, a_max=2.94, side=-1))
    dcfg = DensityConfig(obs, np.zeros(4), alpha=2.0, eta=1e-4)
    x = np.array([0.1, 0.05, 0.0, 0.0])
    # z = x + dt * rho * B must stay inside the lane band; rho is in the thousands here
    dt = 1e-4 / eval_density(dcfg, x).rho
    res = step_alg1(lk, dcfg, ControllerConfig(mode="alg1", dt=dt), x)
    assert res.u.shape == (1,) and res.u_bar.shape == (1,)
    assert len(res.constraint_values) == 4 and len(res.rhs) == 4
    assert np.all(res.constraint_values >= res.rhs - 1e-8 * (1 + np.abs(res.rhs)))


def test_alg1_matches_basic_far_from_obstacles():
    dcfg = si_env()
    x = np.array([-5.0, 0.0])
    cfg = ControllerConfig(mode="alg1", lam=1e-3, dt=0.01)
    ub = step_basic(SI, dcfg, cfg, x).u
    ua = step_alg1(SI, dcfg, cfg, x).u
    assert np.linalg.norm(ua - ub) <= 0.02 * np.linalg.norm(ub)


def test_alg1_against_generic_solver():
    dcfg = si_env()
    x = np.array([-2.0, 1.2])
    u0 = lambda y: np.array([0.3, -0.8])
    cfg = ControllerConfig(mode="alg1", lam=1e-3, dt=0.05, nominal_control=u0)
    res = step_alg1(SI, dcfg, cfg, x)
    w_star = np.concatenate([res.u, res.u_bar, [res.zeta]])
    # rebuild (i)-(iv) by hand and hand them to SLSQP
    c0, a, ev = flux_terms(SI, dcfg, x)
    zs = [x + cfg.dt * ev.rho * g for g in SI.input_columns(x)]
    cons = [{"type": "ineq", "fun": lambda w: c0 + a @ w[:2] - w[4]}]
    for j, z in enumerate(zs):
        cz, az, _ = flux_terms(SI, dcfg, z)
        other = 1 - j
        cons.append({"type": "ineq", "fun": lambda w, cz=cz, az=az, j=j, o=other: cz + az[o] * u0(z)[o] + az[j] * w[2 + j] - w[4]})
    cons.append({"type": "ineq", "fun": lambda w: (w[2] - w[0]) + (w[3] - w[1]) + cfg.dt * w[4]})
    cons.append({"type": "ineq", "fun": lambda w: w[4] - 1e-3})
    ref0 = np.concatenate([u0(x), u0(x), [0.0]])
    obj = lambda w: np.sum((w - ref0) ** 2)
    ref = minimize(obj, ref0, constraints=cons, method="SLSQP", options={"ftol": 1e-14, "maxiter": 500})
    assert ref.success
    assert obj(w_star) <= ref.fun + 1e-8
    assert np.linalg.norm(w_star - ref.x) <= 1e-4
    # coupling with zeta >= 0 keeps sum(u_bar) >= sum(u) - dt * zeta
    assert res.u_bar.sum() - res.u.sum() >= -cfg.dt * res.zeta - 1e-10


def test_alg1_previous_control_stand_in():
    dcfg = si_env()
    x = np.array([-3.0, 0.8])
    ub = step_basic(SI, dcfg, ControllerConfig(mode="basic", lam=1e-3), x).u
    devs = []
    for dt in (1e-3, 1e-4, 1e-5):
        ua = step_alg1(SI, dcfg, ControllerConfig(mode="alg1", lam=1e-3, dt=dt), x, prev_u=ub).u
        devs.append(np.linalg.norm(ua - ub))
    # once dt is small enough the shifted-point rows stop binding and the match is exact
    assert devs[0] <= 1e-3 * np.linalg.norm(ub)
    assert devs[0] >= devs[1] >= devs[2]
    assert devs[2] <= 1e-12


def test_alg1_converges_to_basic_linearly_in_dt():
    """Where the nominal is feasible, the alg1 deviation from basic scales with dt."""
    dcfg = si_env()
    u0 = NominalSpec("proportional", gain=1.0).build(SI, dcfg.target)
    rng = np.random.default_rng(8)
    ratios = []
    for x in free_states(dcfg, rng, 400):
        base = ControllerConfig(mode="alg1", lam=1e-3, nominal_control=u0)
        ub = step_basic(SI, dcfg, base, x).u
        if not np.array_equal(ub, u0(x)):
            continue
        devs = []
        for dt in (1e-2, 1e-3, 1e-4):
            cfg = ControllerConfig(mode="alg1", lam=1e-3, dt=dt, nominal_control=u0)
            devs.append(np.linalg.norm(step_alg1(SI, dcfg, cfg, x).u - ub))
        if devs[1] < 1e-13:
            continue
        ratios += [devs[0] / devs[1], devs[1] / max(devs[2], 1e-300)]
    assert len(ratios) > 40
    assert all(10 / 3 <= r <= 30 for r in ratios)


# nominal controls ---------------------------------------------------------------

def test_nominal_specs():
    u0 = NominalSpec("proportional", gain=2.0, max_norm=1.0).build(SI, [1.0, 0.0])
    assert u0(np.array([0.0, 0.0])) == pytest.approx([1.0, 0.0])
    assert u0(np.array([0.9, 0.0])) == pytest.approx([0.2, 0.0])
    gy = make_double_gyre()
    c = NominalSpec("proportional", cancel_drift=True).build(gy, [0.5, 0.5])
    x = np.array([1.2, 0.3])
    assert c(x) + gy.drift(x) == pytest.approx([0.5, 0.5] - x)
    lk = make_lane_keeping()
    lin = NominalSpec("linear", K=(-0.04, -0.03, 0.55, 0.1)).build(lk, np.zeros(4))
    assert lin(np.array([1.0, 0, 0, 0])) == pytest.approx([0.04])
    with pytest.raises(ParameterError):
        NominalSpec("proportional").build(lk, np.zeros(4))
    with pytest.raises(ParameterError):
        NominalSpec("linear").build(lk, np.zeros(4))
    with pytest.raises(ParameterError):
        NominalSpec("nope").build(SI, np.zeros(2))
