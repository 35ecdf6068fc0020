"""Closed-loop simulation, batches and independent trajectory checks."""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .cbf import CbfConfig, step_cbf
from .controller import STEPPERS, ControllerConfig, lam_over_rho
from .density import eval_density, min_clearance
from .dynamics import Bicycle, PerturbationSpec, flux_terms, scaled_flux_terms
from .errors import CdfError, ParameterError, ZeroCommand
from .tracking import (
    BicycleTrackingConfig,
    ReferenceRates,
    accel_law,
    extract_reference,
    lk_input_clamp,
    steer_rate_law,
)

CONVERGED = "converged"
MAX_STEPS = "max-steps"
INFEASIBLE = "infeasible"
ENTERED_OBSTACLE = "entered-obstacle"
OUTCOMES = (CONVERGED, MAX_STEPS, INFEASIBLE, ENTERED_OBSTACLE)


@dataclass(frozen=True)
class SimConfig:
    dt: float
    max_steps: int
    x0: tuple
    integrator: str = "euler"
    convergence_radius: float = 0.1
    disturbance: PerturbationSpec | None = None
    record_every: int = 1
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "x0", tuple(float(v) for v in self.x0))
        if not self.dt > 0:
            raise ParameterError("dt must be positive")
        if self.max_steps < 1:
            raise ParameterError("max_steps must be at least 1")
        if self.integrator not in ("euler", "rk4"):
            raise ParameterError(f"unknown integrator {self.integrator!r}")
        if self.record_every < 1:
            raise ParameterError("record_every must be at least 1")
        if self.convergence_radius <= 0:
            raise ParameterError("convergence_radius must be positive")


# plants -----------------------------------------------------------------

class DirectPlant:
    """The controller's model is the plant and its command is the input."""

    def __init__(self, model):
        self.model = model
        self.n = model.n
        self.m = model.m

    def reset(self, dt):
        pass

    def observe(self, x):
        return x

    def actuate(self, x, command, t):
        return command

    def rhs(self, x, u, t):
        return self.model.rhs(x, u, t)

    def applied(self, x, u):
        return u

    def monitor(self, x, u, t, xdot):
        return {}


class LaneKeepingPlant(DirectPlant):
    """Lateral model with the steering angle clamped into the admissible interval."""

    def __init__(self, model):
        super().__init__(model)
        p = model.params
        self.lk, self.v0, self.r_d = p["lk"], p["v0"], p["r_d"]

    def actuate(self, x, command, t):
        return np.array([lk_input_clamp(self.lk, x, self.v0, self.r_d, command[0])])

    def monitor(self, x, u, t, xdot):
        return {"lat_accel": float(xdot[1])}


class BicyclePlant:
    """Bicycle driven through the tracking laws; the controller sees (x1, x2).

    The speed and heading references (and their rates) are held over a
    simulation step, while the tracking laws run continuously on the plant
    state inside the integrator, like a faster inner loop.
    """

    n = 5
    m = 2

    def __init__(self, bicycle: Bicycle, tracking: BicycleTrackingConfig):
        self.bicycle = bicycle
        self.tracking = tracking
        self.rates = None
        self.last_ref = None

    def reset(self, dt):
        self.rates = ReferenceRates(dt)
        self.last_ref = None

    def observe(self, x):
        return np.asarray(x[:2])

    def actuate(self, x, command, t):
        """Return the held reference (v_ref, heading_ref, v_ref_dot, heading_ref_dot)."""
        try:
            v_ref, h_ref = extract_reference(command)
        except ZeroCommand:
            # hold the previous heading, ask for a stop
            h_ref = self.last_ref[1] if self.last_ref else float(x[2] + self.bicycle.slip(x[3]))
            v_ref = 0.0
        self.last_ref = (v_ref, h_ref)
        vdot, hdot = self.rates.update(v_ref, h_ref)
        ref = np.array([v_ref, h_ref, vdot, hdot])
        self.inputs(x, ref)  # fail early on a singular steering angle
        return ref

    def inputs(self, x, ref):
        v_ref, h_ref, vdot, hdot = ref
        a = accel_law(self.tracking, float(x[4]), v_ref, vdot)
        omega = steer_rate_law(self.tracking, float(x[2]), float(x[3]), float(x[4]), h_ref, hdot)
        return np.array([omega, a])

    def rhs(self, x, ref, t):
        return self.bicycle.rhs(x, self.inputs(x, ref), t)

    def applied(self, x, ref):
        return self.inputs(x, ref)

    def monitor(self, x, u, t, xdot):
        return {}


# trajectories ---------------------------------------------------------------

@dataclass
class Trajectory:
    times: np.ndarray
    states: np.ndarray
    controls: np.ndarray
    commands: np.ndarray
    diagnostics: dict
    outcome: str
    observed: np.ndarray = field(repr=False, default=None)
    message: str = ""
    steps: int = 0
    seed: int = 0
    extras: dict = field(default_factory=dict, repr=False)

    @property
    def final_state(self):
        return self.states[-1]

    @property
    def min_clearance(self):
        return float(np.min(self.diagnostics["min_clearance"]))

    def path_length(self):
        d = np.diff(self.observed, axis=0)
        return float(np.sum(np.linalg.norm(d, axis=1)))


def _integrate(f, x, u, t, dt, method):
    if method == "euler":
        return x + dt * f(x, u, t)
    k1 = f(x, u, t)
    k2 = f(x + 0.5 * dt * k1, u, t + 0.5 * dt)
    k3 = f(x + 0.5 * dt * k2, u, t + 0.5 * dt)
    k4 = f(x + dt * k3, u, t + dt)
    return x + dt / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)


def step_seed(seed, k):
    """Per-step RNG seed derived from the run seed and the step index."""
    return int(np.random.SeedSequence([int(seed), int(k)]).generate_state(1)[0])


def p_distance(dcfg, y):
    d = np.asarray(y) - dcfg.target
    return math.sqrt(max(float(d @ dcfg.P @ d), 0.0))


def run(model, dcfg, ctrl: ControllerConfig, sim: SimConfig, plant=None) -> Trajectory:
    """Integrate the closed loop from sim.x0.

    Controller failures after the first step end the run with an
    ``infeasible`` outcome instead of raising.
    """
    plant = DirectPlant(model) if plant is None else plant
    x = np.asarray(sim.x0, dtype=float)
    if len(x) != plant.n:
        raise ParameterError(f"x0 has {len(x)} entries, plant expects {plant.n}")
    if model.n != dcfg.n:
        raise ParameterError("model and density dimensions differ")
    if min_clearance(dcfg, plant.observe(x)) <= 0:
        raise ParameterError("x0 lies inside an obstacle")
    plant.reset(sim.dt)
    if isinstance(ctrl, CbfConfig):
        stepper = lambda mdl, dc, cc, yy: step_cbf(mdl, cc, yy)  # noqa: E731
        mode = "cbf"
    else:
        stepper = STEPPERS[ctrl.mode]
        mode = ctrl.mode
    # one offset set per run keeps the scenario feedback continuous in x
    scenario_seed = step_seed(sim.seed, 0)
    disturbance = sim.disturbance.field(sim.seed) if sim.disturbance is not None else None

    def f(xx, uu, tt):
        xdot = plant.rhs(xx, uu, tt)
        if disturbance is not None:
            xdot = xdot + disturbance(xx, tt)
        return xdot

    rows = {"t": [], "x": [], "u": [], "cmd": [], "obs": []}
    diag = {"rho": [], "min_clearance": [], "zeta": [], "qp_residual": []}
    monitors = {}
    results = []
    outcome, message = MAX_STEPS, ""
    prev_u = None
    t = 0.0
    nan_u = np.full(plant.m, np.nan)
    nan_cmd = np.full(model.m, np.nan)

    def _rho(y):
        try:
            return eval_density(dcfg, y).rho
        except ZeroDivisionError:
            return math.inf

    def record(k, xx, u, cmd, res, force=False):
        if not force and k % sim.record_every:
            return
        y = plant.observe(xx)
        rows["t"].append(t)
        rows["x"].append(np.array(xx))
        rows["u"].append(np.array(u))
        rows["cmd"].append(np.array(cmd))
        rows["obs"].append(np.array(y))
        diag["min_clearance"].append(min_clearance(dcfg, y))
        if res is None:
            diag["rho"].append(_rho(y))
            diag["zeta"].append(math.nan)
            diag["qp_residual"].append(math.nan)
        else:
            diag["rho"].append(res.rho if np.isfinite(res.rho) else _rho(y))
            diag["zeta"].append(res.zeta)
            diag["qp_residual"].append(res.residual)
        results.append((k, res))

    k = 0
    while True:
        y = plant.observe(x)
        if min_clearance(dcfg, y) <= 0:
            outcome, message = ENTERED_OBSTACLE, f"state {y} inside an obstacle"
            record(k, x, nan_u, nan_cmd, None, force=True)
            break
        if p_distance(dcfg, y) <= sim.convergence_radius:
            outcome = CONVERGED
            record(k, x, nan_u, nan_cmd, None, force=True)
            break
        if k >= sim.max_steps:
            record(k, x, nan_u, nan_cmd, None, force=True)
            break
        try:
            if mode == "scenario":
                res = stepper(model, dcfg, ctrl, y, seed=scenario_seed)
            elif mode == "alg1":
                res = stepper(model, dcfg, ctrl, y, prev_u=prev_u)
            else:
                res = stepper(model, dcfg, ctrl, y)
            u = plant.actuate(x, res.u, t)
        except (CdfError, ZeroDivisionError) as exc:
            if k == 0 and not isinstance(exc, CdfError):
                raise
            outcome, message = INFEASIBLE, f"{type(exc).__name__}: {exc}"
            record(k, x, nan_u, nan_cmd, None, force=True)
            break
        prev_u = res.u
        xdot = f(x, u, t)
        for key, val in plant.monitor(x, u, t, xdot).items():
            monitors.setdefault(key, []).append(val)
        record(k, x, plant.applied(x, u), res.u, res)
        try:
            x = _integrate(f, x, u, t, sim.dt, sim.integrator)
        except CdfError as exc:
            outcome, message = INFEASIBLE, f"{type(exc).__name__}: {exc}"
            k += 1
            t = k * sim.dt
            break
        k += 1
        t = k * sim.dt
        if not np.all(np.isfinite(x)):
            outcome, message = INFEASIBLE, "state became non-finite"
            record(k, np.nan_to_num(x), nan_u, nan_cmd, None, force=True)
            break

    return Trajectory(
        times=np.array(rows["t"]),
        states=np.array(rows["x"]),
        controls=np.array(rows["u"]),
        commands=np.array(rows["cmd"]),
        diagnostics={key: np.array(v, dtype=float) for key, v in diag.items()},
        outcome=outcome,
        observed=np.array(rows["obs"]),
        message=message,
        steps=k,
        seed=sim.seed,
        extras={"monitors": {key: np.array(v) for key, v in monitors.items()}, "results": results},
    )


def derived_seeds(seed, n_runs):
    return [int(c.generate_state(1)[0]) for c in np.random.SeedSequence(int(seed)).spawn(n_runs)]


def summarize(traj: Trajectory, dcfg=None):
    lat = traj.extras.get("monitors", {}).get("lat_accel")
    conv_t = float(traj.times[-1]) if traj.outcome == CONVERGED else math.nan
    return {
        "seed": traj.seed,
        "outcome": traj.outcome,
        "steps": traj.steps,
        "min_clearance": traj.min_clearance,
        "max_lat_accel": float(np.max(np.abs(lat))) if lat is not None and len(lat) else math.nan,
        "convergence_time": conv_t,
        "final_distance": p_distance(dcfg, traj.observed[-1]) if dcfg is not None else math.nan,
    }


def run_batch(model, dcfg, ctrl, sim, n_runs, seed, plant_factory=None):
    """Independent runs with seeds spawned from ``seed``; returns (trajectories, summaries)."""
    if n_runs < 1:
        raise ParameterError("n_runs must be at least 1")
    trajs, summary = [], []
    for s in derived_seeds(seed, n_runs):
        plant = plant_factory() if plant_factory is not None else None
        tr = run(model, dcfg, replace(ctrl, seed=s), replace(sim, seed=s), plant)
        trajs.append(tr)
        summary.append(summarize(tr, dcfg))
    return trajs, summary


# verification -------------------------------------------------------------

@dataclass
class VerificationReport:
    violations: list

    @property
    def ok(self):
        return not self.violations


def verify_trajectory(traj: Trajectory, dcfg, model=None, ctrl=None, convergence_radius=None, tol=1e-8):
    """Recheck a trajectory from its recorded states and commands.

    Clearance comes straight from the obstacle level sets. With ``model`` and
    ``ctrl`` given, the divergence constraint at each recorded state is
    re-evaluated for the single-constraint modes.
    """
    out = []
    obs = traj.observed if traj.observed is not None else traj.states
    for k, y in enumerate(obs):
        for i, ob in enumerate(dcfg.obstacles):
            c = ob.clearance(y)
            if c <= 0:
                out.append((k, "entered-obstacle", f"obstacle {i} clearance {c:.3g}"))
                break
        else:
            continue
        break
    if traj.outcome == CONVERGED and convergence_radius is not None:
        dist = p_distance(dcfg, obs[-1])
        if dist > convergence_radius:
            out.append((len(obs) - 1, "not-converged", f"distance {dist:.3g}"))
    if traj.outcome == INFEASIBLE:
        out.append((len(obs) - 1, "infeasible", traj.message))
    if model is not None and isinstance(ctrl, ControllerConfig) and ctrl.mode in ("basic", "nominal-tracking", "robust-gamma"):
        for k, (y, u) in enumerate(zip(obs, traj.commands)):
            if not np.all(np.isfinite(u)):
                continue
            # same units the controller solves in: div(...)/rho >= lambda/rho (+ gamma)
            c0, a, ev = scaled_flux_terms(model, dcfg, y)
            rhs = lam_over_rho(ctrl, ev, y)
            if ctrl.mode == "robust-gamma":
                rhs += ctrl.gamma
            lhs = c0 + float(a @ u)
            if (rhs - lhs) / (1.0 + abs(rhs)) > tol:
                out.append((k, "constraint", f"lhs {lhs:.6g} < rhs {rhs:.6g}"))
    return VerificationReport(out)


def write_trajectory_csv(path, traj: Trajectory):
    n = traj.states.shape[1]
    m = traj.controls.shape[1]
    cols = (["step", "t"] + [f"x{i + 1}" for i in range(n)] + [f"u{j + 1}" for j in range(m)]
            + ["rho", "min_clearance", "zeta", "qp_residual"])
    d = traj.diagnostics
    steps = [k for k, _ in traj.extras.get("results", [])] or list(range(len(traj.times)))
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(",".join(cols) + "\n")
        for i in range(len(traj.times)):
            vals = [traj.times[i], *traj.states[i], *traj.controls[i],
                    d["rho"][i], d["min_clearance"][i], d["zeta"][i], d["qp_residual"][i]]
            fh.write(str(steps[i]) + "," + ",".join(f"{v:.17g}" for v in vals) + "\n")
