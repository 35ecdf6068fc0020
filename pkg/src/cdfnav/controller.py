"""Per-step density-based QP controllers.

Every mode enforces some version of the divergence inequality

    div(f rho) + sum_j div(g_j rho) u_j >= rhs

at the current state, treating u as spatially constant; ``alg1`` adds the
finite-difference handling of the spatial gradient of u.

Single-inequality modes and the scenario rows are divided by rho at the
evaluation point before solving. That leaves each feasible set unchanged and
keeps the numbers finite when rho spans hundreds of decades (large alpha).
Recorded constraint values are in these scaled units.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .density import INSIDE, eval_density
from .dynamics import flux_terms, scaled_flux_terms
from .errors import (
    DomainError,
    EmptySample,
    ParameterError,
    SampleInObstacle,
    StuckInObstacle,
)
from .qp import QpProblem, solve

MODES = ("basic", "nominal-tracking", "alg1", "robust-gamma", "scenario")
BOUND_INFLATION = 1.25


@dataclass(frozen=True)
class ControllerConfig:
    """Controller settings.

    ``initial_state``/``initial_radius`` describe the ball where the strict
    ``lam`` margin applies. With no initial state the margin applies
    everywhere.
    """

    mode: str = "nominal-tracking"
    lam: float = 1e-3
    dt: float = 0.01
    zeta_floor: float | None = None
    nominal_control: Callable | None = None
    H: np.ndarray | None = None
    J: np.ndarray | None = None
    gamma: float = 0.0
    beta: float = 0.0
    n_samples: int = 0
    seed: int = 0
    initial_state: np.ndarray | None = None
    initial_radius: float = 0.0

    def __post_init__(self):
        if self.mode not in MODES:
            raise ParameterError(f"unknown controller mode {self.mode!r}")
        if not self.lam > 0:
            raise ParameterError("lambda must be positive")
        if not self.dt > 0:
            raise ParameterError("dt must be positive")
        if self.zeta_floor is not None and self.zeta_floor < 0:
            raise ParameterError("zeta_floor must be nonnegative")
        if self.mode == "robust-gamma" and self.gamma < 0:
            raise ParameterError("gamma must be nonnegative")
        if self.mode == "scenario":
            if self.beta < 0:
                raise ParameterError("beta must be nonnegative")
            if self.n_samples < 1:
                raise ParameterError("scenario mode needs n_samples >= 1")
        if self.initial_radius < 0:
            raise ParameterError("initial_radius must be nonnegative")

    @property
    def floor(self):
        return self.lam if self.zeta_floor is None else self.zeta_floor


@dataclass
class StepResult:
    u: np.ndarray
    u_bar: np.ndarray | None = None
    zeta: float = float("nan")
    constraint_values: np.ndarray = field(default_factory=lambda: np.zeros(0))
    rhs: np.ndarray = field(default_factory=lambda: np.zeros(0))
    feasible: bool = True
    rho: float = float("nan")
    active_set: tuple = ()
    samples: np.ndarray | None = field(default=None, repr=False)

    @property
    def residual(self):
        """Largest relative shortfall of the assembled constraints (0 when met)."""
        if len(self.rhs) == 0:
            return 0.0
        gap = (self.rhs - self.constraint_values) / (1.0 + np.abs(self.rhs))
        return max(0.0, float(gap.max()))


def in_initial_set(cfg: ControllerConfig, x):
    if cfg.initial_state is None:
        return True
    return float(np.linalg.norm(np.asarray(x) - np.asarray(cfg.initial_state))) <= cfg.initial_radius


def _nominal(cfg, x, m):
    if cfg.nominal_control is None:
        return np.zeros(m)
    return np.asarray(cfg.nominal_control(x), dtype=float).reshape(m)


def _cost(cfg, model, x):
    """(H, J) for the input u: the general form in basic mode, otherwise
    tracking of the nominal control."""
    m = model.m
    if cfg.mode == "basic":
        H = np.eye(m) if cfg.H is None else np.asarray(cfg.H, dtype=float)
        J = np.zeros(m) if cfg.J is None else np.asarray(cfg.J, dtype=float)
        return H, J
    u0 = _nominal(cfg, x, m)
    return np.eye(m), -2.0 * u0


def _density_or_stuck(model, dcfg, x, scaled=False):
    c0, a, ev = (scaled_flux_terms if scaled else flux_terms)(model, dcfg, x)
    if ev.region == INSIDE or ev.rho <= 0.0:
        raise StuckInObstacle(f"rho vanishes at {x}")
    return c0, a, ev


def lam_over_rho(cfg, ev, x):
    """The strict margin in scaled units: lambda / rho(x) inside the initial set, else 0."""
    if not in_initial_set(cfg, x):
        return 0.0
    return cfg.lam * math.exp(-ev.log_rho) if ev.log_rho > -709.0 else math.inf


def _single(model, dcfg, cfg, x, margin):
    """Solve with the scaled constraint div(...)/rho >= margin(ev)."""
    x = np.asarray(x, dtype=float)
    c0, a, ev = _density_or_stuck(model, dcfg, x, scaled=True)
    rhs = margin(ev)
    H, J = _cost(cfg, model, x)
    p = QpProblem(H, J, a.reshape(1, -1), np.array([rhs - c0]))
    s = solve(p)
    return StepResult(
        u=s.u_star,
        constraint_values=np.array([c0 + float(a @ s.u_star)]),
        rhs=np.array([rhs]),
        rho=ev.rho,
        active_set=s.active_set,
    )


def step_basic(model, dcfg, cfg: ControllerConfig, x) -> StepResult:
    """One divergence constraint at x; rhs is lambda inside the initial set, 0 outside."""
    return _single(model, dcfg, cfg, x, lambda ev: lam_over_rho(cfg, ev, x))


def step_robust_gamma(model, dcfg, cfg: ControllerConfig, x) -> StepResult:
    """Like step_basic with the right-hand side raised by gamma * rho(x)."""
    return _single(model, dcfg, cfg, x, lambda ev: cfg.gamma + lam_over_rho(cfg, ev, x))


def alg1_points(model, dcfg, cfg, x, rho=None):
    """z_j = x + dt * rho(x) * g_j(x) for each input column."""
    if rho is None:
        rho = eval_density(dcfg, x).rho
    return [x + cfg.dt * rho * g for g in model.input_columns(x)]


def step_alg1(model, dcfg, cfg: ControllerConfig, x, u0_at_x=None, u0_at_z=None, prev_u=None) -> StepResult:
    """QP over (u, u_bar, zeta) with 2m+1 variables and m+3 constraints.

    u0_at_x defaults to the nominal control at x (zero without one). u0_at_z
    is a list of m-vectors, the nominal evaluated at each z_j; without a
    nominal the previous applied control stands in for it.
    """
    x = np.asarray(x, dtype=float)
    m = model.m
    c0, a, ev = _density_or_stuck(model, dcfg, x)
    zs = alg1_points(model, dcfg, cfg, x, ev.rho)
    if u0_at_x is None:
        u0_at_x = _nominal(cfg, x, m)
    if u0_at_z is None:
        if cfg.nominal_control is not None:
            u0_at_z = [_nominal(cfg, z, m) for z in zs]
        else:
            base = np.zeros(m) if prev_u is None else np.asarray(prev_u, dtype=float)
            u0_at_z = [base] * m
    u0_at_x = np.asarray(u0_at_x, dtype=float)
    ubar0 = np.array([u0_at_z[j][j] for j in range(m)])

    nv = 2 * m + 1
    H = np.eye(nv)
    J = -2.0 * np.concatenate([u0_at_x, ubar0, [0.0]])
    rows, rhs = [], []
    # (i) divergence at x >= zeta
    r = np.zeros(nv)
    r[:m] = a
    r[-1] = -1.0
    rows.append(r)
    rhs.append(-c0)
    # (ii) divergence at z_j with u_j replaced by u_bar_j >= zeta
    for j, z in enumerate(zs):
        cz, az, evz = flux_terms(model, dcfg, z)
        if evz.region == INSIDE:
            raise StuckInObstacle(f"shifted point z_{j + 1} lies inside an obstacle")
        u0z = np.asarray(u0_at_z[j], dtype=float)
        fixed = cz + sum(az[i] * u0z[i] for i in range(m) if i != j)
        r = np.zeros(nv)
        r[m + j] = az[j]
        r[-1] = -1.0
        rows.append(r)
        rhs.append(-fixed)
    # (iii) sum_j (u_bar_j - u_j) + dt * zeta >= 0
    r = np.zeros(nv)
    r[:m] = -1.0
    r[m:2 * m] = 1.0
    r[-1] = cfg.dt
    rows.append(r)
    rhs.append(0.0)
    # (iv) zeta >= floor
    r = np.zeros(nv)
    r[-1] = 1.0
    rows.append(r)
    rhs.append(cfg.floor)

    A = np.array(rows)
    b = np.array(rhs)
    s = solve(QpProblem(H, J, A, b))
    w = s.u_star
    return StepResult(
        u=w[:m],
        u_bar=w[m:2 * m],
        zeta=float(w[-1]),
        constraint_values=A @ w,
        rhs=b,
        rho=ev.rho,
        active_set=s.active_set,
    )


def sample_ball(rng, center, beta, n):
    """n points uniform in the closed Euclidean beta-ball, by rejection from the cube."""
    center = np.asarray(center, dtype=float)
    d = len(center)
    out = np.empty((n, d))
    k = 0
    while k < n:
        p = rng.uniform(-1.0, 1.0, size=d)
        if p @ p <= 1.0:
            out[k] = center + beta * p
            k += 1
    return out


def scenario_points(cfg, x, seed=None):
    rng = np.random.default_rng(cfg.seed if seed is None else seed)
    pts = sample_ball(rng, x, cfg.beta, cfg.n_samples)
    return np.vstack([np.asarray(x, dtype=float)[None, :], pts])


def step_scenario(model, dcfg, cfg: ControllerConfig, x, seed=None, samples=None) -> StepResult:
    """One divergence constraint (rhs 0) at x and at each of N ball samples.

    ``samples`` overrides the random draw (rows are the N extra points).
    """
    x = np.asarray(x, dtype=float)
    if samples is None:
        pts = scenario_points(cfg, x, seed)
    else:
        pts = np.vstack([x[None, :], np.asarray(samples, dtype=float).reshape(-1, len(x))])
    A, b, c0s = [], [], []
    rho0 = None
    for p in pts:
        c0, a, ev = scaled_flux_terms(model, dcfg, p)
        if ev.region == INSIDE:
            raise SampleInObstacle(f"scenario sample {p} lies inside an obstacle", sample=p)
        if rho0 is None:
            rho0 = ev.rho
        A.append(a)
        b.append(-c0)
        c0s.append(c0)
    A = np.array(A)
    b = np.array(b)
    H, J = _cost(cfg, model, x)
    s = solve(QpProblem(H, J, A, b))
    return StepResult(
        u=s.u_star,
        constraint_values=np.array(c0s) + A @ s.u_star,
        rhs=np.zeros(len(b)),
        rho=rho0,
        active_set=s.active_set,
        samples=pts,
    )


STEPPERS = {
    "basic": step_basic,
    "nominal-tracking": step_basic,
    "robust-gamma": step_robust_gamma,
    "scenario": step_scenario,
    "alg1": step_alg1,
}


def compute_gamma(c_delta1, c_delta2, c_dD, c_Psi, alpha):
    for v in (c_delta1, c_delta2, c_dD, c_Psi, alpha):
        if v < 0:
            raise ParameterError("gamma inputs must be nonnegative")
    return c_delta2 + alpha * c_delta1 * c_dD + c_delta1 * c_Psi


def estimate_bound_constants(dcfg, box, n_samples, seed, psi_floor=1e-9, exclude_radius=None):
    """Sampled bounds on |grad D / D| and |grad Psi| / Psi over a box.

    Both maxima are inflated by BOUND_INFLATION. Points within
    ``exclude_radius`` of the target (P-distance, default eta) are skipped
    since grad D / D blows up there; only samples with Psi > psi_floor enter
    the second bound.
    """
    radius = dcfg.eta if exclude_radius is None else exclude_radius
    box = np.asarray(box, dtype=float)
    rng = np.random.default_rng(seed)
    pts = rng.uniform(box[:, 0], box[:, 1], size=(int(n_samples), len(box)))
    c_dD = 0.0
    c_psi = 0.0
    seen = 0
    for p in pts:
        ev = eval_density(dcfg, p) if _outside(dcfg, p, radius) else None
        if ev is None:
            continue
        c_dD = max(c_dD, float(np.linalg.norm(ev.grad_dist)) / ev.dist)
        if ev.psi > psi_floor:
            seen += 1
            c_psi = max(c_psi, float(np.linalg.norm(ev.grad_psi)) / ev.psi)
    if seen == 0:
        raise EmptySample("no sample had Psi above the floor")
    return BOUND_INFLATION * c_dD, BOUND_INFLATION * c_psi


def _outside(dcfg, p, radius):
    d = p - dcfg.target
    return math.sqrt(float(d @ dcfg.P @ d)) > radius


@dataclass(frozen=True)
class ScenarioBoundQuery:
    epsilon: float
    sigma: float
    m_inputs: int

    def __post_init__(self):
        if not 0.0 < self.epsilon < 1.0:
            raise DomainError("epsilon must lie in (0, 1)")
        if not 0.0 < self.sigma < 1.0:
            raise DomainError("sigma must lie in (0, 1)")
        if int(self.m_inputs) != self.m_inputs or self.m_inputs < 1:
            raise DomainError("m_inputs must be a positive integer")


def scenario_sample_count(q: ScenarioBoundQuery) -> int:
    e, s, m = q.epsilon, q.sigma, q.m_inputs
    return math.ceil((2.0 / e) * math.log(1.0 / s) + 2 * m + (2.0 * m / e) * math.log(2.0 / e))


def estimate_violation_probability(model, dcfg, u, x_nominal, beta, n_mc, seed):
    """Fraction of draws x in the beta-ball where div((f + g u) rho) < 0."""
    if n_mc < 1:
        raise ParameterError("n_mc must be at least 1")
    rng = np.random.default_rng(seed)
    u = np.asarray(u, dtype=float)
    pts = sample_ball(rng, x_nominal, beta, n_mc)
    bad = 0
    for p in pts:
        c0, a, ev = scaled_flux_terms(model, dcfg, p)
        if ev.region != INSIDE and c0 + float(a @ u) < 0.0:
            bad += 1
    return bad / n_mc


# nominal controls -------------------------------------------------------

@dataclass(frozen=True)
class NominalSpec:
    """Serializable description of a nominal feedback u0(x).

    ``proportional``: u0 = gain * (target - x) on the input coordinates,
    minus the drift when ``cancel_drift`` is set (fully actuated plants).
    ``linear``: u0 = -K (x - target).
    """

    kind: str
    gain: float = 1.0
    K: tuple | None = None
    cancel_drift: bool = False
    max_norm: float | None = None

    def build(self, model, target):
        target = np.asarray(target, dtype=float)
        cap = self.max_norm
        if self.kind == "proportional":
            if model.m != model.n:
                raise ParameterError("proportional nominal needs a fully actuated plant")
            k = self.gain

            def u0(x):
                v = k * (target - x)
                if self.cancel_drift:
                    v = v - model.drift(x)
                return _cap(v, cap)
        elif self.kind == "linear":
            if self.K is None:
                raise ParameterError("linear nominal needs a gain matrix K")
            K = np.asarray(self.K, dtype=float).reshape(model.m, model.n)

            def u0(x):
                return _cap(-K @ (x - target), cap)
        else:
            raise ParameterError(f"unknown nominal kind {self.kind!r}")
        return u0


def _cap(v, cap):
    if cap is None:
        return v
    nv = float(np.linalg.norm(v))
    return v if nv <= cap else v * (cap / nv)
