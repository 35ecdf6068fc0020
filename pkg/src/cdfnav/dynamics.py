"""Control-affine models xdot = f(x) + g(x) u and the example plants."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .density import eval_density
from .errors import ParameterError


@dataclass(frozen=True)
class ControlAffineModel:
    """xdot = drift(x) + input_matrix(x) @ u.

    ``input_matrix`` returns the n x m matrix whose columns are g_j(x);
    ``div_input`` returns the m divergences of those columns.
    """

    name: str
    n: int
    m: int
    drift: Callable
    input_matrix: Callable
    div_drift: Callable
    div_input: Callable
    params: dict = field(default_factory=dict)

    def input_columns(self, x):
        G = self.input_matrix(x)
        return [G[:, j] for j in range(self.m)]

    def rhs(self, x, u, t=0.0):
        return self.drift(x) + self.input_matrix(x) @ u


def make_single_integrator(n=2):
    eye = np.eye(n)
    return ControlAffineModel(
        name="single_integrator",
        n=n,
        m=n,
        drift=lambda x: np.zeros(n),
        input_matrix=lambda x: eye,
        div_drift=lambda x: 0.0,
        div_input=lambda x: np.zeros(n),
    )


def _gyre_drift(x):
    s1, c1 = math.sin(math.pi * x[0]), math.cos(math.pi * x[0])
    s2, c2 = math.sin(math.pi * x[1]), math.cos(math.pi * x[1])
    return np.array([-math.pi * s1 * c2, math.pi * s2 * c1])


def make_double_gyre():
    eye = np.eye(2)
    return ControlAffineModel(
        name="double_gyre",
        n=2,
        m=2,
        drift=_gyre_drift,
        input_matrix=lambda x: eye,
        # d/dx1 of f1 and d/dx2 of f2 cancel term by term
        div_drift=lambda x: 0.0,
        div_input=lambda x: np.zeros(2),
    )


@dataclass(frozen=True)
class LaneKeepingParams:
    M: float = 1589.0
    a: float = 1.57
    b: float = 1.05
    L: float = 20.0
    Cf: float = 90000.0
    Cr: float = 60000.0
    Iz: float = 1765.0
    r1: float = 0.9
    r2: float = 0.7
    a_max: float = 0.3 * 9.8

    def __post_init__(self):
        for name in ("M", "Iz", "Cf", "Cr"):
            if getattr(self, name) <= 0:
                raise ParameterError(f"lane-keeping parameter {name} must be positive")


TABLE_I = LaneKeepingParams()


def lane_keeping_matrices(p: LaneKeepingParams, v0):
    """Return (A, B, C, D1, D2) of the four-state lateral model."""
    if v0 <= 0:
        raise ParameterError("v0 must be positive")
    M, a, b, L, Cf, Cr, Iz = p.M, p.a, p.b, p.L, p.Cf, p.Cr, p.Iz
    A = np.array([
        [0.0, 1.0, 0.0, -L],
        [0.0, -2 * (Cf + Cr) / (M * v0), 2 * (Cf + Cr) / M, 2 * (b * Cr - a * Cf) / (M * v0) - 2 * v0],
        [0.0, 0.0, 0.0, -1.0],
        [0.0, 2 * (b * Cr - a * Cf) / (Iz * v0), -2 * (b * Cr - a * Cf) / Iz, -2 * (a * a * Cf + b * b * Cr) / (Iz * v0)],
    ])
    B = np.array([0.0, 2 * Cf / M, 0.0, 2 * a * Cf / Iz])
    C = np.array([L, v0, 1.0, 0.0])
    D1 = np.array([0.0, 1.0 / M, 0.0, 0.0])
    D2 = np.array([0.0, 0.0, 0.0, 1.0 / Iz])
    return A, B, C, D1, D2


def make_lane_keeping(params: LaneKeepingParams = TABLE_I, v0=24.0, r_d=0.0):
    A, B, C, D1, D2 = lane_keeping_matrices(params, v0)
    Bm = B.reshape(4, 1)
    offset = C * r_d
    trace = float(np.trace(A))
    return ControlAffineModel(
        name="lane_keeping",
        n=4,
        m=1,
        drift=lambda x: A @ x + offset,
        input_matrix=lambda x: Bm,
        div_drift=lambda x: trace,
        div_input=lambda x: np.zeros(1),
        params={"A": A, "B": B, "C": C, "D1": D1, "D2": D2, "v0": v0, "r_d": r_d, "lk": params},
    )


@dataclass(frozen=True)
class Bicycle:
    """Kinematic bicycle, state (x1, x2, theta, Theta, v), input (omega, a)."""

    l_r: float = 1.0
    L: float = 2.0

    def __post_init__(self):
        if self.l_r <= 0 or self.L <= 0:
            raise ParameterError("bicycle lengths must be positive")
        if not self.l_r < self.L:
            raise ParameterError("need l_r < L")

    def slip(self, Theta):
        return math.atan(self.l_r * math.tan(Theta) / self.L)

    def rhs(self, x, u, t=0.0):
        _, _, theta, Theta, v = x
        omega, a = u
        phi = self.slip(Theta)
        return np.array([
            v * math.cos(theta + phi),
            v * math.sin(theta + phi),
            v / self.L * math.cos(phi) * math.tan(Theta),
            omega,
            a,
        ])


def make_bicycle(l_r=1.0, L_total=2.0):
    return Bicycle(l_r, L_total)


def flux_terms(model, cfg, x, ev=None):
    """Return (div(f rho), [div(g_j rho)]) at x plus the density evaluation.

    div(w rho) = rho div(w) + grad(rho) . w
    """
    if ev is None:
        ev = eval_density(cfg, x)
    f = model.drift(x)
    G = model.input_matrix(x)
    c0 = ev.rho * model.div_drift(x) + float(ev.grad_rho @ f)
    a = ev.rho * np.asarray(model.div_input(x), dtype=float) + ev.grad_rho @ G
    return c0, a, ev


def scaled_flux_terms(model, cfg, x, ev=None):
    """flux_terms divided by rho(x) > 0, computed through log rho.

    div(w rho) / rho = div(w) + grad(log rho) . w, which stays finite when
    rho itself under- or overflows.
    """
    if ev is None:
        ev = eval_density(cfg, x)
    f = model.drift(x)
    G = model.input_matrix(x)
    c0 = model.div_drift(x) + float(ev.grad_log_rho @ f)
    a = np.asarray(model.div_input(x), dtype=float) + ev.grad_log_rho @ G
    return c0, a, ev


def divergence_of_density_flux(model, cfg, x, u):
    """div(f rho) + sum_j div(g_j rho) u_j with u held constant in space."""
    c0, a, _ = flux_terms(model, cfg, np.asarray(x, dtype=float))
    return c0 + float(a @ np.asarray(u, dtype=float))


PERTURBATION_MODES = ("constant", "sinusoidal", "seeded-random-constant")


@dataclass(frozen=True)
class PerturbationSpec:
    """Additive disturbance f_delta(x, t) = matrix @ d(t).

    ``amplitude`` bounds each disturbance channel, |d_i(t)| <= amplitude_i.
    ``matrix`` maps channels into the plant state (identity when omitted).
    The disturbances here do not depend on x, so their divergence is zero.
    """

    amplitude: tuple
    mode: str = "seeded-random-constant"
    matrix: tuple | None = None
    value: tuple | None = None
    frequency: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "amplitude", tuple(float(a) for a in self.amplitude))
        if self.mode not in PERTURBATION_MODES:
            raise ParameterError(f"unknown perturbation mode {self.mode!r}")
        if any(a < 0 for a in self.amplitude):
            raise ParameterError("perturbation amplitudes must be nonnegative")
        if self.matrix is not None:
            object.__setattr__(self, "matrix", tuple(tuple(float(v) for v in row) for row in self.matrix))
        if self.mode == "constant":
            if self.value is None or len(self.value) != len(self.amplitude):
                raise ParameterError("constant perturbation needs one value per channel")
            if any(abs(v) > a for v, a in zip(self.value, self.amplitude)):
                raise ParameterError("constant perturbation value exceeds its amplitude")
            object.__setattr__(self, "value", tuple(float(v) for v in self.value))

    @property
    def E(self):
        if self.matrix is None:
            return np.eye(len(self.amplitude))
        return np.asarray(self.matrix)

    def channels(self, seed=None):
        """Return d(t) for one realization."""
        amp = np.asarray(self.amplitude)
        if self.mode == "constant":
            d = np.asarray(self.value)
            return lambda t: d
        rng = np.random.default_rng(seed)
        if self.mode == "seeded-random-constant":
            d = rng.uniform(-amp, amp)
            return lambda t: d
        phase = rng.uniform(0.0, 2 * math.pi, size=len(amp))
        w = 2 * math.pi * self.frequency
        return lambda t: amp * np.sin(w * t + phase)

    def field(self, seed=None):
        E = self.E
        d = self.channels(seed)
        return lambda x, t: E @ d(t)

    def bound_value(self, rows=None):
        """c_delta1: max of |f_delta| (restricted to ``rows``) over the amplitude box."""
        E = self.E if rows is None else self.E[list(rows)]
        amp = np.asarray(self.amplitude)
        best = 0.0
        # |E d| is convex in d, so the max over the box sits at a vertex
        for signs in np.ndindex(*([2] * len(amp))):
            d = amp * (2 * np.asarray(signs) - 1)
            best = max(best, float(np.linalg.norm(E @ d)))
        return best

    def bound_div(self):
        """c_delta2: the disturbance field is spatially constant."""
        return 0.0
