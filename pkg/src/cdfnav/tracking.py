"""Turn integrator-level velocity commands into vehicle inputs.

Bicycle: speed and heading references from the planar command, then
Lyapunov tracking laws for acceleration and steering rate (optionally with
sign terms that dominate bounded disturbances). Lane keeping: clamp the
steering angle so the lateral acceleration stays within a_max.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ParameterError, SteeringSingular, ZeroCommand

ZERO_COMMAND = 1e-9
STEER_MARGIN = 1e-6


def sgn(v):
    # sgn(0) = 0, so a zero tracking error injects nothing
    return float(int(v > 0) - int(v < 0))


@dataclass(frozen=True)
class BicycleTrackingConfig:
    sigma1: float = 2.0
    sigma2: float = 30.0
    xi1: float = 0.0
    xi2: float = 0.0
    l_r: float = 1.0
    L: float = 2.0
    robust: bool = False

    def __post_init__(self):
        if self.sigma1 <= 0 or self.sigma2 <= 0:
            raise ParameterError("sigma1 and sigma2 must be positive")
        if self.xi1 < 0 or self.xi2 < 0:
            raise ParameterError("xi gains must be nonnegative")
        if self.robust and not (self.xi1 > 0 and self.xi2 > 0):
            raise ParameterError("robust tracking needs xi1 > 0 and xi2 > 0")


def extract_reference(u):
    """(speed, heading) of the planar velocity command u."""
    u1, u2 = float(u[0]), float(u[1])
    v = math.hypot(u1, u2)
    if v <= ZERO_COMMAND:
        raise ZeroCommand("velocity command too small to define a heading")
    return v, math.atan2(u2, u1)


def accel_law(cfg: BicycleTrackingConfig, v, v_tilde, v_tilde_dot):
    e = v - v_tilde
    a = v_tilde_dot - cfg.sigma1 * e
    if cfg.robust:
        a -= cfg.xi1 * sgn(e)
    return a


def steer_rate_law(cfg: BicycleTrackingConfig, theta, Theta, v, heading_tilde, heading_tilde_dot):
    if abs(Theta) >= math.pi / 2 - STEER_MARGIN:
        raise SteeringSingular(f"steering angle {Theta} too close to pi/2")
    k = cfg.l_r / cfg.L
    t = math.tan(Theta)
    phi = math.atan(k * t)
    lead = (1.0 + (k * t) ** 2) / (k / math.cos(Theta) ** 2)
    err = math.sin(theta + phi - heading_tilde)
    inner = -(v / cfg.L) * math.cos(phi) * t + heading_tilde_dot - cfg.sigma2 * err
    if cfg.robust:
        inner -= cfg.xi2 * sgn(err)
    return lead * inner


@dataclass
class ReferenceRates:
    """Backward-difference rates of the (speed, heading) references.

    Keeps only the previous sample; the heading is unwrapped so that a jump
    across +-pi reads as a small step.
    """

    dt: float
    _prev: tuple | None = field(default=None, repr=False)

    def update(self, v_tilde, heading_tilde):
        if self._prev is None:
            self._prev = (v_tilde, heading_tilde)
            return 0.0, 0.0
        pv, ph = self._prev
        dh = math.remainder(heading_tilde - ph, 2 * math.pi)
        self._prev = (v_tilde, heading_tilde)
        return (v_tilde - pv) / self.dt, dh / self.dt


def reference_rates(history, dt):
    """Rates from the last two entries of a (v_tilde, heading) history."""
    history = list(history)
    if len(history) < 2:
        return 0.0, 0.0
    (pv, ph), (v, h) = history[-2], history[-1]
    return (v - pv) / dt, math.remainder(h - ph, 2 * math.pi) / dt


def lk_f0(params, x, v0, r_d):
    x2, x3, x4 = float(x[1]), float(x[2]), float(x[3])
    p = params
    return (2 * p.Cf * ((x2 + p.a * x4) / v0 - x3)
            + 2 * p.Cr * ((x2 - p.b * x4) / v0 - x3)
            + 2 * p.M * v0 * x4 - p.M * v0 * r_d)


def lk_input_interval(params, x, v0, r_d):
    f0 = lk_f0(params, x, v0, r_d)
    span = params.M * params.a_max
    return (-span + f0) / (2 * params.Cf), (span + f0) / (2 * params.Cf)


def lk_input_clamp(params, x, v0, r_d, u_raw):
    lo, hi = lk_input_interval(params, x, v0, r_d)
    return float(np.clip(u_raw, lo, hi))


def lk_lateral_accel(params, x, v0, r_d, u):
    """xdot_2 from the lateral model (no disturbance)."""
    return (2 * params.Cf * float(u) - lk_f0(params, x, v0, r_d)) / params.M
